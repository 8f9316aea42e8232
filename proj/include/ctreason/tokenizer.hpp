#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctreason::tokenizer {

using TokenId = std::int32_t;

enum class Special : std::uint8_t { pad, bos, eos, seg, det, closer };
inline constexpr std::size_t kSpecialCount = 6;

/// Routing tokens are the subset of specials that trigger a perception head.
enum class RoutingKind : std::uint8_t { seg, det, closer };

std::string_view special_text(Special s);
std::string_view routing_name(RoutingKind k);

struct RoutingPosition {
    std::size_t position;
    RoutingKind kind;
    bool operator==(const RoutingPosition&) const = default;
};

using TokenSequence = std::vector<TokenId>;

/// Word-level vocabulary. Specials occupy ids 0..5 in `Special` order, words follow
/// in the order given at construction. Immutable after construction.
class Vocabulary {
public:
    /// Builds from a word list; duplicates and special strings are ignored.
    explicit Vocabulary(const std::vector<std::string>& words);

    /// Collects every word of `corpus` (split with the encoder's rules) and sorts them.
    static Vocabulary from_corpus(const std::vector<std::string>& corpus);

    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    std::string to_json() const;
    static Vocabulary from_json(const std::string& text);

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    TokenId id(Special s) const noexcept { return special_ids_[static_cast<std::size_t>(s)]; }
    TokenId id(RoutingKind k) const noexcept;
    bool contains(std::string_view token) const;

    /// Throws UnknownTokenError for out-of-vocabulary fragments and
    /// std::invalid_argument for empty input.
    TokenSequence encode(std::string_view text) const;

    /// Tokens joined by single spaces. Throws RangeError for ids outside [0, V).
    std::string decode(const TokenSequence& seq) const;

    /// Positions holding [seg], [det] or [closer], in increasing order.
    std::vector<RoutingPosition> find_routing_positions(const TokenSequence& seq) const;

private:
    Vocabulary() = default;
    void index();

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> lookup_;
    std::array<TokenId, kSpecialCount> special_ids_{};
};

/// Splits text into token strings: bracketed specials, alphanumeric runs
/// (with internal '-' or '\''), and single punctuation characters.
std::vector<std::string> split_tokens(std::string_view text);

}  // namespace ctreason::tokenizer
