#include "ctreason/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ctreason/errors.hpp"

namespace ctreason::tokenizer {

namespace {

constexpr std::array<std::string_view, kSpecialCount> kSpecialText = {
    "[pad]", "[bos]", "[eos]", "[seg]", "[det]", "[closer]"};

constexpr std::array<std::string_view, kSpecialCount> kSpecialKey = {
    "PAD", "BOS", "EOS", "SEG", "DET", "CLOSER"};

constexpr std::size_t kMaxVocabulary = 4096;

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

std::string_view special_text(Special s) { return kSpecialText[static_cast<std::size_t>(s)]; }

std::string_view routing_name(RoutingKind k) {
    switch (k) {
        case RoutingKind::seg: return "seg";
        case RoutingKind::det: return "det";
        case RoutingKind::closer: return "closer";
    }
    return "?";
}

std::vector<std::string> split_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
        } else if (c == '[') {
            const auto close = text.find(']', i);
            if (close == std::string_view::npos) throw UnknownTokenError(std::string(text.substr(i)));
            out.emplace_back(text.substr(i, close - i + 1));
            i = close + 1;
        } else if (is_word_char(c)) {
            std::size_t j = i + 1;
            while (j < n) {
                const auto d = static_cast<unsigned char>(text[j]);
                if (is_word_char(d)) {
                    ++j;
                } else if ((d == '-' || d == '\'') && j + 1 < n &&
                           is_word_char(static_cast<unsigned char>(text[j + 1]))) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            out.emplace_back(1, static_cast<char>(c));
            ++i;
        }
    }
    return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    tokens_.reserve(kSpecialCount + words.size());
    for (auto s : kSpecialText) tokens_.emplace_back(s);
    std::set<std::string> seen(tokens_.begin(), tokens_.end());
    for (const auto& w : words) {
        if (w.empty() || !seen.insert(w).second) continue;
        tokens_.push_back(w);
    }
    index();
}

Vocabulary Vocabulary::from_corpus(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& line : corpus)
        for (auto& t : split_tokens(line))
            if (t.front() != '[') words.insert(std::move(t));
    return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

void Vocabulary::index() {
    if (tokens_.size() > kMaxVocabulary)
        throw ConfigError("vocabulary exceeds " + std::to_string(kMaxVocabulary) + " entries");
    lookup_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        lookup_.emplace(tokens_[i], static_cast<TokenId>(i));
    for (std::size_t s = 0; s < kSpecialCount; ++s) {
        auto it = lookup_.find(std::string(kSpecialText[s]));
        if (it == lookup_.end()) throw ConfigError("vocabulary lacks special " + std::string(kSpecialText[s]));
        special_ids_[s] = it->second;
    }
}

TokenId Vocabulary::id(RoutingKind k) const noexcept {
    switch (k) {
        case RoutingKind::seg: return id(Special::seg);
        case RoutingKind::det: return id(Special::det);
        case RoutingKind::closer: return id(Special::closer);
    }
    return -1;
}

bool Vocabulary::contains(std::string_view token) const {
    return lookup_.find(std::string(token)) != lookup_.end();
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    auto pieces = split_tokens(text);
    if (pieces.empty()) throw std::invalid_argument("cannot encode empty text");
    TokenSequence ids;
    ids.reserve(pieces.size());
    for (const auto& p : pieces) {
        auto it = lookup_.find(p);
        if (it == lookup_.end()) throw UnknownTokenError(p);
        ids.push_back(it->second);
    }
    return ids;
}

std::string Vocabulary::decode(const TokenSequence& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const auto id = seq[i];
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(tokens_.size()));
        if (i) out.push_back(' ');
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
}

std::vector<RoutingPosition> Vocabulary::find_routing_positions(const TokenSequence& seq) const {
    std::vector<RoutingPosition> out;
    const auto seg = id(Special::seg), det = id(Special::det), closer = id(Special::closer);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] == seg) out.push_back({i, RoutingKind::seg});
        else if (seq[i] == det) out.push_back({i, RoutingKind::det});
        else if (seq[i] == closer) out.push_back({i, RoutingKind::closer});
    }
    return out;
}

std::string Vocabulary::to_json() const {
    nlohmann::ordered_json j;
    j["tokens"] = tokens_;
    nlohmann::ordered_json special;
    for (std::size_t s = 0; s < kSpecialCount; ++s) special[std::string(kSpecialKey[s])] = special_ids_[s];
    j["special"] = special;
    return j.dump(1);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vocabulary json: ") + e.what());
    }
    Vocabulary v;
    try {
        v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vocabulary json: ") + e.what());
    }
    v.index();
    if (j.contains("special")) {
        for (std::size_t s = 0; s < kSpecialCount; ++s) {
            const auto key = std::string(kSpecialKey[s]);
            if (j["special"].contains(key) && j["special"][key].get<TokenId>() != v.special_ids_[s])
                throw ConfigError("vocabulary special id mismatch for " + key);
        }
    }
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary " + path.string());
    out << to_json() << "\n";
}

}  // namespace ctreason::tokenizer
