#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ctreason/curation.hpp"

struct sqlite3;

namespace ctreason::review {

using Json = nlohmann::json;

enum class State { pending, approved, revised, regen_requested };

std::string state_name(State s);
std::optional<State> parse_state(const std::string& s);

struct HistoryEntry {
    std::string timestamp;  ///< ISO-8601 UTC
    std::string actor;
    std::string action;
    Json payload;
};

struct ReviewItem {
    std::int64_t id = 0;
    std::string subject, slice, organ;
    std::optional<curation::AppearanceDescription> description;  ///< absent when generation failed validation
    std::string raw_output;
    State state = State::pending;
    std::int64_t version = 1;
    std::string image_ref, mask_ref, prompt;
    std::vector<HistoryEntry> history;

    Json summary() const;
    Json to_json() const;
};

struct NewItem {
    std::string subject, slice, organ;
    std::optional<curation::AppearanceDescription> description;
    std::string raw_output;
    std::string image_ref, mask_ref, prompt;
};

/// Persistent item store: one sqlite file plus an append-only JSONL log of every
/// history entry. All methods are serialised internally.
class ReviewStore {
public:
    ReviewStore(const std::filesystem::path& db_path, const std::filesystem::path& log_path);
    ~ReviewStore();
    ReviewStore(const ReviewStore&) = delete;
    ReviewStore& operator=(const ReviewStore&) = delete;

    /// Inserts a pending item, or returns the id of the existing (subject, slice, organ) item.
    std::int64_t add(const NewItem& item, const std::string& actor = "import", bool* created = nullptr);
    std::optional<ReviewItem> get(std::int64_t id) const;

    struct Page {
        std::vector<ReviewItem> items;  ///< without history
        std::int64_t total = 0;
    };
    Page list(std::optional<State> filter, int page, int page_size) const;
    std::vector<ReviewItem> all(std::optional<State> filter = std::nullopt) const;
    std::vector<std::int64_t> ids_in_state(State s) const;

    struct Update {
        State state;
        std::optional<curation::AppearanceDescription> description;
        bool replace_description = false;
        std::optional<std::string> raw_output;
        HistoryEntry entry;
    };
    /// Applies `update` only when the stored version equals `expected_version`.
    /// Returns the new item, or nullopt when the version moved on.
    std::optional<ReviewItem> apply(std::int64_t id, std::int64_t expected_version, const Update& update);

    struct StoredResponse {
        int status;
        Json body;
    };
    std::optional<StoredResponse> idempotent_lookup(const std::string& key) const;
    void idempotent_store(const std::string& key, std::int64_t item_id, const StoredResponse& r);

    /// Imports a curation status.jsonl; returns the number of items added.
    int import_status(const std::filesystem::path& status_jsonl);

private:
    void exec(const char* sql) const;
    ReviewItem read_row(void* stmt) const;
    std::vector<HistoryEntry> read_history(std::int64_t id) const;
    void append_history(std::int64_t id, const HistoryEntry& e);

    mutable std::recursive_mutex mu_;
    sqlite3* db_ = nullptr;
    std::filesystem::path log_path_;
};

struct OverlayToggles {
    bool mask = false, bbox = false, center = false;
    bool any() const { return mask || bbox || center; }
};

/// RGB8 PNG of the windowed slice with the requested markers. Throws IoError for missing assets.
std::vector<std::uint8_t> render_overlay(const std::filesystem::path& image, const std::filesystem::path& mask,
                                         const OverlayToggles& toggles);

struct ApiResponse {
    int status = 200;
    Json body;  ///< {data, error}
};

struct BinaryResponse {
    int status = 200;
    std::string content_type;
    std::string bytes;
};

struct ServiceOptions {
    std::filesystem::path asset_root;  ///< base for relative image/mask refs
    int max_retries = 2;
    bool start_worker = true;
};

/// Transport-independent API; the HTTP layer is a thin adapter over it.
class ReviewService {
public:
    ReviewService(ReviewStore& store, std::shared_ptr<curation::GenerationClient> client, ServiceOptions opt = {});
    ~ReviewService();
    ReviewService(const ReviewService&) = delete;
    ReviewService& operator=(const ReviewService&) = delete;

    ApiResponse list_items(const std::string& state, const std::string& page, const std::string& page_size) const;
    ApiResponse get_item(std::int64_t id) const;
    /// body: {action, payload?, idempotency_key?, expected_version?}
    ApiResponse transition(std::int64_t id, const Json& body, const std::string& actor);
    BinaryResponse overlay(std::int64_t id, const std::string& mask, const std::string& bbox,
                           const std::string& center) const;
    /// JSONL, one included (approved or revised) item per line.
    std::string export_jsonl() const;
    ApiResponse export_items() const;

    /// Runs queued regenerations synchronously (or waits for the worker) until the queue is empty.
    void drain();

private:
    void enqueue(std::int64_t id);
    void worker_loop();
    void regenerate_one(std::int64_t id);
    std::filesystem::path resolve(const std::string& ref) const;

    ReviewStore& store_;
    std::shared_ptr<curation::GenerationClient> client_;
    ServiceOptions opt_;

    std::mutex tmu_;
    std::mutex qmu_;
    std::condition_variable qcv_, idle_cv_;
    std::deque<std::int64_t> queue_;
    int in_flight_ = 0;
    bool stop_ = false;
    std::thread worker_;
};

ApiResponse ok(Json data);
ApiResponse error(int status, const std::string& code, const std::string& message, Json details = nullptr);

/// Binds routes to `service` and blocks serving until stop() is called from another thread.
class HttpServer {
public:
    explicit HttpServer(ReviewService& service);
    ~HttpServer();
    /// Binds and serves; returns false when the port cannot be bound.
    bool listen(const std::string& host, int port);
    /// Binds an ephemeral port, returning it; call serve() afterwards.
    int bind_any(const std::string& host);
    bool serve();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ctreason::review
