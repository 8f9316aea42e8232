#include <chrono>
#include <ctime>
#include <fstream>

#include <sqlite3.h>

#include "ctreason/errors.hpp"
#include "ctreason/review.hpp"

namespace ctreason::review {

namespace {

class Stmt {
public:
    Stmt(sqlite3* db, const char* sql) : db_(db) {
        if (sqlite3_prepare_v2(db, sql, -1, &s_, nullptr) != SQLITE_OK)
            throw IoError(std::string("sqlite prepare failed: ") + sqlite3_errmsg(db));
    }
    ~Stmt() { sqlite3_finalize(s_); }
    Stmt(const Stmt&) = delete;
    Stmt& operator=(const Stmt&) = delete;

    Stmt& bind(int i, const std::string& v) {
        sqlite3_bind_text(s_, i, v.c_str(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
        return *this;
    }
    Stmt& bind(int i, std::int64_t v) {
        sqlite3_bind_int64(s_, i, v);
        return *this;
    }
    Stmt& bind_null(int i) {
        sqlite3_bind_null(s_, i);
        return *this;
    }
    /// True while a row is available.
    bool step() {
        const int rc = sqlite3_step(s_);
        if (rc == SQLITE_ROW) return true;
        if (rc == SQLITE_DONE) return false;
        throw IoError(std::string("sqlite step failed: ") + sqlite3_errmsg(db_));
    }
    std::string text(int col) const {
        const auto* p = sqlite3_column_text(s_, col);
        return p ? std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(sqlite3_column_bytes(s_, col)))
                 : std::string();
    }
    bool is_null(int col) const { return sqlite3_column_type(s_, col) == SQLITE_NULL; }
    std::int64_t integer(int col) const { return sqlite3_column_int64(s_, col); }
    sqlite3_stmt* raw() const { return s_; }

private:
    sqlite3* db_;
    sqlite3_stmt* s_ = nullptr;
};

constexpr const char* kItemColumns =
    "id, subject, slice, organ, description, raw_output, state, version, image_ref, mask_ref, prompt";

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[40];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

}  // namespace

std::string state_name(State s) {
    switch (s) {
        case State::pending: return "pending";
        case State::approved: return "approved";
        case State::revised: return "revised";
        case State::regen_requested: return "regen_requested";
    }
    return "pending";
}

std::optional<State> parse_state(const std::string& s) {
    for (auto st : {State::pending, State::approved, State::revised, State::regen_requested})
        if (state_name(st) == s) return st;
    return std::nullopt;
}

Json ReviewItem::summary() const {
    return {{"id", id},
            {"subject", subject},
            {"slice", slice},
            {"organ", organ},
            {"state", state_name(state)},
            {"version", version},
            {"has_description", description.has_value()}};
}

Json ReviewItem::to_json() const {
    Json j = summary();
    j["description"] = description ? Json::parse(description->to_json()) : Json(nullptr);
    j["raw_output"] = raw_output;
    j["image_ref"] = image_ref;
    j["mask_ref"] = mask_ref;
    j["prompt"] = prompt;
    Json h = Json::array();
    for (const auto& e : history)
        h.push_back({{"timestamp", e.timestamp}, {"actor", e.actor}, {"action", e.action}, {"payload", e.payload}});
    j["history"] = h;
    return j;
}

ReviewStore::ReviewStore(const std::filesystem::path& db_path, const std::filesystem::path& log_path)
    : log_path_(log_path) {
    if (db_path.has_parent_path()) std::filesystem::create_directories(db_path.parent_path());
    if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
    if (sqlite3_open(db_path.c_str(), &db_) != SQLITE_OK) {
        const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        throw IoError("cannot open review store " + db_path.string() + ": " + msg);
    }
    sqlite3_busy_timeout(db_, 5000);
    exec("PRAGMA journal_mode=WAL");
    exec("PRAGMA foreign_keys=ON");
    exec(R"(CREATE TABLE IF NOT EXISTS items (
              id INTEGER PRIMARY KEY AUTOINCREMENT,
              subject TEXT NOT NULL, slice TEXT NOT NULL, organ TEXT NOT NULL,
              description TEXT, raw_output TEXT NOT NULL DEFAULT '',
              state TEXT NOT NULL, version INTEGER NOT NULL,
              image_ref TEXT NOT NULL DEFAULT '', mask_ref TEXT NOT NULL DEFAULT '', prompt TEXT NOT NULL DEFAULT '',
              UNIQUE(subject, slice, organ)))");
    exec(R"(CREATE TABLE IF NOT EXISTS history (
              seq INTEGER PRIMARY KEY AUTOINCREMENT,
              item_id INTEGER NOT NULL REFERENCES items(id),
              ts TEXT NOT NULL, actor TEXT NOT NULL, action TEXT NOT NULL, payload TEXT NOT NULL))");
    exec(R"(CREATE TABLE IF NOT EXISTS idempotency (
              key TEXT PRIMARY KEY, item_id INTEGER NOT NULL, status INTEGER NOT NULL, response TEXT NOT NULL))");
}

ReviewStore::~ReviewStore() { sqlite3_close(db_); }

void ReviewStore::exec(const char* sql) const {
    char* err = nullptr;
    if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
        const std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw IoError("sqlite: " + msg);
    }
}

ReviewItem ReviewStore::read_row(void* p) const {
    auto& s = *static_cast<Stmt*>(p);
    ReviewItem it;
    it.id = s.integer(0);
    it.subject = s.text(1);
    it.slice = s.text(2);
    it.organ = s.text(3);
    if (!s.is_null(4)) it.description = curation::AppearanceDescription::from_json(s.text(4));
    it.raw_output = s.text(5);
    it.state = parse_state(s.text(6)).value_or(State::pending);
    it.version = s.integer(7);
    it.image_ref = s.text(8);
    it.mask_ref = s.text(9);
    it.prompt = s.text(10);
    return it;
}

std::vector<HistoryEntry> ReviewStore::read_history(std::int64_t id) const {
    Stmt s(db_, "SELECT ts, actor, action, payload FROM history WHERE item_id = ? ORDER BY seq");
    s.bind(1, id);
    std::vector<HistoryEntry> out;
    while (s.step()) out.push_back({s.text(0), s.text(1), s.text(2), Json::parse(s.text(3))});
    return out;
}

void ReviewStore::append_history(std::int64_t id, const HistoryEntry& e) {
    Stmt s(db_, "INSERT INTO history (item_id, ts, actor, action, payload) VALUES (?, ?, ?, ?, ?)");
    s.bind(1, id).bind(2, e.timestamp).bind(3, e.actor).bind(4, e.action).bind(5, e.payload.dump());
    s.step();
    std::ofstream log(log_path_, std::ios::app);
    if (!log) throw IoError("cannot append to event log " + log_path_.string());
    log << Json{{"item_id", id}, {"timestamp", e.timestamp}, {"actor", e.actor}, {"action", e.action},
                {"payload", e.payload}}
               .dump()
        << "\n";
}

std::int64_t ReviewStore::add(const NewItem& item, const std::string& actor, bool* created) {
    std::lock_guard lock(mu_);
    if (created) *created = false;
    {
        Stmt q(db_, "SELECT id FROM items WHERE subject = ? AND slice = ? AND organ = ?");
        q.bind(1, item.subject).bind(2, item.slice).bind(3, item.organ);
        if (q.step()) return q.integer(0);
    }
    exec("BEGIN IMMEDIATE");
    try {
        Stmt s(db_,
               "INSERT INTO items (subject, slice, organ, description, raw_output, state, version, image_ref, "
               "mask_ref, prompt) VALUES (?, ?, ?, ?, ?, 'pending', 1, ?, ?, ?)");
        s.bind(1, item.subject).bind(2, item.slice).bind(3, item.organ);
        if (item.description) s.bind(4, item.description->to_json());
        else s.bind_null(4);
        s.bind(5, item.raw_output).bind(6, item.image_ref).bind(7, item.mask_ref).bind(8, item.prompt);
        s.step();
        const auto id = sqlite3_last_insert_rowid(db_);
        append_history(id, {now_iso(), actor, "created",
                            {{"has_description", item.description.has_value()}}});
        exec("COMMIT");
        if (created) *created = true;
        return id;
    } catch (...) {
        exec("ROLLBACK");
        throw;
    }
}

std::optional<ReviewItem> ReviewStore::get(std::int64_t id) const {
    std::lock_guard lock(mu_);
    Stmt s(db_, (std::string("SELECT ") + kItemColumns + " FROM items WHERE id = ?").c_str());
    s.bind(1, id);
    if (!s.step()) return std::nullopt;
    auto it = read_row(&s);
    it.history = read_history(id);
    return it;
}

ReviewStore::Page ReviewStore::list(std::optional<State> filter, int page, int page_size) const {
    std::lock_guard lock(mu_);
    Page out;
    const std::string where = filter ? " WHERE state = ?" : "";
    {
        Stmt c(db_, ("SELECT COUNT(*) FROM items" + where).c_str());
        if (filter) c.bind(1, state_name(*filter));
        c.step();
        out.total = c.integer(0);
    }
    Stmt s(db_, (std::string("SELECT ") + kItemColumns + " FROM items" + where +
                 " ORDER BY subject, slice, organ, id LIMIT ? OFFSET ?")
                    .c_str());
    int i = 1;
    if (filter) s.bind(i++, state_name(*filter));
    s.bind(i++, static_cast<std::int64_t>(page_size));
    s.bind(i++, static_cast<std::int64_t>(page - 1) * page_size);
    while (s.step()) out.items.push_back(read_row(&s));
    return out;
}

std::vector<ReviewItem> ReviewStore::all(std::optional<State> filter) const {
    std::lock_guard lock(mu_);
    const std::string where = filter ? " WHERE state = ?" : "";
    Stmt s(db_, (std::string("SELECT ") + kItemColumns + " FROM items" + where + " ORDER BY subject, slice, organ, id")
                    .c_str());
    if (filter) s.bind(1, state_name(*filter));
    std::vector<ReviewItem> out;
    while (s.step()) out.push_back(read_row(&s));
    return out;
}

std::vector<std::int64_t> ReviewStore::ids_in_state(State st) const {
    std::vector<std::int64_t> out;
    for (const auto& it : all(st)) out.push_back(it.id);
    return out;
}

std::optional<ReviewItem> ReviewStore::apply(std::int64_t id, std::int64_t expected_version, const Update& u) {
    std::lock_guard lock(mu_);
    exec("BEGIN IMMEDIATE");
    try {
        std::string sql = "UPDATE items SET state = ?, version = version + 1";
        if (u.replace_description) sql += ", description = ?";
        if (u.raw_output) sql += ", raw_output = ?";
        sql += " WHERE id = ? AND version = ?";
        Stmt s(db_, sql.c_str());
        int i = 1;
        s.bind(i++, state_name(u.state));
        if (u.replace_description) {
            if (u.description) s.bind(i++, u.description->to_json());
            else s.bind_null(i++);
        }
        if (u.raw_output) s.bind(i++, *u.raw_output);
        s.bind(i++, id);
        s.bind(i++, expected_version);
        s.step();
        if (sqlite3_changes(db_) != 1) {
            exec("ROLLBACK");
            return std::nullopt;
        }
        auto entry = u.entry;
        if (entry.timestamp.empty()) entry.timestamp = now_iso();
        append_history(id, entry);
        exec("COMMIT");
    } catch (...) {
        exec("ROLLBACK");
        throw;
    }
    return get(id);
}

std::optional<ReviewStore::StoredResponse> ReviewStore::idempotent_lookup(const std::string& key) const {
    std::lock_guard lock(mu_);
    Stmt s(db_, "SELECT status, response FROM idempotency WHERE key = ?");
    s.bind(1, key);
    if (!s.step()) return std::nullopt;
    return StoredResponse{static_cast<int>(s.integer(0)), Json::parse(s.text(1))};
}

void ReviewStore::idempotent_store(const std::string& key, std::int64_t item_id, const StoredResponse& r) {
    std::lock_guard lock(mu_);
    Stmt s(db_, "INSERT OR IGNORE INTO idempotency (key, item_id, status, response) VALUES (?, ?, ?, ?)");
    s.bind(1, key).bind(2, item_id).bind(3, static_cast<std::int64_t>(r.status)).bind(4, r.body.dump());
    s.step();
}

int ReviewStore::import_status(const std::filesystem::path& status_jsonl) {
    std::ifstream in(status_jsonl);
    if (!in) throw IoError("cannot open " + status_jsonl.string());
    int added = 0;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        Json e;
        try {
            e = Json::parse(line);
        } catch (const Json::exception& ex) {
            throw IoError("malformed status line in " + status_jsonl.string() + ": " + ex.what());
        }
        NewItem item;
        item.subject = e.value("subject", "");
        item.slice = e.value("slice", "");
        item.organ = e.value("organ", "");
        item.raw_output = e.value("raw_output", "");
        item.image_ref = e.value("image_ref", "");
        item.mask_ref = e.value("mask_ref", "");
        item.prompt = e.value("prompt", "");
        if (e.value("status", "") == "generated" && e.contains("description"))
            item.description = curation::AppearanceDescription::from_json(e["description"].dump());
        bool created = false;
        add(item, "import", &created);
        added += created;
    }
    return added;
}

}  // namespace ctreason::review
