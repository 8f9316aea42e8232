#include <algorithm>
#include <array>
#include <charconv>
#include <sstream>

#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/review.hpp"

namespace ctreason::review {

namespace {

Json violations_json(const std::vector<curation::Violation>& vs) {
    Json out = Json::array();
    for (const auto& v : vs) out.push_back({{"field", v.field}, {"message", v.message}});
    return out;
}

std::optional<int> parse_int(const std::string& s) {
    int v = 0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) return std::nullopt;
    return v;
}

std::optional<bool> parse_flag(const std::string& s) {
    if (s.empty() || s == "0" || s == "false" || s == "off") return false;
    if (s == "1" || s == "true" || s == "on") return true;
    return std::nullopt;
}

bool legal(State from, const std::string& action) {
    if (from != State::pending) return false;
    return action == "approve" || action == "revise" || action == "regenerate";
}

}  // namespace

ApiResponse ok(Json data) { return {200, {{"data", std::move(data)}, {"error", nullptr}}}; }

ApiResponse error(int status, const std::string& code, const std::string& message, Json details) {
    return {status, {{"data", nullptr}, {"error", {{"code", code}, {"message", message}, {"details", details}}}}};
}

ReviewService::ReviewService(ReviewStore& store, std::shared_ptr<curation::GenerationClient> client,
                             ServiceOptions opt)
    : store_(store), client_(std::move(client)), opt_(std::move(opt)) {
    // Regenerations interrupted by a restart are picked up again.
    for (auto id : store_.ids_in_state(State::regen_requested)) queue_.push_back(id);
    if (opt_.start_worker) worker_ = std::thread([this] { worker_loop(); });
}

ReviewService::~ReviewService() {
    {
        std::lock_guard lock(qmu_);
        stop_ = true;
    }
    qcv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

ApiResponse ReviewService::list_items(const std::string& state, const std::string& page,
                                      const std::string& page_size) const {
    std::optional<State> filter;
    if (!state.empty()) {
        filter = parse_state(state);
        if (!filter) return error(400, "bad_request", "unknown state filter '" + state + "'");
    }
    const auto p = page.empty() ? std::optional<int>(1) : parse_int(page);
    const auto ps = page_size.empty() ? std::optional<int>(20) : parse_int(page_size);
    if (!p || *p < 1) return error(400, "bad_request", "page must be a positive integer");
    if (!ps || *ps < 1 || *ps > 500) return error(400, "bad_request", "page_size must be in [1, 500]");
    const auto result = store_.list(filter, *p, *ps);
    Json items = Json::array();
    for (const auto& it : result.items) items.push_back(it.summary());
    return ok({{"items", items}, {"total", result.total}, {"page", *p}, {"page_size", *ps}});
}

ApiResponse ReviewService::get_item(std::int64_t id) const {
    const auto it = store_.get(id);
    if (!it) return error(404, "not_found", "no item " + std::to_string(id));
    return ok(it->to_json());
}

ApiResponse ReviewService::transition(std::int64_t id, const Json& body, const std::string& actor) {
    if (!body.is_object()) return error(400, "bad_request", "request body must be a JSON object");
    // Serialises lookup-then-apply so concurrent replays of one key cannot both run.
    std::lock_guard transition_lock(tmu_);
    std::string key;
    if (body.contains("idempotency_key")) {
        if (!body["idempotency_key"].is_string()) return error(400, "bad_request", "idempotency_key must be a string");
        key = body["idempotency_key"].get<std::string>();
        if (auto stored = store_.idempotent_lookup(key)) return {stored->status, stored->body};
    }
    auto respond = [&](ApiResponse r) {
        if (!key.empty()) store_.idempotent_store(key, id, {r.status, r.body});
        return r;
    };

    if (!body.contains("action") || !body["action"].is_string())
        return respond(error(400, "bad_request", "missing string field 'action'"));
    const auto action = body["action"].get<std::string>();
    if (action != "approve" && action != "revise" && action != "regenerate")
        return respond(error(400, "bad_request", "unknown action '" + action + "'"));

    const auto item = store_.get(id);
    if (!item) return respond(error(404, "not_found", "no item " + std::to_string(id)));
    std::int64_t expected = item->version;
    if (body.contains("expected_version")) {
        if (!body["expected_version"].is_number_integer())
            return respond(error(400, "bad_request", "expected_version must be an integer"));
        expected = body["expected_version"].get<std::int64_t>();
        if (expected != item->version)
            return respond(error(409, "stale_version", "item version is " + std::to_string(item->version),
                                 {{"current_version", item->version}}));
    }
    if (!legal(item->state, action))
        return respond(error(409, "illegal_transition",
                             "cannot " + action + " an item in state " + state_name(item->state),
                             {{"state", state_name(item->state)}}));

    ReviewStore::Update u;
    u.entry = {"", actor.empty() ? "anonymous" : actor, action, Json::object()};
    if (action == "approve") {
        if (!item->description)
            return respond(error(422, "invalid_description", "item has no valid description to approve",
                                 {{"violations", Json::array()}}));
        u.state = State::approved;
    } else if (action == "revise") {
        if (!body.contains("payload")) return respond(error(400, "bad_request", "revise requires a payload"));
        const auto raw = body["payload"].is_string() ? body["payload"].get<std::string>() : body["payload"].dump();
        const auto violations = curation::validate_description(raw);
        if (!violations.empty())
            return respond(error(422, "invalid_description", "revised description violates the schema",
                                 {{"violations", violations_json(violations)}}));
        u.state = State::revised;
        u.description = curation::AppearanceDescription::from_json(raw);
        u.replace_description = true;
        u.entry.payload = Json::parse(u.description->to_json());
    } else {
        u.state = State::regen_requested;
    }

    const auto updated = store_.apply(id, expected, u);
    if (!updated) return respond(error(409, "stale_version", "item changed concurrently"));
    if (action == "regenerate") enqueue(id);
    return respond(ok(updated->to_json()));
}

std::filesystem::path ReviewService::resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    if (p.is_relative() && !opt_.asset_root.empty()) p = opt_.asset_root / p;
    return p;
}

BinaryResponse ReviewService::overlay(std::int64_t id, const std::string& mask, const std::string& bbox,
                                      const std::string& center) const {
    auto fail = [](const ApiResponse& r) { return BinaryResponse{r.status, "application/json", r.body.dump()}; };
    const auto m = parse_flag(mask), b = parse_flag(bbox), c = parse_flag(center);
    if (!m || !b || !c) return fail(error(400, "bad_request", "overlay toggles must be 0/1/true/false"));
    const auto item = store_.get(id);
    if (!item) return fail(error(404, "not_found", "no item " + std::to_string(id)));
    const OverlayToggles t{*m, *b, *c};
    const auto image = resolve(item->image_ref);
    try {
        if (item->image_ref.empty() || !std::filesystem::exists(image)) throw IoError("missing image asset");
        if (!t.any()) {
            const auto bytes = png::read_file(image);
            return {200, "image/png", std::string(bytes.begin(), bytes.end())};
        }
        const auto mask_path = resolve(item->mask_ref);
        if (item->mask_ref.empty() || !std::filesystem::exists(mask_path)) throw IoError("missing mask asset");
        const auto bytes = render_overlay(image, mask_path, t);
        return {200, "image/png", std::string(bytes.begin(), bytes.end())};
    } catch (const IoError& e) {
        return fail(error(404, "missing_asset", e.what()));
    } catch (const EmptyMaskError& e) {
        return fail(error(404, "missing_asset", e.what()));
    }
}

std::string ReviewService::export_jsonl() const {
    std::ostringstream os;
    for (const auto& it : store_.all()) {
        if (it.state != State::approved && it.state != State::revised) continue;
        Json line = {{"id", it.id},       {"subject", it.subject}, {"slice", it.slice},
                     {"organ", it.organ}, {"state", state_name(it.state)}};
        line["description"] = it.description ? Json::parse(it.description->to_json()) : Json(nullptr);
        os << line.dump() << "\n";
    }
    return os.str();
}

ApiResponse ReviewService::export_items() const {
    const auto text = export_jsonl();
    const auto count = std::count(text.begin(), text.end(), '\n');
    return ok({{"count", count}, {"jsonl", text}});
}

void ReviewService::enqueue(std::int64_t id) {
    {
        std::lock_guard lock(qmu_);
        queue_.push_back(id);
    }
    qcv_.notify_one();
}

void ReviewService::regenerate_one(std::int64_t id) {
    const auto item = store_.get(id);
    if (!item || item->state != State::regen_requested) return;
    ReviewStore::Update u;
    u.state = State::pending;
    u.entry = {"", "regenerator", "regenerated", Json::object()};
    try {
        const auto outcome = curation::generate_description(*client_, item->prompt, item->image_ref, opt_.max_retries);
        u.description = outcome.description;
        u.replace_description = true;
        u.raw_output = outcome.raw_output;
        u.entry.payload = {{"retries", outcome.retries},
                           {"review_required", outcome.review_required()},
                           {"violations", violations_json(outcome.violations)}};
    } catch (const ClientError& e) {
        // Back to the queue with the old description so a reviewer can retry.
        u.entry.action = "regeneration_failed";
        u.entry.payload = {{"error", e.what()}, {"attempts", e.attempts()}};
    }
    store_.apply(id, item->version, u);
}

void ReviewService::worker_loop() {
    for (;;) {
        std::int64_t id;
        {
            std::unique_lock lock(qmu_);
            qcv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
            if (stop_) return;
            id = queue_.front();
            queue_.pop_front();
            ++in_flight_;
        }
        try {
            regenerate_one(id);
        } catch (const std::exception&) {
            // Leaves the item in regen_requested; it is retried on the next restart.
        }
        {
            std::lock_guard lock(qmu_);
            --in_flight_;
        }
        idle_cv_.notify_all();
    }
}

void ReviewService::drain() {
    if (!worker_.joinable()) {
        for (;;) {
            std::int64_t id;
            {
                std::lock_guard lock(qmu_);
                if (queue_.empty()) return;
                id = queue_.front();
                queue_.pop_front();
            }
            regenerate_one(id);
        }
    }
    std::unique_lock lock(qmu_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && in_flight_ == 0; });
}

namespace {

void put(std::vector<std::uint8_t>& rgb, int w, int y, int x, std::array<std::uint8_t, 3> c) {
    const auto i = (static_cast<std::size_t>(y) * w + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
}

}  // namespace

std::vector<std::uint8_t> render_overlay(const std::filesystem::path& image, const std::filesystem::path& mask_path,
                                         const OverlayToggles& t) {
    const auto decoded = png::decode(png::read_file(image));
    if (decoded.channels != 1) throw IoError("overlay expects a grayscale slice");
    const int h = decoded.height, w = decoded.width;
    const auto [lo, hi] = std::minmax_element(decoded.samples.begin(), decoded.samples.end());
    const double range = *hi > *lo ? static_cast<double>(*hi - *lo) : 1.0;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int i = 0; i < h * w; ++i) {
        const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (decoded.samples[i] - *lo) / range));
        rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = g;
    }
    const Mask m = png::read_mask8(mask_path);
    if (m.height != h || m.width != w) throw IoError("mask asset does not match the slice shape");
    if (t.mask)
        for (const auto& [y, x] : metrics::surface_pixels(m)) put(rgb, w, y, x, {255, 64, 64});
    if (t.bbox || t.center) {
        const auto vp = curation::derive_visual_prompts(m);
        if (t.bbox) {
            const auto& b = vp.bbox;
            for (int x = b.x_min; x <= b.x_max; ++x) {
                put(rgb, w, b.y_min, x, {64, 255, 64});
                put(rgb, w, b.y_max, x, {64, 255, 64});
            }
            for (int y = b.y_min; y <= b.y_max; ++y) {
                put(rgb, w, y, b.x_min, {64, 255, 64});
                put(rgb, w, y, b.x_max, {64, 255, 64});
            }
        }
        if (t.center) {
            for (int d = -2; d <= 2; ++d) {
                const int y = vp.y_center + d, x = vp.x_center + d;
                if (y >= 0 && y < h) put(rgb, w, y, vp.x_center, {64, 160, 255});
                if (x >= 0 && x < w) put(rgb, w, vp.y_center, x, {64, 160, 255});
            }
        }
    }
    return png::encode_rgb8(h, w, rgb);
}

}  // namespace ctreason::review
