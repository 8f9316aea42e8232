#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "ctreason/curation.hpp"
#include "ctreason/errors.hpp"
#include "ctreason_schema.hpp"

namespace ctreason::curation {

using nlohmann::json;

const std::string& appearance_schema_text() {
    static const std::string text(detail::kAppearanceSchemaJson);
    return text;
}

std::vector<std::string> template_ids() { return {"appearance_v1"}; }

std::string build_prompt(const std::string& template_id, const std::string& organ, const VisualPromptSet& p,
                         const ImageMeta& meta) {
    if (template_id != "appearance_v1") throw ConfigError("unknown prompt template '" + template_id + "'");
    std::ostringstream os;
    os << "You are describing one anatomical structure on an axial CT slice.\n"
       << "Subject: " << meta.subject << "\n"
       << "Slice: " << meta.slice << "\n"
       << "Image size: " << meta.width << " x " << meta.height << " pixels\n"
       << "Target organ: " << organ << "\n"
       << "Visual prompts (pixel coordinates, origin at top-left):\n"
       << "- bounding box: (x_min, y_min) = (" << p.bbox.x_min << ", " << p.bbox.y_min << "), (x_max, y_max) = ("
       << p.bbox.x_max << ", " << p.bbox.y_max << ")\n"
       << "- center point: (x_center, y_center) = (" << p.x_center << ", " << p.y_center << ")\n"
       << "Describe only the structure inside the bounding box. Cover every attribute:\n"
       << "1. shape\n2. size\n3. location\n4. texture\n5. boundary (clarity of the margin)\n"
       << "6. adjacency (neighbouring structures, as a list)\n7. free_summary (one sentence)\n"
       << "Answer with a single JSON object and nothing else. It must validate against this schema:\n"
       << appearance_schema_text();
    return os.str();
}

std::string AppearanceDescription::to_json() const {
    nlohmann::ordered_json j;
    j["organ"] = organ;
    j["shape"] = shape;
    j["size"] = size;
    j["location"] = location;
    j["texture"] = texture;
    j["boundary"] = boundary;
    j["adjacency"] = adjacency;
    j["free_summary"] = free_summary;
    return j.dump();
}

AppearanceDescription AppearanceDescription::from_json(const std::string& raw) {
    const auto j = json::parse(raw);
    AppearanceDescription d;
    d.organ = j.at("organ").get<std::string>();
    d.shape = j.at("shape").get<std::string>();
    d.size = j.at("size").get<std::string>();
    d.location = j.at("location").get<std::string>();
    d.texture = j.at("texture").get<std::string>();
    d.boundary = j.at("boundary").get<std::string>();
    d.adjacency = j.at("adjacency").get<std::vector<std::string>>();
    d.free_summary = j.at("free_summary").get<std::string>();
    return d;
}

namespace {

bool blank(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string join_path(const std::string& base, const std::string& key) { return base.empty() ? key : base + "/" + key; }

bool type_matches(const json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "number") return v.is_number();
    if (type == "integer") return v.is_number_integer();
    if (type == "boolean") return v.is_boolean();
    return true;
}

// Walks the supported subset: type, required, properties, additionalProperties,
// minLength (counting non-blank content), minItems, items.
void check(const json& v, const json& schema, const std::string& path, std::vector<Violation>& out) {
    if (schema.contains("type")) {
        const auto type = schema["type"].get<std::string>();
        if (!type_matches(v, type)) {
            out.push_back({path, "expected " + type});
            return;
        }
    }
    if (v.is_object()) {
        if (schema.contains("required"))
            for (const auto& r : schema["required"]) {
                const auto key = r.get<std::string>();
                if (!v.contains(key)) out.push_back({join_path(path, key), "missing required field"});
            }
        const auto props = schema.value("properties", json::object());
        const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"].is_boolean() &&
                            !schema["additionalProperties"].get<bool>();
        for (auto it = v.begin(); it != v.end(); ++it) {
            if (props.contains(it.key())) check(it.value(), props[it.key()], join_path(path, it.key()), out);
            else if (closed) out.push_back({join_path(path, it.key()), "unknown field"});
        }
    } else if (v.is_string()) {
        if (schema.contains("minLength")) {
            const auto s = v.get<std::string>();
            const auto min_len = schema["minLength"].get<std::size_t>();
            if (s.size() < min_len || (min_len > 0 && blank(s))) out.push_back({path, "must not be empty"});
        }
    } else if (v.is_array()) {
        if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
            out.push_back({path, "too few items"});
        if (schema.contains("items"))
            for (std::size_t i = 0; i < v.size(); ++i) check(v[i], schema["items"], join_path(path, std::to_string(i)), out);
    }
}

const json& parsed_schema() {
    static const json schema = json::parse(appearance_schema_text());
    return schema;
}

}  // namespace

std::vector<Violation> validate_description(const std::string& raw) {
    json doc;
    try {
        doc = json::parse(raw);
    } catch (const json::parse_error& e) {
        return {{"", std::string("malformed JSON: ") + e.what()}};
    }
    std::vector<Violation> out;
    check(doc, parsed_schema(), "", out);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct OrganTraits {
    const char* texture;
    const char* boundary;
    std::vector<std::string> adjacency;
};

OrganTraits traits_for(const std::string& organ) {
    static const std::map<std::string, OrganTraits> table = {
        {"liver", {"homogeneous soft tissue", "smooth and well defined", {"gallbladder", "kidney", "stomach"}}},
        {"spleen", {"homogeneous", "smooth and well defined", {"stomach", "kidney"}}},
        {"kidney", {"bright cortex with uniform parenchyma", "sharp", {"liver", "spleen", "aorta"}}},
        {"aorta", {"uniform bright lumen", "sharp and circular", {"vertebra", "vein"}}},
        {"gallbladder", {"low-density fluid", "thin wall, well defined", {"liver"}}},
        {"vein", {"bright tubular segments", "partly blurred", {"aorta", "pancreas"}}},
    };
    auto it = table.find(organ);
    if (it != table.end()) return it->second;
    return {"uniform", "moderately well defined", {"surrounding soft tissue"}};
}

}  // namespace

std::string MockClient::generate(const std::string& prompt, const std::string&) {
    static const std::regex organ_re(R"(Target organ: ([^\n]+))");
    static const std::regex size_re(R"(Image size: (\d+) x (\d+))");
    static const std::regex box_re(R"(\(x_min, y_min\) = \((\d+), (\d+)\), \(x_max, y_max\) = \((\d+), (\d+)\))");
    std::smatch m;
    std::string organ = "structure";
    if (std::regex_search(prompt, m, organ_re)) organ = m[1];
    int width = 64, height = 64;
    if (std::regex_search(prompt, m, size_re)) {
        width = std::stoi(m[1]);
        height = std::stoi(m[2]);
    }
    PixelRegion box{0, 0, width - 1, height - 1};
    if (std::regex_search(prompt, m, box_re)) box = {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3]), std::stoi(m[4])};

    const auto g = describe_geometry(box, height, width);
    const auto t = traits_for(organ);
    AppearanceDescription d{organ, g.shape, g.size, g.location, t.texture, t.boundary, t.adjacency,
                            summary_sentence(organ, g)};
    return d.to_json();
}

std::string ScriptedClient::generate(const std::string& prompt, const std::string&) {
    std::lock_guard lock(mu_);
    prompts_.push_back(prompt);
    if (outputs_.empty()) return "";
    const auto& out = outputs_[std::min(next_, outputs_.size() - 1)];
    ++next_;
    return out;
}

std::size_t ScriptedClient::calls() const {
    std::lock_guard lock(mu_);
    return prompts_.size();
}

std::vector<std::string> ScriptedClient::prompts() const {
    std::lock_guard lock(mu_);
    return prompts_;
}

HttpClient::HttpClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, url_re)) throw ConfigError("invalid endpoint url '" + cfg_.endpoint + "'");
    scheme_host_port_ = m[1];
    path_ = m[2].matched ? std::string(m[2]) : "/";
}

std::string HttpClient::generate(const std::string& prompt, const std::string& image_ref) {
    httplib::Client cli(scheme_host_port_);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    httplib::Headers headers;
    if (!cfg_.token_env.empty())
        if (const char* tok = std::getenv(cfg_.token_env.c_str()); tok && *tok)
            headers.emplace("Authorization", std::string("Bearer ") + tok);
    const json body = {{"prompt", prompt}, {"image_ref", image_ref}};
    auto res = cli.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw ClientError("request to " + cfg_.endpoint + " failed: " + httplib::to_string(res.error()), 1);
    if (res->status != 200)
        throw ClientError("endpoint " + cfg_.endpoint + " returned HTTP " + std::to_string(res->status), 1);
    try {
        return json::parse(res->body).at("output").get<std::string>();
    } catch (const json::exception& e) {
        throw ClientError(std::string("endpoint response lacks string field 'output': ") + e.what(), 1);
    }
}

GenerationOutcome generate_description(GenerationClient& client, const std::string& prompt,
                                       const std::string& image_ref, int max_retries) {
    GenerationOutcome out;
    std::string current = prompt;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        try {
            out.raw_output = client.generate(current, image_ref);
        } catch (const ClientError& e) {
            throw ClientError(e.what(), attempt + 1);
        }
        out.retries = attempt;
        out.violations = validate_description(out.raw_output);
        if (out.violations.empty()) {
            out.description = AppearanceDescription::from_json(out.raw_output);
            return out;
        }
        std::ostringstream os;
        os << prompt << "\n\nYour previous answer was rejected by the schema check:\n";
        for (const auto& v : out.violations) os << "- " << (v.field.empty() ? "(document)" : v.field) << ": " << v.message << "\n";
        os << "Return only the corrected JSON object.";
        current = os.str();
    }
    return out;
}

std::vector<JobResult> run_generation(GenerationClient& client, const std::vector<GenerationJob>& jobs,
                                      int concurrency, int max_retries) {
    std::vector<JobResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            results[i].job = jobs[i];
            try {
                results[i].outcome = generate_description(client, jobs[i].prompt, jobs[i].image_ref, max_retries);
            } catch (const ClientError& e) {
                results[i].error = e.what();
            }
        }
    };
    const int n = std::clamp(concurrency, 1, std::max<int>(1, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return results;
}

void write_outputs(const std::filesystem::path& out_dir, const std::vector<JobResult>& results) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream status(out_dir / "status.jsonl", std::ios::app);
    if (!status) throw IoError("cannot append to " + (out_dir / "status.jsonl").string());
    for (const auto& r : results) {
        json event = {{"subject", r.job.subject}, {"slice", r.job.slice}, {"organ", r.job.organ},
                      {"image_ref", r.job.image_ref}, {"mask_ref", r.job.mask_ref}, {"prompt", r.job.prompt}};
        if (!r.outcome) {
            event["status"] = "client_error";
            event["error"] = r.error;
        } else if (r.outcome->review_required()) {
            event["status"] = "review_required";
            event["retries"] = r.outcome->retries;
            event["raw_output"] = r.outcome->raw_output;
            json violations = json::array();
            for (const auto& v : r.outcome->violations) violations.push_back({{"field", v.field}, {"message", v.message}});
            event["violations"] = violations;
        } else {
            const auto path = out_dir / "descriptions" / r.job.subject / r.job.slice / (r.job.organ + ".json");
            fs::create_directories(path.parent_path());
            std::ofstream f(path);
            if (!f) throw IoError("cannot write " + path.string());
            f << r.outcome->description->to_json() << "\n";
            event["status"] = "generated";
            event["description"] = json::parse(r.outcome->description->to_json());
            event["retries"] = r.outcome->retries;
            event["raw_output"] = r.outcome->raw_output;
        }
        status << event.dump() << "\n";
    }
}

}  // namespace ctreason::curation
