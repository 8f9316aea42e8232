#include "ctreason/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ctreason/errors.hpp"

namespace ctreason {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// One field list per struct, walked by both the writer and the strict reader.

template <typename V>
void visit(V& v, ReasonerConfig& c) {
    v("vocab_size", c.vocab_size);
    v("hidden_dim", c.hidden_dim);
    v("layers", c.layers);
    v("heads", c.heads);
    v("mlp_ratio", c.mlp_ratio);
    v("max_seq_len", c.max_seq_len);
    v("image_size", c.image_size);
    v("patch", c.patch);
}

template <typename V>
void visit(V& v, AdapterConfig& c) {
    v("rank", c.rank);
    v("alpha", c.alpha);
    v("dropout", c.dropout);
}

template <typename V>
void visit(V& v, PerceiverConfig& c) {
    v("image_size", c.image_size);
    v("embed_dim", c.embed_dim);
    v("stride", c.stride);
    v("num_queries", c.num_queries);
    v("heads", c.heads);
    v("seg_layers", c.seg_layers);
    v("det_layers", c.det_layers);
    v("seg_skip", c.seg_skip);
}

template <typename V>
void visit(V& v, LossWeights& c) {
    v("lambda_seg", c.lambda_seg);
    v("lambda_det", c.lambda_det);
    v("w_bce", c.w_bce);
    v("w_dice", c.w_dice);
    v("w_l1", c.w_l1);
    v("w_giou", c.w_giou);
}

template <typename V>
void visit(V& v, OptimConfig& c) {
    v("lr", c.lr);
    v("beta1", c.beta1);
    v("beta2", c.beta2);
    v("weight_decay", c.weight_decay);
    v("grad_accum", c.grad_accum);
    v("grad_clip", c.grad_clip);
    v("schedule", c.schedule);
    v("warmup_steps", c.warmup_steps);
    v("min_lr_frac", c.min_lr_frac);
}

template <typename V>
void visit(V& v, TrainConfig& c) {
    v("epochs", c.epochs);
    v("max_steps", c.max_steps);
    v("batch_size", c.batch_size);
    v("round2", c.round2);
    v("det_round2", c.det_round2);
    v("use_adapters", c.use_adapters);
    v("adapter_after", c.adapter_after);
    v("dtype", c.dtype);
    v("threads", c.threads);
    v("log_every", c.log_every);
    v("eval_every", c.eval_every);
    v("max_eval_samples", c.max_eval_samples);
}

template <typename V>
void visit(V& v, InferConfig& c) {
    v("theta_obj", c.theta_obj);
    v("theta_mask", c.theta_mask);
    v("margin_frac", c.margin_frac);
    v("square_roi", c.square_roi);
    v("max_new", c.max_new);
    v("workers", c.workers);
}

template <typename V>
void visit(V& v, synth::SynthConfig& c) {
    v("profile", c.profile);
    v("subjects", c.subjects);
    v("slices", c.slices);
    v("size", c.size);
    v("organs", c.organs);
    v("size_scale", c.size_scale);
    v("noise", c.noise);
    v("p_seg", c.p_seg);
    v("p_det", c.p_det);
    v("fragments_min", c.fragments_min);
    v("fragments_max", c.fragments_max);
    v("min_object_area", c.min_object_area);
    v("max_objects_per_slice", c.max_objects_per_slice);
    v("train_frac", c.train_frac);
    v("val_frac", c.val_frac);
    v("seed", c.seed);
}

template <typename V>
void visit(V& v, curation::FilterConfig& c) {
    v("iou_thr", c.iou_thr);
    v("area_eps", c.area_eps);
    v("small_organ_frac", c.small_organ_frac);
    v("direction", c.direction);
}

template <typename V>
void visit(V& v, curation::HttpClientConfig& c) {
    v("endpoint", c.endpoint);
    v("token_env", c.token_env);
    v("timeout_seconds", c.timeout_seconds);
    v("concurrency", c.concurrency);
}

template <typename V>
void visit(V& v, ClientConfig& c) {
    v("kind", c.kind);
    v.section("http", c.http);
}

template <typename V>
void visit(V& v, CurationConfig& c) {
    v.section("filter", c.filter);
    v("template_id", c.template_id);
    v.section("client", c.client);
    v("max_retries", c.max_retries);
    v("review_db", c.review_db);
    v("review_log", c.review_log);
    v("host", c.host);
    v("port", c.port);
}

template <typename V>
void visit(V& v, PathsConfig& c) {
    v("data_root", c.data_root);
    v("run_dir", c.run_dir);
    v("curation_dir", c.curation_dir);
}

template <typename V>
void visit(V& v, RunConfig& c) {
    v("seed", c.seed);
    v.section("reasoner", c.reasoner);
    v.section("adapter", c.adapter);
    v.section("perceiver", c.perceiver);
    v.section("loss", c.loss);
    v.section("optim", c.optim);
    v.section("train", c.train);
    v.section("infer", c.infer);
    v.section("synth", c.synth);
    v.section("curation", c.curation);
    v.section("paths", c.paths);
}

std::string direction_name(curation::SweepDirection d) {
    return d == curation::SweepDirection::forward ? "forward" : "backward";
}

class Writer {
public:
    explicit Writer(ordered_json& out) : out_(out) {}
    template <typename T>
    void operator()(const char* key, T& value) {
        out_[key] = value;
    }
    void operator()(const char* key, curation::SweepDirection& d) { out_[key] = direction_name(d); }
    template <typename S>
    void section(const char* key, S& s) {
        ordered_json sub = ordered_json::object();
        Writer w(sub);
        visit(w, s);
        out_[key] = sub;
    }

private:
    ordered_json& out_;
};

class Reader {
public:
    Reader(const json& in, std::string path) : in_(in), path_(std::move(path)) {
        if (!in_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
    }
    template <typename T>
    void operator()(const char* key, T& value) {
        if (!in_.contains(key)) return;
        seen_.insert(key);
        try {
            value = in_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + where(key) + "' has the wrong type");
        }
    }
    void operator()(const char* key, curation::SweepDirection& d) {
        std::string s = direction_name(d);
        (*this)(key, s);
        if (s == "forward") d = curation::SweepDirection::forward;
        else if (s == "backward") d = curation::SweepDirection::backward;
        else throw ConfigError("config key '" + where(key) + "' must be forward or backward");
    }
    template <typename S>
    void section(const char* key, S& s) {
        if (!in_.contains(key)) return;
        seen_.insert(key);
        Reader r(in_.at(key), where(key));
        visit(r, s);
        r.finish();
    }
    void finish() const {
        for (const auto& [k, v] : in_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
    }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    const json& in_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool cond, const std::string& what) {
    if (!cond) throw ConfigError(what);
}

}  // namespace

void ReasonerConfig::validate() const {
    require(hidden_dim > 0 && heads > 0 && hidden_dim % heads == 0, "reasoner.hidden_dim must be divisible by heads");
    require(layers >= 1, "reasoner.layers must be >= 1");
    require(mlp_ratio >= 1, "reasoner.mlp_ratio must be >= 1");
    require(max_seq_len >= 2, "reasoner.max_seq_len must be >= 2");
    require(patch > 0 && image_size % patch == 0, "reasoner.patch must divide image_size");
}

double OptimConfig::lr_at(int step, int total) const {
    if (step < warmup_steps) return lr * (step + 1) / (warmup_steps + 1);
    if (schedule == "constant" || total <= warmup_steps) return lr;
    const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / std::max(1, total - warmup_steps));
    const double decay = schedule == "cosine" ? 0.5 * (1 + std::cos(M_PI * t)) : 1 - t;
    return lr * (min_lr_frac + (1 - min_lr_frac) * decay);
}

void AdapterConfig::validate() const {
    require(rank >= 1, "adapter.rank must be >= 1");
    require(alpha > 0, "adapter.alpha must be > 0");
    require(dropout >= 0 && dropout < 1, "adapter.dropout must be in [0, 1)");
}

void PerceiverConfig::validate() const {
    require(stride == 2 || stride == 4 || stride == 8, "perceiver.stride must be 2, 4 or 8");
    require(image_size > 0 && image_size % stride == 0, "perceiver.image_size must be divisible by stride");
    require(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, "perceiver.embed_dim must be divisible by heads");
    require(embed_dim % 4 == 0, "perceiver.embed_dim must be divisible by 4");
    require(num_queries >= 1, "perceiver.num_queries must be >= 1");
    require(seg_layers >= 1 && det_layers >= 1, "perceiver layer counts must be >= 1");
}

void LossWeights::validate() const {
    for (double w : {lambda_seg, lambda_det, w_bce, w_dice, w_l1, w_giou})
        require(std::isfinite(w) && w >= 0, "loss weights must be finite and nonnegative");
}

void RunConfig::validate() const {
    reasoner.validate();
    adapter.validate();
    perceiver.validate();
    loss.validate();
    require(reasoner.image_size == perceiver.image_size, "reasoner and perceiver image sizes differ");
    require(optim.lr > 0, "optim.lr must be > 0");
    require(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1, "optim betas must be in [0,1)");
    require(optim.weight_decay >= 0, "optim.weight_decay must be >= 0");
    require(optim.grad_accum >= 1, "optim.grad_accum must be >= 1");
    require(optim.schedule == "constant" || optim.schedule == "cosine" || optim.schedule == "linear",
            "optim.schedule must be constant, cosine or linear");
    require(optim.warmup_steps >= 0, "optim.warmup_steps must be >= 0");
    require(optim.min_lr_frac >= 0 && optim.min_lr_frac <= 1, "optim.min_lr_frac must be in [0,1]");
    require(train.batch_size >= 1, "train.batch_size must be >= 1");
    require(train.epochs >= 1 || train.max_steps > 0, "train needs epochs or max_steps");
    require(train.dtype == "float32" || train.dtype == "float64", "train.dtype must be float32 or float64");
    require(train.threads >= 1, "train.threads must be >= 1");
    require(infer.theta_mask > 0 && infer.theta_mask < 1, "infer.theta_mask must be in (0,1)");
    require(infer.margin_frac >= 0, "infer.margin_frac must be >= 0");
    require(infer.max_new >= 0, "infer.max_new must be >= 0");
    require(curation.client.kind == "mock" || curation.client.kind == "http", "curation.client.kind must be mock or http");
    require(curation.max_retries >= 0, "curation.max_retries must be >= 0");
    require(synth.size == perceiver.image_size, "synth.size must equal the canonical image size");
}

ordered_json RunConfig::to_json() const {
    ordered_json out = ordered_json::object();
    Writer w(out);
    visit(w, const_cast<RunConfig&>(*this));
    return out;
}

RunConfig config_from_json(const json& j) {
    RunConfig cfg;
    if (!j.is_object()) throw ConfigError("config root must be an object");
    // The synth profile is a preset: apply it first so explicit keys win.
    if (j.contains("synth") && j["synth"].is_object() && j["synth"].contains("profile")) {
        if (!j["synth"]["profile"].is_string()) throw ConfigError("config key 'synth.profile' has the wrong type");
        cfg.synth.profile = j["synth"]["profile"].get<std::string>();
        cfg.synth = synth::apply_profile(cfg.synth);
    }
    Reader r(j, "");
    visit(r, cfg);
    r.finish();
    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return config_from_json(j);
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value");
    const auto key = assignment.substr(0, eq);
    const auto raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json j = json::parse(cfg.to_json().dump());
    std::string pointer = "/" + key;
    for (auto& ch : pointer)
        if (ch == '.') ch = '/';
    const json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
    j[ptr] = value;
    // Re-applying the profile preset would clobber resolved synth fields.
    if (key == "synth.profile") {
        if (!value.is_string()) throw ConfigError("synth.profile must be a string");
        auto preset = cfg.synth;
        preset.profile = value.get<std::string>();
        preset = synth::apply_profile(preset);
        ordered_json sub = ordered_json::object();
        Writer w(sub);
        visit(w, preset);
        j["synth"] = json::parse(sub.dump());
    }
    cfg = config_from_json(j);
}

}  // namespace ctreason
