#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "ctreason/curation.hpp"
#include "ctreason/synth.hpp"

namespace ctreason {

struct ReasonerConfig {
    int vocab_size = 0;  ///< 0: taken from the vocabulary at build time
    int hidden_dim = 128;
    int layers = 2;
    int heads = 4;
    int mlp_ratio = 4;
    int max_seq_len = 48;  ///< text positions, excluding the image prefix
    int image_size = 64;
    int patch = 16;

    int image_token_count() const { return (image_size / patch) * (image_size / patch); }
    int image_feature_dim() const { return patch * patch; }
    /// Throws ConfigError.
    void validate() const;
};

struct AdapterConfig {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
    void validate() const;
};

struct PerceiverConfig {
    int image_size = 64;
    int embed_dim = 32;
    int stride = 8;  ///< 2, 4 or 8
    int num_queries = 8;
    int heads = 4;
    int seg_layers = 1;
    int det_layers = 2;
    bool seg_skip = false;  ///< add a full-resolution encoder skip to the mask upsampler
    void validate() const;
};

struct LossWeights {
    double lambda_seg = 1.0, lambda_det = 1.0;
    double w_bce = 1.0, w_dice = 1.0;
    double w_l1 = 1.0, w_giou = 1.0;
    void validate() const;
};

struct OptimConfig {
    double lr = 3e-4;
    double beta1 = 0.9, beta2 = 0.95;
    double weight_decay = 0.0;
    int grad_accum = 1;
    double grad_clip = 1.0;  ///< max global norm; 0 disables
    std::string schedule = "cosine";  ///< "constant", "cosine" or "linear" decay after warmup
    int warmup_steps = 0;
    double min_lr_frac = 0.0;  ///< floor of the decayed rate, as a fraction of lr

    /// Rate for a 0-based step out of `total` steps.
    double lr_at(int step, int total) const;
};

struct TrainConfig {
    int epochs = 40;
    int max_steps = 0;  ///< > 0 overrides epochs
    int batch_size = 8;  ///< objects per step
    bool round2 = true;
    bool det_round2 = false;
    bool use_adapters = false;
    int adapter_after = 0;  ///< steps of full training before adapters replace reasoner updates
    std::string dtype = "float32";
    int threads = 1;
    int log_every = 10;
    int eval_every = 0;  ///< steps between validation passes; 0 = once per epoch
    int max_eval_samples = 32;
};

struct InferConfig {
    double theta_obj = 0.5;
    double theta_mask = 0.5;
    double margin_frac = 0.1;
    bool square_roi = true;
    int max_new = 24;
    int workers = 1;
};

struct ClientConfig {
    std::string kind = "mock";  ///< "mock" or "http"
    curation::HttpClientConfig http;
};

struct CurationConfig {
    curation::FilterConfig filter;
    std::string template_id = "appearance_v1";
    ClientConfig client;
    int max_retries = 2;
    std::string review_db = "review.sqlite";
    std::string review_log = "review_events.jsonl";
    std::string host = "127.0.0.1";
    int port = 8080;
};

struct PathsConfig {
    std::string data_root = "data";
    std::string run_dir = "runs/default";
    std::string curation_dir = "curation";
};

struct RunConfig {
    ReasonerConfig reasoner;
    AdapterConfig adapter;
    PerceiverConfig perceiver;
    LossWeights loss;
    OptimConfig optim;
    TrainConfig train;
    InferConfig infer;
    synth::SynthConfig synth;
    CurationConfig curation;
    PathsConfig paths;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
};

/// Parses a commented JSON document over the defaults; unknown keys raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Applies "section.key=value" overrides (value parsed as JSON, or as a string when that fails).
void apply_override(RunConfig& cfg, const std::string& assignment);
RunConfig config_from_json(const nlohmann::json& j);

}  // namespace ctreason
