#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ctreason/config.hpp"
#include "ctreason/data.hpp"
#include "ctreason/engine/roi.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/objectives/losses.hpp"
#include "ctreason/perceiver.hpp"
#include "ctreason/reasoner.hpp"
#include "ctreason/tokenizer.hpp"

namespace ctreason::engine {

torch::Dtype parse_dtype(const std::string& name);  ///< "float32" | "float64"; ConfigError otherwise

/// Both networks plus the vocabulary they were built for.
struct Models {
    std::shared_ptr<tokenizer::Vocabulary> vocab;
    ReasonerConfig reasoner_cfg;
    PerceiverConfig perceiver_cfg;
    std::optional<AdapterConfig> adapter;  ///< set once adapters are attached
    reasoner::Reasoner reasoner{nullptr};
    perceiver::Perceiver perceiver{nullptr};
    torch::Dtype dtype = torch::kFloat32;

    void train(bool on = true);
    void attach_adapters(const AdapterConfig& cfg);
    std::vector<torch::Tensor> trainable_parameters();
    /// Named parameters per checkpoint group: reasoner, encoder, seg_head, det_head, projector, box_queries.
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, torch::Tensor>>>> groups();
};

/// Vocabulary over the template corpus.
tokenizer::Vocabulary default_vocabulary();
/// Seeds libtorch, builds both models and converts them to `dtype`.
Models build_models(const RunConfig& cfg, const tokenizer::Vocabulary& vocab);

/// Where a row's image came from.
enum class RoiSource { full_image, gt_mask, predicted_mask };

/// One (object, round) row of a training batch.
struct TrainRow {
    int round = 1;
    std::string organ;
    ImageGrid image;
    tokenizer::TokenSequence input;     ///< [BOS] query answer[:-1]
    tokenizer::TokenSequence target;    ///< input shifted by one
    std::vector<std::uint8_t> answer_mask;
    std::vector<tokenizer::RoutingPosition> routing;  ///< positions index `input` (the emitting state)
    Mask mask;                          ///< GT mask in this row's image frame
    std::vector<Box> boxes;             ///< normalised GT boxes (round 1 only)
    RoiSource roi_source = RoiSource::full_image;
};

struct TrainBatch {
    std::vector<TrainRow> rows;
    int num_objects = 0;  ///< the J normaliser
};

struct ObjectRef {
    std::size_t sample = 0, object = 0;
};

/// Round-1 row for every object, plus a GT-ROI round-2 row when `round2` is on.
/// The round-2 paraphrase seed mixes `seed` with the object's identity.
TrainBatch build_batch(const std::vector<data::MultimodalSample>& samples, const std::vector<ObjectRef>& objects,
                       const tokenizer::Vocabulary& vocab, const RunConfig& cfg, std::uint64_t seed);

struct LossBreakdown {
    double language = 0, seg = 0, det = 0, total = 0;
    double grad_norm = 0;
};

/// Teacher-forced forward pass and backward of `scale * total`; gradients accumulate.
LossBreakdown forward_backward(Models& models, const TrainBatch& batch, const RunConfig& cfg, double scale);

/// Clears gradients, runs forward_backward, clips, and steps `optimizer` when non-null.
/// Throws NumericError on non-finite losses.
LossBreakdown train_step(Models& models, const TrainBatch& batch, const RunConfig& cfg,
                         torch::optim::Optimizer* optimizer);

/// End-to-end reasoner/perceiver training over a sample list.
class Trainer {
public:
    Trainer(Models& models, RunConfig cfg, std::vector<data::MultimodalSample> train);

    /// Runs one optimisation step over the next batch.
    LossBreakdown step();
    int steps_done() const { return step_; }
    int total_steps() const;
    std::size_t objects_per_epoch() const { return objects_.size(); }

private:
    void rebuild_optimizer();
    void next_epoch();

    Models& models_;
    RunConfig cfg_;
    std::vector<data::MultimodalSample> train_;
    std::vector<ObjectRef> objects_;
    std::vector<ObjectRef> order_;
    std::size_t cursor_ = 0;
    int epoch_ = -1;
    int step_ = 0;
    std::unique_ptr<torch::optim::AdamW> optimizer_;
};

struct InferOptions {
    double theta_obj = 0.5;
    double theta_mask = 0.5;
    bool closer = false;
    RoiOptions roi;
    int max_new = 24;
    std::uint64_t seed = 0;  ///< picks the round-2 paraphrase

    static InferOptions from(const InferConfig& c);
};

struct MaskOutput {
    ProbGrid prob;
    Mask binary;
};

struct Round2Output {
    PixelRegion region;
    std::string query;
    std::string text;
    ProbGrid prob;          ///< pasted into source coordinates
    Mask binary;            ///< pasted into source coordinates
    MaskOutput roi_mask;    ///< in ROI coordinates
    RoiSource roi_source = RoiSource::predicted_mask;
};

struct InferenceResult {
    std::string text;
    tokenizer::TokenSequence answer;
    std::set<tokenizer::RoutingKind> emitted;
    std::optional<MaskOutput> mask;
    std::optional<std::vector<BoxHypothesis>> boxes;  ///< filtered by theta_obj, score-descending
    std::vector<BoxHypothesis> all_boxes;              ///< all Q hypotheses, query order
    std::optional<Round2Output> round2;
    std::vector<std::string> notes;
};

/// The organ named in a query, or empty.
std::string organ_in_query(const std::string& query);

/// Generates an answer, dispatches each emitted routing token to its head, and
/// optionally runs a closer-look round on the ROI of the predicted mask.
InferenceResult infer(Models& models, const ImageGrid& image, const std::string& query, const InferOptions& opt);

struct EvalOptions {
    InferOptions infer;
    std::optional<data::Task> task;  ///< evaluate only objects of this task
    std::size_t max_objects = 0;     ///< 0 = all
    int workers = 1;                 ///< objects inferred concurrently
};

struct EvalResult {
    metrics::EvalReport report;
    double routing_accuracy = 0;
    std::size_t objects = 0;
    /// Mask-to-box baselines over the same detection GT.
    double map_area = 0, map_maxprob = 0;
    /// Paired closer-look statistics (only with infer.closer).
    double round1_dice = 0, round2_dice = 0, round1_hd95 = 0, round2_hd95 = 0;
    std::size_t round2_count = 0, paired = 0;
    std::size_t hd95_sentinels = 0;

    nlohmann::ordered_json to_json() const;
    std::string to_table() const;
};

EvalResult evaluate(Models& models, const std::vector<data::MultimodalSample>& samples, const EvalOptions& opt);

// Checkpoint archive: "ctreason-ckpt-v1\n", little-endian uint64 header length,
// JSON header {config, vocab, adapter, tensors:[{name, group, dtype, shape, offset, nbytes}]}, raw tensor data.
inline constexpr const char* kCheckpointMagic = "ctreason-ckpt-v1\n";

void save_checkpoint(const std::filesystem::path& path, Models& models, const RunConfig& cfg,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
    Models models;
    RunConfig config;
    nlohmann::json extra;
};
/// Throws IoError on malformed archives.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ctreason::engine
