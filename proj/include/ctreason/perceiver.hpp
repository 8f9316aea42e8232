#pragma once

#include <torch/torch.h>

#include "ctreason/config.hpp"

namespace ctreason::perceiver {

struct FeatureMap {
    torch::Tensor z;     ///< [B, c, h, w]
    torch::Tensor fine;  ///< [B, c/4, H, W] stride-1 features, only with seg_skip
};

/// Conv stack: one stride-1 stage, then log2(stride) stride-2 stages, plus a learned
/// positional table for the flattened grid.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const PerceiverConfig& cfg);
    FeatureMap forward(const torch::Tensor& images);  ///< [B, 1, H, W]
    torch::Tensor pos;                                ///< [h*w, c]

private:
    torch::nn::Conv2d stem{nullptr}, head{nullptr}, fine_proj{nullptr};
    torch::nn::ModuleList downs{nullptr};
    bool with_fine_;
};
TORCH_MODULE(Encoder);

/// Two affine layers with GELU in between: d -> d -> c.
class ProjectorImpl : public torch::nn::Module {
public:
    ProjectorImpl(int in_dim, int out_dim);
    torch::Tensor forward(const torch::Tensor& h);
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};

private:
    int in_dim_;
};
TORCH_MODULE(Projector);

/// Pre-norm attention + MLP sublayers over c-dim tokens.
class CrossBlockImpl : public torch::nn::Module {
public:
    CrossBlockImpl(int dim, int heads);
    /// tokens attend to themselves, then to `memory` (keys carry positions), then an MLP.
    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& memory, const torch::Tensor& memory_pos);

    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr}, ln3{nullptr};
    torch::nn::MultiheadAttention self_attn{nullptr}, cross_attn{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(CrossBlock);

/// Prompt-conditioned mask decoder: [mask token ; e] exchange attention with the
/// image tokens, the image tokens are upsampled by transposed convolutions, and a
/// hypernetwork on the mask token scores each pixel.
class SegHeadImpl : public torch::nn::Module {
public:
    explicit SegHeadImpl(const PerceiverConfig& cfg);
    /// Mask logits [B, H, W].
    torch::Tensor forward(const FeatureMap& fm, const torch::Tensor& pos, const torch::Tensor& e);

private:
    torch::Tensor mask_token;
    torch::nn::ModuleList token_blocks{nullptr};
    torch::nn::ModuleList image_attn{nullptr};
    torch::nn::ModuleList image_ln{nullptr};
    torch::nn::ModuleList ups{nullptr};
    torch::nn::Linear hyper1{nullptr}, hyper2{nullptr};
    int up_channels_;
};
TORCH_MODULE(SegHead);

struct DetectionOutput {
    torch::Tensor boxes;         ///< [B, Q, 4] corners in [0,1]
    torch::Tensor score_logits;  ///< [B, Q]
    torch::Tensor scores;        ///< sigmoid(score_logits)
};

/// Corner boxes from raw (a, b, c, d): cx = s(a), w = s(c) * 2 min(cx, 1 - cx), same for y.
torch::Tensor squash_boxes(const torch::Tensor& raw);

class DetHeadImpl : public torch::nn::Module {
public:
    explicit DetHeadImpl(const PerceiverConfig& cfg);
    DetectionOutput forward(const FeatureMap& fm, const torch::Tensor& pos, const torch::Tensor& queries,
                            const torch::Tensor& e);

private:
    torch::nn::Linear prompt_proj{nullptr};
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm ln_out{nullptr};
    torch::nn::Sequential box_mlp{nullptr}, score_mlp{nullptr};
};
TORCH_MODULE(DetHead);

class PerceiverImpl : public torch::nn::Module {
public:
    PerceiverImpl(const PerceiverConfig& cfg, int reasoner_dim);

    /// [B, H, W] or [B, 1, H, W] at the canonical size. Throws ShapeError.
    FeatureMap encode_image(const torch::Tensor& images);
    /// [..., d] -> [..., c]. Throws ShapeError.
    torch::Tensor project_embedding(const torch::Tensor& hidden);
    /// Mask logits [B, H, W]; e is [B, c].
    torch::Tensor segment(const FeatureMap& fm, const torch::Tensor& e);
    DetectionOutput detect(const FeatureMap& fm, const torch::Tensor& e);

    const PerceiverConfig& config() const { return cfg_; }

    Encoder encoder{nullptr};
    Projector projector{nullptr};
    SegHead seg_head{nullptr};
    DetHead det_head{nullptr};
    torch::Tensor box_queries;  ///< [Q, c]

private:
    void check_prompt(const FeatureMap& fm, const torch::Tensor& e) const;
    PerceiverConfig cfg_;
    int reasoner_dim_;
};
TORCH_MODULE(Perceiver);

}  // namespace ctreason::perceiver
