#pragma once

#include <torch/torch.h>

#include "ctreason/config.hpp"
#include "ctreason/image.hpp"
#include "ctreason/tokenizer.hpp"

namespace ctreason::reasoner {

/// Linear layer with an optional additive low-rank term (alpha / r) * B A.
class LowRankLinearImpl : public torch::nn::Module {
public:
    LowRankLinearImpl(int in_features, int out_features);

    torch::Tensor forward(const torch::Tensor& x);

    /// Adds A (r x in, Kaiming-uniform) and B (out x r, zeros). Throws ConfigError when
    /// r > min(in, out) or when already attached.
    void attach(const AdapterConfig& cfg);
    bool adapted() const { return lora_a_.defined(); }
    int in_features() const { return in_; }
    int out_features() const { return out_; }

    torch::nn::Linear base{nullptr};
    const torch::Tensor& lora_a() const { return lora_a_; }
    const torch::Tensor& lora_b() const { return lora_b_; }

private:
    int in_, out_;
    double scale_ = 0;
    torch::Tensor lora_a_, lora_b_;
    torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(LowRankLinear);

class SelfAttentionImpl : public torch::nn::Module {
public:
    SelfAttentionImpl(int dim, int heads);
    /// x: [B, S, d]; mask: [S, S] additive.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask);

    LowRankLinear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};

private:
    int heads_;
};
TORCH_MODULE(SelfAttention);

class BlockImpl : public torch::nn::Module {
public:
    BlockImpl(int dim, int heads, int mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask);

    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
    SelfAttention attn{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Block);

struct ForwardOutput {
    torch::Tensor logits;  ///< [B, T, V]
    torch::Tensor hidden;  ///< [B, T, d], last-layer states of the text positions
};

struct GenerationResult {
    tokenizer::TokenSequence answer;  ///< emitted ids, including a final EOS when produced
    torch::Tensor hidden;             ///< [T, d]; row t is the state that emitted answer[t]
    std::vector<tokenizer::RoutingPosition> routing;
};

/// Image patches flattened into prefix tokens: [B, H, W] or [B, 1, H, W] -> [B, N, patch^2].
torch::Tensor patchify(const torch::Tensor& images, int patch);

/// Decoder-only transformer over [projected image patches ; text tokens] with a full causal mask.
class ReasonerImpl : public torch::nn::Module {
public:
    explicit ReasonerImpl(const ReasonerConfig& cfg);

    /// image_features: [B, N, F]; ids: [B, T] int64. Throws LengthError / ShapeError.
    ForwardOutput forward(const torch::Tensor& image_features, const torch::Tensor& ids);
    /// Same as forward but from already-embedded text ([B, T, d], before positions are added).
    ForwardOutput forward_from_embeddings(const torch::Tensor& image_features, const torch::Tensor& text_embeddings);
    torch::Tensor embed(const torch::Tensor& ids);

    /// Greedy decoding from [BOS] + query. Ties go to the lowest id. Stops at EOS or max_new.
    GenerationResult generate(const torch::Tensor& image_features, const tokenizer::TokenSequence& query_ids,
                              int max_new, const tokenizer::Vocabulary& vocab);

    /// Adds adapters to every attention projection and freezes all other reasoner parameters.
    void attach_adapters(const AdapterConfig& cfg);
    bool adapted() const { return adapted_; }
    /// Closed form: sum over adapted matrices of r * (fan_in + fan_out).
    std::int64_t expected_adapter_parameters(int rank) const;
    std::int64_t trainable_parameter_count() const;

    const ReasonerConfig& config() const { return cfg_; }

    torch::nn::Linear image_proj{nullptr};
    torch::nn::Embedding tok_emb{nullptr};
    torch::Tensor pos_emb;
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm ln_f{nullptr};
    torch::nn::Linear lm_head{nullptr};

private:
    std::vector<LowRankLinear> projections() const;

    ReasonerConfig cfg_;
    bool adapted_ = false;
};
TORCH_MODULE(Reasoner);

/// Hidden row at the first routing position of `kind` (a d-vector). Throws MissingRoutingTokenError.
torch::Tensor extract_routing_embedding(const GenerationResult& result, tokenizer::RoutingKind kind);

/// [H, W] float image -> tensor of the given dtype.
torch::Tensor to_tensor(const ImageGrid& img, torch::Dtype dtype = torch::kFloat32);

}  // namespace ctreason::reasoner
