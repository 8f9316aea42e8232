#include "ctreason/reasoner.hpp"

#include <cmath>
#include <limits>

#include "ctreason/errors.hpp"

namespace ctreason::reasoner {

namespace F = torch::nn::functional;

LowRankLinearImpl::LowRankLinearImpl(int in_features, int out_features) : in_(in_features), out_(out_features) {
    base = register_module("base", torch::nn::Linear(in_features, out_features));
}

void LowRankLinearImpl::attach(const AdapterConfig& cfg) {
    cfg.validate();
    if (adapted()) throw ConfigError("adapter already attached");
    if (cfg.rank > std::min(in_, out_))
        throw ConfigError("adapter rank " + std::to_string(cfg.rank) + " exceeds min(fan_in, fan_out) = " +
                          std::to_string(std::min(in_, out_)));
    const auto opts = base->weight.options();
    lora_a_ = register_parameter("lora_a", torch::empty({cfg.rank, in_}, opts));
    torch::nn::init::kaiming_uniform_(lora_a_, std::sqrt(5.0));
    lora_b_ = register_parameter("lora_b", torch::zeros({out_, cfg.rank}, opts));
    scale_ = cfg.alpha / cfg.rank;
    dropout_ = register_module("dropout", torch::nn::Dropout(cfg.dropout));
    base->weight.set_requires_grad(false);
    base->bias.set_requires_grad(false);
}

torch::Tensor LowRankLinearImpl::forward(const torch::Tensor& x) {
    auto y = base(x);
    if (!adapted()) return y;
    return y + scale_ * F::linear(F::linear(dropout_(x), lora_a_), lora_b_);
}

SelfAttentionImpl::SelfAttentionImpl(int dim, int heads) : heads_(heads) {
    q = register_module("q", LowRankLinear(dim, dim));
    k = register_module("k", LowRankLinear(dim, dim));
    v = register_module("v", LowRankLinear(dim, dim));
    o = register_module("o", LowRankLinear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
    const auto b = x.size(0), s = x.size(1), d = x.size(2);
    const auto hd = d / heads_;
    auto split = [&](const torch::Tensor& t) { return t.view({b, s, heads_, hd}).transpose(1, 2); };
    const auto qh = split(q(x)), kh = split(k(x)), vh = split(v(x));
    auto att = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)) + mask;
    att = torch::softmax(att, -1);
    const auto out = torch::matmul(att, vh).transpose(1, 2).reshape({b, s, d});
    return o(out);
}

BlockImpl::BlockImpl(int dim, int heads, int mlp_ratio) {
    ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", SelfAttention(dim, heads));
    ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
    fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
    auto h = x + attn(ln1(x), mask);
    return h + fc2(F::gelu(fc1(ln2(h))));
}

torch::Tensor patchify(const torch::Tensor& images, int patch) {
    auto x = images.dim() == 3 ? images.unsqueeze(1) : images;
    if (x.dim() != 4 || x.size(1) != 1) throw ShapeError("patchify expects [B, H, W] or [B, 1, H, W]");
    const auto b = x.size(0), h = x.size(2), w = x.size(3);
    if (h % patch || w % patch) throw ShapeError("image size is not a multiple of the patch size");
    // [B, 1, h/p, p, w/p, p] -> [B, h/p, w/p, p, p]
    return x.reshape({b, h / patch, patch, w / patch, patch})
        .permute({0, 1, 3, 2, 4})
        .reshape({b, (h / patch) * (w / patch), patch * patch});
}

ReasonerImpl::ReasonerImpl(const ReasonerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.vocab_size < static_cast<int>(tokenizer::kSpecialCount)) throw ConfigError("reasoner.vocab_size is not set");
    const int d = cfg_.hidden_dim;
    image_proj = register_module("image_proj", torch::nn::Linear(cfg_.image_feature_dim(), d));
    tok_emb = register_module("tok_emb", torch::nn::Embedding(cfg_.vocab_size, d));
    pos_emb = register_parameter("pos_emb", torch::randn({cfg_.image_token_count() + cfg_.max_seq_len, d}) * 0.02);
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < cfg_.layers; ++i) blocks->push_back(Block(d, cfg_.heads, cfg_.mlp_ratio));
    ln_f = register_module("ln_f", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    lm_head = register_module("lm_head", torch::nn::Linear(d, cfg_.vocab_size));
    torch::NoGradGuard g;
    tok_emb->weight.normal_(0.0, 0.02);
}

torch::Tensor ReasonerImpl::embed(const torch::Tensor& ids) { return tok_emb(ids); }

ForwardOutput ReasonerImpl::forward(const torch::Tensor& image_features, const torch::Tensor& ids) {
    if (ids.dim() != 2) throw ShapeError("ids must be [B, T]");
    if (ids.numel() > 0 && (ids.min().item<std::int64_t>() < 0 || ids.max().item<std::int64_t>() >= cfg_.vocab_size))
        throw RangeError("token id outside the vocabulary");
    return forward_from_embeddings(image_features, embed(ids));
}

ForwardOutput ReasonerImpl::forward_from_embeddings(const torch::Tensor& image_features,
                                                    const torch::Tensor& text_embeddings) {
    const int n = cfg_.image_token_count();
    if (image_features.dim() != 3 || image_features.size(1) != n || image_features.size(2) != cfg_.image_feature_dim())
        throw ShapeError("image features must be [B, " + std::to_string(n) + ", " +
                         std::to_string(cfg_.image_feature_dim()) + "]");
    if (text_embeddings.dim() != 3 || text_embeddings.size(0) != image_features.size(0) ||
        text_embeddings.size(2) != cfg_.hidden_dim)
        throw ShapeError("text embeddings must be [B, T, d] with a batch matching the image features");
    const auto t = text_embeddings.size(1);
    if (t > cfg_.max_seq_len)
        throw LengthError("sequence of " + std::to_string(t) + " tokens exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    auto x = torch::cat({image_proj(image_features), text_embeddings}, 1);
    const auto s = x.size(1);
    x = x + pos_emb.slice(0, 0, s).unsqueeze(0);
    const auto mask =
        torch::full({s, s}, -std::numeric_limits<double>::infinity(), x.options()).triu(1);
    for (const auto& blk : *blocks) x = blk->as<Block>()->forward(x, mask);
    const auto hidden = ln_f(x).slice(1, n, s);
    return {lm_head(hidden), hidden};
}

GenerationResult ReasonerImpl::generate(const torch::Tensor& image_features, const tokenizer::TokenSequence& query_ids,
                                        int max_new, const tokenizer::Vocabulary& vocab) {
    torch::NoGradGuard no_grad;
    const auto feats = image_features.dim() == 2 ? image_features.unsqueeze(0) : image_features;
    std::vector<std::int64_t> ids;
    ids.push_back(vocab.id(tokenizer::Special::bos));
    for (auto id : query_ids) ids.push_back(id);
    GenerationResult out;
    std::vector<torch::Tensor> rows;
    const auto eos = vocab.id(tokenizer::Special::eos);
    for (int step = 0; step < max_new && static_cast<int>(ids.size()) <= cfg_.max_seq_len; ++step) {
        const auto input = torch::tensor(ids, torch::kInt64).unsqueeze(0);
        const auto fwd = forward(feats, input);
        const auto last = fwd.logits[0][-1];
        // torch::argmax returns the first maximal index, i.e. the lowest id on ties.
        const auto next = static_cast<tokenizer::TokenId>(torch::argmax(last).item<std::int64_t>());
        rows.push_back(fwd.hidden[0][-1].clone());
        out.answer.push_back(next);
        ids.push_back(next);
        if (next == eos) break;
    }
    out.hidden = rows.empty() ? torch::empty({0, cfg_.hidden_dim}, pos_emb.options()) : torch::stack(rows);
    out.routing = vocab.find_routing_positions(out.answer);
    return out;
}

std::vector<LowRankLinear> ReasonerImpl::projections() const {
    std::vector<LowRankLinear> out;
    for (const auto& blk : *blocks) {
        const auto& a = blk->as<Block>()->attn;
        for (const auto& p : {a->q, a->k, a->v, a->o}) out.push_back(p);
    }
    return out;
}

void ReasonerImpl::attach_adapters(const AdapterConfig& cfg) {
    cfg.validate();
    for (const auto& p : projections())
        if (cfg.rank > std::min(p->in_features(), p->out_features()))
            throw ConfigError("adapter rank exceeds min(fan_in, fan_out) of an attention projection");
    for (auto& p : parameters()) p.set_requires_grad(false);
    for (auto& p : projections()) p->attach(cfg);
    adapted_ = true;
}

std::int64_t ReasonerImpl::expected_adapter_parameters(int rank) const {
    std::int64_t n = 0;
    for (const auto& p : projections()) n += static_cast<std::int64_t>(rank) * (p->in_features() + p->out_features());
    return n;
}

std::int64_t ReasonerImpl::trainable_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters())
        if (p.requires_grad()) n += p.numel();
    return n;
}

torch::Tensor extract_routing_embedding(const GenerationResult& result, tokenizer::RoutingKind kind) {
    for (const auto& r : result.routing)
        if (r.kind == kind) {
            if (static_cast<std::int64_t>(r.position) >= result.hidden.size(0))
                throw ShapeError("routing position outside the hidden-state rows");
            return result.hidden[static_cast<std::int64_t>(r.position)];
        }
    throw MissingRoutingTokenError("no " + std::string(tokenizer::routing_name(kind)) + " token in the answer");
}

torch::Tensor to_tensor(const ImageGrid& img, torch::Dtype dtype) {
    return torch::from_blob(const_cast<float*>(img.data.data()), {img.height, img.width}, torch::kFloat32)
        .clone()
        .to(dtype);
}

}  // namespace ctreason::reasoner
