#include "ctreason/perceiver.hpp"

#include "ctreason/errors.hpp"

namespace ctreason::perceiver {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

int log2_exact(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    return n;
}

/// Channel width after k upsampling stages: halves per stage, floored at c/4.
int up_width(int c, int k) { return std::max(c / 4, c >> k); }

torch::Tensor mha(torch::nn::MultiheadAttention& attn, const torch::Tensor& q, const torch::Tensor& k,
                  const torch::Tensor& v) {
    // The module is sequence-first.
    auto out = std::get<0>(attn->forward(q.transpose(0, 1), k.transpose(0, 1), v.transpose(0, 1),
                                         /*key_padding_mask=*/{}, /*need_weights=*/false));
    return out.transpose(0, 1);
}

torch::nn::Sequential two_layer(int in, int hidden, int out) {
    return torch::nn::Sequential(torch::nn::Linear(in, hidden), torch::nn::GELU(), torch::nn::Linear(hidden, out));
}

}  // namespace

EncoderImpl::EncoderImpl(const PerceiverConfig& cfg) : with_fine_(cfg.seg_skip) {
    const int c = cfg.embed_dim;
    const int stages = log2_exact(cfg.stride);
    stem = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, c / 2, 3).padding(1)));
    downs = register_module("downs", torch::nn::ModuleList());
    int ch = c / 2;
    for (int i = 0; i < stages; ++i) {
        downs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, c, 3).stride(2).padding(1)));
        ch = c;
    }
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
    if (with_fine_)
        fine_proj = register_module("fine_proj",
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(c / 2, up_width(c, stages), 1)));
    const int side = cfg.image_size / cfg.stride;
    pos = register_parameter("pos", torch::randn({side * side, c}) * 0.02);
}

FeatureMap EncoderImpl::forward(const torch::Tensor& images) {
    auto x = F::gelu(stem(images));
    FeatureMap fm;
    if (with_fine_) fm.fine = fine_proj(x);
    for (const auto& m : *downs) x = F::gelu(m->as<torch::nn::Conv2d>()->forward(x));
    fm.z = head(x);
    return fm;
}

ProjectorImpl::ProjectorImpl(int in_dim, int out_dim) : in_dim_(in_dim) {
    fc1 = register_module("fc1", torch::nn::Linear(in_dim, in_dim));
    fc2 = register_module("fc2", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectorImpl::forward(const torch::Tensor& h) {
    if (h.dim() == 0 || h.size(-1) != in_dim_)
        throw ShapeError("projector expects a trailing dimension of " + std::to_string(in_dim_));
    return fc2(F::gelu(fc1(h)));
}

CrossBlockImpl::CrossBlockImpl(int dim, int heads) {
    ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    ln3 = register_module("ln3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    self_attn = register_module("self_attn", torch::nn::MultiheadAttention(dim, heads));
    cross_attn = register_module("cross_attn", torch::nn::MultiheadAttention(dim, heads));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * 4));
    fc2 = register_module("fc2", torch::nn::Linear(dim * 4, dim));
}

torch::Tensor CrossBlockImpl::forward(const torch::Tensor& tokens, const torch::Tensor& memory,
                                      const torch::Tensor& memory_pos) {
    auto t = ln1(tokens);
    auto x = tokens + mha(self_attn, t, t, t);
    t = ln2(x);
    x = x + mha(cross_attn, t, memory + memory_pos, memory);
    return x + fc2(F::gelu(fc1(ln3(x))));
}

SegHeadImpl::SegHeadImpl(const PerceiverConfig& cfg) {
    const int c = cfg.embed_dim;
    mask_token = register_parameter("mask_token", torch::randn({1, 1, c}) * 0.02);
    token_blocks = register_module("token_blocks", torch::nn::ModuleList());
    image_attn = register_module("image_attn", torch::nn::ModuleList());
    image_ln = register_module("image_ln", torch::nn::ModuleList());
    for (int i = 0; i < cfg.seg_layers; ++i) {
        token_blocks->push_back(CrossBlock(c, cfg.heads));
        image_attn->push_back(torch::nn::MultiheadAttention(c, cfg.heads));
        image_ln->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    }
    ups = register_module("ups", torch::nn::ModuleList());
    const int stages = log2_exact(cfg.stride);
    for (int k = 0; k < stages; ++k)
        ups->push_back(torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(up_width(c, k), up_width(c, k + 1), 4).stride(2).padding(1)));
    up_channels_ = up_width(c, stages);
    hyper1 = register_module("hyper1", torch::nn::Linear(c, c));
    hyper2 = register_module("hyper2", torch::nn::Linear(c, up_channels_));
}

torch::Tensor SegHeadImpl::forward(const FeatureMap& fm, const torch::Tensor& pos, const torch::Tensor& e) {
    const auto b = fm.z.size(0), c = fm.z.size(1), h = fm.z.size(2), w = fm.z.size(3);
    auto img = fm.z.flatten(2).transpose(1, 2);  // [B, hw, c]
    auto tokens = torch::cat({mask_token.expand({b, 1, c}), e.unsqueeze(1)}, 1);
    const auto p = pos.unsqueeze(0);
    for (std::size_t i = 0; i < token_blocks->size(); ++i) {
        tokens = token_blocks[i]->as<CrossBlock>()->forward(tokens, img, p);
        auto attn = image_attn[i]->as<torch::nn::MultiheadAttention>();
        auto ln = image_ln[i]->as<torch::nn::LayerNorm>();
        auto q = ln->forward(img) + p;
        auto out = std::get<0>(attn->forward(q.transpose(0, 1), tokens.transpose(0, 1), tokens.transpose(0, 1), {},
                                             false));
        img = img + out.transpose(0, 1);
    }
    auto x = img.transpose(1, 2).reshape({b, c, h, w});
    for (std::size_t k = 0; k < ups->size(); ++k) {
        x = ups[k]->as<torch::nn::ConvTranspose2d>()->forward(x);
        if (k + 1 < ups->size()) x = F::gelu(x);
    }
    if (fm.fine.defined()) x = x + fm.fine;
    x = F::gelu(x);
    const auto kernel = hyper2(F::gelu(hyper1(tokens.index({Slice(), 0}))));  // [B, C']
    return torch::einsum("bc,bchw->bhw", {kernel, x});
}

torch::Tensor squash_boxes(const torch::Tensor& raw) {
    const auto s = torch::sigmoid(raw);
    const auto cx = s.select(-1, 0), cy = s.select(-1, 1);
    const auto w = s.select(-1, 2) * 2 * torch::minimum(cx, 1 - cx);
    const auto h = s.select(-1, 3) * 2 * torch::minimum(cy, 1 - cy);
    return torch::stack({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, -1);
}

DetHeadImpl::DetHeadImpl(const PerceiverConfig& cfg) {
    const int c = cfg.embed_dim;
    prompt_proj = register_module("prompt_proj", torch::nn::Linear(c, 2 * c));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < cfg.det_layers; ++i) blocks->push_back(CrossBlock(c, cfg.heads));
    ln_out = register_module("ln_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
    box_mlp = register_module("box_mlp", two_layer(c, c, 4));
    score_mlp = register_module("score_mlp", two_layer(c, c, 1));
}

DetectionOutput DetHeadImpl::forward(const FeatureMap& fm, const torch::Tensor& pos, const torch::Tensor& queries,
                                     const torch::Tensor& e) {
    const auto b = fm.z.size(0);
    const auto img = fm.z.flatten(2).transpose(1, 2);
    // The prompt shifts and scales every query at the input of every layer.
    const auto film = prompt_proj(e).unsqueeze(1).chunk(2, -1);
    const auto& shift = film[0];
    const auto scale = 1 + film[1];
    auto x = queries.unsqueeze(0).expand({b, queries.size(0), queries.size(1)});
    const auto p = pos.unsqueeze(0);
    for (const auto& blk : *blocks) x = blk->as<CrossBlock>()->forward(x * scale + shift, img, p);
    x = ln_out(x);
    DetectionOutput out;
    out.boxes = squash_boxes(box_mlp->forward(x));
    out.score_logits = score_mlp->forward(x).squeeze(-1);
    out.scores = torch::sigmoid(out.score_logits);
    return out;
}

PerceiverImpl::PerceiverImpl(const PerceiverConfig& cfg, int reasoner_dim) : cfg_(cfg), reasoner_dim_(reasoner_dim) {
    cfg_.validate();
    encoder = register_module("encoder", Encoder(cfg_));
    projector = register_module("projector", Projector(reasoner_dim, cfg_.embed_dim));
    seg_head = register_module("seg_head", SegHead(cfg_));
    det_head = register_module("det_head", DetHead(cfg_));
    box_queries = register_parameter("box_queries", torch::randn({cfg_.num_queries, cfg_.embed_dim}));
}

FeatureMap PerceiverImpl::encode_image(const torch::Tensor& images) {
    auto x = images.dim() == 3 ? images.unsqueeze(1) : images;
    if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != cfg_.image_size || x.size(3) != cfg_.image_size)
        throw ShapeError("encoder expects [B, " + std::to_string(cfg_.image_size) + ", " +
                         std::to_string(cfg_.image_size) + "] images");
    return encoder(x);
}

torch::Tensor PerceiverImpl::project_embedding(const torch::Tensor& hidden) { return projector(hidden); }

void PerceiverImpl::check_prompt(const FeatureMap& fm, const torch::Tensor& e) const {
    if (!fm.z.defined() || fm.z.dim() != 4 || fm.z.size(1) != cfg_.embed_dim)
        throw ShapeError("feature map must be [B, " + std::to_string(cfg_.embed_dim) + ", h, w]");
    if (e.dim() != 2 || e.size(0) != fm.z.size(0) || e.size(1) != cfg_.embed_dim)
        throw ShapeError("prompt embedding must be [B, " + std::to_string(cfg_.embed_dim) +
                         "] with a batch matching the feature map");
}

torch::Tensor PerceiverImpl::segment(const FeatureMap& fm, const torch::Tensor& e) {
    check_prompt(fm, e);
    return seg_head->forward(fm, encoder->pos, e);
}

DetectionOutput PerceiverImpl::detect(const FeatureMap& fm, const torch::Tensor& e) {
    check_prompt(fm, e);
    return det_head->forward(fm, encoder->pos, box_queries, e);
}

}  // namespace ctreason::perceiver
