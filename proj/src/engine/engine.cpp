#include "ctreason/engine/engine.hpp"

#include <algorithm>
#include <cmath>

#include "ctreason/errors.hpp"
#include "ctreason/rng.hpp"
#include "ctreason/templates.hpp"

namespace ctreason::engine {

using tokenizer::RoutingKind;
using tokenizer::Special;
using torch::indexing::Slice;

torch::Dtype parse_dtype(const std::string& name) {
    if (name == "float32") return torch::kFloat32;
    if (name == "float64") return torch::kFloat64;
    throw ConfigError("unsupported dtype '" + name + "'");
}

void Models::train(bool on) {
    reasoner->train(on);
    perceiver->train(on);
}

void Models::attach_adapters(const AdapterConfig& cfg) {
    reasoner->attach_adapters(cfg);
    reasoner->to(dtype);
    adapter = cfg;
}

std::vector<torch::Tensor> Models::trainable_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& p : reasoner->parameters())
        if (p.requires_grad()) out.push_back(p);
    for (auto& p : perceiver->parameters())
        if (p.requires_grad()) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, std::vector<std::pair<std::string, torch::Tensor>>>> Models::groups() {
    auto named = [](torch::nn::Module& m) {
        std::vector<std::pair<std::string, torch::Tensor>> out;
        for (const auto& item : m.named_parameters(true)) out.emplace_back(item.key(), item.value());
        return out;
    };
    return {
        {"reasoner", named(*reasoner)},
        {"encoder", named(*perceiver->encoder)},
        {"seg_head", named(*perceiver->seg_head)},
        {"det_head", named(*perceiver->det_head)},
        {"projector", named(*perceiver->projector)},
        {"box_queries", {{"box_queries", perceiver->box_queries}}},
    };
}

tokenizer::Vocabulary default_vocabulary() { return tokenizer::Vocabulary::from_corpus(templates::corpus_inventory()); }

Models build_models(const RunConfig& cfg, const tokenizer::Vocabulary& vocab) {
    cfg.validate();
    torch::manual_seed(cfg.seed);
    torch::set_num_threads(cfg.train.threads);
    Models m;
    m.vocab = std::make_shared<tokenizer::Vocabulary>(vocab);
    m.reasoner_cfg = cfg.reasoner;
    if (m.reasoner_cfg.vocab_size == 0) m.reasoner_cfg.vocab_size = static_cast<int>(vocab.size());
    if (m.reasoner_cfg.vocab_size != static_cast<int>(vocab.size()))
        throw ConfigError("reasoner.vocab_size does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
    m.perceiver_cfg = cfg.perceiver;
    m.dtype = parse_dtype(cfg.train.dtype);
    m.reasoner = reasoner::Reasoner(m.reasoner_cfg);
    m.perceiver = perceiver::Perceiver(m.perceiver_cfg, m.reasoner_cfg.hidden_dim);
    m.reasoner->to(m.dtype);
    m.perceiver->to(m.dtype);
    return m;
}

// ---------------------------------------------------------------------------
// Batches

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t object_key(const data::MultimodalSample& s, const data::ObjectAnnotation& o) {
    return fnv1a(s.subject + "/" + s.slice_id + "/" + o.organ);
}

TrainRow make_row(const tokenizer::Vocabulary& vocab, const ReasonerConfig& rc, const std::string& query,
                  const std::string& answer) {
    TrainRow row;
    const auto q = vocab.encode(query);
    auto a = vocab.encode(answer);
    a.push_back(vocab.id(Special::eos));
    tokenizer::TokenSequence full;
    full.push_back(vocab.id(Special::bos));
    full.insert(full.end(), q.begin(), q.end());
    full.insert(full.end(), a.begin(), a.end());
    row.input.assign(full.begin(), full.end() - 1);
    row.target.assign(full.begin() + 1, full.end());
    if (static_cast<int>(row.input.size()) > rc.max_seq_len)
        throw LengthError("training sequence of " + std::to_string(row.input.size()) + " tokens exceeds max_seq_len " +
                          std::to_string(rc.max_seq_len));
    row.answer_mask.assign(row.target.size(), 0);
    for (std::size_t i = q.size(); i < row.target.size(); ++i) row.answer_mask[i] = 1;
    // Answer token t is emitted by the state at input position |q| + t.
    for (const auto& r : vocab.find_routing_positions(a)) row.routing.push_back({q.size() + r.position, r.kind});
    return row;
}

}  // namespace

TrainBatch build_batch(const std::vector<data::MultimodalSample>& samples, const std::vector<ObjectRef>& objects,
                       const tokenizer::Vocabulary& vocab, const RunConfig& cfg, std::uint64_t seed) {
    TrainBatch batch;
    batch.num_objects = static_cast<int>(objects.size());
    const RoiOptions roi{cfg.infer.margin_frac, cfg.infer.square_roi};
    for (const auto& ref : objects) {
        if (ref.sample >= samples.size() || ref.object >= samples[ref.sample].objects.size())
            throw RangeError("object reference outside the sample list");
        const auto& s = samples[ref.sample];
        const auto& o = s.objects[ref.object];
        auto r1 = make_row(vocab, cfg.reasoner, o.query, o.answer);
        r1.round = 1;
        r1.organ = o.organ;
        r1.image = s.image;
        r1.mask = o.mask;
        for (const auto& b : o.boxes) r1.boxes.push_back(normalize(b, s.image.height, s.image.width));
        r1.roi_source = RoiSource::full_image;
        batch.rows.push_back(std::move(r1));

        if (!cfg.train.round2 || empty(o.mask)) continue;
        const auto r2s = make_round2_sample(s, ref.object, roi, mix_seed(seed, object_key(s, o)));
        auto r2 = make_row(vocab, cfg.reasoner, r2s.query, r2s.answer);
        r2.round = 2;
        r2.organ = o.organ;
        r2.image = r2s.crop.image;
        r2.mask = r2s.crop.mask;
        r2.roi_source = RoiSource::gt_mask;
        if (cfg.train.det_round2) {
            const auto& reg = r2s.crop.region;
            const double rw = reg.width(), rh = reg.height();
            for (const auto& b : o.boxes) {
                // Source boxes re-expressed in the ROI frame; instances outside the ROI are dropped.
                Box n{(b.x_min - reg.x_min) / rw, (b.y_min - reg.y_min) / rh, (b.x_max + 1 - reg.x_min) / rw,
                      (b.y_max + 1 - reg.y_min) / rh};
                n = {std::clamp(n.x_min, 0.0, 1.0), std::clamp(n.y_min, 0.0, 1.0), std::clamp(n.x_max, 0.0, 1.0),
                     std::clamp(n.y_max, 0.0, 1.0)};
                if (n.area() > 0) r2.boxes.push_back(n);
            }
        }
        batch.rows.push_back(std::move(r2));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Training

namespace {

torch::Tensor stack_images(const std::vector<const ImageGrid*>& imgs, torch::Dtype dtype) {
    std::vector<torch::Tensor> ts;
    ts.reserve(imgs.size());
    for (const auto* g : imgs) ts.push_back(reasoner::to_tensor(*g, dtype));
    return torch::stack(ts);
}

torch::Tensor mask_tensor(const Mask& m, torch::Dtype dtype) {
    std::vector<float> v(m.data.begin(), m.data.end());
    return torch::from_blob(v.data(), {m.height, m.width}, torch::kFloat32).clone().to(dtype);
}

torch::Tensor boxes_tensor(const std::vector<Box>& boxes, torch::Dtype dtype) {
    auto t = torch::zeros({static_cast<std::int64_t>(boxes.size()), 4}, torch::kFloat64);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        t[static_cast<std::int64_t>(i)] = torch::tensor({b.x_min, b.y_min, b.x_max, b.y_max}, torch::kFloat64);
    }
    return t.to(dtype);
}

const tokenizer::RoutingPosition* first_routing(const TrainRow& row, std::initializer_list<RoutingKind> kinds) {
    for (const auto& r : row.routing)
        for (auto k : kinds)
            if (r.kind == k) return &r;
    return nullptr;
}

perceiver::FeatureMap select_rows(const perceiver::FeatureMap& fm, const torch::Tensor& idx) {
    perceiver::FeatureMap out;
    out.z = fm.z.index_select(0, idx);
    if (fm.fine.defined()) out.fine = fm.fine.index_select(0, idx);
    return out;
}

double finite_or_throw(const torch::Tensor& t, const char* what) {
    const double v = t.item<double>();
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " loss");
    return v;
}

}  // namespace

LossBreakdown forward_backward(Models& models, const TrainBatch& batch, const RunConfig& cfg, double scale) {
    if (batch.rows.empty() || batch.num_objects <= 0) throw ShapeError("empty training batch");
    const auto dtype = models.dtype;
    const auto& vocab = *models.vocab;
    const auto r = static_cast<std::int64_t>(batch.rows.size());

    std::size_t tmax = 0;
    std::vector<const ImageGrid*> imgs;
    for (const auto& row : batch.rows) {
        tmax = std::max(tmax, row.input.size());
        imgs.push_back(&row.image);
    }
    const auto pad = vocab.id(Special::pad);
    auto ids = torch::full({r, static_cast<std::int64_t>(tmax)}, pad, torch::kInt64);
    auto targets = torch::full({r, static_cast<std::int64_t>(tmax)}, pad, torch::kInt64);
    auto amask = torch::zeros({r, static_cast<std::int64_t>(tmax)}, torch::kInt64);
    auto ia = ids.accessor<std::int64_t, 2>();
    auto ta = targets.accessor<std::int64_t, 2>();
    auto ma = amask.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < r; ++i) {
        const auto& row = batch.rows[static_cast<std::size_t>(i)];
        for (std::size_t t = 0; t < row.input.size(); ++t) {
            ia[i][static_cast<std::int64_t>(t)] = row.input[t];
            ta[i][static_cast<std::int64_t>(t)] = row.target[t];
            ma[i][static_cast<std::int64_t>(t)] = row.answer_mask[t];
        }
    }

    const auto images = stack_images(imgs, dtype);
    const auto fwd = models.reasoner->forward(reasoner::patchify(images, models.reasoner_cfg.patch), ids);
    const double j = batch.num_objects;
    objectives::LossParts parts;
    parts.language = objectives::language_loss(fwd.logits, targets, amask, j);

    // Routing rows: [seg]/[closer] drive the mask head, [det] (and optionally [closer]) the box head.
    std::vector<std::int64_t> seg_rows, seg_pos, det_rows, det_pos;
    for (std::int64_t i = 0; i < r; ++i) {
        const auto& row = batch.rows[static_cast<std::size_t>(i)];
        if (const auto* p = first_routing(row, {RoutingKind::seg, RoutingKind::closer})) {
            seg_rows.push_back(i);
            seg_pos.push_back(static_cast<std::int64_t>(p->position));
        }
        const bool det_ok = row.round == 1 || cfg.train.det_round2;
        const auto* d = row.round == 1 ? first_routing(row, {RoutingKind::det})
                                       : first_routing(row, {RoutingKind::det, RoutingKind::closer});
        if (det_ok && d && cfg.loss.lambda_det > 0) {
            det_rows.push_back(i);
            det_pos.push_back(static_cast<std::int64_t>(d->position));
        }
    }

    if (!seg_rows.empty() || !det_rows.empty()) {
        const auto fm = models.perceiver->encode_image(images);
        auto gather = [&](const std::vector<std::int64_t>& rows, const std::vector<std::int64_t>& pos) {
            const auto ri = torch::tensor(rows, torch::kInt64), pi = torch::tensor(pos, torch::kInt64);
            const auto h = fwd.hidden.index({ri, pi});
            return std::make_pair(ri, models.perceiver->project_embedding(h));
        };
        if (!seg_rows.empty() && cfg.loss.lambda_seg > 0) {
            auto [ri, e] = gather(seg_rows, seg_pos);
            const auto logits = models.perceiver->segment(select_rows(fm, ri), e);
            std::vector<torch::Tensor> gts;
            for (auto i : seg_rows) gts.push_back(mask_tensor(batch.rows[static_cast<std::size_t>(i)].mask, dtype));
            parts.seg = objectives::seg_loss_logits(logits, torch::stack(gts), cfg.loss, j);
        }
        if (!det_rows.empty()) {
            auto [ri, e] = gather(det_rows, det_pos);
            const auto out = models.perceiver->detect(select_rows(fm, ri), e);
            torch::Tensor sum;
            for (std::size_t k = 0; k < det_rows.size(); ++k) {
                const auto& row = batch.rows[static_cast<std::size_t>(det_rows[k])];
                const auto kk = static_cast<std::int64_t>(k);
                const auto l = objectives::detection_loss_logits(boxes_tensor(row.boxes, dtype), out.boxes[kk],
                                                                 out.score_logits[kk], cfg.loss);
                sum = sum.defined() ? sum + l.value : l.value;
            }
            parts.det = sum / j;
        }
    }

    const auto total = objectives::total_loss(parts, cfg.loss);
    LossBreakdown out;
    out.language = finite_or_throw(parts.language, "language");
    if (parts.seg.defined()) out.seg = finite_or_throw(parts.seg, "segmentation");
    if (parts.det.defined()) out.det = finite_or_throw(parts.det, "detection");
    out.total = finite_or_throw(total, "total");
    (total * scale).backward();
    return out;
}

LossBreakdown train_step(Models& models, const TrainBatch& batch, const RunConfig& cfg,
                         torch::optim::Optimizer* optimizer) {
    models.train(true);
    for (auto& p : models.reasoner->parameters()) p.mutable_grad() = torch::Tensor();
    for (auto& p : models.perceiver->parameters()) p.mutable_grad() = torch::Tensor();
    auto out = forward_backward(models, batch, cfg, 1.0);
    auto params = models.trainable_parameters();
    const double clip = cfg.optim.grad_clip > 0 ? cfg.optim.grad_clip : std::numeric_limits<double>::infinity();
    out.grad_norm = torch::nn::utils::clip_grad_norm_(params, clip);
    if (!std::isfinite(out.grad_norm)) throw NumericError("non-finite gradient norm");
    if (optimizer) optimizer->step();
    return out;
}

Trainer::Trainer(Models& models, RunConfig cfg, std::vector<data::MultimodalSample> train)
    : models_(models), cfg_(std::move(cfg)), train_(std::move(train)) {
    for (std::size_t s = 0; s < train_.size(); ++s)
        for (std::size_t o = 0; o < train_[s].objects.size(); ++o) objects_.push_back({s, o});
    if (objects_.empty()) throw ConfigError("training set has no objects");
    if (cfg_.train.use_adapters && cfg_.train.adapter_after == 0 && !models_.adapter) models_.attach_adapters(cfg_.adapter);
    rebuild_optimizer();
}

int Trainer::total_steps() const {
    if (cfg_.train.max_steps > 0) return cfg_.train.max_steps;
    const auto per_epoch = (objects_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
    return static_cast<int>(per_epoch) * cfg_.train.epochs;
}

void Trainer::rebuild_optimizer() {
    torch::optim::AdamWOptions opt(cfg_.optim.lr);
    opt.betas({cfg_.optim.beta1, cfg_.optim.beta2});
    opt.weight_decay(cfg_.optim.weight_decay);
    optimizer_ = std::make_unique<torch::optim::AdamW>(models_.trainable_parameters(), opt);
}

void Trainer::next_epoch() {
    ++epoch_;
    order_ = objects_;
    Rng rng(mix_seed(cfg_.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch_)));
    rng.shuffle(order_);
    cursor_ = 0;
}

LossBreakdown Trainer::step() {
    if (cfg_.train.use_adapters && !models_.adapter && step_ >= cfg_.train.adapter_after) {
        models_.attach_adapters(cfg_.adapter);
        rebuild_optimizer();
    }
    models_.train(true);
    const double lr = cfg_.optim.lr_at(step_, total_steps());
    for (auto& g : optimizer_->param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    optimizer_->zero_grad();
    LossBreakdown sum;
    const int accum = cfg_.optim.grad_accum;
    for (int a = 0; a < accum; ++a) {
        if (epoch_ < 0 || cursor_ >= order_.size()) next_epoch();
        const auto n = std::min<std::size_t>(cfg_.train.batch_size, order_.size() - cursor_);
        std::vector<ObjectRef> refs(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                    order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + n));
        cursor_ += n;
        const auto batch = build_batch(train_, refs, *models_.vocab, cfg_,
                                       mix_seed(cfg_.seed, static_cast<std::uint64_t>(step_) * 131 + a));
        const auto part = forward_backward(models_, batch, cfg_, 1.0 / accum);
        sum.language += part.language / accum;
        sum.seg += part.seg / accum;
        sum.det += part.det / accum;
        sum.total += part.total / accum;
    }
    auto params = models_.trainable_parameters();
    const double clip = cfg_.optim.grad_clip > 0 ? cfg_.optim.grad_clip : std::numeric_limits<double>::infinity();
    sum.grad_norm = torch::nn::utils::clip_grad_norm_(params, clip);
    if (!std::isfinite(sum.grad_norm)) throw NumericError("non-finite gradient norm");
    optimizer_->step();
    ++step_;
    return sum;
}

}  // namespace ctreason::engine
