#include "ctreason/objectives/losses.hpp"

#include "ctreason/errors.hpp"

namespace ctreason::objectives {

namespace F = torch::nn::functional;

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": shape mismatch");
}

torch::Tensor seg_rows(const torch::Tensor& bce_rows, const torch::Tensor& prob, const torch::Tensor& gt,
                       const LossWeights& w, double num_objects) {
    auto per_row = w.w_bce * bce_rows + w.w_dice * dice_loss(prob, gt);
    return per_row.sum() / (2.0 * num_objects);
}

DetectionLoss detection_impl(const torch::Tensor& gt, const torch::Tensor& pred, const torch::Tensor& obj_bce_input,
                             bool logits, const LossWeights& w) {
    if (pred.dim() != 2 || pred.size(1) != 4) throw ShapeError("predicted boxes must be [Q, 4]");
    if (obj_bce_input.dim() != 1 || obj_bce_input.size(0) != pred.size(0))
        throw ShapeError("objectness must be [Q] matching the predicted boxes");
    if (gt.dim() != 2 || gt.size(1) != 4) throw ShapeError("ground-truth boxes must be [N, 4]");
    if (gt.size(0) > pred.size(0)) throw ShapeError("more ground-truth boxes than queries");

    DetectionLoss out;
    out.match = hungarian_match(box_cost(gt, pred, w));
    auto target = torch::zeros_like(obj_bce_input);
    torch::Tensor box_term;
    if (!out.match.pairs.empty()) {
        std::vector<std::int64_t> gi, pi;
        for (auto [n, k] : out.match.pairs) {
            gi.push_back(static_cast<std::int64_t>(n));
            pi.push_back(static_cast<std::int64_t>(k));
        }
        const auto gidx = torch::tensor(gi, torch::kInt64), pidx = torch::tensor(pi, torch::kInt64);
        const auto g = gt.index_select(0, gidx).to(pred.dtype());
        const auto p = pred.index_select(0, pidx);
        const auto l1 = (p - g).abs().sum(-1);
        const auto pair_cost = w.w_l1 * l1 + w.w_giou * (1 - giou_tensor(p, g));
        box_term = pair_cost.mean();
        target.index_fill_(0, pidx, 1.0);
    }
    auto obj = logits ? F::binary_cross_entropy_with_logits(obj_bce_input, target)
                      : F::binary_cross_entropy(obj_bce_input.clamp(0, 1), target);
    out.value = box_term.defined() ? box_term + obj : obj;
    return out;
}

}  // namespace

torch::Tensor language_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& answer_mask,
                            double num_objects) {
    if (logits.dim() != 3 || targets.dim() != 2 || logits.size(0) != targets.size(0) ||
        logits.size(1) != targets.size(1))
        throw ShapeError("logits [R, T, V] and targets [R, T] do not align");
    require_same(targets, answer_mask, "language_loss mask");
    if (num_objects <= 0) throw ShapeError("language_loss needs a positive object count");
    const auto r = logits.size(0), t = logits.size(1), v = logits.size(2);
    const auto nll = F::cross_entropy(logits.reshape({r * t, v}), targets.reshape({r * t}),
                                      F::CrossEntropyFuncOptions().reduction(torch::kNone))
                         .reshape({r, t});
    const auto m = answer_mask.to(nll.dtype());
    const auto counts = m.sum(1);
    if ((counts <= 0).any().item<bool>()) throw ShapeError("a row has no answer tokens");
    return ((nll * m).sum(1) / counts).sum() / num_objects;
}

torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& gt) {
    require_same(prob, gt, "dice_loss");
    if (prob.dim() < 2) throw ShapeError("dice_loss expects [..., H, W]");
    const auto g = gt.to(prob.dtype());
    const auto inter = (prob * g).sum({-2, -1});
    const auto denom = prob.sum({-2, -1}) + g.sum({-2, -1});
    return 1 - (2 * inter + kDiceEps) / (denom + kDiceEps);
}

torch::Tensor seg_loss(const torch::Tensor& prob, const torch::Tensor& gt, const LossWeights& w, double num_objects) {
    require_same(prob, gt, "seg_loss");
    if (prob.dim() != 3) throw ShapeError("seg_loss expects [R, H, W]");
    const auto g = gt.to(prob.dtype());
    const auto bce = F::binary_cross_entropy(prob, g, F::BinaryCrossEntropyFuncOptions().reduction(torch::kNone))
                         .mean({-2, -1});
    return seg_rows(bce, prob, g, w, num_objects);
}

torch::Tensor seg_loss_logits(const torch::Tensor& logits, const torch::Tensor& gt, const LossWeights& w,
                              double num_objects) {
    require_same(logits, gt, "seg_loss");
    if (logits.dim() != 3) throw ShapeError("seg_loss expects [R, H, W]");
    const auto g = gt.to(logits.dtype());
    const auto bce =
        F::binary_cross_entropy_with_logits(logits, g,
                                            F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
            .mean({-2, -1});
    return seg_rows(bce, torch::sigmoid(logits), g, w, num_objects);
}

torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b) {
    require_same(a, b, "giou");
    const auto ax0 = a.select(-1, 0), ay0 = a.select(-1, 1), ax1 = a.select(-1, 2), ay1 = a.select(-1, 3);
    const auto bx0 = b.select(-1, 0), by0 = b.select(-1, 1), bx1 = b.select(-1, 2), by1 = b.select(-1, 3);
    const auto area_a = (ax1 - ax0) * (ay1 - ay0), area_b = (bx1 - bx0) * (by1 - by0);
    const auto iw = (torch::minimum(ax1, bx1) - torch::maximum(ax0, bx0)).clamp_min(0);
    const auto ih = (torch::minimum(ay1, by1) - torch::maximum(ay0, by0)).clamp_min(0);
    const auto inter = iw * ih;
    const auto uni = area_a + area_b - inter;
    const auto cw = torch::maximum(ax1, bx1) - torch::minimum(ax0, bx0);
    const auto ch = torch::maximum(ay1, by1) - torch::minimum(ay0, by0);
    const auto enclose = cw * ch;

    const auto pos_union = uni > 0;
    const auto same = (a == b).all(-1);
    const auto safe_uni = torch::where(pos_union, uni, torch::ones_like(uni));
    auto iou_v = torch::where(pos_union, inter / safe_uni, torch::where(same, torch::ones_like(uni), torch::zeros_like(uni)));
    const auto pos_enc = enclose > 0;
    const auto safe_enc = torch::where(pos_enc, enclose, torch::ones_like(enclose));
    const auto penalty = torch::where(pos_enc, (enclose - uni) / safe_enc, torch::zeros_like(enclose));
    return iou_v - penalty;
}

CostMatrix box_cost(const torch::Tensor& gt, const torch::Tensor& pred, const LossWeights& w) {
    const auto g = gt.detach().to(torch::kFloat64).contiguous();
    const auto p = pred.detach().to(torch::kFloat64).contiguous();
    const auto n = static_cast<std::size_t>(g.size(0)), q = static_cast<std::size_t>(p.size(0));
    CostMatrix cost(n, q);
    const double* gd = g.data_ptr<double>();
    const double* pd = p.data_ptr<double>();
    for (std::size_t i = 0; i < n; ++i) {
        const Box gb{gd[4 * i], gd[4 * i + 1], gd[4 * i + 2], gd[4 * i + 3]};
        for (std::size_t k = 0; k < q; ++k) {
            const Box pb{pd[4 * k], pd[4 * k + 1], pd[4 * k + 2], pd[4 * k + 3]};
            double l1 = 0;
            for (int c = 0; c < 4; ++c) l1 += std::abs(gd[4 * i + c] - pd[4 * k + c]);
            cost(i, k) = w.w_l1 * l1 + w.w_giou * (1 - giou(gb, pb));
        }
    }
    return cost;
}

DetectionLoss detection_loss(const torch::Tensor& gt, const torch::Tensor& pred_boxes, const torch::Tensor& scores,
                             const LossWeights& w) {
    return detection_impl(gt, pred_boxes, scores, false, w);
}

DetectionLoss detection_loss_logits(const torch::Tensor& gt, const torch::Tensor& pred_boxes,
                                    const torch::Tensor& score_logits, const LossWeights& w) {
    return detection_impl(gt, pred_boxes, score_logits, true, w);
}

torch::Tensor total_loss(const LossParts& parts, const LossWeights& w) {
    auto total = parts.language;
    auto add = [&](const torch::Tensor& part, double lambda) {
        if (!part.defined() || lambda == 0) return;
        total = total.defined() ? total + lambda * part : lambda * part;
    };
    add(parts.seg, w.lambda_seg);
    add(parts.det, w.lambda_det);
    if (!total.defined()) total = torch::zeros({});
    return total;
}

}  // namespace ctreason::objectives
