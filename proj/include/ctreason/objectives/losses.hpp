#pragma once

#include <torch/torch.h>

#include "ctreason/config.hpp"
#include "ctreason/objectives/matching.hpp"

namespace ctreason::objectives {

inline constexpr double kDiceEps = 1e-6;

/// Token cross-entropy. logits [R, T, V], targets [R, T] int64, answer_mask [R, T]
/// (nonzero where the target is an answer token). Each row (one object in one
/// round) contributes the mean over its answer tokens; rows are summed and the
/// total is divided by `num_objects`. Throws ShapeError.
torch::Tensor language_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& answer_mask,
                            double num_objects);

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over the trailing [H, W] dims, one value per leading index.
torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& gt);

/// Sum over rows of w_bce * BCE + w_dice * Dice, divided by 2 * num_objects.
/// prob / gt are [R, H, W]. Throws ShapeError.
torch::Tensor seg_loss(const torch::Tensor& prob, const torch::Tensor& gt, const LossWeights& w, double num_objects);
/// Same value computed from logits (numerically stable BCE).
torch::Tensor seg_loss_logits(const torch::Tensor& logits, const torch::Tensor& gt, const LossWeights& w,
                              double num_objects);

/// Elementwise GIoU of [N, 4] corner boxes with the degenerate-area convention of giou().
torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b);

/// Matching cost w_l1 * L1 + w_giou * (1 - GIoU), with L1 summed over the 4 coordinates.
CostMatrix box_cost(const torch::Tensor& gt, const torch::Tensor& pred, const LossWeights& w);

struct DetectionLoss {
    torch::Tensor value;
    MatchResult match;
};

/// gt [N, 4], pred boxes [Q, 4], scores [Q] in [0,1]. The box term averages the
/// matched-pair cost; the objectness term is BCE against 1 on matched and 0 on
/// unmatched queries, averaged over Q. Throws ShapeError / NumericError.
DetectionLoss detection_loss(const torch::Tensor& gt, const torch::Tensor& pred_boxes, const torch::Tensor& scores,
                             const LossWeights& w);
/// Same, taking objectness logits.
DetectionLoss detection_loss_logits(const torch::Tensor& gt, const torch::Tensor& pred_boxes,
                                    const torch::Tensor& score_logits, const LossWeights& w);

struct LossParts {
    torch::Tensor language, seg, det;
};

/// language + lambda_seg * seg + lambda_det * det; undefined parts count as 0.
torch::Tensor total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace ctreason::objectives
