#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "ctreason/box.hpp"

namespace ctreason::objectives {

/// Generalised IoU in [-1, 1]. Zero-area boxes have IoU 0 unless they are the
/// same point (IoU 1); a zero-area enclosing box contributes no penalty.
double giou(const Box& a, const Box& b);

/// Row-major N x Q cost matrix.
struct CostMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, double fill = 0) : rows(r), cols(c), values(r * c, fill) {}
    double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  ///< (gt index, prediction index), gt ascending
    std::vector<std::size_t> unmatched_preds;                 ///< ascending
    double total_cost = 0;                                    ///< summed in gt order
};

/// Minimum-cost injection of ground truths (rows) into predictions (columns).
/// Among optimal assignments the lexicographically smallest pair list is
/// returned. Requires rows <= cols; NaN/inf costs raise NumericError.
MatchResult hungarian_match(const CostMatrix& cost);

/// Sum of cost(n, k) over pairs, accumulated in gt order.
double assignment_cost(const CostMatrix& cost, const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

}  // namespace ctreason::objectives
