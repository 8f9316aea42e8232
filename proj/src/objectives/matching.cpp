#include "ctreason/objectives/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ctreason/errors.hpp"

namespace ctreason::objectives {

double giou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    double iou_term;
    if (uni > 0) iou_term = inter / uni;
    else iou_term = (a == b) ? 1.0 : 0.0;

    const double cw = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
    const double ch = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
    const double enclose = cw * ch;
    const double penalty = enclose > 0 ? (enclose - uni) / enclose : 0.0;
    return iou_term - penalty;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potential-based Kuhn-Munkres on the sub-matrix rows x cols (rows.size() <= cols.size()).
// Returns the optimal cost and writes the chosen column (index into `cols`) per row.
double solve(const CostMatrix& cost, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
             std::vector<std::size_t>* assignment) {
    const std::size_t n = rows.size(), m = cols.size();
    if (n == 0) {
        if (assignment) assignment->clear();
        return 0.0;
    }
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = kInf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<std::size_t> col_of_row(n, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j]) col_of_row[p[j] - 1] = j - 1;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += cost(rows[i], cols[col_of_row[i]]);
    if (assignment) *assignment = std::move(col_of_row);
    return total;
}

}  // namespace

double assignment_cost(const CostMatrix& cost, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    double total = 0;
    for (const auto& [n, k] : pairs) total += cost(n, k);
    return total;
}

MatchResult hungarian_match(const CostMatrix& cost) {
    if (cost.values.size() != cost.rows * cost.cols) throw ShapeError("cost matrix storage does not match shape");
    if (cost.rows > cost.cols) throw ShapeError("more ground truths than predictions");
    for (double c : cost.values)
        if (!std::isfinite(c)) throw NumericError("non-finite entry in matching cost");

    MatchResult result;
    std::vector<std::size_t> all_rows(cost.rows), all_cols(cost.cols);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    std::iota(all_cols.begin(), all_cols.end(), 0);
    const double best = solve(cost, all_rows, all_cols, nullptr);

    double scale = 1.0;
    for (double c : cost.values) scale = std::max(scale, std::abs(c));
    const double tol = 1e-12 * scale * static_cast<double>(std::max<std::size_t>(cost.rows, 1));

    // Fix rows in order to the smallest column that still admits an optimal completion.
    std::vector<std::size_t> free_cols = all_cols;
    double running = 0;
    for (std::size_t n = 0; n < cost.rows; ++n) {
        std::vector<std::size_t> rest_rows(all_rows.begin() + static_cast<std::ptrdiff_t>(n) + 1, all_rows.end());
        bool placed = false;
        for (std::size_t idx = 0; idx < free_cols.size() && !placed; ++idx) {
            const std::size_t k = free_cols[idx];
            std::vector<std::size_t> rest_cols;
            rest_cols.reserve(free_cols.size() - 1);
            for (std::size_t c : free_cols)
                if (c != k) rest_cols.push_back(c);
            const double candidate = running + cost(n, k) + solve(cost, rest_rows, rest_cols, nullptr);
            if (candidate <= best + tol) {
                result.pairs.emplace_back(n, k);
                running += cost(n, k);
                free_cols = std::move(rest_cols);
                placed = true;
            }
        }
        if (!placed) throw NumericError("matching tie-break failed to reproduce the optimum");
    }
    result.unmatched_preds = free_cols;
    result.total_cost = assignment_cost(cost, result.pairs);
    return result;
}

}  // namespace ctreason::objectives
