#include "ctreason/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ctreason/errors.hpp"

namespace ctreason::metrics {

double dice_score(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "dice_score");
    std::size_t inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        sp += p;
        sg += g;
        inter += p && g;
    }
    if (sp + sg == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

std::vector<std::pair<int, int>> surface_pixels(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < m.height && x < m.width && m(y, x) != 0; };
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))) out.emplace_back(y, x);
    return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1-D lower envelope of parabolas w2*(p-q)^2 + f(q) (Felzenszwalb & Huttenlocher).
void edt_1d(const std::vector<double>& f, double w2, std::vector<double>& d) {
    const int n = static_cast<int>(f.size());
    d.assign(n, kInf);
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s = 0;
        while (true) {
            const int p = v[k];
            s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
            if (s > z[k]) break;
            --k;  // z[0] is -inf, so this stops at k == 0
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) return;
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dq = q - v[j];
        d[q] = w2 * dq * dq + f[v[j]];
    }
}

// Squared distance from every pixel to the nearest pixel of `sites`.
Grid<double> squared_distance_to(const std::vector<std::pair<int, int>>& sites, int h, int w, Spacing sp) {
    Grid<double> g(h, w, kInf);
    for (auto [y, x] : sites) g(y, x) = 0.0;
    std::vector<double> f, d;
    const double wr = sp.row * sp.row, wc = sp.col * sp.col;
    for (int x = 0; x < w; ++x) {
        f.resize(h);
        for (int y = 0; y < h; ++y) f[y] = g(y, x);
        edt_1d(f, wr, d);
        for (int y = 0; y < h; ++y) g(y, x) = d[y];
    }
    for (int y = 0; y < h; ++y) {
        f.resize(w);
        for (int x = 0; x < w; ++x) f[x] = g(y, x);
        edt_1d(f, wc, d);
        for (int x = 0; x < w; ++x) g(y, x) = d[x];
    }
    return g;
}

}  // namespace

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

double hd95_sentinel(int height, int width, Spacing spacing) {
    return std::hypot(height * spacing.row, width * spacing.col);
}

double hd95(const Mask& pred, const Mask& gt, Spacing spacing) {
    require_same_shape(pred, gt, "hd95");
    const bool pe = empty(pred), ge = empty(gt);
    if (pe && ge) return 0.0;
    if (pe || ge) return hd95_sentinel(pred.height, pred.width, spacing);

    const auto sp = surface_pixels(pred), sg = surface_pixels(gt);
    const auto to_g = squared_distance_to(sg, gt.height, gt.width, spacing);
    const auto to_p = squared_distance_to(sp, pred.height, pred.width, spacing);
    std::vector<double> d;
    d.reserve(sp.size() + sg.size());
    for (auto [y, x] : sp) d.push_back(std::sqrt(to_g(y, x)));
    for (auto [y, x] : sg) d.push_back(std::sqrt(to_p(y, x)));
    return percentile(std::move(d), 95.0);
}

double map_at(const std::vector<std::vector<BoxHypothesis>>& preds, const std::vector<std::vector<Box>>& gts,
              double iou_thr) {
    if (preds.size() != gts.size()) throw ShapeError("map_at: prediction and ground-truth image counts differ");
    std::size_t total_gt = 0;
    for (const auto& g : gts) total_gt += g.size();

    struct Ranked {
        double score;
        std::size_t image, index;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t k = 0; k < preds[i].size(); ++k) ranked.push_back({preds[i][k].score, i, k});
    if (total_gt == 0) return ranked.empty() ? 1.0 : 0.0;
    if (ranked.empty()) return 0.0;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::vector<std::vector<char>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), 0);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& r : ranked) {
        const auto& box = preds[r.image][r.index].box;
        double best = -1;
        std::size_t best_gt = 0;
        for (std::size_t g = 0; g < gts[r.image].size(); ++g) {
            if (taken[r.image][g]) continue;
            const double v = iou(box, gts[r.image][g]);
            if (v > best) {
                best = v;
                best_gt = g;
            }
        }
        if (best >= iou_thr) {
            taken[r.image][best_gt] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    for (std::size_t i = precision.size() - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

Grid<int> label_components(const Mask& m, Connectivity conn, int* count) {
    Grid<int> labels(m.height, m.width, 0);
    int next = 0;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!m(y, x) || labels(y, x)) continue;
            ++next;
            labels(y, x) = next;
            stack.assign(1, {y, x});
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dy && !dx) continue;
                        if (conn == Connectivity::four && dy && dx) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
                        if (!m(ny, nx) || labels(ny, nx)) continue;
                        labels(ny, nx) = next;
                        stack.emplace_back(ny, nx);
                    }
                }
            }
        }
    }
    if (count) *count = next;
    return labels;
}

std::vector<BoxHypothesis> mask_to_boxes(const ProbGrid& prob, double theta, BoxConfidence mode, Connectivity conn) {
    Mask fg(prob.height, prob.width);
    for (std::size_t i = 0; i < prob.data.size(); ++i) fg.data[i] = prob.data[i] >= theta ? 1 : 0;
    int n = 0;
    const auto labels = label_components(fg, conn, &n);
    if (n == 0) return {};

    struct Stats {
        PixelRegion r{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), -1, -1};
        std::size_t area = 0;
        double max_prob = 0;
    };
    std::vector<Stats> stats(static_cast<std::size_t>(n));
    std::size_t total = 0;
    for (int y = 0; y < prob.height; ++y) {
        for (int x = 0; x < prob.width; ++x) {
            const int l = labels(y, x);
            if (!l) continue;
            auto& s = stats[static_cast<std::size_t>(l - 1)];
            s.r.x_min = std::min(s.r.x_min, x);
            s.r.y_min = std::min(s.r.y_min, y);
            s.r.x_max = std::max(s.r.x_max, x);
            s.r.y_max = std::max(s.r.y_max, y);
            ++s.area;
            s.max_prob = std::max(s.max_prob, static_cast<double>(prob(y, x)));
            ++total;
        }
    }
    std::vector<BoxHypothesis> out;
    out.reserve(stats.size());
    for (const auto& s : stats) {
        const double conf = mode == BoxConfidence::area ? static_cast<double>(s.area) / static_cast<double>(total)
                                                        : s.max_prob;
        out.push_back({normalize(s.r, prob.height, prob.width), conf});
    }
    return out;
}

PixelRegion tight_region(const Mask& m) {
    PixelRegion r{m.width, m.height, -1, -1};
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m(y, x)) {
                r.x_min = std::min(r.x_min, x);
                r.y_min = std::min(r.y_min, y);
                r.x_max = std::max(r.x_max, x);
                r.y_max = std::max(r.y_max, y);
            }
    if (r.x_max < 0) throw EmptyMaskError("mask has no foreground");
    return r;
}

void ReportBuilder::add_detection(const std::string& organ, std::vector<BoxHypothesis> preds, std::vector<Box> gts) {
    det_preds_[organ].push_back(std::move(preds));
    det_gts_[organ].push_back(std::move(gts));
}

namespace {

double mean_of(const std::map<std::string, double>& m) {
    if (m.empty()) return 0.0;
    double s = 0;
    for (const auto& [k, v] : m) s += v;
    return s / static_cast<double>(m.size());
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalReport ReportBuilder::build(double iou_thr) const {
    EvalReport r;
    for (const auto& [k, v] : dice_) r.per_class_dice[k] = mean_of(v);
    for (const auto& [k, v] : hd_) r.per_class_hd95[k] = mean_of(v);
    for (const auto& [k, v] : det_preds_) r.per_class_map[k] = map_at(v, det_gts_.at(k), iou_thr);
    r.mean_dice = mean_of(r.per_class_dice);
    r.mean_hd95 = mean_of(r.per_class_hd95);
    r.mean_map = mean_of(r.per_class_map);
    r.conventions["dice_both_empty"] = "1.0";
    r.conventions["hd95_both_empty"] = "0";
    r.conventions["hd95_one_empty"] = "image diagonal";
    r.conventions["map_iou_threshold"] = std::to_string(iou_thr);
    r.conventions["map_interpolation"] = "all-point precision envelope";
    return r;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["per_class_dice"] = per_class_dice;
    j["mean_dice"] = mean_dice;
    j["per_class_hd95"] = per_class_hd95;
    j["mean_hd95"] = mean_hd95;
    j["per_class_map"] = per_class_map;
    j["mean_map"] = mean_map;
    j["conventions"] = conventions;
    j["extras"] = extras;
    return j.dump(2);
}

std::string EvalReport::to_table() const {
    std::vector<std::string> organs;
    auto collect = [&](const std::map<std::string, double>& m) {
        for (const auto& [k, v] : m)
            if (std::find(organs.begin(), organs.end(), k) == organs.end()) organs.push_back(k);
    };
    collect(per_class_dice);
    collect(per_class_hd95);
    collect(per_class_map);
    std::sort(organs.begin(), organs.end());

    constexpr int kLabel = 10, kCol = 12;
    std::ostringstream os;
    os << std::left << std::setw(kLabel) << "Metric";
    for (const auto& o : organs) os << std::right << std::setw(kCol) << o.substr(0, kCol - 1);
    os << std::right << std::setw(kCol) << "Mean" << "\n";
    auto row = [&](const char* name, const std::map<std::string, double>& m, double mean, double scale) {
        if (m.empty()) return;
        os << std::left << std::setw(kLabel) << name << std::fixed << std::setprecision(2);
        for (const auto& o : organs) {
            auto it = m.find(o);
            if (it == m.end()) os << std::right << std::setw(kCol) << "-";
            else os << std::right << std::setw(kCol) << it->second * scale;
        }
        os << std::right << std::setw(kCol) << mean * scale << "\n";
    };
    row("Dice", per_class_dice, mean_dice, 100.0);
    row("HD95", per_class_hd95, mean_hd95, 1.0);
    row("mAP@0.1", per_class_map, mean_map, 100.0);
    return os.str();
}

}  // namespace ctreason::metrics
