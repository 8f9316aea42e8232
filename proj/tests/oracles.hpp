#pragma once

// Brute-force reference implementations, written without calling the library
// code they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctreason/box.hpp"
#include "ctreason/curation.hpp"
#include "ctreason/image.hpp"

namespace oracle {

using ctreason::Box;
using ctreason::BoxHypothesis;
using ctreason::Mask;

inline double dice(const Mask& a, const Mask& b) {
    double inter = 0, sa = 0, sb = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            sa += a(y, x) != 0;
            sb += b(y, x) != 0;
            inter += a(y, x) && b(y, x);
        }
    return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

inline std::vector<std::pair<int, int>> boundary(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < m.height && x < m.width && m(y, x); };
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
    return out;
}

/// Pooled directed surface distances, 95th percentile with linear interpolation.
inline double hd95(const Mask& a, const Mask& b) {
    const auto sa = boundary(a), sb = boundary(b);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty()) return std::hypot(a.height, a.width);
    std::vector<double> d;
    auto directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) best = std::min(best, std::hypot(p.first - q.first, p.second - q.second));
            d.push_back(best);
        }
    };
    directed(sa, sb);
    directed(sb, sa);
    std::sort(d.begin(), d.end());
    const double rank = 0.95 * static_cast<double>(d.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (rank - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

inline double box_iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double u = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    return u > 0 ? inter / u : 0.0;
}

/// Ranked greedy matching, then the area under the all-point precision envelope.
inline double average_precision(const std::vector<std::vector<BoxHypothesis>>& preds,
                                const std::vector<std::vector<Box>>& gts, double thr) {
    struct Det {
        double score;
        std::size_t image, order;
        Box box;
    };
    std::vector<Det> all;
    std::size_t order = 0, n_gt = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (const auto& p : preds[i]) all.push_back({p.score, i, order++, p.box});
    for (const auto& g : gts) n_gt += g.size();
    if (n_gt == 0) return all.empty() ? 1.0 : 0.0;
    std::sort(all.begin(), all.end(), [](const Det& a, const Det& b) {
        return a.score != b.score ? a.score > b.score : a.order < b.order;
    });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    std::vector<double> prec, rec;
    double tp = 0, fp = 0;
    for (const auto& d : all) {
        double best = -1;
        std::size_t arg = 0;
        for (std::size_t g = 0; g < gts[d.image].size(); ++g) {
            if (used[d.image][g]) continue;
            const double v = box_iou(d.box, gts[d.image][g]);
            if (v > best) {
                best = v;
                arg = g;
            }
        }
        if (best >= thr) {
            used[d.image][arg] = true;
            ++tp;
        } else {
            ++fp;
        }
        prec.push_back(tp / (tp + fp));
        rec.push_back(tp / static_cast<double>(n_gt));
    }
    double ap = 0, prev_r = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        if (rec[i] <= prev_r) continue;
        double env = 0;
        for (std::size_t j = i; j < rec.size(); ++j) env = std::max(env, prec[j]);
        ap += (rec[i] - prev_r) * env;
        prev_r = rec[i];
    }
    return ap;
}

/// Exhaustive minimum over injections of rows into columns.
inline double min_assignment(const std::vector<std::vector<double>>& c, std::size_t cols) {
    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (std::size_t i = 0; i < c.size(); ++i) s += c[i][perm[i]];
        best = std::min(best, s);
        // Only the first rows positions matter; skip permutations that repeat them.
        std::reverse(perm.begin() + static_cast<std::ptrdiff_t>(c.size()), perm.end());
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Sweep the slices in order; a candidate is compared with the last slice kept so far.
inline std::vector<int> filtered_slices(const ctreason::curation::VolumeMaskSeries& v,
                                        const ctreason::curation::FilterConfig& cfg) {
    const int n = v.slice_count();
    if (n == 0) return {};
    const int h = v.height(), w = v.width();
    std::set<int> must;
    std::set<std::string> small;
    for (const auto& [organ, masks] : v.organs) {
        int first = -1, last = -1, peak = -1;
        long best = 0;
        for (int s = 0; s < n; ++s) {
            long a = 0;
            for (auto px : masks[s].data) a += px != 0;
            if (!a) continue;
            if (first < 0) first = s;
            last = s;
            if (a > best) {
                best = a;
                peak = s;
            }
        }
        if (first < 0) continue;
        must.insert(first);
        must.insert(peak);
        must.insert(last);
        if (static_cast<double>(best) < cfg.small_organ_frac * h * w) small.insert(organ);
    }
    auto fg = [&](int s, int i) {
        for (const auto& [o, masks] : v.organs)
            if (masks[s].data[i]) return true;
        return false;
    };
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (cfg.direction == ctreason::curation::SweepDirection::backward) std::reverse(idx.begin(), idx.end());
    std::vector<int> kept;
    for (int s : idx) {
        bool keep = must.count(s) > 0;
        if (!keep) {
            long area = 0;
            for (int i = 0; i < h * w; ++i) area += fg(s, i);
            bool protect = false;
            for (const auto& o : small)
                for (auto px : v.organs.at(o)[s].data) protect |= px != 0;
            if (area == 0) keep = false;
            else if (protect || kept.empty()) keep = true;
            else {
                const int r = kept.back();
                long inter = 0, uni = 0, ref = 0;
                for (int i = 0; i < h * w; ++i) {
                    inter += fg(s, i) && fg(r, i);
                    uni += fg(s, i) || fg(r, i);
                    ref += fg(r, i);
                }
                const double iou = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
                const double change = ref ? std::abs(static_cast<double>(area - ref)) / static_cast<double>(ref) : 1.0;
                keep = !(iou >= cfg.iou_thr && change <= cfg.area_eps);
            }
        }
        if (keep) kept.push_back(s);
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

/// Top-level fields of an appearance payload that break the description contract
/// ("" for a document that is not a JSON object).
inline std::set<std::string> description_problems(const std::string& raw) {
    static const std::vector<std::string> text_fields = {"organ",   "shape",    "size",        "location",
                                                         "texture", "boundary", "free_summary"};
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw);
    } catch (...) {
        return {""};
    }
    if (!j.is_object()) return {""};
    auto nonblank = [](const nlohmann::json& v) {
        if (!v.is_string()) return false;
        const auto s = v.get<std::string>();
        return std::any_of(s.begin(), s.end(), [](unsigned char c) { return !std::isspace(c); });
    };
    std::set<std::string> bad;
    for (const auto& f : text_fields)
        if (!j.contains(f) || !nonblank(j[f])) bad.insert(f);
    if (!j.contains("adjacency") || !j["adjacency"].is_array() || j["adjacency"].empty())
        bad.insert("adjacency");
    else
        for (const auto& a : j["adjacency"])
            if (!nonblank(a)) bad.insert("adjacency");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(text_fields.begin(), text_fields.end(), it.key()) == text_fields.end() && it.key() != "adjacency")
            bad.insert(it.key());
    return bad;
}

inline std::set<std::string> top_level(const std::vector<ctreason::curation::Violation>& vs) {
    std::set<std::string> out;
    for (const auto& v : vs) out.insert(v.field.substr(0, v.field.find('/')));
    return out;
}

}  // namespace oracle
