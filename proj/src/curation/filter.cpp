#include <algorithm>
#include <cmath>

#include "ctreason/curation.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"

namespace ctreason::curation {

int VolumeMaskSeries::slice_count() const { return organs.empty() ? 0 : static_cast<int>(organs.begin()->second.size()); }

int VolumeMaskSeries::height() const {
    for (const auto& [name, masks] : organs)
        if (!masks.empty()) return masks.front().height;
    return 0;
}

int VolumeMaskSeries::width() const {
    for (const auto& [name, masks] : organs)
        if (!masks.empty()) return masks.front().width;
    return 0;
}

void VolumeMaskSeries::validate() const {
    const int n = slice_count(), h = height(), w = width();
    for (const auto& [name, masks] : organs) {
        if (static_cast<int>(masks.size()) != n) throw ShapeError("organ '" + name + "' has a different slice count");
        for (const auto& m : masks)
            if (m.height != h || m.width != w) throw ShapeError("organ '" + name + "' has inconsistent mask shape");
    }
}

std::map<std::string, OrganExtent> organ_extents(const VolumeMaskSeries& series) {
    std::map<std::string, OrganExtent> out;
    for (const auto& [name, masks] : series.organs) {
        OrganExtent e;
        for (int s = 0; s < static_cast<int>(masks.size()); ++s) {
            const auto area = foreground_count(masks[s]);
            if (!area) continue;
            if (e.onset < 0) e.onset = s;
            e.offset = s;
            if (area > e.peak_area) {
                e.peak_area = area;
                e.peak = s;
            }
        }
        if (e.onset >= 0) out.emplace(name, e);
    }
    return out;
}

namespace {

Mask union_foreground(const VolumeMaskSeries& series, int s) {
    Mask u(series.height(), series.width());
    for (const auto& [name, masks] : series.organs)
        for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] |= masks[s].data[i] ? 1 : 0;
    return u;
}

double mask_iou(const Mask& a, const Mask& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] && b.data[i];
        uni += a.data[i] || b.data[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace

std::vector<int> filter_slices(const VolumeMaskSeries& series, const FilterConfig& cfg) {
    series.validate();
    const int n = series.slice_count();
    if (n == 0) return {};

    const auto extents = organ_extents(series);
    std::set<int> mandatory;
    std::set<std::string> protected_organs;
    const double slice_area = static_cast<double>(series.height()) * series.width();
    for (const auto& [name, e] : extents) {
        mandatory.insert({e.onset, e.peak, e.offset});
        if (static_cast<double>(e.peak_area) < cfg.small_organ_frac * slice_area) protected_organs.insert(name);
    }

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    if (cfg.direction == SweepDirection::backward) std::reverse(order.begin(), order.end());

    std::vector<int> retained;
    std::optional<Mask> last_fg;
    for (int s : order) {
        const Mask fg = union_foreground(series, s);
        bool keep;
        if (mandatory.count(s)) {
            keep = true;
        } else if (empty(fg)) {
            keep = false;
        } else {
            bool has_protected = false;
            for (const auto& name : protected_organs)
                if (!empty(series.organs.at(name)[s])) has_protected = true;
            if (has_protected || !last_fg) {
                keep = true;
            } else {
                const double ref_area = static_cast<double>(foreground_count(*last_fg));
                const double area = static_cast<double>(foreground_count(fg));
                const double rel_change = ref_area > 0 ? std::abs(area - ref_area) / ref_area : 1.0;
                const bool redundant = mask_iou(fg, *last_fg) >= cfg.iou_thr && rel_change <= cfg.area_eps;
                keep = !redundant;
            }
        }
        if (keep) {
            retained.push_back(s);
            last_fg = fg;
        }
    }
    std::sort(retained.begin(), retained.end());
    return retained;
}

VisualPromptSet derive_visual_prompts(const Mask& mask) {
    VisualPromptSet p;
    p.bbox = metrics::tight_region(mask);
    // Round half up on non-negative integers: floor((a + b + 1) / 2).
    p.x_center = (p.bbox.x_min + p.bbox.x_max + 1) / 2;
    p.y_center = (p.bbox.y_min + p.bbox.y_max + 1) / 2;
    return p;
}

GeometryWords describe_geometry(const PixelRegion& bbox, int height, int width) {
    GeometryWords g;
    const double frac = static_cast<double>(bbox.width()) * bbox.height() / (static_cast<double>(height) * width);
    if (frac < 0.01) g.size = "tiny";
    else if (frac < 0.04) g.size = "small";
    else if (frac < 0.12) g.size = "medium";
    else g.size = "large";

    const double lo = std::min(bbox.width(), bbox.height()), hi = std::max(bbox.width(), bbox.height());
    const double aspect = hi / lo;
    if (aspect < 1.3) g.shape = "round";
    else if (aspect < 2.0) g.shape = "oval";
    else g.shape = "elongated";

    const double cx = (bbox.x_min + bbox.x_max + 1) / 2.0 / width;
    const double cy = (bbox.y_min + bbox.y_max + 1) / 2.0 / height;
    const char* vert = cy < 1.0 / 3 ? "upper" : (cy < 2.0 / 3 ? "middle" : "lower");
    const char* horiz = cx < 1.0 / 3 ? "left" : (cx < 2.0 / 3 ? "central" : "right");
    g.location = std::string(vert) + " " + horiz;
    return g;
}

std::string summary_sentence(const std::string& organ, const GeometryWords& g) {
    return "the " + organ + " appears " + g.size + " and " + g.shape + " in the " + g.location + " region";
}

}  // namespace ctreason::curation
