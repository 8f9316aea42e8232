#include "ctreason/engine/roi.hpp"

#include <algorithm>
#include <cmath>

#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/templates.hpp"

namespace ctreason::engine {

namespace {

// Guards against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
int margin_pixels(double frac, int extent) { return static_cast<int>(std::ceil(frac * extent - 1e-9)); }

/// Grows [lo, hi] to `len` pixels inside [0, limit), first-half before, shifting at borders.
void grow_axis(int& lo, int& hi, int len, int limit) {
    len = std::min(len, limit);
    const int extra = len - (hi - lo + 1);
    if (extra <= 0) return;
    lo -= (extra + 1) / 2;
    hi += extra / 2;
    if (lo < 0) {
        hi += -lo;
        lo = 0;
    }
    if (hi > limit - 1) {
        lo -= hi - (limit - 1);
        hi = limit - 1;
    }
    lo = std::max(lo, 0);
}

}  // namespace

PixelRegion build_roi(const Mask& mask, const RoiOptions& opt) {
    if (opt.margin_frac < 0) throw ConfigError("margin_frac must be nonnegative");
    PixelRegion r = metrics::tight_region(mask);
    const int mx = margin_pixels(opt.margin_frac, r.width());
    const int my = margin_pixels(opt.margin_frac, r.height());
    r.x_min = std::max(0, r.x_min - mx);
    r.x_max = std::min(mask.width - 1, r.x_max + mx);
    r.y_min = std::max(0, r.y_min - my);
    r.y_max = std::min(mask.height - 1, r.y_max + my);
    if (opt.square) {
        const int side = std::max(r.width(), r.height());
        grow_axis(r.x_min, r.x_max, side, mask.width);
        grow_axis(r.y_min, r.y_max, side, mask.height);
    }
    return r;
}

RoiCrop crop(const ImageGrid& image, const Mask* mask, const PixelRegion& region, int out_h, int out_w) {
    RoiCrop c;
    c.region = region;
    c.image = resize_bilinear(image, region, out_h, out_w);
    if (mask) {
        if (mask->height != image.height || mask->width != image.width) throw ShapeError("crop: mask/image shape mismatch");
        c.mask = resize_nearest(*mask, region, out_h, out_w);
    }
    return c;
}

Round2Sample make_round2_sample(const data::MultimodalSample& sample, std::size_t object_index, const RoiOptions& opt,
                                std::uint64_t seed) {
    if (object_index >= sample.objects.size()) throw RangeError("object index out of range");
    const auto& obj = sample.objects[object_index];
    if (empty(obj.mask)) throw EmptyMaskError("object '" + obj.organ + "' has an empty mask");
    Round2Sample out;
    const auto region = build_roi(obj.mask, opt);
    out.crop = crop(sample.image, &obj.mask, region, sample.image.height, sample.image.width);
    const auto& queries = templates::round2_queries();
    out.query = templates::fill(queries[templates::pick(seed, queries.size())], obj.organ);
    out.answer = templates::round2_answer(obj.organ);
    return out;
}

namespace {

template <typename T>
Grid<T> paste(const Grid<T>& roi, const PixelRegion& region, int height, int width) {
    if (region.x_min < 0 || region.y_min < 0 || region.x_max >= width || region.y_max >= height ||
        region.width() <= 0 || region.height() <= 0)
        throw ShapeError("paste_back: region outside the source shape");
    if (roi.height <= 0 || roi.width <= 0) throw ShapeError("paste_back: empty ROI grid");
    Grid<T> out(height, width);
    for (int y = region.y_min; y <= region.y_max; ++y) {
        const int oy = std::min(roi.height - 1,
                                static_cast<int>(std::floor((y - region.y_min + 0.5) * roi.height / region.height())));
        for (int x = region.x_min; x <= region.x_max; ++x) {
            const int ox = std::min(
                roi.width - 1, static_cast<int>(std::floor((x - region.x_min + 0.5) * roi.width / region.width())));
            out(y, x) = roi(oy, ox);
        }
    }
    return out;
}

}  // namespace

Mask paste_back(const Mask& roi_mask, const PixelRegion& region, int height, int width) {
    return paste(roi_mask, region, height, width);
}

ProbGrid paste_back(const ProbGrid& roi_prob, const PixelRegion& region, int height, int width) {
    return paste(roi_prob, region, height, width);
}

}  // namespace ctreason::engine
