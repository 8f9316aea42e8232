#include "ctreason/box.hpp"

#include <algorithm>
#include <cmath>

namespace ctreason {

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0) return a == b ? 1.0 : 0.0;
    return inter / uni;
}

Box normalize(const PixelRegion& r, int height, int width) {
    return Box{static_cast<double>(r.x_min) / width, static_cast<double>(r.y_min) / height,
               static_cast<double>(r.x_max + 1) / width, static_cast<double>(r.y_max + 1) / height};
}

PixelRegion to_pixels(const Box& b, int height, int width) {
    auto clampi = [](long v, int hi) { return static_cast<int>(std::clamp<long>(v, 0, hi)); };
    PixelRegion r;
    r.x_min = clampi(std::lround(b.x_min * width), width - 1);
    r.y_min = clampi(std::lround(b.y_min * height), height - 1);
    r.x_max = clampi(std::lround(b.x_max * width) - 1, width - 1);
    r.y_max = clampi(std::lround(b.y_max * height) - 1, height - 1);
    r.x_max = std::max(r.x_max, r.x_min);
    r.y_max = std::max(r.y_max, r.y_min);
    return r;
}

}  // namespace ctreason
