#pragma once

#include "ctreason/image.hpp"

namespace ctreason {

/// Corner-format box, normalised to [0,1] when produced by the detection head.
struct Box {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool valid() const { return x_min <= x_max && y_min <= y_max; }
    bool operator==(const Box&) const = default;
};

struct BoxHypothesis {
    Box box;
    double score = 0;  ///< objectness in [0,1]
};

double iou(const Box& a, const Box& b);

/// Inclusive pixel rectangle -> normalised box covering whole pixels.
Box normalize(const PixelRegion& r, int height, int width);
/// Inverse of normalize for boxes aligned to the pixel grid; rounds otherwise.
PixelRegion to_pixels(const Box& b, int height, int width);

}  // namespace ctreason
