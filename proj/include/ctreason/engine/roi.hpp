#pragma once

#include <cstdint>
#include <string>

#include "ctreason/data.hpp"
#include "ctreason/image.hpp"

namespace ctreason::engine {

struct RoiOptions {
    double margin_frac = 0.1;
    bool square = true;
};

/// Tight foreground rectangle padded by ceil(margin_frac * extent) per side,
/// clipped, then squared by growing the short side (extra split top/left-first,
/// shifted inward at the border, clipped). Throws EmptyMaskError.
PixelRegion build_roi(const Mask& mask, const RoiOptions& opt = {});

struct RoiCrop {
    PixelRegion region;
    ImageGrid image;  ///< resized to the canonical size
    Mask mask;        ///< resized GT mask; empty grid at inference
};

RoiCrop crop(const ImageGrid& image, const Mask* mask, const PixelRegion& region, int out_h, int out_w);

struct Round2Sample {
    RoiCrop crop;
    std::string query;
    std::string answer;  ///< contains exactly one [closer]
};

/// Round-2 pair from the GT mask of one object. The paraphrase is picked from `seed`.
Round2Sample make_round2_sample(const data::MultimodalSample& sample, std::size_t object_index, const RoiOptions& opt,
                                std::uint64_t seed);

/// Nearest-neighbour un-resize of an ROI-space grid into a zero canvas of the source shape.
Mask paste_back(const Mask& roi_mask, const PixelRegion& region, int height, int width);
ProbGrid paste_back(const ProbGrid& roi_prob, const PixelRegion& region, int height, int width);

}  // namespace ctreason::engine
