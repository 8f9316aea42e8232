#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctreason/errors.hpp"

namespace ctreason {

/// Row-major dense 2-D grid.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    T& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }
    std::size_t size() const { return data.size(); }
    bool operator==(const Grid&) const = default;
};

/// Intensities in [0,1] after windowing.
using ImageGrid = Grid<float>;
/// Binary {0,1} mask.
using Mask = Grid<std::uint8_t>;
/// Per-pixel probabilities in [0,1].
using ProbGrid = Grid<float>;

std::size_t foreground_count(const Mask& m);
bool empty(const Mask& m);
Mask threshold(const ProbGrid& prob, float theta);

template <typename T>
void require_same_shape(const Grid<T>& a, const Grid<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
}

/// Inclusive pixel rectangle.
struct PixelRegion {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    int width() const { return x_max - x_min + 1; }
    int height() const { return y_max - y_min + 1; }
    bool operator==(const PixelRegion&) const = default;
};

/// Half-pixel-centred bilinear resampling of a region into an out_h x out_w grid.
ImageGrid resize_bilinear(const ImageGrid& src, const PixelRegion& region, int out_h, int out_w);
/// Nearest-neighbour resampling of a region (same sampling grid as resize_bilinear).
Mask resize_nearest(const Mask& src, const PixelRegion& region, int out_h, int out_w);

/// Linear window mapping [lo, hi] to [0, 1] with clamping.
ImageGrid window(const Grid<std::uint16_t>& raw, double lo, double hi);
/// Per-slice min-max window; a constant slice maps to zeros.
ImageGrid window_minmax(const Grid<std::uint16_t>& raw);

namespace png {

Grid<std::uint16_t> read_gray16(const std::filesystem::path& path);
Mask read_mask8(const std::filesystem::path& path);  ///< nonzero -> 1
Grid<std::uint8_t> read_gray8(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_gray16(const Grid<std::uint16_t>& img);
std::vector<std::uint8_t> encode_gray8(const Grid<std::uint8_t>& img);
/// Interleaved RGB, 3 bytes per pixel.
std::vector<std::uint8_t> encode_rgb8(int height, int width, std::span<const std::uint8_t> rgb);

struct Decoded {
    int height = 0, width = 0, channels = 0, bit_depth = 0;
    std::vector<std::uint16_t> samples;  ///< channel-interleaved
};
Decoded decode(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace png

}  // namespace ctreason
