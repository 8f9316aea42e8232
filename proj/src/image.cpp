#include "ctreason/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include <png.h>

namespace ctreason {

std::size_t foreground_count(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

bool empty(const Mask& m) { return foreground_count(m) == 0; }

Mask threshold(const ProbGrid& prob, float theta) {
    Mask out(prob.height, prob.width);
    for (std::size_t i = 0; i < prob.data.size(); ++i) out.data[i] = prob.data[i] >= theta ? 1 : 0;
    return out;
}

namespace {

void check_region(int h, int w, const PixelRegion& r) {
    if (r.x_min < 0 || r.y_min < 0 || r.x_max >= w || r.y_max >= h || r.x_min > r.x_max || r.y_min > r.y_max)
        throw ShapeError("region outside image bounds");
}

}  // namespace

ImageGrid resize_bilinear(const ImageGrid& src, const PixelRegion& region, int out_h, int out_w) {
    check_region(src.height, src.width, region);
    ImageGrid out(out_h, out_w);
    const double sy = static_cast<double>(region.height()) / out_h;
    const double sx = static_cast<double>(region.width()) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(region.height() - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, region.height() - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(region.width() - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, region.width() - 1);
            const double wx = fx - x0;
            const double a = src(region.y_min + y0, region.x_min + x0);
            const double b = src(region.y_min + y0, region.x_min + x1);
            const double c = src(region.y_min + y1, region.x_min + x0);
            const double d = src(region.y_min + y1, region.x_min + x1);
            out(oy, ox) = static_cast<float>((1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d));
        }
    }
    return out;
}

Mask resize_nearest(const Mask& src, const PixelRegion& region, int out_h, int out_w) {
    check_region(src.height, src.width, region);
    Mask out(out_h, out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        const int y = std::min(region.height() - 1,
                               static_cast<int>(std::floor((oy + 0.5) * region.height() / out_h)));
        for (int ox = 0; ox < out_w; ++ox) {
            const int x = std::min(region.width() - 1,
                                   static_cast<int>(std::floor((ox + 0.5) * region.width() / out_w)));
            out(oy, ox) = src(region.y_min + y, region.x_min + x);
        }
    }
    return out;
}

ImageGrid window(const Grid<std::uint16_t>& raw, double lo, double hi) {
    if (!(hi > lo)) throw ConfigError("window upper bound must exceed lower bound");
    ImageGrid out(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.data.size(); ++i)
        out.data[i] = static_cast<float>(std::clamp((raw.data[i] - lo) / (hi - lo), 0.0, 1.0));
    return out;
}

ImageGrid window_minmax(const Grid<std::uint16_t>& raw) {
    if (raw.data.empty()) return ImageGrid(raw.height, raw.width);
    const auto [lo, hi] = std::minmax_element(raw.data.begin(), raw.data.end());
    if (*lo == *hi) return ImageGrid(raw.height, raw.width);
    return window(raw, *lo, *hi);
}

namespace png {

namespace {

struct WriteBuffer {
    std::vector<std::uint8_t> bytes;
};

void write_cb(png_structp p, png_bytep data, png_size_t len) {
    auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(p));
    buf->bytes.insert(buf->bytes.end(), data, data + len);
}

void flush_cb(png_structp) {}

struct ErrorSlot {
    char message[256] = {0};
};

void error_cb(png_structp p, png_const_charp msg) {
    if (auto* slot = static_cast<ErrorSlot*>(png_get_error_ptr(p))) {
        std::strncpy(slot->message, msg ? msg : "unknown", sizeof(slot->message) - 1);
    }
    png_longjmp(p, 1);
}

void warn_cb(png_structp, png_const_charp) {}

// Only trivially destructible state is live between setjmp and a possible longjmp.
bool encode_raw(int height, int width, int color_type, int bit_depth, const std::uint8_t* packed,
                std::size_t row_bytes, WriteBuffer* buf, ErrorSlot* err) {
    png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, error_cb, warn_cb);
    if (!p) return false;
    png_infop info = png_create_info_struct(p);
    if (!info || setjmp(png_jmpbuf(p))) {
        png_destroy_write_struct(&p, &info);
        return false;
    }
    png_set_write_fn(p, buf, write_cb, flush_cb);
    png_set_compression_level(p, 6);
    png_set_IHDR(p, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(p, info);
    for (int y = 0; y < height; ++y)
        png_write_row(p, const_cast<png_bytep>(packed + static_cast<std::size_t>(y) * row_bytes));
    png_write_end(p, nullptr);
    png_destroy_write_struct(&p, &info);
    return true;
}

std::vector<std::uint8_t> encode_rows(int height, int width, int color_type, int bit_depth,
                                      const std::vector<std::uint8_t>& packed, std::size_t row_bytes) {
    WriteBuffer buf;
    ErrorSlot err;
    if (!encode_raw(height, width, color_type, bit_depth, packed.data(), row_bytes, &buf, &err))
        throw IoError(std::string("png encode: ") + err.message);
    return std::move(buf.bytes);
}

struct ReadBuffer {
    const std::uint8_t* bytes = nullptr;
    std::size_t size = 0;
    std::size_t offset = 0;
};

void read_cb(png_structp p, png_bytep out, png_size_t len) {
    auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(p));
    if (buf->offset + len > buf->size) png_error(p, "truncated stream");
    std::memcpy(out, buf->bytes + buf->offset, len);
    buf->offset += len;
}

struct Header {
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::size_t row_bytes = 0;
};

// Two passes: the first reads the header, the second decodes into a preallocated buffer.
bool decode_raw(ReadBuffer* in, Header* hdr, std::uint8_t* pixels, ErrorSlot* err) {
    in->offset = 0;
    png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, error_cb, warn_cb);
    if (!p) return false;
    png_infop info = png_create_info_struct(p);
    if (!info || setjmp(png_jmpbuf(p))) {
        png_destroy_read_struct(&p, &info, nullptr);
        return false;
    }
    png_set_read_fn(p, in, read_cb);
    png_read_info(p, info);
    const int color = png_get_color_type(p, info);
    const int depth = png_get_bit_depth(p, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(p);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(p);
    if (png_get_valid(p, info, PNG_INFO_tRNS)) png_set_strip_alpha(p);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(p);
    png_read_update_info(p, info);
    hdr->width = static_cast<int>(png_get_image_width(p, info));
    hdr->height = static_cast<int>(png_get_image_height(p, info));
    hdr->channels = png_get_channels(p, info);
    hdr->bit_depth = png_get_bit_depth(p, info);
    hdr->row_bytes = png_get_rowbytes(p, info);
    if (pixels) {
        for (int y = 0; y < hdr->height; ++y) png_read_row(p, pixels + static_cast<std::size_t>(y) * hdr->row_bytes, nullptr);
        png_read_end(p, nullptr);
    }
    png_destroy_read_struct(&p, &info, nullptr);
    return true;
}

}  // namespace

std::vector<std::uint8_t> encode_gray16(const Grid<std::uint16_t>& img) {
    std::vector<std::uint8_t> packed(img.data.size() * 2);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        packed[2 * i] = static_cast<std::uint8_t>(img.data[i] >> 8);
        packed[2 * i + 1] = static_cast<std::uint8_t>(img.data[i] & 0xff);
    }
    return encode_rows(img.height, img.width, PNG_COLOR_TYPE_GRAY, 16, packed,
                       static_cast<std::size_t>(img.width) * 2);
}

std::vector<std::uint8_t> encode_gray8(const Grid<std::uint8_t>& img) {
    return encode_rows(img.height, img.width, PNG_COLOR_TYPE_GRAY, 8, img.data, static_cast<std::size_t>(img.width));
}

std::vector<std::uint8_t> encode_rgb8(int height, int width, std::span<const std::uint8_t> rgb) {
    if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("rgb buffer size mismatch");
    return encode_rows(height, width, PNG_COLOR_TYPE_RGB, 8, std::vector<std::uint8_t>(rgb.begin(), rgb.end()),
                       static_cast<std::size_t>(width) * 3);
}

Decoded decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("png: bad signature");
    ReadBuffer in{bytes.data(), bytes.size(), 0};
    Header hdr;
    ErrorSlot err;
    if (!decode_raw(&in, &hdr, nullptr, &err)) throw IoError(std::string("png decode: ") + err.message);
    std::vector<std::uint8_t> pixels(hdr.row_bytes * static_cast<std::size_t>(hdr.height));
    if (!decode_raw(&in, &hdr, pixels.data(), &err)) throw IoError(std::string("png decode: ") + err.message);

    Decoded out;
    out.width = hdr.width;
    out.height = hdr.height;
    out.channels = hdr.channels;
    out.bit_depth = hdr.bit_depth;
    const std::size_t per_row = static_cast<std::size_t>(out.width) * out.channels;
    out.samples.resize(per_row * out.height);
    for (int y = 0; y < out.height; ++y) {
        const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * hdr.row_bytes;
        for (std::size_t i = 0; i < per_row; ++i)
            out.samples[y * per_row + i] =
                out.bit_depth == 16 ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
    }
    return out;
}

namespace {

Decoded decode_gray(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    auto d = decode(bytes);
    if (d.channels != 1) throw IoError("png: expected grayscale image " + path.string());
    return d;
}

}  // namespace

Grid<std::uint16_t> read_gray16(const std::filesystem::path& path) {
    auto d = decode_gray(path);
    Grid<std::uint16_t> g(d.height, d.width);
    g.data = std::move(d.samples);
    return g;
}

Grid<std::uint8_t> read_gray8(const std::filesystem::path& path) {
    auto d = decode_gray(path);
    if (d.bit_depth != 8) throw IoError("png: expected 8-bit image " + path.string());
    Grid<std::uint8_t> g(d.height, d.width);
    std::transform(d.samples.begin(), d.samples.end(), g.data.begin(),
                   [](std::uint16_t v) { return static_cast<std::uint8_t>(v); });
    return g;
}

Mask read_mask8(const std::filesystem::path& path) {
    auto g = read_gray8(path);
    for (auto& v : g.data) v = v ? 1 : 0;
    return g;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace png

}  // namespace ctreason
