#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "ctreason/image.hpp"
#include "ctreason/rng.hpp"

namespace testsupport {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ctreason_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Filled ellipse with random centre and radii, clipped to the grid; never empty.
inline ctreason::Mask random_blob(ctreason::Rng& rng, int h, int w, double rmin = 1.5, double rmax = 10) {
    ctreason::Mask m(h, w);
    const double cy = rng.uniform(0, h - 1), cx = rng.uniform(0, w - 1);
    const double ry = rng.uniform(rmin, rmax), rx = rng.uniform(rmin, rmax);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = (y - cy) / ry, dx = (x - cx) / rx;
            if (dy * dy + dx * dx <= 1.0) m(y, x) = 1;
        }
    m(static_cast<int>(cy + 0.5) < h ? static_cast<int>(cy + 0.5) : h - 1,
      static_cast<int>(cx + 0.5) < w ? static_cast<int>(cx + 0.5) : w - 1) = 1;
    return m;
}

inline ctreason::Mask rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
    ctreason::Mask m(h, w);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m(y, x) = 1;
    return m;
}

}  // namespace testsupport
