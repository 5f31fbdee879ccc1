#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "compatfam/tensor.hpp"

namespace compatfam {

/// Binary PGM (P5, maxval 255). Values clipped to [0,1] then quantized.
inline void write_pgm(const double* px, std::int64_t h, std::int64_t w, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < h * w; ++i)
        buf[static_cast<std::size_t>(i)] =
            static_cast<unsigned char>(std::lround(std::clamp(px[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("failed writing " + path);
}

/// Tile `rows` [n, h*w] samples into a cols-wide grid with 1px separators.
inline void write_pgm_grid(const Tensor& samples, std::int64_t h, std::int64_t w,
                           std::int64_t grid_cols, const std::string& path) {
    const std::int64_t n = samples.rows();
    if (samples.cols() != h * w) throw ShapeError("pgm grid: sample dim != h*w");
    const std::int64_t gc = std::max<std::int64_t>(1, grid_cols);
    const std::int64_t gr = (n + gc - 1) / gc;
    const std::int64_t H = gr * (h + 1) - 1, W = gc * (w + 1) - 1;
    std::vector<double> canvas(static_cast<std::size_t>(H * W), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t r0 = (i / gc) * (h + 1), c0 = (i % gc) * (w + 1);
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c)
                canvas[static_cast<std::size_t>((r0 + r) * W + c0 + c)] = samples.at(i, r * w + c);
    }
    write_pgm(canvas.data(), H, W, path);
}

}  // namespace compatfam
