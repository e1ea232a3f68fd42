#pragma once

// 8-bit RGB images as [3,H,W] float tensors in [0,1]. Binary PPM (P6) is the baseline
// raster format; P5 (grayscale PGM) is read and replicated to three channels.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lmk/error.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

namespace detail {
inline std::size_t read_header_int(std::istream& in, const std::string& path) {
    int c = in.peek();
    while (in && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else {
            in.get();
        }
        c = in.peek();
    }
    std::size_t v = 0;
    if (!(in >> v)) throw FormatError("bad PNM header in " + path);
    return v;
}
} // namespace detail

inline Tensor read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6" && magic != "P5") throw FormatError(path.string() + ": only binary PPM (P6) / PGM (P5) supported");
    const std::size_t w = detail::read_header_int(in, path.string());
    const std::size_t h = detail::read_header_int(in, path.string());
    const std::size_t maxval = detail::read_header_int(in, path.string());
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError(path.string() + ": unsupported PNM geometry");
    in.get();  // single whitespace before raster
    const std::size_t channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raster(w * h * channels);
    in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
    if (in.gcount() != static_cast<std::streamsize>(raster.size())) throw FormatError(path.string() + ": truncated raster");
    Tensor img(Shape{3, h, w});
    auto v = img.mutable_values();
    const float scale = 1.0f / static_cast<float>(maxval);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                v[(c * h + y) * w + x] = raster[(y * w + x) * channels + (channels == 3 ? c : 0)] * scale;
    return img;
}

inline void write_ppm(const Tensor& image, const std::filesystem::path& path) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects [3,H,W]");
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raster(w * h * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
                raster[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace lmk
