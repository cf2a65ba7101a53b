#pragma once

// 8-bit RGB PNG <-> 3 x H x W float tensors in [0,1].

#include "desnow/tensor.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace desnow {

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Rounds every value to the nearest multiple of 1/255 after clamping to [0,1].
template <class T>
Tensor<T> quantize_u8(const Tensor<T>& t)
{
    auto out = Tensor<T>::uninitialized(t.shape());
    auto ov = out.mutable_values();
    auto tv = t.values();
    for (std::size_t i = 0; i < tv.size(); ++i)
        ov[i] = static_cast<T>(to_u8(static_cast<double>(tv[i]))) / T(255);
    return out;
}

/// Reads any PNG libpng understands, converted to RGB.
template <class T = float>
Tensor<T> read_png(const std::filesystem::path& path)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw FormatError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    const std::int64_t h = img.height, w = img.width;
    Tensor<T> out(Shape{3, h, w});
    auto ov = out.mutable_values();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c)
                ov[static_cast<std::size_t>((c * h + y) * w + x)] =
                    static_cast<T>(pixels[static_cast<std::size_t>((y * w + x) * 3 + c)]) / T(255);
    return out;
}

/// Writes a 3 x H x W (or 1 x H x W, stored as gray RGB) tensor, clamped to
/// [0,1] and rounded to 8 bits.
template <class T>
void write_png(const std::filesystem::path& path, const Tensor<T>& image)
{
    if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
        throw ShapeError("write_png: expected 3xHxW or 1xHxW, got " + to_string(image.shape()));
    const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(h * w * 3));
    auto iv = image.values();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t k = 0; k < 3; ++k) {
                const std::int64_t src = c == 3 ? k : 0;
                pixels[static_cast<std::size_t>((y * w + x) * 3 + k)] =
                    to_u8(static_cast<double>(iv[static_cast<std::size_t>((src * h + y) * w + x)]));
            }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, pixels.data(), 0, nullptr))
        throw Error("cannot write PNG " + path.string() + ": " + img.message);
}

/// Box-filter downscale so that max(H, W) <= max_side; smaller images are
/// returned unchanged. Each output pixel averages the input area it covers,
/// with fractional edge weights.
template <class T>
Tensor<T> limit_size(const Tensor<T>& image, std::int64_t max_side)
{
    if (image.rank() != 3)
        throw ShapeError("limit_size: expected CxHxW");
    const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (std::max(h, w) <= max_side)
        return image.clone();
    const double scale = static_cast<double>(max_side) / static_cast<double>(std::max(h, w));
    const std::int64_t oh = std::max<std::int64_t>(1, std::lround(h * scale));
    const std::int64_t ow = std::max<std::int64_t>(1, std::lround(w * scale));

    // Weights of input index i in output index o along one axis.
    auto axis_weights = [](std::int64_t in, std::int64_t out) {
        std::vector<std::vector<std::pair<std::int64_t, double>>> wts(static_cast<std::size_t>(out));
        const double step = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t o = 0; o < out; ++o) {
            const double lo = o * step, hi = (o + 1) * step;
            for (auto i = static_cast<std::int64_t>(std::floor(lo)); i < std::min<double>(in, std::ceil(hi)); ++i) {
                const double cover = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
                if (cover > 0)
                    wts[static_cast<std::size_t>(o)].push_back({i, cover / step});
            }
        }
        return wts;
    };
    const auto wy = axis_weights(h, oh), wx = axis_weights(w, ow);
    Tensor<T> out(Shape{c, oh, ow});
    auto ov = out.mutable_values();
    auto iv = image.values();
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t x = 0; x < ow; ++x) {
                double s = 0;
                for (auto [iy, fy] : wy[static_cast<std::size_t>(y)])
                    for (auto [ix, fx] : wx[static_cast<std::size_t>(x)])
                        s += fy * fx * static_cast<double>(iv[static_cast<std::size_t>((ch * h + iy) * w + ix)]);
                ov[static_cast<std::size_t>((ch * oh + y) * ow + x)] = static_cast<T>(s);
            }
    return out;
}

} // namespace desnow
