#pragma once

// Full-reference image quality: PSNR and windowed SSIM on [0,1] images.

#include "desnow/tensor.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace desnow {

/// Returned by psnr for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) over every element. Peak value is 1.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape(a, b, "psnr");
    if (a.numel() == 0)
        throw ShapeError("psnr: empty input");
    auto av = a.values(), bv = b.values();
    double se = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(av.size());
    if (mse == 0)
        return kPsnrIdentical;
    return -10.0 * std::log10(mse);
}

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma)
{
    std::vector<double> g(static_cast<std::size_t>(size));
    const double centre = (size - 1) / 2.0;
    for (int i = 0; i < size; ++i)
        g[static_cast<std::size_t>(i)] = std::exp(-(i - centre) * (i - centre) / (2 * sigma * sigma));
    const double total = std::accumulate(g.begin(), g.end(), 0.0);
    for (auto& v : g)
        v /= total;
    return g;
}

/// Separable valid-mode filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::int64_t h, std::int64_t w,
                                        const std::vector<double>& k)
{
    const auto n = static_cast<std::int64_t>(k.size());
    const std::int64_t ow = w - n + 1, oh = h - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h * ow));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
            double s = 0;
            for (std::int64_t i = 0; i < n; ++i)
                s += k[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y * w + x + i)];
            tmp[static_cast<std::size_t>(y * ow + x)] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
            double s = 0;
            for (std::int64_t i = 0; i < n; ++i)
                s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>((y + i) * ow + x)];
            out[static_cast<std::size_t>(y * ow + x)] = s;
        }
    return out;
}

inline double ssim_term(double mx, double my, double vx, double vy, double cxy, const SsimParams& p)
{
    return ((2 * mx * my + p.c1) * (2 * cxy + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
}

/// SSIM of one plane. Planes smaller than the window use whole-plane
/// statistics as a single window.
inline double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, std::int64_t h, std::int64_t w,
                         const SsimParams& p)
{
    if (h < p.window || w < p.window) {
        const double n = static_cast<double>(x.size());
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        double vx = 0, vy = 0, cxy = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
            cxy += (x[i] - mx) * (y[i] - my);
        }
        return ssim_term(mx, my, vx / n, vy / n, cxy / n, p);
    }
    const auto k = gaussian_window(p.window, p.sigma);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k), sxy = filter_valid(xy, h, w, k);
    double total = 0;
    for (std::size_t i = 0; i < mx.size(); ++i)
        total += ssim_term(mx[i], my[i], sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i], p);
    return total / static_cast<double>(mx.size());
}

} // namespace detail

/// Mean SSIM over valid windows, computed per channel and averaged. Accepts
/// C x H x W or H x W tensors.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& params = {})
{
    detail::require_same_shape(a, b, "ssim");
    if (a.rank() != 2 && a.rank() != 3)
        throw ShapeError("ssim: expected HxW or CxHxW, got " + to_string(a.shape()));
    const std::int64_t c = a.rank() == 3 ? a.dim(0) : 1;
    const std::int64_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
    if (a.numel() == 0)
        throw ShapeError("ssim: empty input");
    const auto plane = static_cast<std::size_t>(h * w);
    auto av = a.values(), bv = b.values();
    double total = 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto off = static_cast<std::size_t>(ch) * plane;
        std::vector<double> x(plane), y(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            x[i] = static_cast<double>(av[off + i]);
            y[i] = static_cast<double>(bv[off + i]);
        }
        total += detail::ssim_plane(x, y, h, w, params);
    }
    return total / static_cast<double>(c);
}

struct ScoreRow {
    std::string image_id;
    double psnr_y = 0, ssim_y = 0, psnr_z = 0, ssim_z = 0;
    double psnr_x = 0, ssim_x = 0, psnr_z0 = 0, ssim_z0 = 0;
};

/// Per-image scores plus their arithmetic means.
struct ScoreReport {
    std::vector<ScoreRow> rows;

    ScoreRow mean() const
    {
        ScoreRow m;
        m.image_id = "mean";
        if (rows.empty())
            return m;
        constexpr std::array fields{&ScoreRow::psnr_y, &ScoreRow::ssim_y, &ScoreRow::psnr_z, &ScoreRow::ssim_z,
                                    &ScoreRow::psnr_x, &ScoreRow::ssim_x, &ScoreRow::psnr_z0, &ScoreRow::ssim_z0};
        for (auto f : fields) {
            double s = 0;
            for (const auto& r : rows)
                s += r.*f;
            m.*f = s / static_cast<double>(rows.size());
        }
        return m;
    }
};

} // namespace desnow
