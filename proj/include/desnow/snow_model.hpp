#pragma once

// Closed-form snow algebra: composition x = a*z + y*(1-z), translucency
// recovery (its inverse where the mask is not opaque) and the final
// y_hat = y' + r combination with inference-time clipping.

#include "desnow/ops.hpp"
#include "desnow/tensor.hpp"

namespace desnow {

enum class Mode { train, infer };

/// Default branch cut for the opaque case of recover_translucency.
inline constexpr double kOpaqueEps = 1e-3;

template <class T>
struct SnowTriplet {
    Tensor<T> x; ///< snowy image, 3 x p x q
    Tensor<T> y; ///< clean image, 3 x p x q
    Tensor<T> z; ///< snow mask, 1 x p x q
    Tensor<T> a; ///< chromatic aberration map, 3 x p x q
};

template <class T>
struct RecoveryOutput {
    Tensor<T> y_prime;
    Tensor<T> r;
    Tensor<T> y_hat;
};

namespace detail {

/// Checks that `mask` is the single-channel companion of `image`.
template <class T>
ChannelLayout mask_layout(const Tensor<T>& image, const Tensor<T>& mask, const char* op)
{
    if (image.rank() != mask.rank())
        throw ShapeError(std::string(op) + ": rank mismatch between image and mask");
    const std::size_t axis = channel_axis(image.rank());
    for (std::size_t d = 0; d < image.rank(); ++d)
        if (d != axis && image.dim(d) != mask.dim(d))
            throw ShapeError(std::string(op) + ": spatial mismatch " + to_string(image.shape()) + " vs " +
                             to_string(mask.shape()));
    if (mask.dim(axis) != 1)
        throw ShapeError(std::string(op) + ": mask must have a single channel");
    return channel_layout(image);
}

} // namespace detail

/// x = a (.) z + y (.) (1 - z), with z broadcast over the colour channels.
template <class T>
Tensor<T> compose(const Tensor<T>& y, const Tensor<T>& z, const Tensor<T>& a)
{
    detail::require_same_shape(y, a, "compose");
    const auto lay = detail::mask_layout(y, z, "compose");
    for (T v : z.values())
        if (!(v >= T(0) && v <= T(1)))
            throw NumericError("compose: mask value outside [0,1]");

    auto x = Tensor<T>::uninitialized(y.shape());
    auto xv = x.mutable_values();
    auto yv = y.values(), zv = z.values(), av = a.values();
    for (std::int64_t o = 0; o < lay.outer; ++o)
        for (std::int64_t c = 0; c < lay.channels; ++c)
            for (std::int64_t i = 0; i < lay.inner; ++i) {
                const auto k = static_cast<std::size_t>((o * lay.channels + c) * lay.inner + i);
                const T m = zv[static_cast<std::size_t>(o * lay.inner + i)];
                xv[k] = av[k] * m + yv[k] * (T(1) - m);
            }

    if (auto* tape = detail::recording_tape<T>({&y, &z, &a})) {
        tape->record(x, [y, z, a, x, lay]() mutable {
            if (!x.has_grad())
                return;
            auto gx = x.grad();
            auto yv = y.values(), zv = z.values(), av = a.values();
            std::span<T> gy, gz, ga;
            if (y.requires_grad())
                gy = y.mutable_grad();
            if (z.requires_grad())
                gz = z.mutable_grad();
            if (a.requires_grad())
                ga = a.mutable_grad();
            for (std::int64_t o = 0; o < lay.outer; ++o)
                for (std::int64_t c = 0; c < lay.channels; ++c)
                    for (std::int64_t i = 0; i < lay.inner; ++i) {
                        const auto k = static_cast<std::size_t>((o * lay.channels + c) * lay.inner + i);
                        const auto m_i = static_cast<std::size_t>(o * lay.inner + i);
                        const T g = gx[k];
                        if (!gy.empty())
                            gy[k] += g * (T(1) - zv[m_i]);
                        if (!ga.empty())
                            ga[k] += g * zv[m_i];
                        if (!gz.empty())
                            gz[m_i] += g * (av[k] - yv[k]);
                    }
        });
    }
    return x;
}

/// Inverts compose where the estimated mask is not opaque:
///   y'_i = (x_i - a_i z_i) / (1 - z_i)   if z_i < 1 - eps
///   y'_i = x_i                           otherwise.
/// The branch selection carries no gradient; the denominator is bounded
/// below by eps.
template <class T>
Tensor<T> recover_translucency(const Tensor<T>& x, const Tensor<T>& z_hat, const Tensor<T>& a,
                               double eps = kOpaqueEps)
{
    if (!(eps > 0))
        throw NumericError("recover_translucency: eps must be positive");
    detail::require_same_shape(x, a, "recover_translucency");
    const auto lay = detail::mask_layout(x, z_hat, "recover_translucency");
    const T cut = static_cast<T>(1.0 - eps);
    const T floor = static_cast<T>(eps);

    auto out = Tensor<T>::uninitialized(x.shape());
    auto ov = out.mutable_values();
    auto xv = x.values(), zv = z_hat.values(), av = a.values();
    // Per mask entry: 0 opaque, 1 divide by 1 - z, 2 divide by eps.
    const auto pick = detail::branches(zv.size());
    std::vector<std::uint8_t> branch(zv.size());
    for (std::size_t i = 0; i < zv.size(); ++i)
        branch[i] = static_cast<std::uint8_t>(
            pick.choose(i, [&] { return zv[i] >= cut ? 0 : T(1) - zv[i] < floor ? 2 : 1; }));
    for (std::int64_t o = 0; o < lay.outer; ++o)
        for (std::int64_t c = 0; c < lay.channels; ++c)
            for (std::int64_t i = 0; i < lay.inner; ++i) {
                const auto k = static_cast<std::size_t>((o * lay.channels + c) * lay.inner + i);
                const auto m_i = static_cast<std::size_t>(o * lay.inner + i);
                const T m = zv[m_i];
                if (branch[m_i] == 0)
                    ov[k] = xv[k];
                else
                    ov[k] = (xv[k] - av[k] * m) / (branch[m_i] == 2 ? floor : T(1) - m);
            }
    detail::check_finite(out, "recover_translucency");

    if (auto* tape = detail::recording_tape<T>({&x, &z_hat, &a})) {
        tape->record(out, [x, z_hat, a, out, lay, floor, branch = std::move(branch)]() mutable {
            if (!out.has_grad())
                return;
            auto go = out.grad();
            auto xv = x.values(), zv = z_hat.values(), av = a.values();
            std::span<T> gx, gz, ga;
            if (x.requires_grad())
                gx = x.mutable_grad();
            if (z_hat.requires_grad())
                gz = z_hat.mutable_grad();
            if (a.requires_grad())
                ga = a.mutable_grad();
            for (std::int64_t o = 0; o < lay.outer; ++o)
                for (std::int64_t c = 0; c < lay.channels; ++c)
                    for (std::int64_t i = 0; i < lay.inner; ++i) {
                        const auto k = static_cast<std::size_t>((o * lay.channels + c) * lay.inner + i);
                        const auto m_i = static_cast<std::size_t>(o * lay.inner + i);
                        const T g = go[k];
                        const T m = zv[m_i];
                        if (branch[m_i] == 0) {
                            if (!gx.empty())
                                gx[k] += g;
                            continue;
                        }
                        const bool floored = branch[m_i] == 2;
                        const T denom = floored ? floor : T(1) - m;
                        if (!gx.empty())
                            gx[k] += g / denom;
                        if (!ga.empty())
                            ga[k] -= g * m / denom;
                        if (!gz.empty()) {
                            // d/dz of (x - a z)/(1 - z) is (x - a)/(1 - z)^2
                            gz[m_i] += floored ? -g * av[k] / denom
                                               : g * (xv[k] - av[k]) / (denom * denom);
                        }
                    }
        });
    }
    return out;
}

/// y_hat = y' + r; clipped to [0,1] in inference mode only.
template <class T>
Tensor<T> combine(const Tensor<T>& y_prime, const Tensor<T>& r, Mode mode)
{
    detail::require_same_shape(y_prime, r, "combine");
    auto sum = y_prime + r;
    if (mode == Mode::train)
        return sum;
    return clamp(sum, T(0), T(1));
}

} // namespace desnow
