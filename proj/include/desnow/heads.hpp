#pragma once

// Recovery heads: pyramid maxout for snow-mask (SE) and aberration (AE)
// estimation, the f_c assembly, and the pyramid-sum residual head (RG).

#include "desnow/descriptor.hpp"
#include "desnow/ops.hpp"
#include "desnow/weights.hpp"

namespace desnow {

struct HeadConfig {
    int beta = 4; ///< kernels 1, 3, ..., 2*beta-1

    void validate() const
    {
        if (beta < 1)
            throw Error("head config: beta must be >= 1");
    }
};

inline constexpr int kMaskChannels = 1;
inline constexpr int kColorChannels = 3;
inline constexpr int kFcChannels = 7;

namespace detail {

inline std::string kernel_name(const std::string& head, int k) { return head + ".k" + std::to_string(k); }

/// Kernels of 5 and up are factorised into 1xk followed by kx1.
inline bool separable(int k) { return k >= 5; }

template <class T>
void register_pyramid(ModelWeights<T>& w, const std::string& head, int in_ch, int out_ch, const HeadConfig& cfg)
{
    cfg.validate();
    if (out_ch <= 0)
        throw Error("head " + head + ": out_ch must be positive");
    for (int n = 1; n <= cfg.beta; ++n) {
        const int k = 2 * n - 1;
        const auto base = kernel_name(head, k);
        if (separable(k)) {
            add_conv(w, base + "_1x" + std::to_string(k), out_ch, in_ch, 1, k);
            add_conv(w, base + "_" + std::to_string(k) + "x1", out_ch, out_ch, k, 1);
        } else {
            add_conv(w, base, out_ch, in_ch, k, k);
        }
    }
}

template <class T>
Tensor<T> pyramid_branch(const Tensor<T>& f, const ModelWeights<T>& w, const std::string& head, int k)
{
    const auto base = kernel_name(head, k);
    if (!separable(k))
        return apply_conv(f, w, base);
    return apply_conv(apply_conv(f, w, base + "_1x" + std::to_string(k)), w,
                      base + "_" + std::to_string(k) + "x1");
}

template <class T>
std::vector<Tensor<T>> pyramid_branches(const Tensor<T>& f, const ModelWeights<T>& w, const std::string& head,
                                        const HeadConfig& cfg)
{
    cfg.validate();
    std::vector<Tensor<T>> out;
    for (int n = 1; n <= cfg.beta; ++n)
        out.push_back(pyramid_branch(f, w, head, 2 * n - 1));
    return out;
}

} // namespace detail

/// Registers SE, AE (with their PReLU slopes) and RG parameters.
template <class T>
void register_heads(ModelWeights<T>& w, int ft_channels, int fr_channels, const HeadConfig& cfg)
{
    detail::register_pyramid(w, "se", ft_channels, kMaskChannels, cfg);
    w.add("se.prelu.slope", Shape{kMaskChannels});
    detail::register_pyramid(w, "ae", ft_channels, kColorChannels, cfg);
    w.add("ae.prelu.slope", Shape{kColorChannels});
    detail::register_pyramid(w, "rg", fr_channels, kColorChannels, cfg);
}

/// Elementwise max over the kernel pyramid of head `head`. Ties resolve to
/// the smallest kernel, which is also where the gradient is routed.
template <class T>
Tensor<T> pyramid_maxout(const Tensor<T>& f, const ModelWeights<T>& w, const std::string& head,
                         const HeadConfig& cfg)
{
    auto branches = detail::pyramid_branches(f, w, head, cfg);
    Tensor<T> out = branches.front();
    for (std::size_t i = 1; i < branches.size(); ++i)
        out = maximum(out, branches[i]);
    return out;
}

/// Elementwise sum over the kernel pyramid of head `head`.
template <class T>
Tensor<T> pyramid_sum(const Tensor<T>& f, const ModelWeights<T>& w, const std::string& head, const HeadConfig& cfg)
{
    auto branches = detail::pyramid_branches(f, w, head, cfg);
    Tensor<T> out = branches.front();
    for (std::size_t i = 1; i < branches.size(); ++i)
        out = out + branches[i];
    return out;
}

/// Snow mask estimate in [0,1]: maxout -> PReLU -> clamp.
template <class T>
Tensor<T> se_head(const Tensor<T>& f_t, const ModelWeights<T>& w, const HeadConfig& cfg)
{
    return clamp(prelu(pyramid_maxout(f_t, w, "se", cfg), w.at("se.prelu.slope")), T(0), T(1));
}

/// Chromatic aberration map: maxout -> PReLU, left unbounded.
template <class T>
Tensor<T> ae_head(const Tensor<T>& f_t, const ModelWeights<T>& w, const HeadConfig& cfg)
{
    return prelu(pyramid_maxout(f_t, w, "ae", cfg), w.at("ae.prelu.slope"));
}

/// f_c = y' || z_hat || a; channels 0-2 are y', 3 is z_hat, 4-6 are a.
template <class T>
Tensor<T> build_fc(const Tensor<T>& y_prime, const Tensor<T>& z_hat, const Tensor<T>& a)
{
    const std::size_t axis = detail::channel_axis(y_prime.rank());
    if (y_prime.dim(axis) != kColorChannels || z_hat.dim(axis) != kMaskChannels || a.dim(axis) != kColorChannels)
        throw ShapeError("build_fc: expected 3 + 1 + 3 channels");
    return concat_channels<T>({y_prime, z_hat, a});
}

/// Residual r: unbounded pyramid sum over f_r.
template <class T>
Tensor<T> residual_head(const Tensor<T>& f_r, const ModelWeights<T>& w, const HeadConfig& cfg)
{
    return pyramid_sum(f_r, w, "rg", cfg);
}

} // namespace desnow
