#pragma once

// Feature descriptor D = DP o Phi: a stride-1 multi-branch backbone followed
// by the dilation pyramid (dilated 3x3 convolutions at 2^0 .. 2^gamma,
// concatenated along channels).

#include "desnow/ops.hpp"
#include "desnow/weights.hpp"

#include <string>

namespace desnow {

/// Descriptor shape parameters. The backbone is a miniature Inception-style
/// stack; widths are conventions sized for desk-scale training and can be
/// raised toward a full-width backbone.
struct DescriptorConfig {
    std::string name = "dt";     ///< parameter-name prefix
    int in_channels = 3;         ///< 3 for the translucency stage, 7 for the residual stage
    int backbone_blocks = 3;
    int backbone_width = 32;     ///< channels per block; must be divisible by 4
    int gamma = 4;               ///< pyramid levels; dilations are 2^0 .. 2^gamma
    int dp_branch_channels = 16; ///< channels produced by each pyramid level

    int output_channels() const { return (gamma + 1) * dp_branch_channels; }

    void validate() const
    {
        if (in_channels <= 0 || backbone_blocks <= 0 || dp_branch_channels <= 0)
            throw Error("descriptor " + name + ": channel counts and block count must be positive");
        if (backbone_width <= 0 || backbone_width % 4 != 0)
            throw Error("descriptor " + name + ": backbone_width must be a positive multiple of 4");
        if (gamma < 0)
            throw Error("descriptor " + name + ": gamma must be >= 0");
    }
};

inline DescriptorConfig translucency_descriptor_defaults() { return {"dt", 3, 3, 32, 4, 16}; }
inline DescriptorConfig residual_descriptor_defaults() { return {"dr", 7, 3, 32, 4, 8}; }

namespace detail {

template <class T>
void add_conv(ModelWeights<T>& w, const std::string& name, int out, int in, int kh, int kw)
{
    w.add(name + ".weight", Shape{out, in, kh, kw});
    w.add(name + ".bias", Shape{out});
}

template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ModelWeights<T>& w, const std::string& name, int dilation = 1)
{
    const auto& kernel = w.at(name + ".weight");
    ConvSpec spec;
    spec.kernel_h = static_cast<int>(kernel.dim(2));
    spec.kernel_w = static_cast<int>(kernel.dim(3));
    spec.dilation = dilation;
    return conv2d(x, kernel, w.at(name + ".bias"), spec);
}

inline std::string block_name(const DescriptorConfig& cfg, int block)
{
    return cfg.name + ".backbone.block" + std::to_string(block);
}

inline std::string level_name(const DescriptorConfig& cfg, int level)
{
    return cfg.name + ".pyramid.level" + std::to_string(level);
}

} // namespace detail

/// Registers every descriptor parameter in `w`.
template <class T>
void register_descriptor(ModelWeights<T>& w, const DescriptorConfig& cfg)
{
    cfg.validate();
    const int branch = cfg.backbone_width / 4;
    int in = cfg.in_channels;
    for (int b = 0; b < cfg.backbone_blocks; ++b) {
        const auto p = detail::block_name(cfg, b);
        detail::add_conv(w, p + ".b1x1", branch, in, 1, 1);
        detail::add_conv(w, p + ".b3x3", branch, in, 3, 3);
        detail::add_conv(w, p + ".b5x5_1x5", branch, in, 1, 5);
        detail::add_conv(w, p + ".b5x5_5x1", branch, branch, 5, 1);
        detail::add_conv(w, p + ".bpool", branch, in, 1, 1);
        detail::add_conv(w, p + ".proj", cfg.backbone_width, cfg.backbone_width, 1, 1);
        in = cfg.backbone_width;
    }
    for (int n = 0; n <= cfg.gamma; ++n)
        detail::add_conv(w, detail::level_name(cfg, n), cfg.dp_branch_channels, cfg.backbone_width, 3, 3);
}

/// Phi: stacked multi-branch blocks, all stride 1, so H x W is preserved.
/// Each block concatenates 1x1, 3x3, factorised 5x5 (1x5 then 5x1) and
/// 3x3-maxpool->1x1 branches, then projects back with a 1x1 convolution.
template <class T>
Tensor<T> backbone_forward(const Tensor<T>& input, const ModelWeights<T>& w, const DescriptorConfig& cfg)
{
    if (input.rank() != 4 || input.dim(1) != cfg.in_channels)
        throw ShapeError("descriptor " + cfg.name + ": expected " + std::to_string(cfg.in_channels) +
                         "-channel BCHW input, got " + to_string(input.shape()));
    Tensor<T> h = input;
    for (int b = 0; b < cfg.backbone_blocks; ++b) {
        const auto p = detail::block_name(cfg, b);
        auto b1 = relu(detail::apply_conv(h, w, p + ".b1x1"));
        auto b3 = relu(detail::apply_conv(h, w, p + ".b3x3"));
        auto b5 = relu(detail::apply_conv(relu(detail::apply_conv(h, w, p + ".b5x5_1x5")), w, p + ".b5x5_5x1"));
        auto bp = relu(detail::apply_conv(maxpool2d(h, 3, 1, Padding::same), w, p + ".bpool"));
        h = relu(detail::apply_conv(concat_channels<T>({b1, b3, b5, bp}), w, p + ".proj"));
    }
    return h;
}

/// Dilation pyramid: slab n of the output (channels
/// [n*dp, (n+1)*dp)) is the 3x3 convolution with dilation 2^n.
template <class T>
Tensor<T> dilation_pyramid(const Tensor<T>& phi, const ModelWeights<T>& w, const DescriptorConfig& cfg)
{
    std::vector<Tensor<T>> levels;
    levels.reserve(static_cast<std::size_t>(cfg.gamma + 1));
    for (int n = 0; n <= cfg.gamma; ++n)
        levels.push_back(detail::apply_conv(phi, w, detail::level_name(cfg, n), 1 << n));
    return levels.size() == 1 ? levels.front() : concat_channels(levels);
}

template <class T>
Tensor<T> descriptor_forward(const Tensor<T>& input, const ModelWeights<T>& w, const DescriptorConfig& cfg)
{
    return dilation_pyramid(backbone_forward(input, w, cfg), w, cfg);
}

} // namespace desnow
