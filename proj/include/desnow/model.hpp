#pragma once

// Two-stage composition: D_t -> (SE, AE) -> translucency recovery ->
// f_c -> D_r -> RG -> y_hat = y' + r.

#include "desnow/descriptor.hpp"
#include "desnow/heads.hpp"
#include "desnow/snow_model.hpp"
#include "desnow/weights.hpp"

namespace desnow {

struct ModelConfig {
    DescriptorConfig translucency = translucency_descriptor_defaults();
    DescriptorConfig residual = residual_descriptor_defaults();
    HeadConfig heads{};
    double eps = kOpaqueEps;

    void validate() const
    {
        translucency.validate();
        residual.validate();
        heads.validate();
        if (translucency.in_channels != kColorChannels)
            throw Error("translucency descriptor must take 3 input channels");
        if (residual.in_channels != kFcChannels)
            throw Error("residual descriptor must take 7 input channels");
        if (!(eps > 0 && eps < 1))
            throw Error("eps must lie in (0,1)");
    }

    bool operator==(const ModelConfig& o) const
    {
        auto same = [](const DescriptorConfig& a, const DescriptorConfig& b) {
            return a.name == b.name && a.in_channels == b.in_channels && a.backbone_blocks == b.backbone_blocks &&
                   a.backbone_width == b.backbone_width && a.gamma == b.gamma &&
                   a.dp_branch_channels == b.dp_branch_channels;
        };
        return same(translucency, o.translucency) && same(residual, o.residual) && heads.beta == o.heads.beta &&
               eps == o.eps;
    }
};

/// Every parameter of the network, registered in a fixed order.
template <class T>
ModelWeights<T> make_weights(const ModelConfig& cfg)
{
    cfg.validate();
    ModelWeights<T> w;
    register_descriptor(w, cfg.translucency);
    register_descriptor(w, cfg.residual);
    register_heads(w, cfg.translucency.output_channels(), cfg.residual.output_channels(), cfg.heads);
    return w;
}

/// Recovers the architecture from parameter names and shapes, so a
/// checkpoint is self-describing. Throws FormatError when the entries do not
/// form a complete model.
template <class T>
ModelConfig infer_config(const ModelWeights<T>& w)
{
    auto count_prefixed = [&](const std::string& prefix, const std::string& suffix) {
        int n = 0;
        while (w.contains(prefix + std::to_string(n) + suffix))
            ++n;
        return n;
    };
    auto descriptor = [&](DescriptorConfig d) {
        d.backbone_blocks = count_prefixed(d.name + ".backbone.block", ".proj.weight");
        if (d.backbone_blocks == 0)
            throw FormatError("checkpoint lacks backbone parameters for " + d.name);
        d.backbone_width = static_cast<int>(w.at(d.name + ".backbone.block0.proj.weight").dim(0));
        d.in_channels = static_cast<int>(w.at(d.name + ".backbone.block0.b1x1.weight").dim(1));
        d.gamma = count_prefixed(d.name + ".pyramid.level", ".weight") - 1;
        if (d.gamma < 0)
            throw FormatError("checkpoint lacks pyramid parameters for " + d.name);
        d.dp_branch_channels = static_cast<int>(w.at(d.name + ".pyramid.level0.weight").dim(0));
        return d;
    };
    ModelConfig cfg;
    cfg.translucency = descriptor(translucency_descriptor_defaults());
    cfg.residual = descriptor(residual_descriptor_defaults());
    int beta = 0;
    while (w.contains(detail::kernel_name("se", 2 * beta + 1) + ".weight") ||
           w.contains(detail::kernel_name("se", 2 * beta + 1) + "_1x" + std::to_string(2 * beta + 1) + ".weight"))
        ++beta;
    cfg.heads.beta = beta;
    try {
        cfg.validate();
        auto expected = make_weights<T>(cfg);
        if (expected.size() != w.size())
            throw FormatError("checkpoint has " + std::to_string(w.size()) + " entries, model expects " +
                              std::to_string(expected.size()));
        for (const auto& e : expected)
            if (!w.contains(e.name) || w.at(e.name).shape() != e.tensor.shape())
                throw FormatError("checkpoint entry missing or misshapen: " + e.name);
    } catch (const FormatError&) {
        throw;
    } catch (const Error& err) {
        throw FormatError(std::string("checkpoint does not describe a valid model: ") + err.what());
    }
    return cfg;
}

template <class T>
struct ForwardResult {
    Tensor<T> z_hat;   ///< B x 1 x H x W
    Tensor<T> a;       ///< B x 3 x H x W
    Tensor<T> y_prime; ///< B x 3 x H x W
    Tensor<T> r;       ///< B x 3 x H x W
    Tensor<T> y_hat;   ///< B x 3 x H x W
};

/// Full forward pass on a B x 3 x H x W snowy batch.
template <class T>
ForwardResult<T> forward_full(const Tensor<T>& x, const ModelWeights<T>& w, const ModelConfig& cfg, Mode mode)
{
    if (x.rank() != 4 || x.dim(1) != kColorChannels)
        throw ShapeError("forward_full: expected a Bx3xHxW input, got " + to_string(x.shape()));
    ForwardResult<T> out;
    auto f_t = descriptor_forward(x, w, cfg.translucency);
    out.z_hat = se_head(f_t, w, cfg.heads);
    out.a = ae_head(f_t, w, cfg.heads);
    out.y_prime = recover_translucency(x, out.z_hat, out.a, cfg.eps);
    auto f_r = descriptor_forward(build_fc(out.y_prime, out.z_hat, out.a), w, cfg.residual);
    out.r = residual_head(f_r, w, cfg.heads);
    out.y_hat = combine(out.y_prime, out.r, mode);
    return out;
}

/// Adds a leading batch axis of 1 to a C x H x W tensor.
template <class T>
Tensor<T> batch_of_one(const Tensor<T>& chw)
{
    if (chw.rank() != 3)
        throw ShapeError("expected a CxHxW tensor");
    Shape s{1, chw.dim(0), chw.dim(1), chw.dim(2)};
    return chw.reshape(std::move(s));
}

} // namespace desnow
