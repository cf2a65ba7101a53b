#pragma once

#include "desnow/ops.hpp"
#include "desnow/weights.hpp"

namespace desnow {

struct LossConfig {
    int tau = 2;            ///< loss-pyramid levels; pools at 2^0 .. 2^tau
    double lambda_z = 3.0;
    double lambda_w = 5e-4;

    void validate() const
    {
        if (tau < 0)
            throw Error("loss config: tau must be >= 0");
        if (lambda_z < 0 || lambda_w < 0)
            throw Error("loss config: lambdas must be >= 0");
    }
};

template <class T>
struct LossBreakdown {
    Tensor<T> l_y_prime;
    Tensor<T> l_y_hat;
    Tensor<T> l_z;
    Tensor<T> l_reg;
    Tensor<T> total;

    struct Values {
        double l_y_prime, l_y_hat, l_z, l_reg, total;
    };
    Values values() const
    {
        return {static_cast<double>(l_y_prime.item()), static_cast<double>(l_y_hat.item()),
                static_cast<double>(l_z.item()), static_cast<double>(l_reg.item()),
                static_cast<double>(total.item())};
    }
};

/// Sum over levels i = 0..tau of the squared distance between the
/// non-overlapping 2^i max-pooled maps. Level 0 compares the raw maps;
/// trailing rows/columns that do not fill a pooling window are dropped, and
/// a level whose window exceeds the map contributes nothing.
template <class T>
Tensor<T> pyramid_loss(const Tensor<T>& m, const Tensor<T>& m_hat, int tau)
{
    if (tau < 0)
        throw Error("pyramid_loss: tau must be >= 0");
    detail::require_same_shape(m, m_hat, "pyramid_loss");
    if (m.rank() < 3)
        throw ShapeError("pyramid_loss: expected CHW or BCHW maps, got " + to_string(m.shape()));
    Tensor<T> total = sum_squares(m - m_hat);
    const auto h = m.dim(m.rank() - 2), w = m.dim(m.rank() - 1);
    for (int i = 1; i <= tau && i < 31; ++i) {
        const int k = 1 << i;
        if (k > h || k > w)
            break;
        total = total + sum_squares(maxpool2d(m, k, k) - maxpool2d(m_hat, k, k));
    }
    return total;
}

/// Sum of squared convolution-kernel entries; biases and PReLU slopes are
/// not regularised.
template <class T>
Tensor<T> weight_penalty(const ModelWeights<T>& weights)
{
    Tensor<T> total;
    for (const auto& e : weights) {
        if (param_kind(e.name) != ParamKind::weight)
            continue;
        auto term = sum_squares(e.tensor);
        total = total.defined() ? total + term : term;
    }
    return total.defined() ? total : Tensor<T>::scalar(T(0));
}

/// L = L_y' + L_y_hat + lambda_z L_z + lambda_w ||w||^2, each L a pyramid loss.
/// `y_hat` must be the unclipped training-mode estimate.
template <class T>
LossBreakdown<T> overall_loss(const Tensor<T>& y, const Tensor<T>& y_prime, const Tensor<T>& y_hat,
                              const Tensor<T>& z, const Tensor<T>& z_hat, const ModelWeights<T>& weights,
                              const LossConfig& cfg)
{
    cfg.validate();
    LossBreakdown<T> out;
    out.l_y_prime = pyramid_loss(y, y_prime, cfg.tau);
    out.l_y_hat = pyramid_loss(y, y_hat, cfg.tau);
    out.l_z = pyramid_loss(z, z_hat, cfg.tau);
    out.l_reg = weight_penalty(weights);
    out.total = out.l_y_prime + out.l_y_hat + out.l_z * static_cast<T>(cfg.lambda_z) +
                out.l_reg * static_cast<T>(cfg.lambda_w);
    return out;
}

} // namespace desnow
