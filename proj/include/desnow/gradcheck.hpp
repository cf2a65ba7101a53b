#pragma once

// Finite-difference check of every parameter gradient of the full model and
// loss, in double precision on a small synthetic sample.

#include "desnow/losses.hpp"
#include "desnow/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace desnow {

struct GradcheckConfig {
    std::uint64_t seed = 0;
    double tolerance = 1e-4;
    double step = 1e-3;            ///< central-difference half width
    std::int64_t size = 8;         ///< spatial extent of the check sample
    int elements_per_tensor = 6;   ///< sampled entries per parameter tensor
    double floor = 1e-6;           ///< relative_error denominator floor
    ModelConfig model{};
    LossConfig loss{};
};

struct GroupResult {
    std::string group;
    std::size_t checked = 0;
    double max_rel_error = 0;
    std::string worst; ///< "name[index]" of the worst entry
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GroupResult> groups;
    double seconds = 0;

    bool pass() const
    {
        return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass; });
    }
};

/// Parameter group of a weight name: descriptor stage and part, or head.
inline std::string param_group(const std::string& name)
{
    for (const char* prefix : {"dt.backbone", "dt.pyramid", "dr.backbone", "dr.pyramid"})
        if (name.starts_with(prefix))
            return prefix;
    return name.substr(0, name.find('.'));
}

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// entries whose true gradient is ~0 from dividing rounding noise by itself.
inline double relative_error(double analytic, double numeric, double floor)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Deterministic 8x8-style check sample: random clean image, mask and
/// constant snow colour, composed into x.
inline SnowTriplet<double> gradcheck_sample(std::uint64_t seed, std::int64_t size)
{
    Philox rng(seed, 11);
    SnowTriplet<double> t;
    t.y = Tensor<double>(Shape{1, 3, size, size});
    t.z = Tensor<double>(Shape{1, 1, size, size});
    t.a = Tensor<double>(Shape{1, 3, size, size}, rng.uniform(0.7, 1.0));
    for (auto& v : t.y.mutable_values())
        v = rng.uniform();
    for (auto& v : t.z.mutable_values())
        v = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, 0.9);
    t.x = compose(t.y, t.z, t.a);
    return t;
}

/// Numeric gradients replay the branch choices of the analytic pass, so a
/// step of `cfg.step` never crosses a rectifier, clamp, max or pooling kink
/// and the differences see a smooth function. Central differences at step
/// and step/2 are combined by Richardson extrapolation, which cancels the
/// h^2 error term; the 1/(1 - z_hat) division has enough curvature for that
/// term to matter at 1e-4.
///
/// `after_backward` runs between the analytic backward pass and the
/// comparison; tests use it to corrupt gradients as a negative control.
inline GradcheckReport gradcheck(const GradcheckConfig& cfg,
                                 const std::function<void(ModelWeights<double>&)>& after_backward = {})
{
    cfg.model.validate();
    cfg.loss.validate();
    const auto start = std::chrono::steady_clock::now();
    auto weights = make_weights<double>(cfg.model);
    xavier_init(weights, cfg.seed);
    const auto sample = gradcheck_sample(cfg.seed, cfg.size);

    auto loss_of = [&](const ModelWeights<double>& w) {
        auto f = forward_full(sample.x, w, cfg.model, Mode::train);
        return overall_loss(sample.y, f.y_prime, f.y_hat, sample.z, f.z_hat, w, cfg.loss).total;
    };
    BranchLog branches;
    BranchScope branch_scope(branches);
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        auto total = loss_of(weights);
        tape.backward(total);
    }
    auto replayed_loss = [&] {
        branches.rewind();
        return loss_of(weights).item();
    };
    if (after_backward)
        after_backward(weights);

    GradcheckReport report;
    NoGradScope<double> off;
    Philox pick(cfg.seed, 12);
    for (auto& e : weights) {
        const auto group = param_group(e.name);
        auto it = std::find_if(report.groups.begin(), report.groups.end(), [&](auto& g) { return g.group == group; });
        if (it == report.groups.end()) {
            report.groups.emplace_back().group = group;
            it = std::prev(report.groups.end());
        }
        const auto n = e.tensor.numel();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto take = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.elements_per_tensor));
        for (std::size_t k = 0; k < take; ++k)
            std::swap(idx[k], idx[k + pick.below(n - k)]);
        for (std::size_t k = 0; k < take; ++k) {
            const std::size_t i = idx[k];
            const double analytic = e.tensor.has_grad() ? e.tensor.grad()[i] : 0.0;
            auto values = e.tensor.mutable_values();
            const double saved = values[i];
            auto central = [&](double h) {
                values[i] = saved + h;
                const double up = replayed_loss();
                values[i] = saved - h;
                const double down = replayed_loss();
                values[i] = saved;
                return (up - down) / (2 * h);
            };
            const double coarse = central(cfg.step);
            const double numeric = (4 * central(cfg.step / 2) - coarse) / 3;
            const double err = relative_error(analytic, numeric, cfg.floor);
            ++it->checked;
            if (err > it->max_rel_error || it->worst.empty()) {
                it->max_rel_error = std::max(it->max_rel_error, err);
                if (err >= it->max_rel_error)
                    it->worst = e.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    for (auto& g : report.groups)
        g.pass = g.checked > 0 && g.max_rel_error < cfg.tolerance;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

} // namespace desnow
