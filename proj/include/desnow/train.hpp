#pragma once

// Adam training loop, batch assembly from a dataset manifest, inference and
// manifest-level evaluation.

#include "desnow/dataset.hpp"
#include "desnow/losses.hpp"
#include "desnow/metrics.hpp"
#include "desnow/model.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

namespace desnow {

struct AdamConfig {
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction. Moments mirror the parameter list.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg)
    {
        if (!(cfg.lr >= 0))
            throw Error("adam: learning rate must be >= 0");
    }

    std::int64_t steps() const { return step_; }

    void step(ModelWeights<float>& weights)
    {
        if (m_.empty()) {
            for (const auto& e : weights) {
                m_.emplace_back(e.tensor.numel(), 0.0f);
                v_.emplace_back(e.tensor.numel(), 0.0f);
            }
        }
        if (m_.size() != weights.size())
            throw Error("adam: parameter list changed between steps");
        ++step_;
        const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(step_));
        std::size_t k = 0;
        for (auto& e : weights) {
            auto& m = m_[k];
            auto& v = v_[k];
            ++k;
            if (!e.tensor.has_grad())
                continue;
            auto g = e.tensor.grad();
            auto p = e.tensor.mutable_values();
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                const double mi = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                p[i] = static_cast<float>(p[i] - cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.epsilon));
            }
        }
    }

private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

struct TrainConfig {
    int batch = 5;
    int crop = 64;
    AdamConfig adam{};
    std::int64_t iterations = 2000;
    std::uint64_t seed = 0;
    LossConfig loss{};
    ModelConfig model{};
    std::int64_t checkpoint_every = 0; ///< 0 saves only at the end

    void validate() const
    {
        if (batch < 1)
            throw Error("train config: batch must be >= 1");
        if (crop < 8)
            throw Error("train config: crop must be >= 8");
        if (iterations < 0)
            throw Error("train config: iterations must be >= 0");
        if (checkpoint_every < 0)
            throw Error("train config: checkpoint cadence must be >= 0");
        loss.validate();
        model.validate();
    }
};

/// One training sample held in memory: x and y are 3 x H x W, z is 1 x H x W.
struct Sample {
    Tensor<float> x, y, z;
};

inline Sample load_sample(const ManifestEntry& e)
{
    Sample s{read_png(e.x), read_png(e.y), load_dsnt(e.z)};
    const std::int64_t h = s.x.dim(1), w = s.x.dim(2);
    if (s.y.shape() != s.x.shape() || s.z.shape() != Shape{1, h, w})
        throw FormatError("sample " + e.x.string() + ": x, y, z extents disagree");
    return s;
}

inline std::vector<Sample> load_samples(const std::vector<ManifestEntry>& manifest)
{
    std::vector<Sample> out;
    out.reserve(manifest.size());
    for (const auto& e : manifest)
        out.push_back(load_sample(e));
    return out;
}

struct Batch {
    Tensor<float> x, y, z;
};

/// Batch for iteration `iter`: samples drawn with replacement, each cropped
/// at one random offset shared by x, y and z.
inline Batch sample_batch(const std::vector<Sample>& data, int batch, int crop, std::uint64_t seed,
                          std::int64_t iter)
{
    if (data.empty())
        throw Error("training set is empty");
    Philox rng(derive_seed(seed, static_cast<std::uint64_t>(iter)), 3);
    const std::int64_t c = crop;
    Batch b{Tensor<float>(Shape{batch, 3, c, c}), Tensor<float>(Shape{batch, 3, c, c}),
            Tensor<float>(Shape{batch, 1, c, c})};
    auto copy_crop = [&](const Tensor<float>& src, Tensor<float>& dst, std::int64_t n, std::int64_t oy,
                         std::int64_t ox) {
        const std::int64_t ch = src.dim(0), h = src.dim(1), w = src.dim(2);
        auto sv = src.values();
        auto dv = dst.mutable_values();
        for (std::int64_t k = 0; k < ch; ++k)
            for (std::int64_t r = 0; r < c; ++r) {
                const auto* from = sv.data() + (k * h + r + oy) * w + ox;
                std::copy(from, from + c, dv.data() + ((n * ch + k) * c + r) * c);
            }
    };
    for (std::int64_t n = 0; n < batch; ++n) {
        const auto& s = data[static_cast<std::size_t>(rng.below(data.size()))];
        const std::int64_t h = s.x.dim(1), w = s.x.dim(2);
        if (h < c || w < c)
            throw ShapeError("crop " + std::to_string(c) + " exceeds sample extent " + to_string(s.x.shape()));
        const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - c + 1)));
        const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - c + 1)));
        copy_crop(s.x, b.x, n, oy, ox);
        copy_crop(s.y, b.y, n, oy, ox);
        copy_crop(s.z, b.z, n, oy, ox);
    }
    return b;
}

inline void write_loss_header(std::ostream& os) { os << "iteration,l_y_prime,l_y_hat,l_z,l_reg,total\n"; }

inline void write_loss_row(std::ostream& os, std::int64_t iter, const LossBreakdown<float>::Values& v)
{
    os << iter << ',' << std::setprecision(9) << v.l_y_prime << ',' << v.l_y_hat << ',' << v.l_z << ','
       << v.l_reg << ',' << v.total << '\n';
}

struct TrainHooks {
    std::ostream* log = nullptr; ///< receives the loss CSV
    std::function<void(std::int64_t, const ModelWeights<float>&)> checkpoint;
};

/// Trains from Xavier-initialised weights. Returns the final weights.
inline ModelWeights<float> train(const std::vector<Sample>& data, const TrainConfig& cfg, const TrainHooks& hooks = {})
{
    cfg.validate();
    if (data.empty())
        throw Error("training set is empty");
    auto weights = make_weights<float>(cfg.model);
    xavier_init(weights, cfg.seed);
    Adam opt(cfg.adam);
    Tape<float> tape;
    if (hooks.log)
        write_loss_header(*hooks.log);
    for (std::int64_t it = 1; it <= cfg.iterations; ++it) {
        const auto batch = sample_batch(data, cfg.batch, cfg.crop, cfg.seed, it);
        LossBreakdown<float>::Values values{};
        {
            TapeScope<float> scope(tape);
            auto f = forward_full(batch.x, weights, cfg.model, Mode::train);
            auto loss = overall_loss(batch.y, f.y_prime, f.y_hat, batch.z, f.z_hat, weights, cfg.loss);
            values = loss.values();
            if (!std::isfinite(values.total))
                throw NumericError("non-finite loss at iteration " + std::to_string(it));
            tape.backward(loss.total);
        }
        opt.step(weights);
        weights.zero_grad();
        tape.reset();
        if (hooks.log)
            write_loss_row(*hooks.log, it, values);
        if (hooks.checkpoint && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations)
            hooks.checkpoint(it, weights);
    }
    if (hooks.checkpoint)
        hooks.checkpoint(cfg.iterations, weights);
    return weights;
}

/// Inference on a single 3 x H x W image; every field is C x H x W.
inline ForwardResult<float> infer(const Tensor<float>& image, const ModelWeights<float>& weights,
                                  const ModelConfig& cfg)
{
    NoGradScope<float> off;
    auto f = forward_full(batch_of_one(image), weights, cfg, Mode::infer);
    auto strip = [](const Tensor<float>& t) { return t.reshape(Shape{t.dim(1), t.dim(2), t.dim(3)}); };
    return {strip(f.z_hat), strip(f.a), strip(f.y_prime), strip(f.r), strip(f.y_hat)};
}

/// Mid-gray for r = 0, brighter for positive, darker for negative.
inline Tensor<float> residual_visual(const Tensor<float>& r)
{
    NoGradScope<float> off;
    return clamp(r + 0.5f, 0.0f, 1.0f);
}

/// a (.) z_hat, the snow layer the network attributes to the image.
inline Tensor<float> snow_layer(const Tensor<float>& a, const Tensor<float>& z_hat)
{
    NoGradScope<float> off;
    return concat_channels<float>({z_hat, z_hat, z_hat}) * a;
}

/// Scores y_hat against y and z_hat against z for every manifest entry, with
/// the snowy input and the all-clear mask as baselines.
inline ScoreReport evaluate(const std::vector<ManifestEntry>& manifest, const ModelWeights<float>& weights,
                            const ModelConfig& cfg)
{
    ScoreReport report;
    for (const auto& e : manifest) {
        const auto s = load_sample(e);
        const auto f = infer(s.x, weights, cfg);
        ScoreRow row;
        row.image_id = e.x.stem().string();
        row.psnr_y = psnr(f.y_hat, s.y);
        row.ssim_y = ssim(f.y_hat, s.y);
        row.psnr_z = psnr(f.z_hat, s.z);
        row.ssim_z = ssim(f.z_hat, s.z);
        row.psnr_x = psnr(s.x, s.y);
        row.ssim_x = ssim(s.x, s.y);
        const Tensor<float> clear(s.z.shape());
        row.psnr_z0 = psnr(clear, s.z);
        row.ssim_z0 = ssim(clear, s.z);
        report.rows.push_back(std::move(row));
    }
    return report;
}

inline void write_report(std::ostream& os, const ScoreReport& report)
{
    os << "image_id,psnr_y,ssim_y,psnr_z,ssim_z,psnr_x,ssim_x,psnr_z0,ssim_z0\n" << std::setprecision(10);
    auto emit = [&](const ScoreRow& r) {
        os << r.image_id << ',' << r.psnr_y << ',' << r.ssim_y << ',' << r.psnr_z << ',' << r.ssim_z << ','
           << r.psnr_x << ',' << r.ssim_x << ',' << r.psnr_z0 << ',' << r.ssim_z0 << '\n';
    };
    for (const auto& r : report.rows)
        emit(r);
    emit(report.mean());
}

} // namespace desnow
