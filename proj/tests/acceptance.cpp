// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Criterion 5 trains the default model for 2000
// iterations, so a full run takes tens of minutes.

#include "desnow/gradcheck.hpp"
#include "desnow/train.hpp"
#include "support/clean_images.hpp"
#include "support/components.hpp"
#include "support/temp_dir.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#ifndef DESNOW_CLI
#error "DESNOW_CLI must name the desnow executable"
#endif

using namespace desnow;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail)
{
    std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass)
        ++failures;
}

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

// 1. The CLI gradient check on the full default model.
void gradient_integrity()
{
    const auto t0 = Clock::now();
    FILE* pipe = ::popen((std::string(DESNOW_CLI) + " gradcheck 2>&1").c_str(), "r");
    std::string out;
    char buf[256];
    while (pipe && std::fgets(buf, sizeof buf, pipe))
        out += buf;
    const int status = pipe ? ::pclose(pipe) : -1;
    const double secs = seconds_since(t0);

    double worst = 0;
    int groups = 0;
    std::istringstream lines(out);
    std::string line;
    while (std::getline(lines, line)) {
        const auto at = line.find("max_rel_err ");
        if (at == std::string::npos)
            continue;
        ++groups;
        worst = std::max(worst, std::stod(line.substr(at + 12)));
    }
    report(1, status == 0 && groups == 7 && worst < 1e-4 && secs < 60,
           fmt("max relative error %.2e over %d groups (< 1e-4), %.1f s (< 60 s)", worst, groups, secs));
}

// 2. compose / recover_translucency inverse pair.
void algebraic_roundtrip()
{
    const auto t0 = Clock::now();
    Philox rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<double> y(Shape{3, 16, 16}), a(Shape{3, 16, 16}), z(Shape{1, 16, 16});
        for (auto& v : y.mutable_values())
            v = rng.uniform();
        for (auto& v : a.mutable_values())
            v = rng.uniform();
        for (auto& v : z.mutable_values())
            v = rng.uniform(0, 1 - kOpaqueEps);
        const auto back = recover_translucency(compose(y, z, a), z, a);
        for (std::size_t i = 0; i < y.numel(); ++i)
            worst = std::max(worst, std::abs(back[i] - y[i]));
    }
    const double secs = seconds_since(t0);
    report(2, worst <= 1e-5 && secs < 5,
           fmt("1000 triplets, max abs error %.2e (<= 1e-5), %.2f s (< 5 s)", worst, secs));
}

// 3. Pyramid loss identities.
void loss_identities()
{
    Philox rng(3);
    auto noise = [&](Shape s) {
        Tensor<double> t(std::move(s));
        for (auto& v : t.mutable_values())
            v = rng.uniform();
        return t;
    };
    double self = 0, plain = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = noise({2, 3, 17, 12}), h = noise({2, 3, 17, 12});
        for (int tau = 0; tau <= 3; ++tau)
            self = std::max(self, std::abs(pyramid_loss(m, m, tau).item()));
        double ss = 0;
        for (std::size_t i = 0; i < m.numel(); ++i)
            ss += (m[i] - h[i]) * (m[i] - h[i]);
        plain = std::max(plain, std::abs(pyramid_loss(m, h, 0).item() - ss));
    }
    Tensor<double> m(Shape{1, 2, 2}, std::vector<double>{1, 0, 0, 0});
    const double hand = pyramid_loss(m, Tensor<double>(Shape{1, 2, 2}), 1).item();
    report(3, self == 0 && plain <= 1e-6 && hand == 2.0,
           fmt("L(m,m) max %.1e for tau 0..3; tau 0 vs squared error %.1e (<= 1e-6); 2x2 case %.17g (== 2)", self,
               plain, hand));
}

// 4. Metric oracles.
void metric_oracles()
{
    Tensor<double> zero(Shape{3, 32, 32}), tenth(Shape{3, 32, 32}, 0.1);
    const double p = psnr(zero, tenth);
    const auto img = quantize_u8(desnow::testing::clean_image(4, 32, 32)).cast<double>();
    const double s = ssim(img, img);
    Philox rng(4);
    double prev = kPsnrIdentical;
    bool monotone = true;
    std::string trail;
    for (double amp : {0.01, 0.05, 0.1}) {
        auto noisy = img.clone();
        for (auto& v : noisy.mutable_values())
            v += amp * rng.normal();
        const double q = psnr(img, noisy);
        monotone &= q < prev;
        prev = q;
        trail += fmt(" %.2f", q);
    }
    report(4, std::abs(p - 20.0) <= 1e-6 && std::abs(s - 1.0) <= 1e-9 && monotone,
           fmt("psnr(0.1 offset) %.9f dB; ssim(m,m) %.12f; psnr at noise 0.01/0.05/0.1:%s dB", p, s, trail.c_str()));
}

struct EfficacyRun {
    std::vector<ManifestEntry> train, test;
    ScoreRow scores;
    std::vector<double> totals;
    double seconds = 0;
};

// 5-7. Desk-scale training with the default configuration.
EfficacyRun train_desk_model(const fs::path& work)
{
    EfficacyRun run;
    const auto t0 = Clock::now();
    desnow::testing::write_clean_images(work / "clean", 6, 128, 128, 11);
    DatasetOptions opt;
    opt.synth.subset = Subset::l;
    opt.size = 96;
    run.train = build_dataset(work / "clean", work / "train", 60, 1, opt);
    run.test = build_dataset(work / "clean", work / "test", 20, 2, opt);

    TrainConfig cfg;
    cfg.seed = 5;
    std::ostringstream log;
    const auto weights = train(load_samples(run.train), cfg, {&log, {}});
    run.scores = evaluate(run.test, weights, cfg.model).mean();
    run.seconds = seconds_since(t0);

    std::istringstream rows(log.str());
    std::string line;
    std::getline(rows, line);
    while (std::getline(rows, line))
        run.totals.push_back(std::stod(line.substr(line.rfind(',') + 1)));
    return run;
}

void training_efficacy(const EfficacyRun& r)
{
    const auto& s = r.scores;
    const double gain = s.psnr_y - s.psnr_x;
    report(5, gain >= 1.0 && s.ssim_y > s.ssim_x && r.seconds <= 1800,
           fmt("psnr %.3f vs input %.3f (gain %.3f dB >= 1.0); ssim %.4f vs input %.4f; %.0f s (<= 1800 s)", s.psnr_y,
               s.psnr_x, gain, s.ssim_y, s.ssim_x, r.seconds));
}

void mask_sanity(const EfficacyRun& r)
{
    report(6, r.scores.psnr_z > r.scores.psnr_z0,
           fmt("mask psnr %.3f dB vs all-clear mask %.3f dB", r.scores.psnr_z, r.scores.psnr_z0));
}

void convergence(const EfficacyRun& r)
{
    const auto& t = r.totals;
    if (t.size() < 100) {
        report(7, false, "training log too short");
        return;
    }
    auto window_mean = [&](std::size_t begin) {
        double s = 0;
        for (std::size_t i = begin; i < begin + 50; ++i)
            s += t[i];
        return s / 50;
    };
    const double first = window_mean(0), last = window_mean(t.size() - 50);
    report(7, last < 0.5 * first,
           fmt("window-50 loss at iteration %zu is %.1f, %.1f%% of the first-50 mean %.1f (< 50%%)", t.size(), last,
               100 * last / first, first));
}

// 8. Subset statistics over 200 samples each.
void dataset_statistics()
{
    const auto bound = particle_extent_bound(ParticleSize::small);
    double cover[3] = {0, 0, 0};
    bool ranges = true;
    std::int64_t widest = 0;
    for (int s = 0; s < 3; ++s) {
        SynthConfig cfg;
        cfg.subset = static_cast<Subset>(s);
        for (std::uint64_t i = 0; i < 200; ++i) {
            const auto seed = derive_seed(800 + static_cast<std::uint64_t>(s), i);
            const auto y = quantize_u8(desnow::testing::clean_image(i % 10, 96, 96));
            const auto t = synthesize_sample(y, cfg, draw_masks(cfg, 96, 96, seed), seed);
            double sum = 0;
            for (float v : t.z.values()) {
                ranges &= v >= 0 && v <= 1;
                sum += v;
            }
            for (float v : t.x.values())
                ranges &= v >= 0 && v <= 1;
            cover[s] += sum / static_cast<double>(t.z.numel()) / 200;
            if (cfg.subset == Subset::s)
                for (const auto& c : desnow::testing::components(t.z))
                    widest = std::max({widest, c.width, c.height});
        }
    }
    report(8, cover[0] < cover[1] && cover[1] < cover[2] && ranges && widest <= bound,
           fmt("mean z S %.4f < M %.4f < L %.4f; values in [0,1]: %s; widest S component %lld px (<= %lld)", cover[0],
               cover[1], cover[2], ranges ? "yes" : "no", static_cast<long long>(widest),
               static_cast<long long>(bound)));
}

// 9. Determinism and file formats.
void determinism(const EfficacyRun& r, const fs::path& work)
{
    const auto data = load_samples(r.train);
    TrainConfig cfg;
    cfg.seed = 9;
    cfg.iterations = 20;
    const auto a = work / "det_a.dsnw", b = work / "det_b.dsnw";
    save_checkpoint(a, train(data, cfg));
    save_checkpoint(b, train(data, cfg));
    const bool same_ckpt = slurp(a) == slurp(b);

    const auto loaded = load_checkpoint(a);
    save_checkpoint(work / "det_c.dsnw", loaded);
    const bool ckpt_roundtrip = slurp(a) == slurp(work / "det_c.dsnw");

    bool dsnt_roundtrip = true;
    double worst = 0;
    for (const auto& e : r.test) {
        const auto z = load_dsnt(e.z);
        save_dsnt(work / "z.dsnt", z);
        dsnt_roundtrip &= slurp(work / "z.dsnt") == slurp(e.z);
        const auto z2 = load_dsnt(work / "z.dsnt");
        dsnt_roundtrip &= std::memcmp(z.data(), z2.data(), z.numel() * sizeof(float)) == 0;
        const auto x = read_png(e.x), rec = compose(read_png(e.y), z, load_dsnt(e.a));
        for (std::size_t i = 0; i < x.numel(); ++i)
            worst = std::max(worst, static_cast<double>(std::abs(rec[i] - x[i])));
    }
    const bool png = worst <= 1.0 / 255 + 1e-6;
    report(9, same_ckpt && ckpt_roundtrip && dsnt_roundtrip && png,
           fmt("same-seed checkpoints identical: %s; checkpoint roundtrip exact: %s; dsnt roundtrip exact: %s; "
               "png recompose error %.5f (<= 1/255)",
               same_ckpt ? "yes" : "no", ckpt_roundtrip ? "yes" : "no", dsnt_roundtrip ? "yes" : "no", worst));
}

} // namespace

int main()
{
    desnow::testing::TempDir work("acceptance");
    gradient_integrity();
    algebraic_roundtrip();
    loss_identities();
    metric_oracles();
    try {
        const auto run = train_desk_model(work.path());
        training_efficacy(run);
        mask_sanity(run);
        convergence(run);
        dataset_statistics();
        determinism(run, work.path());
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
