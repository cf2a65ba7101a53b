// desnow: synthesize snowy datasets, train, run and score the model.

#include "desnow/dataset.hpp"
#include "desnow/gradcheck.hpp"
#include "desnow/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace desnow;
namespace fs = std::filesystem;

struct SynthArgs {
    std::string clean, out, subset = "s";
    std::int64_t count = 100;
    std::uint64_t seed = 0;
    std::int64_t size = 0;
    std::int64_t max_side = 640;
    double jitter = 0;
};

struct TrainArgs {
    std::string data, out, log;
    TrainConfig cfg;
};

struct InferArgs {
    std::string ckpt, input, output, dump;
};

struct EvalArgs {
    std::string ckpt, data, report;
};

struct GradcheckArgs {
    GradcheckConfig cfg;
};

int run_synth(const SynthArgs& a)
{
    DatasetOptions opt;
    opt.synth.subset = parse_subset(a.subset);
    opt.synth.jitter = a.jitter;
    opt.max_side = a.max_side;
    opt.size = a.size;
    const auto entries = build_dataset(a.clean, a.out, a.count, a.seed, opt);
    std::cout << "wrote " << entries.size() << " samples to " << (fs::path(a.out) / "manifest.tsv").string() << '\n';
    return 0;
}

fs::path iteration_checkpoint(const fs::path& out, std::int64_t it)
{
    auto p = out;
    p.replace_filename(out.stem().string() + ".iter" + std::to_string(it) + out.extension().string());
    return p;
}

int run_train(const TrainArgs& a)
{
    const auto data = load_samples(read_manifest(a.data));
    fs::path log_path = a.log;
    if (log_path.empty())
        log_path = fs::path(a.out).replace_extension(".csv");
    std::ofstream log(log_path);
    if (!log)
        throw Error("cannot open " + log_path.string() + " for writing");
    TrainHooks hooks;
    hooks.log = &log;
    hooks.checkpoint = [&](std::int64_t it, const ModelWeights<float>& w) {
        save_checkpoint(it == a.cfg.iterations ? fs::path(a.out) : iteration_checkpoint(a.out, it), w);
    };
    train(data, a.cfg, hooks);
    std::cout << "trained " << a.cfg.iterations << " iterations; checkpoint " << a.out << ", log " << log_path.string()
              << '\n';
    return 0;
}

int run_infer(const InferArgs& a)
{
    const auto weights = load_checkpoint(a.ckpt);
    const auto cfg = infer_config(weights);
    const auto image = read_png(a.input);
    const auto f = infer(image, weights, cfg);
    write_png(a.output, f.y_hat);
    if (!a.dump.empty()) {
        const fs::path dir = a.dump;
        fs::create_directories(dir);
        const auto layer = snow_layer(f.a, f.z_hat);
        save_dsnt(dir / "z_hat.dsnt", f.z_hat);
        save_dsnt(dir / "a.dsnt", f.a);
        save_dsnt(dir / "snow_layer.dsnt", layer);
        save_dsnt(dir / "y_prime.dsnt", f.y_prime);
        save_dsnt(dir / "r.dsnt", f.r);
        save_dsnt(dir / "y_hat.dsnt", f.y_hat);
        write_png(dir / "z_hat.png", f.z_hat);
        write_png(dir / "snow_layer.png", layer);
        write_png(dir / "y_prime.png", f.y_prime);
        write_png(dir / "r.png", residual_visual(f.r));
    }
    return 0;
}

int run_eval(const EvalArgs& a)
{
    const auto weights = load_checkpoint(a.ckpt);
    const auto cfg = infer_config(weights);
    const auto report = evaluate(read_manifest(a.data), weights, cfg);
    std::ofstream os(a.report);
    if (!os)
        throw Error("cannot open " + a.report + " for writing");
    write_report(os, report);
    const auto m = report.mean();
    std::cout << "mean psnr_y " << m.psnr_y << " (input " << m.psnr_x << "), ssim_y " << m.ssim_y << " (input "
              << m.ssim_x << "), psnr_z " << m.psnr_z << " (clear mask " << m.psnr_z0 << ")\n";
    return 0;
}

int run_gradcheck(const GradcheckArgs& a)
{
    const auto report = gradcheck(a.cfg);
    for (const auto& g : report.groups)
        std::printf("%-12s %s  max_rel_err %.3e over %zu entries (worst %s)\n", g.group.c_str(),
                    g.pass ? "pass" : "FAIL", g.max_rel_error, g.checked, g.worst.c_str());
    std::printf("%.1f s\n", report.seconds);
    if (!report.pass())
        throw Error("gradient check failed at tolerance " + std::to_string(a.cfg.tolerance));
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Snow removal: dataset synthesis, training, inference and evaluation"};
    app.set_config("--config", "", "TOML/INI file with option defaults; flags take precedence");
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Build a synthetic snowy dataset from clean PNG images");
    s->add_option("--clean", synth.clean, "Directory of clean PNG images")->required();
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--subset", synth.subset, "Snow subset")->check(CLI::IsMember({"s", "m", "l", "S", "M", "L"}));
    s->add_option("--count", synth.count, "Number of samples")->check(CLI::NonNegativeNumber);
    s->add_option("--seed", synth.seed, "Random seed");
    s->add_option("--size", synth.size, "Crop each sample to size x size (0 keeps the full image)");
    s->add_option("--max-side", synth.max_side, "Shrink clean images to this longest side")->check(CLI::PositiveNumber);
    s->add_option("--jitter", synth.jitter, "Per-channel snow colour jitter amplitude");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train from Xavier initialisation");
    t->add_option("--data", tr.data, "Training manifest")->required();
    t->add_option("--iters", tr.cfg.iterations, "Iterations")->required();
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--log", tr.log, "Loss CSV (default: checkpoint path with .csv)");
    t->add_option("--lr", tr.cfg.adam.lr, "Adam learning rate");
    t->add_option("--batch", tr.cfg.batch, "Batch size");
    t->add_option("--crop", tr.cfg.crop, "Crop size");
    t->add_option("--tau", tr.cfg.loss.tau, "Loss pyramid levels");
    t->add_option("--lambda-z", tr.cfg.loss.lambda_z, "Mask loss weight");
    t->add_option("--lambda-w", tr.cfg.loss.lambda_w, "Weight penalty");
    t->add_option("--seed", tr.cfg.seed, "Random seed");
    t->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "Extra checkpoint cadence (0: end only)");

    InferArgs inf;
    auto* i = app.add_subcommand("infer", "Remove snow from one image");
    i->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
    i->add_option("--input", inf.input, "Input PNG")->required();
    i->add_option("--output", inf.output, "Output PNG")->required();
    i->add_option("--dump-intermediates", inf.dump, "Directory for z_hat, a, snow layer, y' and r dumps");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset manifest");
    e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    e->add_option("--data", ev.data, "Manifest")->required();
    e->add_option("--report", ev.report, "Report CSV")->required();

    GradcheckArgs gc;
    auto* g = app.add_subcommand("gradcheck", "Compare analytic and numeric parameter gradients");
    g->add_option("--seed", gc.cfg.seed, "Random seed");
    g->add_option("--tol", gc.cfg.tolerance, "Relative error tolerance");
    g->add_option("--elements", gc.cfg.elements_per_tensor, "Entries checked per parameter tensor");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        std::cerr << "desnow: " << err.what() << '\n';
        return 2;
    }

    try {
        if (*s)
            return run_synth(synth);
        if (*t)
            return run_train(tr);
        if (*i)
            return run_infer(inf);
        if (*e)
            return run_eval(ev);
        if (*g)
            return run_gradcheck(gc);
    } catch (const std::exception& err) {
        std::cerr << "desnow: " << err.what() << '\n';
        return 1;
    }
    return 1;
}
