#pragma once

// Procedural snow: base masks of soft, optionally motion-smeared particles in
// three size categories, and the S/M/L sample synthesis built on them.

#include "desnow/image_io.hpp"
#include "desnow/random.hpp"
#include "desnow/snow_model.hpp"
#include "desnow/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace desnow {

enum class ParticleSize { small, medium, large };
enum class Subset { s, m, l };

struct ParticleSpec {
    double radius_min, radius_max; ///< pixels
    double streak_max;             ///< longest motion smear, pixels
    double area_per_particle;      ///< mask area per particle at default density
};

inline constexpr ParticleSpec particle_spec(ParticleSize size)
{
    switch (size) {
    case ParticleSize::small:
        return {1, 3, 4, 90};
    case ParticleSize::medium:
        return {4, 8, 8, 1400};
    case ParticleSize::large:
        return {9, 16, 12, 4500};
    }
    return {1, 3, 4, 90};
}

inline constexpr double kOpacityMin = 0.3;
inline constexpr double kOpacityMax = 1.0;

/// Largest axis-aligned extent, in pixels, of a single particle of `size`.
inline std::int64_t particle_extent_bound(ParticleSize size)
{
    const auto s = particle_spec(size);
    return static_cast<std::int64_t>(std::floor(2 * s.radius_max + s.streak_max)) + 1;
}

inline const char* to_string(ParticleSize size)
{
    switch (size) {
    case ParticleSize::small:
        return "small";
    case ParticleSize::medium:
        return "medium";
    case ParticleSize::large:
        return "large";
    }
    return "?";
}

inline Subset parse_subset(const std::string& s)
{
    if (s == "s" || s == "S")
        return Subset::s;
    if (s == "m" || s == "M")
        return Subset::m;
    if (s == "l" || s == "L")
        return Subset::l;
    throw Error("unknown subset '" + s + "' (expected s, m or l)");
}

/// Categories overlaid for one sample: S uses small, M adds medium, L adds large.
inline std::vector<ParticleSize> subset_categories(Subset subset)
{
    switch (subset) {
    case Subset::s:
        return {ParticleSize::small};
    case Subset::m:
        return {ParticleSize::small, ParticleSize::medium};
    case Subset::l:
        return {ParticleSize::small, ParticleSize::medium, ParticleSize::large};
    }
    return {};
}

struct Particle {
    double x0, y0, x1, y1; ///< smear segment end points
    double radius;
    double opacity;
};

struct BaseMask {
    Tensor<float> z; ///< 1 x P x Q
    ParticleSize category = ParticleSize::small;
    double angle = 0; ///< trajectory direction, radians
    std::vector<Particle> particles;
};

namespace detail {

inline double point_segment_distance(double px, double py, const Particle& p)
{
    const double dx = p.x1 - p.x0, dy = p.y1 - p.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - p.x0) * dx + (py - p.y0) * dy) / len2 : 0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = p.x0 + t * dx - px, ey = p.y0 + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

inline double segment_distance(const Particle& a, const Particle& b)
{
    // Non-crossing segments are closest at an end point.
    const double d = std::min({point_segment_distance(a.x0, a.y0, b), point_segment_distance(a.x1, a.y1, b),
                               point_segment_distance(b.x0, b.y0, a), point_segment_distance(b.x1, b.y1, a)});
    const double ax = a.x1 - a.x0, ay = a.y1 - a.y0, bx = b.x1 - b.x0, by = b.y1 - b.y0;
    const double den = ax * by - ay * bx;
    if (den != 0) {
        const double s = ((b.x0 - a.x0) * by - (b.y0 - a.y0) * bx) / den;
        const double t = ((b.x0 - a.x0) * ay - (b.y0 - a.y0) * ax) / den;
        if (s >= 0 && s <= 1 && t >= 0 && t <= 1)
            return 0;
    }
    return d;
}

/// Soft capsule: Gaussian falloff with distance from the smear segment,
/// sigma = radius / 2, cut to zero at the radius.
inline void splat(Tensor<float>& z, const Particle& p)
{
    const std::int64_t h = z.dim(1), w = z.dim(2);
    auto zv = z.mutable_values();
    const auto xlo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(std::min(p.x0, p.x1) - p.radius)));
    const auto xhi = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::floor(std::max(p.x0, p.x1) + p.radius)));
    const auto ylo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(std::min(p.y0, p.y1) - p.radius)));
    const auto yhi = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::floor(std::max(p.y0, p.y1) + p.radius)));
    const double sigma = p.radius / 2;
    for (std::int64_t y = ylo; y <= yhi; ++y)
        for (std::int64_t x = xlo; x <= xhi; ++x) {
            const double d = point_segment_distance(static_cast<double>(x), static_cast<double>(y), p);
            if (d >= p.radius)
                continue;
            const auto v = static_cast<float>(p.opacity * std::exp(-d * d / (2 * sigma * sigma)));
            auto& cell = zv[static_cast<std::size_t>(y * w + x)];
            cell = std::max(cell, v);
        }
}

} // namespace detail

/// Particle count at the category's default density for a height x width mask.
inline std::int64_t default_particle_count(ParticleSize size, std::int64_t height, std::int64_t width)
{
    return static_cast<std::int64_t>(std::lround(static_cast<double>(height * width) / particle_spec(size).area_per_particle));
}

/// Renders a base mask. Particles are placed by dart throwing so that no two
/// touch, which keeps every connected component a single particle; darts
/// that find no free spot after a bounded number of attempts are dropped.
/// A negative `count` selects the default density.
inline BaseMask render_base_mask(ParticleSize size, std::uint64_t seed, std::int64_t height, std::int64_t width,
                                 std::int64_t count = -1)
{
    if (height <= 0 || width <= 0)
        throw ShapeError("render_base_mask: mask extents must be positive");
    const auto spec = particle_spec(size);
    if (count < 0)
        count = default_particle_count(size, height, width);

    Philox rng(seed);
    BaseMask mask;
    mask.category = size;
    mask.z = Tensor<float>(Shape{1, height, width});
    mask.angle = rng.uniform(0, std::numbers::pi);
    constexpr int kAttempts = 30;
    for (std::int64_t n = 0; n < count; ++n) {
        for (int attempt = 0; attempt < kAttempts; ++attempt) {
            Particle p{};
            p.radius = rng.uniform(spec.radius_min, spec.radius_max);
            p.opacity = rng.uniform(kOpacityMin, kOpacityMax);
            const double len = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0, spec.streak_max);
            const double angle = mask.angle + rng.uniform(-0.15, 0.15);
            p.x0 = rng.uniform(0, static_cast<double>(width));
            p.y0 = rng.uniform(0, static_cast<double>(height));
            p.x1 = p.x0 + len * std::cos(angle);
            p.y1 = p.y0 + len * std::sin(angle);
            // Two pixels of clearance so 8-connected labelling never merges neighbours.
            const bool clear = std::none_of(mask.particles.begin(), mask.particles.end(), [&](const Particle& q) {
                return detail::segment_distance(p, q) < p.radius + q.radius + 2;
            });
            if (clear) {
                mask.particles.push_back(p);
                break;
            }
        }
    }
    for (const auto& p : mask.particles)
        detail::splat(mask.z, p);
    return mask;
}

struct SynthConfig {
    Subset subset = Subset::s;
    double brightness_low_factor = 0.7;
    double jitter = 0; ///< per-channel uniform offset amplitude on a
    std::int64_t mask_margin = 32; ///< base masks exceed the image by this much per axis

    void validate() const
    {
        if (!(brightness_low_factor > 0 && brightness_low_factor <= 1))
            throw Error("synth config: brightness factor must lie in (0,1]");
        if (jitter < 0)
            throw Error("synth config: jitter must be >= 0");
        if (mask_margin < 1)
            throw Error("synth config: mask margin must be >= 1");
    }
};

/// Base masks for one sample of `cfg.subset`, each strictly larger than an
/// h x w image.
inline std::vector<BaseMask> draw_masks(const SynthConfig& cfg, std::int64_t h, std::int64_t w, std::uint64_t seed)
{
    cfg.validate();
    std::vector<BaseMask> masks;
    std::uint64_t k = 0;
    for (auto size : subset_categories(cfg.subset))
        masks.push_back(render_base_mask(size, derive_seed(seed, k++), h + cfg.mask_margin, w + cfg.mask_margin));
    return masks;
}

/// Overlays randomly cropped base masks on a clean 3 x H x W image.
inline SnowTriplet<float> synthesize_sample(const Tensor<float>& y, const SynthConfig& cfg,
                                            const std::vector<BaseMask>& masks, std::uint64_t seed)
{
    cfg.validate();
    if (y.rank() != 3 || y.dim(0) != 3)
        throw ShapeError("synthesize_sample: expected a 3xHxW clean image");
    const std::int64_t h = y.dim(1), w = y.dim(2);
    Philox rng(seed, 1);

    SnowTriplet<float> t;
    t.y = y.clone();
    t.z = Tensor<float>(Shape{1, h, w});
    auto zv = t.z.mutable_values();
    for (const auto& m : masks) {
        const std::int64_t mh = m.z.dim(1), mw = m.z.dim(2);
        if (mh < h || mw < w)
            throw ShapeError("synthesize_sample: base mask " + to_string(m.z.shape()) + " smaller than image");
        const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(mh - h + 1)));
        const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(mw - w + 1)));
        auto mv = m.z.values();
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                auto& cell = zv[static_cast<std::size_t>(r * w + c)];
                cell = std::max(cell, mv[static_cast<std::size_t>((r + oy) * mw + c + ox)]);
            }
    }
    for (auto& v : zv)
        v = std::clamp(v, 0.0f, 1.0f);

    const auto yv = y.values();
    const double peak = *std::max_element(yv.begin(), yv.end());
    const double b = rng.uniform(cfg.brightness_low_factor * peak, peak);
    t.a = Tensor<float>(Shape{3, h, w});
    auto av = t.a.mutable_values();
    for (std::int64_t c = 0; c < 3; ++c) {
        const double offset = cfg.jitter > 0 ? rng.uniform(-cfg.jitter, cfg.jitter) : 0.0;
        const auto v = static_cast<float>(std::clamp(b + offset, 0.0, 1.0));
        std::fill(av.begin() + c * h * w, av.begin() + (c + 1) * h * w, v);
    }
    t.x = compose(t.y, t.z, t.a);
    return t;
}

struct ManifestEntry {
    std::filesystem::path x, y, z, a;
    std::uint64_t seed = 0;
};

/// Tab-separated x, y, z, a, seed; relative paths resolve against the
/// manifest's directory.
inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries)
{
    std::ofstream os(path);
    if (!os)
        throw Error("cannot open " + path.string() + " for writing");
    for (const auto& e : entries)
        os << e.x.generic_string() << '\t' << e.y.generic_string() << '\t' << e.z.generic_string() << '\t'
           << e.a.generic_string() << '\t' << e.seed << '\n';
    if (!os)
        throw Error("write failed: " + path.string());
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw Error("cannot open manifest " + path.string());
    const auto base = path.parent_path();
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, '\t'))
            cols.push_back(col);
        if (cols.size() != 5)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 5 tab-separated columns");
        ManifestEntry e;
        e.x = base / cols[0];
        e.y = base / cols[1];
        e.z = base / cols[2];
        e.a = base / cols[3];
        try {
            e.seed = std::stoull(cols[4]);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad seed '" + cols[4] + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

struct DatasetOptions {
    SynthConfig synth{};
    std::int64_t max_side = 640; ///< clean images are shrunk to fit
    std::int64_t size = 0;       ///< if > 0, each sample is a random size x size crop of its clean image
};

inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir))
        throw Error("not a directory: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (e.is_regular_file() && ext == ".png")
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Writes `count` samples to out_dir (x and y as PNG, z and a as .dsnt) and
/// returns the manifest with resolved paths; out_dir/manifest.tsv holds the
/// same entries relative to out_dir. Sample i uses
/// clean image i mod n (sorted by file name) and seed derive_seed(seed, i).
inline std::vector<ManifestEntry> build_dataset(const std::filesystem::path& clean_dir,
                                                const std::filesystem::path& out_dir, std::int64_t count,
                                                std::uint64_t seed, const DatasetOptions& opt = {})
{
    opt.synth.validate();
    if (count < 0)
        throw Error("build_dataset: count must be >= 0");
    const auto sources = list_pngs(clean_dir);
    if (sources.empty())
        throw Error("no PNG images in " + clean_dir.string());
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw Error("cannot create output directory " + out_dir.string());

    std::vector<Tensor<float>> clean;
    for (const auto& p : sources)
        clean.push_back(quantize_u8(limit_size(read_png(p), opt.max_side)));

    std::vector<ManifestEntry> entries;
    for (std::int64_t i = 0; i < count; ++i) {
        const std::uint64_t sample_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        Tensor<float> y = clean[static_cast<std::size_t>(i) % clean.size()];
        if (opt.size > 0) {
            const std::int64_t h = y.dim(1), w = y.dim(2);
            if (h < opt.size || w < opt.size)
                throw ShapeError("clean image smaller than requested sample size");
            Philox rng(sample_seed, 2);
            const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - opt.size + 1)));
            const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - opt.size + 1)));
            Tensor<float> crop(Shape{3, opt.size, opt.size});
            auto cv = crop.mutable_values();
            auto yv = y.values();
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t r = 0; r < opt.size; ++r)
                    for (std::int64_t q = 0; q < opt.size; ++q)
                        cv[static_cast<std::size_t>((c * opt.size + r) * opt.size + q)] =
                            yv[static_cast<std::size_t>((c * h + r + oy) * w + q + ox)];
            y = crop;
        }
        const auto masks = draw_masks(opt.synth, y.dim(1), y.dim(2), sample_seed);
        const auto t = synthesize_sample(y, opt.synth, masks, sample_seed);

        char stem[32];
        std::snprintf(stem, sizeof stem, "%06lld", static_cast<long long>(i));
        ManifestEntry e{std::string(stem) + "_x.png", std::string(stem) + "_y.png", std::string(stem) + "_z.dsnt",
                        std::string(stem) + "_a.dsnt", sample_seed};
        write_png(out_dir / e.x, t.x);
        write_png(out_dir / e.y, t.y);
        save_dsnt(out_dir / e.z, t.z);
        save_dsnt(out_dir / e.a, t.a);
        entries.push_back(std::move(e));
    }
    write_manifest(out_dir / "manifest.tsv", entries);
    for (auto& e : entries)
        for (auto* p : {&e.x, &e.y, &e.z, &e.a})
            *p = out_dir / *p;
    return entries;
}

} // namespace desnow
