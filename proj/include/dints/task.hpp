#pragma once

// Synthetic 2D segmentation task: a deterministic shape generator, the
// dice + cross-entropy training loss, the hard dice metric and the
// train1/train2 split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dints/autodiff.hpp"
#include "dints/error.hpp"
#include "dints/tensor.hpp"

namespace dints::task {

struct GeneratorConfig {
    int height = 32;
    int width = 32;
    int classes = 2;
    double noise = 0.05;      // std of the Gaussian noise inside shapes
    double min_fg = 0.05;     // accepted foreground fraction range
    double max_fg = 0.6;

    void validate() const
    {
        if (height < 4 || width < 4) throw ConfigError("task image must be at least 4x4");
        if (classes < 2) throw ConfigError("task.classes must be >= 2");
        if (!(noise >= 0.0)) throw ConfigError("task.noise must be >= 0");
        if (!(min_fg >= 0.0 && min_fg < max_fg && max_fg <= 1.0)) throw ConfigError("task foreground range is invalid");
    }
};

struct Sample {
    Tensor image;            // [1, H, W], values in [0, 1]
    std::vector<int> mask;   // H*W labels in [0, classes)
};

/// Intensity band of foreground class k (1-based): [0.4, 0.6] split evenly.
inline std::pair<double, double> class_band(int k, int classes)
{
    const double w = 0.2 / (classes - 1);
    return {0.4 + w * (k - 1), 0.4 + w * k};
}

/// Pure function of (seed, index). The background is uniform noise over
/// [0, 1]; each foreground class gets 1-3 rectangles or ellipses filled with
/// a level from its band plus mild Gaussian noise. The background has the
/// same mean as the shapes, so they differ by texture rather than brightness.
/// Draws are repeated until the foreground fraction is in range.
inline Sample generate_sample(std::uint64_t seed, std::uint64_t index, const GeneratorConfig& cfg)
{
    cfg.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const int H = cfg.height, W = cfg.width;
    const std::size_t P = static_cast<std::size_t>(H) * W;

    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<int> mask(P, 0);
        std::vector<double> level(P, -1.0);
        for (int k = 1; k < cfg.classes; ++k) {
            const auto [lo, hi] = class_band(k, cfg.classes);
            const int shapes = 1 + static_cast<int>(unit(rng) * 3.0);
            for (int s = 0; s < shapes; ++s) {
                const bool ellipse = unit(rng) < 0.5;
                const double cy = unit(rng) * H, cx = unit(rng) * W;
                const double ry = H * (0.12 + 0.18 * unit(rng)), rx = W * (0.12 + 0.18 * unit(rng));
                const double value = lo + (hi - lo) * unit(rng);
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::fabs(dy) <= 1.0 && std::fabs(dx) <= 1.0;
                        if (!inside) continue;
                        mask[static_cast<std::size_t>(y) * W + x] = k;
                        level[static_cast<std::size_t>(y) * W + x] = value;
                    }
            }
        }
        const auto fg = static_cast<double>(std::count_if(mask.begin(), mask.end(), [](int v) { return v != 0; }));
        const double frac = fg / static_cast<double>(P);
        if (frac < cfg.min_fg || frac > cfg.max_fg) continue;
        Sample out{Tensor({1, H, W}, 0.0), std::move(mask)};
        for (std::size_t k = 0; k < P; ++k)
            out.image.data[k] = level[k] < 0.0 ? unit(rng) : std::clamp(level[k] + cfg.noise * noise(rng), 0.0, 1.0);
        return out;
    }
    throw ValidationError("generate_sample: no draw met the foreground fraction bounds");
}

struct Batch {
    Tensor images;            // [B, 1, H, W]
    std::vector<int> labels;  // B*H*W
};

inline Batch make_batch(const std::vector<Sample>& samples)
{
    if (samples.empty()) throw ValidationError("make_batch: empty batch");
    const Shape& s = samples.front().image.shape;
    Batch b{Tensor({static_cast<int>(samples.size()), s[0], s[1], s[2]}, 0.0), {}};
    std::size_t off = 0;
    for (const Sample& smp : samples) {
        if (smp.image.shape != s) throw ShapeError("make_batch: mixed image shapes");
        std::copy(smp.image.data.begin(), smp.image.data.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += smp.image.size();
        b.labels.insert(b.labels.end(), smp.mask.begin(), smp.mask.end());
    }
    return b;
}

inline Batch make_batch(std::uint64_t seed, const std::vector<std::uint64_t>& ids, const GeneratorConfig& cfg)
{
    std::vector<Sample> samples;
    for (std::uint64_t id : ids) samples.push_back(generate_sample(seed, id, cfg));
    return make_batch(samples);
}

// ---------------------------------------------------------------- loss

struct SegLossParts {
    double dice_loss = 0.0; // 1 - mean soft dice over (sample, class)
    double ce = 0.0;        // mean pixelwise cross-entropy
};

namespace detail {

inline void check_labels(const Shape& s, const std::vector<int>& labels)
{
    if (s.size() != 4) throw ShapeError("seg_loss: logits must be [B, C, H, W], got " + shape_str(s));
    if (labels.size() != static_cast<std::size_t>(s[0]) * s[2] * s[3])
        throw ShapeError("seg_loss: " + std::to_string(labels.size()) + " labels for logits " + shape_str(s));
    for (int v : labels)
        if (v < 0 || v >= s[1]) throw ValidationError("seg_loss: label " + std::to_string(v) + " out of range");
}

/// Per-pixel softmax over the class axis; also returns log p of the true class.
inline Tensor class_softmax(const Tensor& z, const std::vector<int>& labels, std::vector<double>* log_p_true)
{
    const int B = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
    Tensor p(z.shape, 0.0);
    for (int b = 0; b < B; ++b)
        for (int x = 0; x < HW; ++x) {
            const std::size_t base = static_cast<std::size_t>(b) * C * HW + static_cast<std::size_t>(x);
            double mx = -INFINITY;
            for (int c = 0; c < C; ++c) mx = std::max(mx, z.data[base + static_cast<std::size_t>(c) * HW]);
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += std::exp(z.data[base + static_cast<std::size_t>(c) * HW] - mx);
            const double lse = mx + std::log(s);
            for (int c = 0; c < C; ++c) p.data[base + static_cast<std::size_t>(c) * HW] = std::exp(z.data[base + static_cast<std::size_t>(c) * HW] - lse);
            if (log_p_true) {
                const int y = labels[static_cast<std::size_t>(b) * HW + static_cast<std::size_t>(x)];
                log_p_true->push_back(z.data[base + static_cast<std::size_t>(y) * HW] - lse);
            }
        }
    return p;
}

} // namespace detail

inline constexpr double kDiceSmooth = 1e-5;

/// Values of both halves of the loss, without recording anything.
inline SegLossParts seg_loss_parts(const Tensor& logits, const std::vector<int>& labels, double smooth = kDiceSmooth)
{
    detail::check_labels(logits.shape, labels);
    const int B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    std::vector<double> lpt;
    const Tensor p = detail::class_softmax(logits, labels, &lpt);
    SegLossParts out;
    for (double v : lpt) out.ce -= v;
    out.ce /= static_cast<double>(lpt.size());
    double dice_sum = 0.0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double inter = 0.0, sp = 0.0, sg = 0.0;
            for (int x = 0; x < HW; ++x) {
                const double pv = p.data[(static_cast<std::size_t>(b) * C + c) * HW + x];
                const double g = labels[static_cast<std::size_t>(b) * HW + x] == c ? 1.0 : 0.0;
                inter += pv * g;
                sp += pv;
                sg += g;
            }
            dice_sum += (2.0 * inter + smooth) / (sp + sg + smooth);
        }
    out.dice_loss = 1.0 - dice_sum / (static_cast<double>(B) * C);
    return out;
}

/// 0.5 * soft dice loss + 0.5 * cross-entropy, as one tape primitive.
/// Dice is averaged over every (sample, class) pair, background included.
inline ad::Var seg_loss(ad::Var logits, const std::vector<int>& labels, double smooth = kDiceSmooth)
{
    const Tensor& z = logits.value();
    const SegLossParts parts = seg_loss_parts(z, labels, smooth);
    const double value = 0.5 * parts.dice_loss + 0.5 * parts.ce;
    return logits.tape->record(Tensor::scalar(value), {logits}, [logits, labels, smooth](ad::Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gz = t.grad_sink(logits);
        if (!gz) return;
        const Tensor& zv = logits.value();
        const int B = zv.dim(0), C = zv.dim(1), HW = zv.dim(2) * zv.dim(3);
        const Tensor p = detail::class_softmax(zv, labels, nullptr);
        const double up = g.item();
        const double w_ce = 0.5 * up / (static_cast<double>(B) * HW);
        const double w_dice = -0.5 * up / (static_cast<double>(B) * C);
        // dL/dp from the dice half, then through the softmax Jacobian.
        Tensor gp(zv.shape, 0.0);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double inter = 0.0, sp = 0.0, sg = 0.0;
                const std::size_t base = (static_cast<std::size_t>(b) * C + c) * HW;
                for (int x = 0; x < HW; ++x) {
                    const double gt = labels[static_cast<std::size_t>(b) * HW + x] == c ? 1.0 : 0.0;
                    inter += p.data[base + x] * gt;
                    sp += p.data[base + x];
                    sg += gt;
                }
                const double den = sp + sg + smooth;
                for (int x = 0; x < HW; ++x) {
                    const double gt = labels[static_cast<std::size_t>(b) * HW + x] == c ? 1.0 : 0.0;
                    gp.data[base + x] = w_dice * (2.0 * gt * den - (2.0 * inter + smooth)) / (den * den);
                }
            }
        for (int b = 0; b < B; ++b)
            for (int x = 0; x < HW; ++x) {
                const std::size_t base = static_cast<std::size_t>(b) * C * HW + static_cast<std::size_t>(x);
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += gp.data[base + static_cast<std::size_t>(c) * HW] * p.data[base + static_cast<std::size_t>(c) * HW];
                const int y = labels[static_cast<std::size_t>(b) * HW + static_cast<std::size_t>(x)];
                for (int c = 0; c < C; ++c) {
                    const std::size_t k = base + static_cast<std::size_t>(c) * HW;
                    gz->data[k] += p.data[k] * (gp.data[k] - dot) + w_ce * (p.data[k] - (c == y ? 1.0 : 0.0));
                }
            }
    });
}

// ---------------------------------------------------------------- metric

/// Hard-prediction dice per foreground class, accumulated over many images.
class DiceAccumulator {
public:
    explicit DiceAccumulator(int classes) : tp_(static_cast<std::size_t>(classes), 0), fp_(tp_), fn_(tp_) {}

    /// logits [B, C, H, W]; prediction is the argmax class, ties to the lower index.
    void add(const Tensor& logits, const std::vector<int>& labels)
    {
        detail::check_labels(logits.shape, labels);
        const int B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
        if (C != static_cast<int>(tp_.size())) throw ShapeError("DiceAccumulator: class count mismatch");
        for (int b = 0; b < B; ++b)
            for (int x = 0; x < HW; ++x) {
                int pred = 0;
                for (int c = 1; c < C; ++c)
                    if (logits.at(b, c, x / logits.dim(3), x % logits.dim(3)) > logits.at(b, pred, x / logits.dim(3), x % logits.dim(3))) pred = c;
                const int y = labels[static_cast<std::size_t>(b) * HW + x];
                if (pred == y) ++tp_[static_cast<std::size_t>(y)];
                else {
                    ++fp_[static_cast<std::size_t>(pred)];
                    ++fn_[static_cast<std::size_t>(y)];
                }
            }
    }

    /// Dice of class c; 1 when the class is absent from both prediction and truth.
    double dice(int c) const
    {
        const auto k = static_cast<std::size_t>(c);
        const double den = 2.0 * tp_[k] + fp_[k] + fn_[k];
        return den == 0.0 ? 1.0 : 2.0 * tp_[k] / den;
    }

    std::vector<double> foreground_dice() const
    {
        std::vector<double> out;
        for (int c = 1; c < static_cast<int>(tp_.size()); ++c) out.push_back(dice(c));
        return out;
    }

    double mean_foreground_dice() const
    {
        const auto d = foreground_dice();
        return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    }

private:
    std::vector<std::uint64_t> tp_, fp_, fn_;
};

// ---------------------------------------------------------------- split

struct Split {
    std::vector<std::uint64_t> train1; // network weights
    std::vector<std::uint64_t> train2; // architecture parameters
};

/// Deterministic shuffle of `ids`; the first round(ratio * n) go to train1.
/// Both halves are returned sorted.
inline Split split(std::vector<std::uint64_t> ids, double ratio, std::uint64_t seed)
{
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n1 = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
    Split s{{ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n1)}, {ids.begin() + static_cast<std::ptrdiff_t>(n1), ids.end()}};
    std::sort(s.train1.begin(), s.train1.end());
    std::sort(s.train2.begin(), s.train2.end());
    return s;
}

// ---------------------------------------------------------------- export

/// Writes samples [first, first + count) as images.f64 (little-endian doubles,
/// sample-major), masks.i32 and manifest.json.
inline void export_dataset(const std::string& dir, std::uint64_t seed, std::uint64_t first, std::uint64_t count,
                           const GeneratorConfig& cfg)
{
    std::filesystem::create_directories(dir);
    std::ofstream img(dir + "/images.f64", std::ios::binary), msk(dir + "/masks.i32", std::ios::binary);
    if (!img || !msk) throw ValidationError("cannot write dataset files in " + dir);
    for (std::uint64_t k = 0; k < count; ++k) {
        const Sample s = generate_sample(seed, first + k, cfg);
        img.write(reinterpret_cast<const char*>(s.image.data.data()), static_cast<std::streamsize>(s.image.size() * sizeof(double)));
        for (int v : s.mask) {
            const auto v32 = static_cast<std::int32_t>(v);
            msk.write(reinterpret_cast<const char*>(&v32), sizeof v32);
        }
    }
    const nlohmann::json manifest{{"seed", seed},       {"first_index", first},  {"count", count},
                                  {"height", cfg.height}, {"width", cfg.width},  {"classes", cfg.classes},
                                  {"noise", cfg.noise}, {"min_fg", cfg.min_fg}, {"max_fg", cfg.max_fg},
                                  {"images", "images.f64"}, {"masks", "masks.i32"}};
    std::ofstream(dir + "/manifest.json") << manifest.dump(2) << '\n';
}

inline std::vector<Sample> import_dataset(const std::string& dir)
{
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw ValidationError("dataset manifest missing in " + dir);
    const auto m = nlohmann::json::parse(mf);
    const int H = m.at("height").get<int>(), W = m.at("width").get<int>();
    const auto count = m.at("count").get<std::uint64_t>();
    std::ifstream img(dir + "/images.f64", std::ios::binary), msk(dir + "/masks.i32", std::ios::binary);
    if (!img || !msk) throw ValidationError("dataset payload missing in " + dir);
    std::vector<Sample> out;
    const std::size_t P = static_cast<std::size_t>(H) * W;
    for (std::uint64_t k = 0; k < count; ++k) {
        Sample s{Tensor({1, H, W}, 0.0), std::vector<int>(P)};
        img.read(reinterpret_cast<char*>(s.image.data.data()), static_cast<std::streamsize>(P * sizeof(double)));
        std::vector<std::int32_t> raw(P);
        msk.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(P * sizeof(std::int32_t)));
        if (!img || !msk) throw ValidationError("dataset payload truncated in " + dir);
        std::copy(raw.begin(), raw.end(), s.mask.begin());
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace dints::task
