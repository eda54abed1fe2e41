#pragma once

// Multi-resolution supernet. Feature node (i, d) sums the cells on every
// candidate edge into resolution d, each weighted by that edge's marginal
// probability q[i,e]; each cell mixes its N ops with weights alpha[i,e,:].

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dints/cell_ops.hpp"
#include "dints/nn_ops.hpp"
#include "dints/space.hpp"

namespace dints {

struct NetConfig {
    SpaceConfig space;
    int base_channels = 8;
    int height = 32;
    int width = 32;
    int classes = 2;
    int in_channels = 1;

    int channels(int d) const { return base_channels << d; }
    int height_at(int d) const { return height >> d; }
    int width_at(int d) const { return width >> d; }

    Shape feature_shape(int batch, int d) const { return {batch, channels(d), height_at(d), width_at(d)}; }

    void validate() const
    {
        space.validate();
        if (space.N > kMaxCellOps) throw ConfigError("space.N must be <= 5 (size of the cell op set)");
        if (base_channels < 1) throw ConfigError("net.base_channels must be >= 1");
        if (classes < 2) throw ConfigError("net.classes must be >= 2");
        if (in_channels < 1) throw ConfigError("net.in_channels must be >= 1");
        const int f = 1 << (space.D - 1);
        if (height < f || width < f || height % f || width % f)
            throw ConfigError("net.height and net.width must be positive multiples of 2^(D-1) = " + std::to_string(f));
    }
};

/// Named weight tensors. std::map keeps iteration order deterministic.
using ParamStore = std::map<std::string, Tensor>;
using VarStore = std::map<std::string, ad::Var>;

inline std::size_t count_params(const ParamStore& p)
{
    std::size_t n = 0;
    for (const auto& [_, t] : p) n += t.size();
    return n;
}

inline VarStore bind_params(ad::Tape& tape, const ParamStore& params, bool trainable)
{
    VarStore vars;
    for (const auto& [name, t] : params) vars.emplace(name, trainable ? tape.param(t) : tape.constant(t));
    return vars;
}

inline ad::Var lookup(const VarStore& vars, const std::string& name)
{
    auto it = vars.find(name);
    if (it == vars.end()) throw ValidationError("missing weight '" + name + "'");
    return it->second;
}

namespace pname {
inline std::string stem(int d, const char* what) { return "stem." + std::to_string(d) + "." + what; }
inline std::string cell(int i, int e, int op, const char* what)
{
    return "cell." + std::to_string(i) + "." + std::to_string(e) + "." + std::to_string(op) + "." + what;
}
inline std::string resample(int i, int e) { return "resample." + std::to_string(i) + "." + std::to_string(e) + ".w"; }
inline std::string head(int d) { return "head." + std::to_string(d) + ".w"; }
inline const std::string head_bias = "head.b";
} // namespace pname

// ---------------------------------------------------------------- weights

namespace detail {

template <class Rng>
Tensor he_normal(Shape shape, Rng& rng)
{
    const int fan_in = shape[1] * shape[2] * shape[3];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data) v = dist(rng);
    return t;
}

} // namespace detail

template <class Rng>
void add_stem_params(ParamStore& p, const NetConfig& cfg, int d, Rng& rng)
{
    const int c = cfg.channels(d);
    p[pname::stem(d, "w")] = detail::he_normal({c, cfg.in_channels, 3, 3}, rng);
    p[pname::stem(d, "b")] = Tensor({c}, 0.0);
    p[pname::stem(d, "gamma")] = Tensor({c}, 1.0);
    p[pname::stem(d, "beta")] = Tensor({c}, 0.0);
}

/// Resampling adapter of edge e (none for same-resolution edges).
template <class Rng>
void add_resample_params(ParamStore& p, const NetConfig& cfg, int i, const Edge& e, Rng& rng)
{
    if (e.kind() == EdgeKind::same) return;
    p[pname::resample(i, e.index)] = detail::he_normal({cfg.channels(e.dst_res), cfg.channels(e.src_res), 1, 1}, rng);
}

template <class Rng>
void add_op_params(ParamStore& p, const NetConfig& cfg, int i, const Edge& e, int op, Rng& rng)
{
    const int c = cfg.channels(e.dst_res);
    switch (static_cast<CellOp>(op)) {
    case CellOp::skip: return;
    case CellOp::conv3x3:
    case CellOp::dilated_conv3x3: p[pname::cell(i, e.index, op, "w")] = detail::he_normal({c, c, 3, 3}, rng); break;
    case CellOp::conv3x1_1x3:
        p[pname::cell(i, e.index, op, "w1")] = detail::he_normal({c, c, 3, 1}, rng);
        p[pname::cell(i, e.index, op, "w2")] = detail::he_normal({c, c, 1, 3}, rng);
        break;
    case CellOp::conv1x3_3x1:
        p[pname::cell(i, e.index, op, "w1")] = detail::he_normal({c, c, 1, 3}, rng);
        p[pname::cell(i, e.index, op, "w2")] = detail::he_normal({c, c, 3, 1}, rng);
        break;
    }
    p[pname::cell(i, e.index, op, "gamma")] = Tensor({c}, 1.0);
    p[pname::cell(i, e.index, op, "beta")] = Tensor({c}, 0.0);
}

template <class Rng>
void add_head_params(ParamStore& p, const NetConfig& cfg, int d, Rng& rng)
{
    const int c = cfg.channels(d);
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / c));
    Tensor w({cfg.classes, c, 1, 1}, 0.0);
    for (double& v : w.data) v = dist(rng);
    p[pname::head(d)] = std::move(w);
    if (!p.count(pname::head_bias)) p[pname::head_bias] = Tensor({cfg.classes}, 0.0);
}

/// Every edge of every layer owns independent weights for all N ops.
template <class Rng>
ParamStore init_supernet_weights(const NetConfig& cfg, Rng& rng)
{
    cfg.validate();
    ParamStore p;
    for (int d = 0; d < cfg.space.D; ++d) add_stem_params(p, cfg, d, rng);
    const auto edges = make_edges(cfg.space.D);
    for (int i = 0; i < cfg.space.L; ++i)
        for (const Edge& e : edges) {
            add_resample_params(p, cfg, i, e, rng);
            for (int op = 0; op < cfg.space.N; ++op) add_op_params(p, cfg, i, e, op, rng);
        }
    for (int d = 0; d < cfg.space.D; ++d) add_head_params(p, cfg, d, rng);
    return p;
}

// ---------------------------------------------------------------- forward

inline void check_feature(const ad::Var& x, const NetConfig& cfg, int d, const char* where)
{
    const Shape want = cfg.feature_shape(x.shape().at(0), d);
    if (x.shape() != want)
        throw ShapeError(std::string(where) + ": feature at resolution " + std::to_string(d) + " has shape " +
                         shape_str(x.shape()) + ", expected " + shape_str(want));
}

/// Stem at resolution d: average-pool the image d times, 3x3 conv with bias, instance norm.
inline ad::Var stem_forward_at(const VarStore& w, const NetConfig& cfg, ad::Var image, int d)
{
    ad::Var x = image;
    for (int k = 0; k < d; ++k) x = ad::downsample2x(x);
    x = ad::bias_add(ad::conv2d(x, lookup(w, pname::stem(d, "w"))), lookup(w, pname::stem(d, "b")));
    x = ad::instance_norm(x, lookup(w, pname::stem(d, "gamma")), lookup(w, pname::stem(d, "beta")));
    check_feature(x, cfg, d, "stem");
    return x;
}

/// Layer-0 features at every resolution.
inline std::vector<ad::Var> stem_forward(const VarStore& w, const NetConfig& cfg, ad::Var image)
{
    const Shape want{image.shape().at(0), cfg.in_channels, cfg.height, cfg.width};
    if (image.shape() != want)
        throw ShapeError("stem: image shape " + shape_str(image.shape()) + ", expected " + shape_str(want));
    std::vector<ad::Var> out;
    for (int d = 0; d < cfg.space.D; ++d) out.push_back(stem_forward_at(w, cfg, image, d));
    return out;
}

/// Spatial resampling followed by a 1x1 channel adapter on up/down edges.
inline ad::Var resample_edge(const VarStore& w, int i, const Edge& e, ad::Var x)
{
    switch (e.kind()) {
    case EdgeKind::same: return x;
    case EdgeKind::down: x = ad::downsample2x(x); break;
    case EdgeKind::up: x = ad::upsample2x(x); break;
    }
    return ad::conv2d(x, lookup(w, pname::resample(i, e.index)));
}

/// One candidate op. `relu_x` is the ReLU of the cell input, shared by all
/// non-skip ops; `x` is the raw input used by skip.
inline ad::Var op_forward(const VarStore& w, int i, int e, int op, ad::Var x, ad::Var relu_x)
{
    ad::Var y;
    switch (static_cast<CellOp>(op)) {
    case CellOp::skip: return x;
    case CellOp::conv3x3: y = ad::conv2d(relu_x, lookup(w, pname::cell(i, e, op, "w"))); break;
    case CellOp::dilated_conv3x3: y = ad::conv2d(relu_x, lookup(w, pname::cell(i, e, op, "w")), 2); break;
    case CellOp::conv3x1_1x3:
    case CellOp::conv1x3_3x1:
        y = ad::conv2d(ad::conv2d(relu_x, lookup(w, pname::cell(i, e, op, "w1"))), lookup(w, pname::cell(i, e, op, "w2")));
        break;
    }
    return ad::instance_norm(y, lookup(w, pname::cell(i, e, op, "gamma")), lookup(w, pname::cell(i, e, op, "beta")));
}

/// x_out = sum_n alpha_n O_n(x_in); x_in is already resampled to the cell's resolution.
inline ad::Var cell_forward(const VarStore& w, int i, int e, ad::Var x_in, std::span<const ad::Var> alpha_row)
{
    const ad::Var r = ad::relu(x_in);
    ad::Var acc;
    for (std::size_t n = 0; n < alpha_row.size(); ++n) {
        const ad::Var term = ad::scale_by(op_forward(w, i, e, static_cast<int>(n), x_in, r), alpha_row[n]);
        acc = acc.valid() ? ad::add(acc, term) : term;
    }
    return acc;
}

/// Per-resolution 1x1 projection to class logits, upsampled to full
/// resolution and summed, plus a shared bias. Absent nodes contribute nothing.
inline ad::Var output_head(const VarStore& w, const NetConfig& cfg, const std::vector<std::optional<ad::Var>>& finals)
{
    ad::Var acc;
    for (int d = 0; d < static_cast<int>(finals.size()); ++d) {
        if (!finals[static_cast<std::size_t>(d)]) continue;
        ad::Var y = ad::conv2d(*finals[static_cast<std::size_t>(d)], lookup(w, pname::head(d)));
        for (int k = 0; k < d; ++k) y = ad::upsample2x(y);
        acc = acc.valid() ? ad::add(acc, y) : y;
    }
    if (!acc.valid()) throw ValidationError("output head: no active final-layer feature node");
    const ad::Var logits = ad::bias_add(acc, lookup(w, pname::head_bias));
    const Shape want{logits.shape()[0], cfg.classes, cfg.height, cfg.width};
    if (logits.shape() != want) throw ShapeError("output head produced " + shape_str(logits.shape()));
    return logits;
}

/// Relaxed forward pass in edge-marginal form.
/// q: [L, E] edge marginals, alpha: [L, E, N] op weights, image: [B, C_in, H, W].
inline ad::Var relaxed_forward(const VarStore& w, const NetConfig& cfg, ad::Var q, ad::Var alpha, ad::Var image)
{
    const int L = cfg.space.L, D = cfg.space.D, E = cfg.space.num_edges(), N = cfg.space.N;
    if (q.shape() != Shape{L, E}) throw ShapeError("relaxed_forward: q has shape " + shape_str(q.shape()));
    if (alpha.shape() != Shape{L, E, N}) throw ShapeError("relaxed_forward: alpha has shape " + shape_str(alpha.shape()));
    const auto edges = make_edges(D);
    std::vector<ad::Var> nodes = stem_forward(w, cfg, image);
    for (int i = 0; i < L; ++i) {
        std::vector<ad::Var> next(static_cast<std::size_t>(D));
        for (const Edge& e : edges) {
            std::vector<ad::Var> a;
            for (int n = 0; n < N; ++n) a.push_back(ad::at(alpha, (static_cast<std::size_t>(i) * E + e.index) * N + n));
            const ad::Var x = resample_edge(w, i, e, nodes[static_cast<std::size_t>(e.src_res)]);
            const ad::Var term = ad::scale_by(cell_forward(w, i, e.index, x, a),
                                              ad::at(q, static_cast<std::size_t>(i) * E + e.index));
            ad::Var& slot = next[static_cast<std::size_t>(e.dst_res)];
            slot = slot.valid() ? ad::add(slot, term) : term;
        }
        for (int d = 0; d < D; ++d) {
            check_feature(next[static_cast<std::size_t>(d)], cfg, d, "relaxed_forward");
            if (!next[static_cast<std::size_t>(d)].value().all_finite())
                throw DivergenceError("non-finite activations at layer " + std::to_string(i + 1));
        }
        nodes = std::move(next);
    }
    std::vector<std::optional<ad::Var>> finals(nodes.begin(), nodes.end());
    return output_head(w, cfg, finals);
}

/// Value-only convenience wrapper around relaxed_forward.
inline Tensor relaxed_forward_values(const ParamStore& weights, const NetConfig& cfg, const Tensor& q,
                                     const Tensor& alpha, const Tensor& image)
{
    ad::Tape tape;
    const VarStore w = bind_params(tape, weights, false);
    return relaxed_forward(w, cfg, tape.constant(q), tape.constant(alpha), tape.constant(image)).value();
}

// ---------------------------------------------------------------- checkpoints

inline nlohmann::json params_to_json(const ParamStore& p)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : p) j[name] = {{"shape", t.shape}, {"data", t.data}};
    return j;
}

inline ParamStore params_from_json(const nlohmann::json& j)
{
    ParamStore p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().contains("shape") || !it.value().contains("data"))
            throw ValidationError("weights: entry '" + it.key() + "' lacks shape or data");
        p[it.key()] = Tensor(it.value().at("shape").get<Shape>(), it.value().at("data").get<std::vector<double>>());
    }
    return p;
}

} // namespace dints
