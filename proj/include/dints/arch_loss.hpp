#pragma once

// Architecture regularizers: entropy of alpha and eta, the topology loss
// that scores how likely each super node is to be feasible, and the memory
// budget loss. Each has a plain evaluation and a differentiable tape form.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dints/cell_ops.hpp"
#include "dints/relax.hpp"
#include "dints/space.hpp"

namespace dints {

// ---------------------------------------------------------------- entropy

inline double entropy_alpha(const Tensor& alpha)
{
    if (alpha.rank() != 3) throw ShapeError("entropy_alpha expects [L,E,N], got " + shape_str(alpha.shape));
    double acc = 0.0;
    for (double a : alpha.data) acc += a * std::log(std::max(a, kProbEps));
    return -acc / static_cast<double>(alpha.size());
}

inline double entropy_eta(const Tensor& eta)
{
    if (eta.rank() != 2) throw ShapeError("entropy_eta expects [L,M], got " + shape_str(eta.shape));
    double acc = 0.0;
    for (double v : eta.data) acc += v * std::log(std::max(v, kProbEps));
    return -acc / static_cast<double>(eta.size());
}

// ---------------------------------------------------------------- topology

/// Sum over adjacent layer pairs and activation patterns of the binary cross
/// entropy between p_in (probability that layer i realizes activation a) and
/// p_out (probability that layer i+1's input pattern is feasible for a).
inline double topology_loss(const Tensor& eta, const FeasibilitySets& sets)
{
    if (eta.rank() != 2 || static_cast<std::uint32_t>(eta.dim(1)) != sets.num_patterns())
        throw ShapeError("topology_loss: eta " + shape_str(eta.shape) + " vs " + std::to_string(sets.num_patterns()) +
                         " patterns");
    const int L = eta.dim(0);
    double loss = 0.0;
    for (int i = 0; i + 1 < L; ++i)
        for (std::uint32_t a = 1; a <= sets.num_activations(); ++a) {
            double p_in = 0.0, p_out = 0.0;
            for (std::uint32_t j : sets.F_in({a})) p_in += eta.at(i, static_cast<int>(j) - 1);
            for (std::uint32_t k : sets.F_out({a})) p_out += eta.at(i + 1, static_cast<int>(k) - 1);
            loss -= p_in * std::log(std::max(p_out, kProbEps)) + (1.0 - p_in) * std::log(std::max(1.0 - p_out, kProbEps));
        }
    return loss;
}

// ---------------------------------------------------------------- memory

struct MemoryGeometry {
    int base_channels = 8;
    int height = 32;
    int width = 32;
};

/// mem[i,e,n] = (channels x spatial elements at the edge's output resolution) x factor(n).
struct MemoryTable {
    Tensor mem; // [L, E, N]
};

inline MemoryTable build_memory_table(const SpaceConfig& cfg, const MemoryGeometry& geo,
                                      const std::vector<double>& factors)
{
    cfg.validate();
    if (static_cast<int>(factors.size()) != cfg.N)
        throw ConfigError("memory factors: expected " + std::to_string(cfg.N) + " entries, got " +
                          std::to_string(factors.size()));
    for (double f : factors)
        if (!(f >= 0.0)) throw ConfigError("memory factors must be non-negative");
    const auto edges = make_edges(cfg.D);
    MemoryTable t{Tensor({cfg.L, cfg.num_edges(), cfg.N}, 0.0)};
    for (int i = 0; i < cfg.L; ++i)
        for (const Edge& e : edges) {
            const int d = e.dst_res;
            const double elems = static_cast<double>(geo.base_channels << d) * (geo.height >> d) * (geo.width >> d);
            for (int n = 0; n < cfg.N; ++n) t.mem.at(i, e.index, n) = elems * factors[static_cast<std::size_t>(n)];
        }
    return t;
}

struct MemoryUsage {
    double expected = 0.0; // M_e
    double maximum = 0.0;  // M_a
    double ratio = 0.0;    // M_e / M_a
};

/// Largest usage: every edge present with every op at full weight.
inline double memory_maximum(const MemoryTable& table)
{
    double ma = 0.0;
    for (double v : table.mem.data) ma += v;
    if (!(ma > 0.0)) throw ConfigError("memory table sums to zero; the budget ratio is undefined");
    return ma;
}

/// Per-edge expected cell cost M^{i,e} = sum_n alpha[i,e,n] mem[i,e,n], shape [L, E].
inline Tensor expected_cell_memory(const Tensor& alpha, const MemoryTable& table)
{
    require_same_shape(alpha, table.mem, "expected_cell_memory");
    const int L = alpha.dim(0), E = alpha.dim(1), N = alpha.dim(2);
    Tensor m({L, E}, 0.0);
    for (int i = 0; i < L; ++i)
        for (int e = 0; e < E; ++e)
            for (int n = 0; n < N; ++n) m.at(i, e) += alpha.at(i, e, n) * table.mem.at(i, e, n);
    return m;
}

/// Expected memory via edge marginals: M_e = sum_i sum_e q[i,e] M^{i,e}.
inline MemoryUsage memory_expected(const Tensor& alpha, const Tensor& eta, const MemoryTable& table)
{
    const Tensor cell = expected_cell_memory(alpha, table);
    const int L = cell.dim(0), E = cell.dim(1);
    if (eta.rank() != 2 || eta.dim(0) != L || eta.dim(1) != (1 << E) - 1)
        throw ShapeError("memory_expected: eta " + shape_str(eta.shape) + " vs alpha " + shape_str(alpha.shape));
    MemoryUsage u;
    for (int i = 0; i < L; ++i) {
        const auto q = edge_marginals(eta.row(i), E);
        for (int e = 0; e < E; ++e) u.expected += q[static_cast<std::size_t>(e)] * cell.at(i, e);
    }
    u.maximum = memory_maximum(table);
    u.ratio = u.expected / u.maximum;
    return u;
}

/// Same quantity summed pattern by pattern: sum_i sum_j eta[i,j] sum_e M^{i,e} cp_j(e).
inline MemoryUsage memory_expected_pattern_sum(const Tensor& alpha, const Tensor& eta, const MemoryTable& table)
{
    const Tensor cell = expected_cell_memory(alpha, table);
    const int L = cell.dim(0), E = cell.dim(1);
    const int M = (1 << E) - 1;
    MemoryUsage u;
    for (int i = 0; i < L; ++i)
        for (int j = 1; j <= M; ++j) {
            double c = 0.0;
            for (int e = 0; e < E; ++e)
                if ((j >> e) & 1) c += cell.at(i, e);
            u.expected += eta.at(i, j - 1) * c;
        }
    u.maximum = memory_maximum(table);
    u.ratio = u.expected / u.maximum;
    return u;
}

inline double memory_loss(double m_ratio, double sigma)
{
    if (!(sigma >= 0.0 && sigma <= 1.0)) throw ConfigError("sigma must be in [0, 1]");
    return std::fabs(m_ratio - sigma);
}

// ---------------------------------------------------------------- total

struct ArchTerms {
    double l_alpha = 0.0;
    double l_eta = 0.0;
    double l_tp = 0.0;
    double l_m = 0.0;
};

/// L_arch = L_seg + ramp * (L_alpha + L_eta + lambda * L_tp + L_m), ramp = t / t_all.
inline double arch_loss_total(double l_seg, const ArchTerms& terms, double t, double t_all, double lambda = 0.001)
{
    if (!(t_all > 0.0) || t < 0.0 || t > t_all) throw ConfigError("ramp requires 0 <= t <= t_all and t_all > 0");
    return l_seg + (t / t_all) * (terms.l_alpha + terms.l_eta + lambda * terms.l_tp + terms.l_m);
}

struct LossReport {
    double l_seg = 0.0;
    double l_alpha = 0.0;
    double l_eta = 0.0;
    double l_tp = 0.0;
    double l_m = 0.0;
    double m_ratio = 0.0;
    double l_arch = 0.0;
    double ramp = 0.0;
};

// ---------------------------------------------------------------- gradients

/// Constant tables shared by every architecture-loss evaluation of one space.
struct ArchLossContext {
    SpaceConfig space;
    FeasibilitySets sets;
    PatternMatrices patterns;
    Tensor f_in;  // [M, A]: 1 iff pattern j activates a
    Tensor f_out; // [M, A]: 1 iff pattern j is a feasible output for a
    MemoryTable memory;
    double memory_max = 0.0;

    ArchLossContext(const SpaceConfig& cfg, MemoryTable table)
        : space(cfg), sets(feasible_sets(cfg)), patterns(cfg.num_edges()), memory(std::move(table))
    {
        if (memory.mem.shape != Shape{cfg.L, cfg.num_edges(), cfg.N})
            throw ShapeError("memory table " + shape_str(memory.mem.shape) + " does not match the space");
        const int M = static_cast<int>(cfg.num_patterns()), A = static_cast<int>(cfg.num_activations());
        f_in = Tensor({M, A}, 0.0);
        f_out = Tensor({M, A}, 0.0);
        for (int a = 1; a <= A; ++a) {
            for (std::uint32_t j : sets.F_in({static_cast<std::uint32_t>(a)})) f_in.at(static_cast<int>(j) - 1, a - 1) = 1.0;
            for (std::uint32_t k : sets.F_out({static_cast<std::uint32_t>(a)})) f_out.at(static_cast<int>(k) - 1, a - 1) = 1.0;
        }
        memory_max = memory_maximum(memory);
    }
};

struct ArchLossWeights {
    double sigma = 0.5;
    double lambda = 0.001;
    double ramp = 1.0; // t / t_all
};

struct ArchLossVars {
    ad::Var l_alpha, l_eta, l_tp, l_m, m_ratio;
    ad::Var regularizer; // L_alpha + L_eta + lambda L_tp + L_m
};

inline ad::Var entropy_on_tape(ad::Var probs)
{
    const double n = static_cast<double>(probs.value().size());
    return ad::scale(ad::sum(ad::mul(probs, ad::log(probs, kProbEps))), -1.0 / n);
}

inline ad::Var topology_loss_on_tape(ad::Tape& tape, ad::Var eta, const ArchLossContext& ctx)
{
    const int L = eta.value().dim(0);
    if (L < 2) return tape.constant(Tensor::scalar(0.0));
    const ad::Var p_in = ad::rows(ad::matmul(eta, tape.constant(ctx.f_in)), 0, L - 1);
    const ad::Var p_out = ad::rows(ad::matmul(eta, tape.constant(ctx.f_out)), 1, L);
    const ad::Var fit = ad::mul(p_in, ad::log(p_out, kProbEps));
    const ad::Var miss = ad::mul(ad::affine(p_in, -1.0, 1.0), ad::log(ad::affine(p_out, -1.0, 1.0), kProbEps));
    return ad::scale(ad::sum(ad::add(fit, miss)), -1.0);
}

/// Memory ratio M_e / M_a through the edge-marginal form.
inline ad::Var memory_ratio_on_tape(ad::Tape& tape, ad::Var alpha, ad::Var q, const ArchLossContext& ctx)
{
    const Shape& s = alpha.shape();
    const int L = s[0], E = s[1], N = s[2];
    const ad::Var weighted = ad::mul(alpha, tape.constant(ctx.memory.mem));
    const ad::Var per_edge = ad::reshape(
        ad::matmul(ad::reshape(weighted, {L * E, N}), tape.constant(Tensor({N, 1}, 1.0))), {L, E});
    return ad::scale(ad::sum(ad::mul(q, per_edge)), 1.0 / ctx.memory_max);
}

inline ArchLossVars arch_regularizers_on_tape(ad::Tape& tape, const RelaxedVars& r, const ArchLossContext& ctx,
                                              const ArchLossWeights& w)
{
    ArchLossVars v;
    v.l_alpha = entropy_on_tape(r.alpha);
    v.l_eta = entropy_on_tape(r.eta);
    v.l_tp = topology_loss_on_tape(tape, r.eta, ctx);
    v.m_ratio = memory_ratio_on_tape(tape, r.alpha, r.q, ctx);
    v.l_m = ad::abs(ad::affine(v.m_ratio, 1.0, -w.sigma));
    v.regularizer = ad::add(ad::add(v.l_alpha, v.l_eta), ad::add(ad::scale(v.l_tp, w.lambda), v.l_m));
    return v;
}

/// Supplies L_seg on the same tape, given the differentiable relaxation.
using SegLossHook = std::function<ad::Var(ad::Tape&, const RelaxedVars&)>;

struct ArchGradResult {
    Tensor grad_alpha_raw; // [L, E, N]
    Tensor grad_p_raw;     // [L, E]
    LossReport report;
};

/// Gradients of L_arch with respect to the raw architecture logits. Without a
/// hook L_seg is taken as zero.
inline ArchGradResult arch_grads(const ArchParams& params, const ArchLossContext& ctx, const ArchLossWeights& w,
                                 const SegLossHook& seg_hook = {})
{
    params.validate();
    if (!(params.space == ctx.space)) throw ValidationError("arch_grads: parameters and context disagree on the space");
    ad::Tape tape;
    const ad::Var alpha_raw = tape.param(params.alpha_raw);
    const ad::Var p_raw = tape.param(params.p_raw);
    const RelaxedVars r = relax_on_tape(tape, alpha_raw, p_raw, ctx.patterns);
    const ArchLossVars v = arch_regularizers_on_tape(tape, r, ctx, w);
    ad::Var total = ad::scale(v.regularizer, w.ramp);
    double l_seg = 0.0;
    if (seg_hook) {
        const ad::Var seg = seg_hook(tape, r);
        l_seg = seg.value().item();
        total = ad::add(seg, total);
    }
    tape.backward(total);

    ArchGradResult out{tape.grad(alpha_raw), tape.grad(p_raw), {}};
    const int E = params.space.num_edges(), N = params.space.N;
    for (std::size_t k = 0; k < out.grad_alpha_raw.size(); ++k)
        if (!std::isfinite(out.grad_alpha_raw.data[k]))
            throw DivergenceError("non-finite alpha gradient at layer " + std::to_string(k / (E * N)) + ", edge " +
                                  std::to_string((k / N) % E) + ", op " + std::to_string(k % N));
    for (std::size_t k = 0; k < out.grad_p_raw.size(); ++k)
        if (!std::isfinite(out.grad_p_raw.data[k]))
            throw DivergenceError("non-finite edge gradient at layer " + std::to_string(k / E) + ", edge " +
                                  std::to_string(k % E));

    auto& rep = out.report;
    rep.l_seg = l_seg;
    rep.l_alpha = v.l_alpha.value().item();
    rep.l_eta = v.l_eta.value().item();
    rep.l_tp = v.l_tp.value().item();
    rep.l_m = v.l_m.value().item();
    rep.m_ratio = v.m_ratio.value().item();
    rep.l_arch = total.value().item();
    rep.ramp = w.ramp;
    return out;
}

} // namespace dints
