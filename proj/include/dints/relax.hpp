#pragma once

// Continuous relaxation of the search space: raw architecture logits ->
// cell mixture weights alpha, edge probabilities p, connection-pattern
// probabilities eta and per-edge marginals q.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dints/nn_ops.hpp"
#include "dints/space.hpp"
#include "dints/tensor.hpp"

namespace dints {

/// Clamp applied to probabilities before any logarithm.
inline constexpr double kProbEps = 1e-12;

/// Searchable state: cell logits alpha_raw [L, E, N] and edge logits p_raw [L, E].
struct ArchParams {
    SpaceConfig space;
    Tensor alpha_raw;
    Tensor p_raw;

    static ArchParams zeros(const SpaceConfig& space)
    {
        space.validate();
        return {space, Tensor({space.L, space.num_edges(), space.N}, 0.0), Tensor({space.L, space.num_edges()}, 0.0)};
    }

    /// alpha_raw ~ N(1, 0.01), p_raw ~ N(0, 0.01), both before softmax/sigmoid.
    template <class Rng>
    static ArchParams init(const SpaceConfig& space, Rng& rng)
    {
        ArchParams a = zeros(space);
        std::normal_distribution<double> alpha_init(1.0, 0.01), p_init(0.0, 0.01);
        for (double& v : a.alpha_raw.data) v = alpha_init(rng);
        for (double& v : a.p_raw.data) v = p_init(rng);
        return a;
    }

    void validate() const
    {
        space.validate();
        const Shape sa{space.L, space.num_edges(), space.N}, sp{space.L, space.num_edges()};
        if (alpha_raw.shape != sa)
            throw ValidationError("alpha_raw has shape " + shape_str(alpha_raw.shape) + ", expected " + shape_str(sa));
        if (p_raw.shape != sp)
            throw ValidationError("p_raw has shape " + shape_str(p_raw.shape) + ", expected " + shape_str(sp));
        if (!alpha_raw.all_finite() || !p_raw.all_finite())
            throw ValidationError("architecture parameters contain non-finite values");
    }

    nlohmann::json to_json() const
    {
        return {{"L", space.L},
                {"D", space.D},
                {"N", space.N},
                {"alpha_raw_shape", alpha_raw.shape},
                {"p_raw_shape", p_raw.shape},
                {"alpha_raw", alpha_raw.data},
                {"p_raw", p_raw.data}};
    }

    static ArchParams from_json(const nlohmann::json& j)
    {
        for (const char* key : {"L", "D", "N", "alpha_raw_shape", "p_raw_shape", "alpha_raw", "p_raw"})
            if (!j.contains(key)) throw ValidationError(std::string("arch params: missing field '") + key + "'");
        ArchParams a;
        a.space = SpaceConfig{j.at("L").get<int>(), j.at("D").get<int>(), j.at("N").get<int>()};
        a.alpha_raw = Tensor(j.at("alpha_raw_shape").get<Shape>(), j.at("alpha_raw").get<std::vector<double>>());
        a.p_raw = Tensor(j.at("p_raw_shape").get<Shape>(), j.at("p_raw").get<std::vector<double>>());
        a.validate();
        return a;
    }

    friend bool operator==(const ArchParams& a, const ArchParams& b)
    {
        return a.space == b.space && a.alpha_raw.shape == b.alpha_raw.shape && a.alpha_raw.data == b.alpha_raw.data &&
               a.p_raw.shape == b.p_raw.shape && a.p_raw.data == b.p_raw.data;
    }
};

inline void save_arch_params(const ArchParams& a, const std::string& path, const nlohmann::json& extra = {})
{
    nlohmann::json j = a.to_json();
    if (extra.is_object())
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path);
    out << j.dump();
}

inline ArchParams load_arch_params(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path);
    return ArchParams::from_json(nlohmann::json::parse(in));
}

struct RelaxedState {
    Tensor alpha; // [L, E, N], rows on the simplex
    Tensor p;     // [L, E], in [eps, 1 - eps]
    Tensor eta;   // [L, M], rows on the simplex; column j-1 is pattern id j
    Tensor q;     // [L, E], q[i,e] = sum of eta[i,j] over patterns containing e
};

inline double clamped_sigmoid(double x)
{
    const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::clamp(s, kProbEps, 1.0 - kProbEps);
}

/// alpha = softmax over the op axis, p = clamped logistic of p_raw.
inline std::pair<Tensor, Tensor> squash(const ArchParams& params)
{
    params.validate();
    Tensor alpha = params.alpha_raw;
    const int N = params.space.N;
    for (std::size_t base = 0; base < alpha.size(); base += static_cast<std::size_t>(N)) {
        double mx = -INFINITY;
        for (int n = 0; n < N; ++n) mx = std::max(mx, alpha.data[base + n]);
        double z = 0.0;
        for (int n = 0; n < N; ++n) z += (alpha.data[base + n] = std::exp(alpha.data[base + n] - mx));
        for (int n = 0; n < N; ++n) alpha.data[base + n] /= z;
    }
    Tensor p = params.p_raw;
    for (double& v : p.data) v = clamped_sigmoid(v);
    return {std::move(alpha), std::move(p)};
}

/// Probability of each non-empty edge subset when edges are kept
/// independently with probability p_e, renormalized over non-empty subsets.
/// Entry j-1 belongs to pattern id j.
inline std::vector<double> pattern_probs(std::span<const double> p_row)
{
    const int E = static_cast<int>(p_row.size());
    if (E < 1 || E > 30) throw ValidationError("pattern_probs: unsupported edge count " + std::to_string(E));
    double empty_mass = 1.0;
    for (double p : p_row) {
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("pattern_probs: p outside [0, 1]");
        empty_mass *= 1.0 - p;
    }
    if (1.0 - empty_mass < 1e-300)
        throw ValidationError("pattern_probs: degenerate distribution (all edge probabilities ~ 0)");

    // Log-numerators by incremental subset construction: adding edge e to a
    // subset swaps log(1-p_e) for log(p_e).
    const std::uint32_t M = (std::uint32_t{1} << E) - 1;
    std::vector<double> delta(static_cast<std::size_t>(E));
    double base = 0.0;
    for (int e = 0; e < E; ++e) {
        const double p = std::clamp(p_row[static_cast<std::size_t>(e)], kProbEps, 1.0 - kProbEps);
        base += std::log(1.0 - p);
        delta[static_cast<std::size_t>(e)] = std::log(p) - std::log(1.0 - p);
    }
    std::vector<double> lognum(M + 1);
    lognum[0] = base;
    double mx = -INFINITY;
    for (std::uint32_t j = 1; j <= M; ++j) {
        const int low = __builtin_ctz(j);
        lognum[j] = lognum[j & (j - 1)] + delta[static_cast<std::size_t>(low)];
        mx = std::max(mx, lognum[j]);
    }
    std::vector<double> eta(M);
    double z = 0.0;
    for (std::uint32_t j = 1; j <= M; ++j) z += (eta[j - 1] = std::exp(lognum[j] - mx));
    for (double& v : eta) v /= z;
    return eta;
}

/// Closed-form normalizer of pattern_probs: 1 - prod(1 - p_e).
inline double pattern_normalizer(std::span<const double> p_row)
{
    double empty_mass = 1.0;
    for (double p : p_row) empty_mass *= 1.0 - p;
    return 1.0 - empty_mass;
}

/// q[e] = sum of eta over patterns that select edge e.
inline std::vector<double> edge_marginals(std::span<const double> eta_row, int E)
{
    const std::size_t M = (std::size_t{1} << E) - 1;
    if (eta_row.size() != M)
        throw ShapeError("edge_marginals: eta row of length " + std::to_string(eta_row.size()) + ", expected " +
                         std::to_string(M));
    std::vector<double> q(static_cast<std::size_t>(E), 0.0);
    for (std::uint32_t j = 1; j <= M; ++j)
        for (int e = 0; e < E; ++e)
            if ((j >> e) & 1u) q[static_cast<std::size_t>(e)] += eta_row[j - 1];
    return q;
}

inline RelaxedState relax_all(const ArchParams& params)
{
    auto [alpha, p] = squash(params);
    const int L = params.space.L, E = params.space.num_edges();
    const int M = static_cast<int>(params.space.num_patterns());
    RelaxedState st{std::move(alpha), std::move(p), Tensor({L, M}, 0.0), Tensor({L, E}, 0.0)};
    for (int i = 0; i < L; ++i) {
        const auto eta = pattern_probs(st.p.row(i));
        std::copy(eta.begin(), eta.end(), st.eta.row(i).begin());
        const auto q = edge_marginals(eta, E);
        std::copy(q.begin(), q.end(), st.q.row(i).begin());
    }
    return st;
}

/// Constant 0/1 matrices that express the relaxation as matrix products.
struct PatternMatrices {
    Tensor select;      // [M, E]: select[j-1, e] = cp_j(e)
    Tensor select_t;    // [E, M]
    Tensor unselect_t;  // [E, M]: 1 - cp_j(e)

    explicit PatternMatrices(int E)
    {
        const int M = (1 << E) - 1;
        select = Tensor({M, E}, 0.0);
        select_t = Tensor({E, M}, 0.0);
        unselect_t = Tensor({E, M}, 1.0);
        for (int j = 1; j <= M; ++j)
            for (int e = 0; e < E; ++e)
                if ((j >> e) & 1) {
                    select.at(j - 1, e) = 1.0;
                    select_t.at(e, j - 1) = 1.0;
                    unselect_t.at(e, j - 1) = 0.0;
                }
    }
};

struct RelaxedVars {
    ad::Var alpha; // [L, E, N]
    ad::Var p;     // [L, E]
    ad::Var eta;   // [L, M]
    ad::Var q;     // [L, E]
};

/// Differentiable relaxation. eta is computed in log space:
/// log-numerator_j = sum_e cp_j(e) log p_e + (1 - cp_j(e)) log(1 - p_e),
/// followed by a softmax over the M non-empty patterns.
inline RelaxedVars relax_on_tape(ad::Tape& tape, ad::Var alpha_raw, ad::Var p_raw, const PatternMatrices& pm)
{
    RelaxedVars r;
    r.alpha = ad::softmax(alpha_raw, -1);
    r.p = ad::sigmoid(p_raw, kProbEps);
    const ad::Var logp = ad::log(r.p, kProbEps);
    const ad::Var log1mp = ad::log(ad::affine(r.p, -1.0, 1.0), kProbEps);
    const ad::Var lognum =
        ad::add(ad::matmul(logp, tape.constant(pm.select_t)), ad::matmul(log1mp, tape.constant(pm.unselect_t)));
    r.eta = ad::softmax(lognum, -1);
    r.q = ad::matmul(r.eta, tape.constant(pm.select));
    return r;
}

} // namespace dints
