#pragma once

// Slow reference computations that share no code path with the fast ones:
// subset enumeration for pattern probabilities, node-level feasibility, and
// the pattern-by-pattern sum form of the feature flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dints/decode.hpp"
#include "dints/relax.hpp"
#include "dints/supernet.hpp"

namespace dints::oracle {

/// eta by literal enumeration: prod_e p_e^cp(e) (1 - p_e)^(1 - cp(e)) over
/// every non-empty subset, divided by the sum of those products.
inline std::vector<double> pattern_probs_enumerated(const std::vector<double>& p)
{
    const int E = static_cast<int>(p.size());
    const std::uint32_t M = (std::uint32_t{1} << E) - 1;
    std::vector<double> num(M);
    double z = 0.0;
    for (std::uint32_t j = 1; j <= M; ++j) {
        double v = 1.0;
        for (int e = 0; e < E; ++e) v *= ((j >> e) & 1u) ? p[static_cast<std::size_t>(e)] : 1.0 - p[static_cast<std::size_t>(e)];
        num[j - 1] = v;
        z += v;
    }
    for (double& v : num) v /= z;
    return num;
}

/// Feasibility of a pair of consecutive patterns from the node-level rule:
/// every resolution of the shared super node receives an input iff it emits an output.
inline bool node_level_feasible(int D, std::uint32_t in_cp, std::uint32_t out_cp)
{
    for (int d = 0; d < D; ++d) {
        bool has_in = false, has_out = false;
        for (const Edge& e : make_edges(D)) {
            if (e.dst_res == d && ((in_cp >> e.index) & 1u)) has_in = true;
            if (e.src_res == d && ((out_cp >> e.index) & 1u)) has_out = true;
        }
        if (has_in != has_out) return false;
    }
    return true;
}

/// Relaxed forward in pattern-sum form: node(i, d) = sum_j eta[i,j] *
/// sum over edges e in pattern j ending at d of cell_e(resample(node(i-1, src e))).
/// O(M) per layer; only meant for small D.
inline Tensor pattern_sum_forward(const ParamStore& weights, const NetConfig& cfg, const Tensor& eta,
                                  const Tensor& alpha, const Tensor& image)
{
    const int L = cfg.space.L, D = cfg.space.D, N = cfg.space.N;
    const std::uint32_t M = cfg.space.num_patterns();
    if (eta.shape != Shape{L, static_cast<int>(M)}) throw ShapeError("pattern_sum_forward: eta " + shape_str(eta.shape));
    ad::Tape tape;
    const VarStore w = bind_params(tape, weights, false);
    const auto edges = make_edges(D);
    std::vector<ad::Var> nodes = stem_forward(w, cfg, tape.constant(image));
    for (int i = 0; i < L; ++i) {
        std::vector<Tensor> cell_out;
        for (const Edge& e : edges) {
            std::vector<ad::Var> a;
            for (int n = 0; n < N; ++n) a.push_back(tape.constant(Tensor::scalar(alpha.at(i, e.index, n))));
            const ad::Var x = resample_edge(w, i, e, nodes[static_cast<std::size_t>(e.src_res)]);
            cell_out.push_back(cell_forward(w, i, e.index, x, a).value());
        }
        std::vector<Tensor> next;
        const int B = image.dim(0);
        for (int d = 0; d < D; ++d) next.emplace_back(cfg.feature_shape(B, d), 0.0);
        for (std::uint32_t j = 1; j <= M; ++j) {
            const double weight = eta.at(i, static_cast<int>(j) - 1);
            for (int d = 0; d < D; ++d) {
                Tensor feat(cfg.feature_shape(B, d), 0.0);
                for (const Edge& e : edges)
                    if (e.dst_res == d && ((j >> e.index) & 1u))
                        for (std::size_t k = 0; k < feat.size(); ++k) feat.data[k] += cell_out[static_cast<std::size_t>(e.index)].data[k];
                Tensor& acc = next[static_cast<std::size_t>(d)];
                for (std::size_t k = 0; k < acc.size(); ++k) acc.data[k] += weight * feat.data[k];
            }
        }
        nodes.clear();
        for (Tensor& t : next) nodes.push_back(tape.constant(std::move(t)));
    }
    std::vector<std::optional<ad::Var>> finals(nodes.begin(), nodes.end());
    return output_head(w, cfg, finals).value();
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) return INFINITY;
    double scale = 0.0;
    for (double v : b) scale = std::max(scale, std::fabs(v));
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = std::fabs(a[k] - b[k]);
        worst = std::max(worst, d / std::max({std::fabs(b[k]), 1e-3 * scale, 1e-300}));
        if (std::isnan(a[k]) || std::isnan(b[k])) worst = INFINITY;
    }
    return worst;
}

// ---------------------------------------------------------------- suites

struct SuiteReport {
    std::string name;
    int cases = 0;
    int failures = 0;
    double worst = 0.0; // largest relative error or cost gap seen
    std::string first_failure{};

    bool passed() const { return failures == 0; }
};

inline void note_failure(SuiteReport& r, const std::string& what)
{
    if (r.failures++ == 0) r.first_failure = what;
}

/// Pattern probabilities and normalizer against enumeration on random D=2 rows.
inline SuiteReport run_pattern_suite(std::uint64_t seed, int instances = 100, double tol = 1e-9)
{
    SuiteReport r{"patterns", 0, 0, 0.0, {}};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int E = SpaceConfig{1, 2, 1}.num_edges();
    for (int k = 0; k < instances; ++k, ++r.cases) {
        std::vector<double> p(static_cast<std::size_t>(E));
        for (double& v : p) v = u(rng);
        const auto fast = pattern_probs(p);
        const auto slow = pattern_probs_enumerated(p);
        double sum = 0.0;
        for (double v : fast) sum += v;
        double empty = 1.0;
        for (double v : p) empty *= 1.0 - v;
        double z_enum = 0.0;
        for (std::uint32_t j = 1; j <= fast.size(); ++j) {
            double v = 1.0;
            for (int e = 0; e < E; ++e) v *= ((j >> e) & 1u) ? p[static_cast<std::size_t>(e)] : 1.0 - p[static_cast<std::size_t>(e)];
            z_enum += v;
        }
        const double err = std::max({max_rel_diff(fast, slow), std::fabs(sum - 1.0),
                                     std::fabs(pattern_normalizer(p) - z_enum) / z_enum, std::fabs((1.0 - empty) - z_enum) / z_enum});
        r.worst = std::max(r.worst, err);
        if (!(err <= tol)) note_failure(r, "instance " + std::to_string(k));
    }
    return r;
}

/// Shortest-path decode against exhaustive search on random eta.
inline SuiteReport run_decode_suite(std::uint64_t seed, int D, int L, int instances, double tol = 1e-9)
{
    SuiteReport r{"decode D=" + std::to_string(D) + " L=" + std::to_string(L), 0, 0, 0.0, {}};
    const SpaceConfig cfg{L, D, 1};
    const FeasibilitySets sets = feasible_sets(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> logit(0.0, 2.0);
    const int M = static_cast<int>(cfg.num_patterns());
    for (int k = 0; k < instances; ++k, ++r.cases) {
        Tensor eta({L, M}, 0.0);
        for (int i = 0; i < L; ++i) {
            double z = 0.0;
            for (int j = 0; j < M; ++j) z += (eta.at(i, j) = std::exp(logit(rng)));
            for (int j = 0; j < M; ++j) eta.at(i, j) /= z;
        }
        const auto fast = shortest_path_decode(eta, sets, cfg);
        const auto slow = brute_force_decode(eta, sets, cfg);
        const double gap = std::fabs(fast.total_cost - slow.total_cost);
        r.worst = std::max(r.worst, gap);
        if (!fast.is_feasible(sets) || !(gap <= tol * std::max(1.0, slow.total_cost)))
            note_failure(r, "instance " + std::to_string(k) + ": cost " + std::to_string(fast.total_cost) + " vs " +
                                std::to_string(slow.total_cost));
    }
    return r;
}

/// Marginal-form relaxed forward against the pattern-sum form on (D=2, L=2).
inline SuiteReport run_flow_suite(std::uint64_t seed, int instances = 20, double tol = 1e-9)
{
    SuiteReport r{"flow", 0, 0, 0.0, {}};
    NetConfig cfg;
    cfg.space = SpaceConfig{2, 2, 5};
    cfg.base_channels = 2;
    cfg.height = cfg.width = 8;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pix(0.0, 1.0);
    for (int k = 0; k < instances; ++k, ++r.cases) {
        const ParamStore w = init_supernet_weights(cfg, rng);
        ArchParams a = ArchParams::init(cfg.space, rng);
        std::normal_distribution<double> spread(0.0, 1.0);
        for (double& v : a.alpha_raw.data) v += spread(rng);
        for (double& v : a.p_raw.data) v += spread(rng);
        const RelaxedState st = relax_all(a);
        Tensor image({1, 1, cfg.height, cfg.width}, 0.0);
        for (double& v : image.data) v = pix(rng);
        const Tensor fast = relaxed_forward_values(w, cfg, st.q, st.alpha, image);
        const Tensor slow = pattern_sum_forward(w, cfg, st.eta, st.alpha, image);
        const double err = max_rel_diff(fast.data, slow.data);
        r.worst = std::max(r.worst, err);
        if (!(err <= tol)) note_failure(r, "instance " + std::to_string(k));
    }
    return r;
}

/// Feasibility tables against the node-level rule, exhaustively over all pattern pairs.
inline SuiteReport run_feasibility_suite(int D)
{
    SuiteReport r{"feasibility D=" + std::to_string(D), 0, 0, 0.0, {}};
    const FeasibilitySets sets(D);
    const std::uint32_t M = sets.num_patterns();
    for (std::uint32_t j = 1; j <= M; ++j)
        for (std::uint32_t k = 1; k <= M; ++k, ++r.cases)
            if (sets.contains(j, k) != node_level_feasible(D, j, k))
                note_failure(r, "pair (" + std::to_string(j) + ", " + std::to_string(k) + ")");
    return r;
}

inline std::string describe(const SuiteReport& r)
{
    std::ostringstream os;
    os << r.name << ": " << (r.passed() ? "ok" : "FAILED") << " (" << r.cases << " cases, " << r.failures
       << " failures, worst " << r.worst << ")";
    if (!r.passed()) os << " first failure: " << r.first_failure;
    return os.str();
}

} // namespace dints::oracle
