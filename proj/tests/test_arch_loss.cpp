#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dints/arch_loss.hpp"
#include "dints/grad_check.hpp"
#include "dints/oracle.hpp"
#include "test_util.hpp"

using namespace dints;

namespace {

Tensor uniform_rows(Shape s)
{
    const double v = 1.0 / static_cast<double>(s.back());
    return Tensor(std::move(s), v);
}

ArchParams spread_params(const SpaceConfig& cfg, std::mt19937_64& rng, double scale = 1.0)
{
    ArchParams a = ArchParams::zeros(cfg);
    std::normal_distribution<double> n(0.0, scale);
    for (double& v : a.alpha_raw.data) v = n(rng);
    for (double& v : a.p_raw.data) v = n(rng);
    return a;
}

// Activation a can feed pattern k iff k leaves exactly the active resolutions.
bool feeds(int D, std::uint32_t a, std::uint32_t k)
{
    for (int d = 0; d < D; ++d) {
        bool out = false;
        for (const Edge& e : make_edges(D))
            if (e.src_res == d && ((k >> e.index) & 1u)) out = true;
        if (out != (((a >> d) & 1u) != 0)) return false;
    }
    return true;
}

// Topology loss written from the node-level rules, not the cached F tables.
double topology_loss_direct(const Tensor& eta, const SpaceConfig& cfg)
{
    double loss = 0.0;
    for (int i = 0; i + 1 < cfg.L; ++i)
        for (std::uint32_t a = 1; a <= cfg.num_activations(); ++a) {
            double p_in = 0.0, p_out = 0.0;
            for (std::uint32_t j = 1; j <= cfg.num_patterns(); ++j) {
                if (activation_of({j}, cfg).bits == a) p_in += eta.at(i, static_cast<int>(j) - 1);
                if (feeds(cfg.D, a, j)) p_out += eta.at(i + 1, static_cast<int>(j) - 1);
            }
            loss -= p_in * std::log(std::max(p_out, 1e-12)) + (1.0 - p_in) * std::log(std::max(1.0 - p_out, 1e-12));
        }
    return loss;
}

Tensor one_hot_eta(const std::vector<std::uint32_t>& I, std::uint32_t M)
{
    Tensor eta({static_cast<int>(I.size()), static_cast<int>(M)}, 0.0);
    for (std::size_t i = 0; i < I.size(); ++i) eta.at(static_cast<int>(i), static_cast<int>(I[i]) - 1) = 1.0;
    return eta;
}

} // namespace

TEST(ArchLoss, EntropyExamples)
{
    EXPECT_NEAR(entropy_alpha(uniform_rows({3, 4, 5})), std::log(5.0) / 5.0, 1e-15);
    EXPECT_NEAR(entropy_alpha(uniform_rows({3, 4, 5})), 0.3219, 5e-5);

    Tensor half({1, 1, 5}, 0.0);
    half.data[0] = half.data[1] = 0.5;
    EXPECT_NEAR(entropy_alpha(half), 2 * 0.5 * std::log(2.0) / 5.0, 1e-15);
    EXPECT_NEAR(entropy_alpha(half), 0.1386, 5e-5);

    Tensor hot({2, 4, 5}, 0.0);
    for (int k = 0; k < 8; ++k) hot.data[static_cast<std::size_t>(k * 5 + k % 5)] = 1.0;
    EXPECT_EQ(entropy_alpha(hot), 0.0);

    EXPECT_NEAR(entropy_eta(uniform_rows({2, 15})), std::log(15.0) / 15.0, 1e-15);
    EXPECT_EQ(entropy_eta(one_hot_eta({3, 7}, 15)), 0.0);

    std::mt19937_64 rng(20);
    const RelaxedState st = relax_all(spread_params({3, 2, 5}, rng));
    double acc = 0.0;
    for (double v : st.eta.data) acc += v * std::log(v);
    EXPECT_LE(testutil::rel_err(entropy_eta(st.eta), -acc / st.eta.size()), 1e-12);
    EXPECT_THROW(entropy_alpha(Tensor({2, 5}, 0.2)), ShapeError);
}

TEST(ArchLoss, TopologyLossMatchesDirectRules)
{
    std::mt19937_64 rng(21);
    for (int D : {2, 3}) {
        const SpaceConfig cfg{3, D, 5};
        const auto sets = feasible_sets(cfg);
        for (int k = 0; k < 5; ++k) {
            const RelaxedState st = relax_all(spread_params(cfg, rng, 2.0));
            EXPECT_LE(testutil::rel_err(topology_loss(st.eta, sets), topology_loss_direct(st.eta, cfg)), 1e-12);
        }
    }
}

TEST(ArchLoss, TopologyLossOneHotSequences)
{
    // Exhaustive over all one-hot pairs for L=2, D=2.
    const SpaceConfig cfg{2, 2, 5};
    const auto sets = feasible_sets(cfg);
    int infeasible = 0;
    for (std::uint32_t j = 1; j <= 15; ++j)
        for (std::uint32_t k = 1; k <= 15; ++k) {
            const Tensor eta = one_hot_eta({j, k}, 15);
            const double l = topology_loss(eta, sets);
            EXPECT_NEAR(l, topology_loss_direct(eta, cfg), 1e-12);
            if (sets.contains(j, k)) {
                // Every term is -log(1 - p_out) with p_out in {0, 1}. A
                // non-realized activation whose feasible set contains k pays the clamp.
                double expect = 0.0;
                const auto a_star = activation_of({j}, cfg).bits;
                for (std::uint32_t a = 1; a <= 3; ++a)
                    if (a != a_star && feeds(2, a, k)) expect += -std::log(1e-12);
                EXPECT_NEAR(l, expect, 1e-9);
            } else {
                ++infeasible;
                EXPECT_GE(l, -std::log(1e-12) - 1e-9);
            }
        }
    EXPECT_GT(infeasible, 0);
    // L=1 has no adjacent pairs.
    EXPECT_EQ(topology_loss(one_hot_eta({5}, 15), sets), 0.0);
}

TEST(ArchLoss, TopologyLossZeroForFeasibleWhenTargetsExclusive)
{
    // With p_out = 1 exactly for the realized activation and 0 elsewhere the loss vanishes.
    const SpaceConfig cfg{3, 2, 5};
    const auto sets = feasible_sets(cfg);
    for (std::uint32_t j = 1; j <= 15; ++j)
        for (std::uint32_t k : sets.F(j)) {
            const auto a_star = activation_of({j}, cfg).bits;
            bool exclusive = true;
            for (std::uint32_t a = 1; a <= 3; ++a)
                if (a != a_star && feeds(2, a, k)) exclusive = false;
            if (exclusive) {
                EXPECT_NEAR(topology_loss(one_hot_eta({j, k}, 15), sets), 0.0, 1e-12);
            }
        }
}

TEST(ArchLoss, MemoryTableScaling)
{
    const SpaceConfig cfg{2, 3, 5};
    const auto t = build_memory_table(cfg, {8, 32, 32}, default_memory_factors(5));
    for (const Edge& e : make_edges(3)) {
        const double base = 8.0 * 32 * 32;
        EXPECT_DOUBLE_EQ(t.mem.at(0, e.index, 0), base / std::pow(2.0, e.dst_res));
        EXPECT_DOUBLE_EQ(t.mem.at(1, e.index, 1), 2.0 * base / std::pow(2.0, e.dst_res));
    }
    EXPECT_THROW(build_memory_table(cfg, {8, 32, 32}, {1, 2}), ConfigError);
    EXPECT_THROW(build_memory_table(cfg, {8, 32, 32}, {1, 2, -1, 1, 1}), ConfigError);
    EXPECT_THROW(memory_maximum(build_memory_table(cfg, {8, 32, 32}, {0, 0, 0, 0, 0})), ConfigError);
}

TEST(ArchLoss, MemoryRatioCeiling)
{
    const SpaceConfig cfg{2, 2, 5};
    const auto factors = default_memory_factors(5);
    const auto t = build_memory_table(cfg, {8, 16, 16}, factors);
    Tensor alpha({2, 4, 5}, 0.0);
    const int max_op = static_cast<int>(std::max_element(factors.begin(), factors.end()) - factors.begin());
    for (int k = 0; k < 8; ++k) alpha.data[static_cast<std::size_t>(k * 5 + max_op)] = 1.0;
    const auto u = memory_expected(alpha, one_hot_eta({15, 15}, 15), t);
    double total = 0.0;
    for (double f : factors) total += f;
    EXPECT_NEAR(u.ratio, factors[static_cast<std::size_t>(max_op)] / total, 1e-15);
    EXPECT_NEAR(u.ratio, 3.0 / 11.0, 1e-15);
}

TEST(ArchLoss, MemoryMarginalEqualsPatternSum)
{
    std::mt19937_64 rng(22);
    // Uniform alpha, one layer, uniform eta.
    {
        const SpaceConfig cfg{1, 2, 5};
        const auto t = build_memory_table(cfg, {4, 8, 8}, default_memory_factors(5));
        const auto a = memory_expected(uniform_rows({1, 4, 5}), uniform_rows({1, 15}), t);
        const auto b = memory_expected_pattern_sum(uniform_rows({1, 4, 5}), uniform_rows({1, 15}), t);
        EXPECT_LE(testutil::rel_err(a.expected, b.expected), 1e-12);
    }
    for (int D : {2, 3})
        for (int k = 0; k < 10; ++k) {
            const SpaceConfig cfg{3, D, 5};
            const auto t = build_memory_table(cfg, {4, 16, 16}, default_memory_factors(5));
            const RelaxedState st = relax_all(spread_params(cfg, rng, 2.0));
            const auto a = memory_expected(st.alpha, st.eta, t);
            const auto b = memory_expected_pattern_sum(st.alpha, st.eta, t);
            EXPECT_LE(testutil::rel_err(a.expected, b.expected), 1e-9);
            EXPECT_GT(a.ratio, 0.0);
            EXPECT_LE(a.ratio, 1.0);
        }
}

TEST(ArchLoss, EqualFactorsDependOnlyOnEta)
{
    std::mt19937_64 rng(23);
    const SpaceConfig cfg{2, 2, 5};
    const auto t = build_memory_table(cfg, {4, 8, 8}, {2, 2, 2, 2, 2});
    const RelaxedState a = relax_all(spread_params(cfg, rng));
    RelaxedState b = a;
    b.alpha = relax_all(spread_params(cfg, rng)).alpha;
    EXPECT_NEAR(memory_expected(a.alpha, a.eta, t).ratio, memory_expected(b.alpha, b.eta, t).ratio, 1e-14);
}

TEST(ArchLoss, MemoryLossAndTotal)
{
    EXPECT_NEAR(memory_loss(0.9, 0.5), 0.4, 1e-15);
    EXPECT_EQ(memory_loss(0.3, 0.3), 0.0);
    for (double s : {0.2, 0.5, 0.8}) EXPECT_NO_THROW(memory_loss(0.1, s));
    EXPECT_THROW(memory_loss(0.1, 1.5), ConfigError);

    const ArchTerms terms{0.1, 0.2, 30.0, 0.05};
    EXPECT_EQ(arch_loss_total(0.7, terms, 0, 100), 0.7);
    EXPECT_NEAR(arch_loss_total(0.7, terms, 100, 100), 0.7 + 0.1 + 0.2 + 0.001 * 30.0 + 0.05, 1e-15);
    EXPECT_NEAR(arch_loss_total(0.7, terms, 50, 100, 0.0), 0.7 + 0.5 * 0.35, 1e-15);
    EXPECT_THROW(arch_loss_total(0.7, terms, 101, 100), ConfigError);
}

TEST(ArchLoss, ReportMatchesPlainEvaluation)
{
    std::mt19937_64 rng(24);
    const SpaceConfig cfg{3, 2, 5};
    const ArchLossContext ctx(cfg, build_memory_table(cfg, {4, 8, 8}, default_memory_factors(5)));
    const ArchParams a = spread_params(cfg, rng);
    const RelaxedState st = relax_all(a);
    const auto r = arch_grads(a, ctx, {0.2, 0.001, 0.5}).report;
    EXPECT_NEAR(r.l_alpha, entropy_alpha(st.alpha), 1e-12);
    EXPECT_NEAR(r.l_eta, entropy_eta(st.eta), 1e-12);
    EXPECT_LE(testutil::rel_err(r.l_tp, topology_loss(st.eta, ctx.sets)), 1e-9);
    EXPECT_LE(testutil::rel_err(r.m_ratio, memory_expected(st.alpha, st.eta, ctx.memory).ratio), 1e-9);
    EXPECT_NEAR(r.l_m, std::fabs(r.m_ratio - 0.2), 1e-12);
    const ArchTerms terms{r.l_alpha, r.l_eta, r.l_tp, r.l_m};
    EXPECT_NEAR(r.l_arch, arch_loss_total(0.0, terms, 1, 2), 1e-9);
}

TEST(ArchLoss, UniformAlphaIsEntropyCriticalPoint)
{
    ad::Tape tape;
    const ad::Var raw = tape.param(Tensor({2, 4, 5}, 0.3));
    const ad::Var l = entropy_on_tape(ad::softmax(raw, -1));
    tape.backward(l);
    for (double g : tape.grad(raw).data) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(ArchLoss, MemorySubgradientSign)
{
    const SpaceConfig cfg{1, 2, 5};
    const ArchLossContext ctx(cfg, build_memory_table(cfg, {4, 8, 8}, default_memory_factors(5)));
    ArchParams a = ArchParams::zeros(cfg);
    const double ratio = arch_grads(a, ctx, {0.5, 0.0, 1.0}).report.m_ratio;
    // Isolate L_m: its gradient is d(ratio)/dp times sign(ratio - sigma).
    auto l_m_grad = [&](double sigma) {
        ad::Tape tape;
        const ad::Var ar = tape.param(a.alpha_raw), pr = tape.param(a.p_raw);
        const RelaxedVars r = relax_on_tape(tape, ar, pr, ctx.patterns);
        const ArchLossVars v = arch_regularizers_on_tape(tape, r, ctx, {sigma, 0.0, 1.0});
        tape.backward(v.l_m);
        return tape.grad(pr);
    };
    const Tensor below = l_m_grad(ratio + 0.05), above = l_m_grad(ratio - 0.05), at = l_m_grad(ratio);
    for (std::size_t k = 0; k < below.size(); ++k) {
        EXPECT_NE(below.data[k], 0.0);
        EXPECT_EQ(below.data[k], -above.data[k]);
        EXPECT_EQ(at.data[k], 0.0);
    }
}

TEST(ArchLoss, RejectsMismatchedContext)
{
    const SpaceConfig cfg{2, 2, 5};
    const ArchLossContext ctx(cfg, build_memory_table(cfg, {4, 8, 8}, default_memory_factors(5)));
    EXPECT_THROW(arch_grads(ArchParams::zeros({3, 2, 5}), ctx, {}), ValidationError);
    EXPECT_THROW(ArchLossContext(cfg, build_memory_table({3, 2, 5}, {4, 8, 8}, default_memory_factors(5))), ShapeError);
}

// Each regularizer against central differences on the raw logits.
class ArchGradSuite : public ::testing::TestWithParam<int> {};

TEST_P(ArchGradSuite, MatchesFiniteDifferences)
{
    const int term = GetParam();
    std::mt19937_64 rng(100 + static_cast<unsigned>(term));
    int failures = 0;
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
        const int D = inst % 2 == 0 ? 2 : 3;
        const int L = 2 + inst % 3;
        const SpaceConfig cfg{L, D, 5};
        const ArchLossContext ctx(cfg, build_memory_table(cfg, {4, 8, 8}, default_memory_factors(5)));
        const ArchParams a = spread_params(cfg, rng);
        const double sigma = 0.05 + 0.02 * inst; // keeps L_m away from its kink
        const auto r = ad::grad_check(
            [&](ad::Tape& t, std::span<const ad::Var> v) {
                const RelaxedVars rv = relax_on_tape(t, v[0], v[1], ctx.patterns);
                const ArchLossVars lv = arch_regularizers_on_tape(t, rv, ctx, {sigma, 0.001, 1.0});
                switch (term) {
                case 0: return lv.l_alpha;
                case 1: return lv.l_eta;
                case 2: return lv.l_tp;
                case 3: return lv.l_m;
                default: return lv.regularizer;
                }
            },
            {a.alpha_raw, a.p_raw}, {1e-5, 1e-4, 1e-3, 0});
        worst = std::max(worst, r.max_rel_error);
        if (!r.passed) ++failures;
    }
    EXPECT_EQ(failures, 0) << "worst relative error " << worst;
}

std::string term_name(const ::testing::TestParamInfo<int>& info)
{
    static const char* names[] = {"LAlpha", "LEta", "LTp", "LM", "Combined"};
    return names[info.param];
}

INSTANTIATE_TEST_SUITE_P(Terms, ArchGradSuite, ::testing::Values(0, 1, 2, 3, 4), term_name);
