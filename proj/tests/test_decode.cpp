#include <gtest/gtest.h>

#include <random>
#include <set>

#include "dints/decode.hpp"
#include "dints/oracle.hpp"
#include "test_util.hpp"

using namespace dints;

namespace {

Tensor random_eta(int L, int M, std::mt19937_64& rng, double spread = 2.0)
{
    std::normal_distribution<double> n(0.0, spread);
    Tensor eta({L, M}, 0.0);
    for (int i = 0; i < L; ++i) {
        double z = 0.0;
        for (int j = 0; j < M; ++j) z += (eta.at(i, j) = std::exp(n(rng)));
        for (int j = 0; j < M; ++j) eta.at(i, j) /= z;
    }
    return eta;
}

Tensor one_hot(const std::vector<std::uint32_t>& I, int M)
{
    Tensor eta({static_cast<int>(I.size()), M}, 0.0);
    for (std::size_t i = 0; i < I.size(); ++i) eta.at(static_cast<int>(i), static_cast<int>(I[i]) - 1) = 1.0;
    return eta;
}

int hamming_by_matrix(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b, const SpaceConfig& cfg)
{
    int g = 0;
    for (int i = 0; i < cfg.L; ++i) {
        const auto ra = ConnectionPattern{a[static_cast<std::size_t>(i)]}.bits(cfg.num_edges());
        const auto rb = ConnectionPattern{b[static_cast<std::size_t>(i)]}.bits(cfg.num_edges());
        for (int e = 0; e < cfg.num_edges(); ++e) g += std::abs(ra[static_cast<std::size_t>(e)] - rb[static_cast<std::size_t>(e)]);
    }
    return g;
}

} // namespace

TEST(Decode, GraphSize)
{
    const auto s2 = feasible_sets({1, 2, 5});
    const DecodeGraph g1(Tensor({1, 15}, 1.0 / 15), s2);
    EXPECT_EQ(g1.num_nodes(), 15 + 2);
    int from_source = 0, to_sink = 0;
    g1.for_each_successor(DecodeGraph::kSource, [&](int) { ++from_source; });
    for (int j = 1; j <= 15; ++j) g1.for_each_successor(g1.node(0, static_cast<std::uint32_t>(j)), [&](int v) {
        EXPECT_EQ(v, DecodeGraph::kSink);
        ++to_sink;
    });
    EXPECT_EQ(from_source, 15);
    EXPECT_EQ(to_sink, 15);

    const auto s4 = feasible_sets({12, 4, 5});
    const DecodeGraph g12(Tensor({12, 1023}, 1.0 / 1023), s4);
    EXPECT_EQ(g12.num_nodes(), 12278);
}

TEST(Decode, ArcsFollowFeasibilityTable)
{
    const SpaceConfig cfg{3, 2, 5};
    const auto sets = feasible_sets(cfg);
    const DecodeGraph g(Tensor({3, 15}, 1.0 / 15), sets);
    for (std::uint32_t j = 1; j <= 15; ++j)
        for (std::uint32_t k = 1; k <= 15; ++k)
            EXPECT_EQ(g.has_arc(g.node(0, j), g.node(1, k)), oracle::node_level_feasible(2, j, k)) << j << "->" << k;
    std::size_t feasible_pairs = 0;
    for (std::uint32_t j = 1; j <= 15; ++j) feasible_pairs += sets.F(j).size();
    EXPECT_EQ(g.num_arcs(), 15 + 2 * feasible_pairs + 15);
}

TEST(Decode, MatchesBruteForce)
{
    std::mt19937_64 rng(30);
    const SpaceConfig cfg{3, 2, 5};
    const auto sets = feasible_sets(cfg);
    for (int k = 0; k < 200; ++k) {
        const Tensor eta = random_eta(3, 15, rng);
        const auto fast = shortest_path_decode(eta, sets, cfg);
        const auto slow = brute_force_decode(eta, sets, cfg);
        const auto sweep = layer_sweep_decode(eta, sets, cfg);
        EXPECT_TRUE(fast.is_feasible(sets));
        EXPECT_NEAR(fast.total_cost, slow.total_cost, 1e-9);
        EXPECT_EQ(fast.I, slow.I);
        EXPECT_EQ(fast.I, sweep.I);
    }
    for (int D : {2, 3}) {
        const auto r = oracle::run_decode_suite(31 + static_cast<unsigned>(D), D, D == 2 ? 4 : 3, 20);
        EXPECT_TRUE(r.passed()) << oracle::describe(r);
    }
}

TEST(Decode, OptimalAgainstRandomFeasibleSequences)
{
    std::mt19937_64 rng(32);
    const SpaceConfig cfg{6, 3, 5};
    const auto sets = feasible_sets(cfg);
    for (int k = 0; k < 20; ++k) {
        const Tensor eta = random_eta(6, 127, rng);
        const auto best = shortest_path_decode(eta, sets, cfg);
        EXPECT_EQ(best.I, layer_sweep_decode(eta, sets, cfg).I);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<std::uint32_t> I{std::uniform_int_distribution<std::uint32_t>(1, 127)(rng)};
            while (I.size() < 6) {
                const auto& f = sets.F(I.back());
                I.push_back(f[std::uniform_int_distribution<std::size_t>(0, f.size() - 1)(rng)]);
            }
            EXPECT_LE(best.total_cost, sequence_cost(eta, I) + 1e-12);
        }
    }
}

TEST(Decode, OneHotSequences)
{
    const SpaceConfig cfg{3, 2, 5};
    const auto sets = feasible_sets(cfg);
    int infeasible_seen = 0;
    for (std::uint32_t a = 1; a <= 15; ++a)
        for (std::uint32_t b = 1; b <= 15; ++b) {
            const std::vector<std::uint32_t> I{a, b, 15};
            const Tensor eta = one_hot(I, 15);
            const auto t = shortest_path_decode(eta, sets, cfg);
            EXPECT_TRUE(t.is_feasible(sets));
            const bool feasible = sets.contains(a, b) && sets.contains(b, 15);
            if (feasible) {
                EXPECT_EQ(t.I, I);
                EXPECT_EQ(gap_metric(argmax_decode(eta), t.I, cfg), 0);
            } else {
                ++infeasible_seen;
                EXPECT_NE(t.I, I);
                EXPECT_GT(gap_metric(argmax_decode(eta), t.I, cfg), 0);
            }
        }
    EXPECT_GT(infeasible_seen, 0);
}

TEST(Decode, LexicographicTieBreak)
{
    const SpaceConfig cfg{3, 2, 5};
    const auto sets = feasible_sets(cfg);
    const Tensor uniform({3, 15}, 1.0 / 15);
    const auto t = shortest_path_decode(uniform, sets, cfg);
    const auto slow = brute_force_decode(uniform, sets, cfg);
    EXPECT_EQ(t.I, slow.I);
    EXPECT_EQ(t.I, layer_sweep_decode(uniform, sets, cfg).I);
    EXPECT_EQ(t.I[0], 1u);
    EXPECT_EQ(argmax_decode(uniform), (std::vector<std::uint32_t>{1, 1, 1}));

    // Two equally likely patterns per layer: still the smallest feasible sequence.
    Tensor two({3, 15}, 0.0);
    for (int i = 0; i < 3; ++i) two.at(i, 4) = two.at(i, 14) = 0.5; // ids 5 and 15
    EXPECT_EQ(shortest_path_decode(two, sets, cfg).I, brute_force_decode(two, sets, cfg).I);
}

TEST(Decode, SinkConstantDoesNotChangeResult)
{
    std::mt19937_64 rng(33);
    const SpaceConfig cfg{4, 2, 5};
    const auto sets = feasible_sets(cfg);
    for (int k = 0; k < 20; ++k) {
        const Tensor eta = random_eta(4, 15, rng);
        const auto base = shortest_path_decode(eta, sets, cfg);
        for (double c : {0.5, 7.0}) EXPECT_EQ(shortest_path_decode(eta, sets, cfg, c).I, base.I);
    }
}

TEST(Decode, ArgmaxMatchesRescan)
{
    std::mt19937_64 rng(34);
    for (int k = 0; k < 20; ++k) {
        const Tensor eta = random_eta(5, 127, rng);
        const auto I = argmax_decode(eta);
        for (int i = 0; i < 5; ++i) {
            int best = 0;
            for (int j = 1; j < 127; ++j)
                if (eta.at(i, j) > eta.at(i, best)) best = j;
            EXPECT_EQ(I[static_cast<std::size_t>(i)], static_cast<std::uint32_t>(best + 1));
        }
    }
}

TEST(Decode, GapMetric)
{
    const SpaceConfig cfg{3, 2, 5};
    EXPECT_EQ(gap_metric({1, 2, 3}, {1, 2, 3}, cfg), 0);
    EXPECT_EQ(gap_metric({1, 2, 3}, {1, 2, 7}, cfg), 1);
    std::mt19937_64 rng(35);
    std::uniform_int_distribution<std::uint32_t> pick(1, 15);
    for (int k = 0; k < 100; ++k) {
        std::vector<std::uint32_t> a(3), b(3), c(3);
        for (int i = 0; i < 3; ++i) a[static_cast<std::size_t>(i)] = pick(rng), b[static_cast<std::size_t>(i)] = pick(rng), c[static_cast<std::size_t>(i)] = pick(rng);
        const int ab = gap_metric(a, b, cfg);
        EXPECT_EQ(ab, hamming_by_matrix(a, b, cfg));
        EXPECT_EQ(ab, gap_metric(b, a, cfg));
        EXPECT_LE(gap_metric(a, c, cfg), ab + gap_metric(b, c, cfg));
        EXPECT_GE(ab, 0);
        EXPECT_LE(ab, 3 * 4);
    }
    EXPECT_THROW(gap_metric({1, 2}, {1, 2, 3}, cfg), ValidationError);
}

TEST(Decode, SelectCellOps)
{
    Tensor alpha({2, 4, 5}, 0.2);
    alpha.at(1, 3, 2) = 0.9;
    const auto ops = select_cell_ops(alpha, {0b0101, 0b1000});
    ASSERT_EQ(ops.size(), 3u);
    EXPECT_EQ(ops.at({0, 0}), 0);
    EXPECT_EQ(ops.at({0, 2}), 0);
    EXPECT_EQ(ops.at({1, 3}), 2);
}

TEST(Decode, BruteForceGuards)
{
    std::mt19937_64 rng(36);
    const auto s2 = feasible_sets({1, 2, 5});
    const Tensor eta = random_eta(1, 15, rng);
    EXPECT_EQ(brute_force_decode(eta, s2, {1, 2, 5}).I, argmax_decode(eta));
    const auto s4 = feasible_sets({12, 4, 5});
    EXPECT_THROW(brute_force_decode(Tensor({12, 1023}, 1.0 / 1023), s4, {12, 4, 5}), ValidationError);
}

TEST(Decode, ArchitectureJsonAndDot)
{
    std::mt19937_64 rng(37);
    const SpaceConfig cfg{4, 2, 5};
    const auto sets = feasible_sets(cfg);
    ArchParams a = ArchParams::init(cfg, rng);
    std::normal_distribution<double> n(0.0, 2.0);
    for (double& v : a.alpha_raw.data) v += n(rng);
    for (double& v : a.p_raw.data) v += n(rng);
    const auto t = decode_architecture(relax_all(a), sets, cfg);
    EXPECT_NO_THROW(t.validate(sets));

    const auto dir = testutil::scratch_dir("decode_io");
    save_architecture(t, (dir / "arch.json").string());
    const auto back = load_architecture((dir / "arch.json").string());
    EXPECT_EQ(back.I, t.I);
    EXPECT_EQ(back.ops, t.ops);

    auto bad = t;
    bad.ops.erase(bad.ops.begin());
    EXPECT_THROW(bad.validate(sets), ValidationError);

    const std::string dot = export_dot(t);
    std::size_t node_lines = 0, edge_lines = 0;
    std::istringstream in(dot);
    for (std::string line; std::getline(in, line);) {
        if (line.find("->") != std::string::npos) ++edge_lines;
        else if (line.find("[label=") != std::string::npos) ++node_lines;
    }
    EXPECT_EQ(node_lines, active_feature_nodes(t).size());
    EXPECT_EQ(edge_lines, t.ops.size());
    EXPECT_NE(dot.find("digraph"), std::string::npos);
}
