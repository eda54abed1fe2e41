#include <gtest/gtest.h>

#include <random>

#include "dints/discrete.hpp"
#include "dints/grad_check.hpp"
#include "dints/oracle.hpp"
#include "dints/task.hpp"
#include "test_util.hpp"

using namespace dints;

namespace {

NetConfig tiny(int L = 2, int D = 2)
{
    NetConfig cfg;
    cfg.space = SpaceConfig{L, D, 5};
    cfg.base_channels = 2;
    cfg.height = cfg.width = 8;
    return cfg;
}

ArchitectureTopology topology(const NetConfig& cfg, std::vector<std::uint32_t> I, int op)
{
    ArchitectureTopology t;
    t.D = cfg.space.D;
    t.L = cfg.space.L;
    t.N = cfg.space.N;
    t.I = std::move(I);
    for (int i = 0; i < t.L; ++i)
        for (int e = 0; e < t.num_edges(); ++e)
            if (t.selected(i, e)) t.ops[{i, e}] = (op + i + e) % t.N;
    return t;
}

} // namespace

TEST(Supernet, ConfigValidation)
{
    NetConfig cfg = tiny(2, 3);
    EXPECT_NO_THROW(cfg.validate());
    cfg.height = 6;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny();
    cfg.classes = 1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(tiny(2, 3).feature_shape(2, 2), (Shape{2, 8, 2, 2}));
}

TEST(Supernet, StemShapes)
{
    std::mt19937_64 rng(40);
    const NetConfig cfg = tiny(1, 3);
    const ParamStore p = init_supernet_weights(cfg, rng);
    ad::Tape tape;
    const VarStore w = bind_params(tape, p, false);
    const auto stems = stem_forward(w, cfg, tape.constant(testutil::random_tensor({3, 1, 8, 8}, rng, 0, 1)));
    ASSERT_EQ(stems.size(), 3u);
    for (int d = 0; d < 3; ++d) EXPECT_EQ(stems[static_cast<std::size_t>(d)].shape(), cfg.feature_shape(3, d));
    EXPECT_THROW(stem_forward(w, cfg, tape.constant(Tensor({1, 1, 8, 4}, 0.0))), ShapeError);
}

TEST(Supernet, ZeroImageGivesHeadBias)
{
    // Constant features normalize to beta = 0 everywhere, so only the head bias survives.
    std::mt19937_64 rng(41);
    const NetConfig cfg = tiny(3, 2);
    ParamStore p = init_supernet_weights(cfg, rng);
    p[pname::head_bias] = Tensor({2}, std::vector<double>{0.25, -1.5});
    const ArchParams a = ArchParams::init(cfg.space, rng);
    const RelaxedState st = relax_all(a);
    const Tensor out = relaxed_forward_values(p, cfg, st.q, st.alpha, Tensor({1, 1, 8, 8}, 0.0));
    for (int k = 0; k < 64; ++k) {
        EXPECT_NEAR(out.data[static_cast<std::size_t>(k)], 0.25, 1e-12);
        EXPECT_NEAR(out.data[static_cast<std::size_t>(64 + k)], -1.5, 1e-12);
    }
}

TEST(Supernet, OpsIdentityAndLinearity)
{
    std::mt19937_64 rng(42);
    const NetConfig cfg = tiny();
    ParamStore p = init_supernet_weights(cfg, rng);
    // conv3x3 op on edge 0 of layer 0 with an identity kernel.
    Tensor id({2, 2, 3, 3}, 0.0);
    id.at(0, 0, 1, 1) = id.at(1, 1, 1, 1) = 1.0;
    p[pname::cell(0, 0, 1, "w")] = id;

    ad::Tape tape;
    const VarStore w = bind_params(tape, p, false);
    const Tensor xv = testutil::random_tensor({2, 2, 8, 8}, rng);
    const ad::Var x = tape.constant(xv);
    const ad::Var r = ad::relu(x);
    EXPECT_EQ(op_forward(w, 0, 0, 0, x, r).value().data, xv.data);
    const Tensor conv = op_forward(w, 0, 0, 1, x, r).value();
    const Tensor norm = ad::instance_norm(r, lookup(w, pname::cell(0, 0, 1, "gamma")), lookup(w, pname::cell(0, 0, 1, "beta"))).value();
    EXPECT_LE(oracle::max_rel_diff(conv.data, norm.data), 1e-12);

    // Cell output is linear in its mixture weights.
    std::vector<double> a1{0.1, 0.4, 0.2, 0.2, 0.1}, a2{0.3, 0.0, 0.5, 0.1, 0.1};
    auto cell_with = [&](const std::vector<double>& a) {
        std::vector<ad::Var> vars;
        for (double v : a) vars.push_back(tape.constant(Tensor::scalar(v)));
        return cell_forward(w, 0, 0, x, vars).value();
    };
    std::vector<double> sum(5);
    for (int n = 0; n < 5; ++n) sum[static_cast<std::size_t>(n)] = a1[static_cast<std::size_t>(n)] + 2.0 * a2[static_cast<std::size_t>(n)];
    const Tensor y1 = cell_with(a1), y2 = cell_with(a2), ys = cell_with(sum);
    for (std::size_t k = 0; k < ys.size(); ++k) EXPECT_NEAR(ys.data[k], y1.data[k] + 2.0 * y2.data[k], 1e-12);
}

TEST(Supernet, MarginalFormMatchesPatternSum)
{
    const auto r = oracle::run_flow_suite(43, 20, 1e-9);
    EXPECT_TRUE(r.passed()) << oracle::describe(r);
}

TEST(Supernet, OneHotRelaxationEqualsDiscreteNet)
{
    std::mt19937_64 rng(44);
    for (int D : {2, 3}) {
        const NetConfig cfg = tiny(3, D);
        const auto sets = feasible_sets(cfg.space);
        const ParamStore super = init_supernet_weights(cfg, rng);
        const Tensor image = testutil::random_tensor({2, 1, 8, 8}, rng, 0, 1);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<std::uint32_t> I{std::uniform_int_distribution<std::uint32_t>(1, cfg.space.num_patterns())(rng)};
            while (static_cast<int>(I.size()) < cfg.space.L) {
                const auto& f = sets.F(I.back());
                I.push_back(f[std::uniform_int_distribution<std::size_t>(0, f.size() - 1)(rng)]);
            }
            const ArchitectureTopology t = topology(cfg, I, trial);
            const DiscreteNet net = instantiate_discrete(t, cfg, rng);
            const ParamStore shared = copy_shared_weights(net, super);
            EXPECT_LT(count_params(shared), count_params(super));

            Tensor q({cfg.space.L, cfg.space.num_edges()}, 0.0), alpha({cfg.space.L, cfg.space.num_edges(), 5}, 0.0);
            for (int i = 0; i < cfg.space.L; ++i)
                for (int e = 0; e < cfg.space.num_edges(); ++e) {
                    if (t.selected(i, e)) q.at(i, e) = 1.0;
                    alpha.at(i, e, t.selected(i, e) ? t.ops.at({i, e}) : 0) = 1.0;
                }
            const Tensor relaxed = relaxed_forward_values(super, cfg, q, alpha, image);
            const Tensor discrete = discrete_forward_values(net, shared, image);
            EXPECT_LE(oracle::max_rel_diff(discrete.data, relaxed.data), 1e-12) << "D=" << D << " trial " << trial;
        }
    }
}

TEST(Supernet, AllSkipCascade)
{
    // Every op skip: features are sums of resampled stems, linear in them.
    std::mt19937_64 rng(45);
    const Tensor image = testutil::random_tensor({1, 1, 8, 8}, rng, 0, 1);
    NetConfig cfg = tiny(2, 2);
    const ArchitectureTopology t2 = with_all_skip(topology(cfg, {15, 15}, 0));
    const DiscreteNet net2 = instantiate_discrete(t2, cfg, rng);
    ad::Tape tp;
    const VarStore w2 = bind_params(tp, net2.weights, false);
    const auto stems = stem_forward(w2, cfg, tp.constant(image));
    const auto edges = make_edges(2);
    std::vector<ad::Var> nodes = stems;
    for (int i = 0; i < 2; ++i) {
        std::vector<ad::Var> next(2);
        for (const Edge& e : edges) {
            const ad::Var y = resample_edge(w2, i, e, nodes[static_cast<std::size_t>(e.src_res)]);
            auto& s = next[static_cast<std::size_t>(e.dst_res)];
            s = s.valid() ? ad::add(s, y) : y;
        }
        nodes = next;
    }
    const Tensor want2 = output_head(w2, cfg, {nodes[0], nodes[1]}).value();
    EXPECT_LE(oracle::max_rel_diff(discrete_forward_values(net2, net2.weights, image).data, want2.data), 1e-12);
}

TEST(Supernet, DiscreteRejectsBadTopologies)
{
    std::mt19937_64 rng(46);
    const NetConfig cfg = tiny(2, 2);
    const auto sets = feasible_sets(cfg.space);
    std::uint32_t bad_next = 0;
    for (std::uint32_t k = 1; k <= 15 && !bad_next; ++k)
        if (!sets.contains(1, k)) bad_next = k;
    ASSERT_NE(bad_next, 0u);
    EXPECT_THROW(instantiate_discrete(topology(cfg, {1, bad_next}, 0), cfg, rng), ValidationError);
    EXPECT_THROW(instantiate_discrete(topology(tiny(3, 2), {1, 1, 1}, 0), cfg, rng), ValidationError);
}

TEST(Supernet, PrunesDeadNodes)
{
    // Pattern 1 only uses edge 0 (0 -> 0), so resolution 1 never appears.
    const NetConfig cfg = tiny(2, 2);
    const NodePlan plan = plan_nodes(topology(cfg, {1, 1}, 0));
    EXPECT_TRUE(plan.present[0][0]);
    EXPECT_FALSE(plan.present[0][1]);
    EXPECT_FALSE(plan.present[2][1]);
    std::mt19937_64 rng(47);
    const DiscreteNet net = instantiate_discrete(topology(cfg, {1, 1}, 1), cfg, rng);
    for (const auto& [name, _] : net.weights) EXPECT_EQ(name.find("stem.1"), std::string::npos) << name;
}

TEST(Supernet, DivergenceIsReported)
{
    std::mt19937_64 rng(48);
    const NetConfig cfg = tiny();
    ParamStore p = init_supernet_weights(cfg, rng);
    p[pname::resample(0, 1)].data[0] = std::numeric_limits<double>::infinity();
    const RelaxedState st = relax_all(ArchParams::init(cfg.space, rng));
    try {
        relaxed_forward_values(p, cfg, st.q, st.alpha, testutil::random_tensor({1, 1, 8, 8}, rng, 0, 1));
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
    }
}

TEST(Supernet, ParamsJsonRoundTrip)
{
    std::mt19937_64 rng(49);
    const ParamStore p = init_supernet_weights(tiny(), rng);
    const ParamStore back = params_from_json(params_to_json(p));
    ASSERT_EQ(back.size(), p.size());
    for (const auto& [name, t] : p) {
        EXPECT_EQ(back.at(name).shape, t.shape);
        EXPECT_EQ(back.at(name).data, t.data);
    }
}

TEST(Supernet, SegLossGradientWrtArchitecture)
{
    std::mt19937_64 rng(50);
    int failures = 0;
    double worst = 0.0;
    for (int inst = 0; inst < 3; ++inst) {
        const NetConfig cfg = tiny(2, 2);
        const ParamStore p = init_supernet_weights(cfg, rng);
        ArchParams a = ArchParams::init(cfg.space, rng);
        std::normal_distribution<double> n(0.0, 1.0);
        for (double& v : a.alpha_raw.data) v += n(rng);
        for (double& v : a.p_raw.data) v += n(rng);
        const task::Batch batch = task::make_batch(7, {0, 1}, {8, 8, 2, 0.05, 0.05, 0.6});
        const PatternMatrices pm(cfg.space.num_edges());
        const auto r = ad::grad_check(
            [&](ad::Tape& t, std::span<const ad::Var> v) {
                const VarStore w = bind_params(t, p, false);
                const RelaxedVars rv = relax_on_tape(t, v[0], v[1], pm);
                return task::seg_loss(relaxed_forward(w, cfg, rv.q, rv.alpha, t.constant(batch.images)), batch.labels);
            },
            {a.alpha_raw, a.p_raw}, {1e-5, 1e-3, 1e-3, 0});
        worst = std::max(worst, r.max_rel_error);
        if (!r.passed) ++failures;
    }
    EXPECT_EQ(failures, 0) << "worst " << worst;
}

TEST(Supernet, WeightGradientsThroughWholeNet)
{
    std::mt19937_64 rng(51);
    const NetConfig cfg = tiny(1, 2);
    const ParamStore p = init_supernet_weights(cfg, rng);
    const RelaxedState st = relax_all(ArchParams::init(cfg.space, rng));
    const task::Batch batch = task::make_batch(9, {3}, {8, 8, 2, 0.05, 0.05, 0.6});
    std::vector<std::string> names;
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : p)
        if (name.rfind("cell.0.1.", 0) == 0 || name.rfind("resample.0.1", 0) == 0 || name.rfind("stem.1", 0) == 0) {
            names.push_back(name);
            inputs.push_back(t);
        }
    ASSERT_FALSE(names.empty());
    const auto r = ad::grad_check(
        [&](ad::Tape& t, std::span<const ad::Var> v) {
            VarStore w = bind_params(t, p, false);
            for (std::size_t k = 0; k < names.size(); ++k) w[names[k]] = v[k];
            return task::seg_loss(relaxed_forward(w, cfg, t.constant(st.q), t.constant(st.alpha), t.constant(batch.images)),
                                  batch.labels);
        },
        inputs, {1e-5, 1e-4, 1e-3, 4});
    EXPECT_TRUE(r.passed) << "worst " << r.max_rel_error << " at input " << names[r.worst_input];
}
