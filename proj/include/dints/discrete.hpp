#pragma once

// Discrete network instantiated from a decoded topology: only the selected
// edges exist, each with its single chosen op. Weight names match the
// supernet's, so supernet weights can be copied in for cross-checks.

#include <optional>
#include <vector>

#include "dints/decode.hpp"
#include "dints/supernet.hpp"

namespace dints {

struct DiscreteNet {
    NetConfig cfg;
    ArchitectureTopology topology;
    ParamStore weights;
};

/// Which feature nodes exist after pruning. A node exists at layer 0 if it
/// feeds a selected edge, and at layer i > 0 if some selected edge reaches it
/// from an existing node. Edges out of missing nodes are dropped.
struct NodePlan {
    std::vector<std::vector<bool>> present; // [L+1][D]
    std::vector<std::vector<bool>> edge_live; // [L][E]
};

inline NodePlan plan_nodes(const ArchitectureTopology& t)
{
    const auto edges = make_edges(t.D);
    NodePlan plan;
    plan.present.assign(static_cast<std::size_t>(t.L) + 1, std::vector<bool>(static_cast<std::size_t>(t.D), false));
    plan.edge_live.assign(static_cast<std::size_t>(t.L), std::vector<bool>(edges.size(), false));
    for (const Edge& e : edges)
        if (t.selected(0, e.index)) plan.present[0][static_cast<std::size_t>(e.src_res)] = true;
    for (int i = 0; i < t.L; ++i)
        for (const Edge& e : edges) {
            const auto ii = static_cast<std::size_t>(i);
            if (!t.selected(i, e.index) || !plan.present[ii][static_cast<std::size_t>(e.src_res)]) continue;
            plan.edge_live[ii][static_cast<std::size_t>(e.index)] = true;
            plan.present[ii + 1][static_cast<std::size_t>(e.dst_res)] = true;
        }
    return plan;
}

inline void check_topology_matches(const ArchitectureTopology& t, const NetConfig& cfg)
{
    if (t.D != cfg.space.D || t.L != cfg.space.L || t.N != cfg.space.N)
        throw ValidationError("topology (D=" + std::to_string(t.D) + ", L=" + std::to_string(t.L) + ", N=" +
                              std::to_string(t.N) + ") does not match the network config");
}

/// Fresh weights for exactly the live part of the topology.
template <class Rng>
ParamStore init_discrete_weights(const ArchitectureTopology& t, const NetConfig& cfg, Rng& rng)
{
    const NodePlan plan = plan_nodes(t);
    const auto edges = make_edges(t.D);
    ParamStore p;
    for (int d = 0; d < t.D; ++d)
        if (plan.present[0][static_cast<std::size_t>(d)]) add_stem_params(p, cfg, d, rng);
    for (int i = 0; i < t.L; ++i)
        for (const Edge& e : edges) {
            if (!plan.edge_live[static_cast<std::size_t>(i)][static_cast<std::size_t>(e.index)]) continue;
            add_resample_params(p, cfg, i, e, rng);
            add_op_params(p, cfg, i, e, t.ops.at({i, e.index}), rng);
        }
    for (int d = 0; d < t.D; ++d)
        if (plan.present[static_cast<std::size_t>(t.L)][static_cast<std::size_t>(d)]) add_head_params(p, cfg, d, rng);
    return p;
}

/// Rejects infeasible topologies; otherwise returns a randomly initialized network.
template <class Rng>
DiscreteNet instantiate_discrete(const ArchitectureTopology& t, const NetConfig& cfg, Rng& rng)
{
    cfg.validate();
    check_topology_matches(t, cfg);
    t.validate(feasible_sets(t.space()));
    return {cfg, t, init_discrete_weights(t, cfg, rng)};
}

/// The subset of `supernet` weights the discrete network uses.
inline ParamStore copy_shared_weights(const DiscreteNet& net, const ParamStore& supernet)
{
    ParamStore p;
    for (const auto& [name, t] : net.weights) {
        auto it = supernet.find(name);
        if (it == supernet.end()) throw ValidationError("supernet lacks weight '" + name + "'");
        if (it->second.shape != t.shape) throw ShapeError("weight '" + name + "' has a different shape in the supernet");
        p[name] = it->second;
    }
    return p;
}

inline ad::Var discrete_forward(const VarStore& w, const NetConfig& cfg, const ArchitectureTopology& t, ad::Var image)
{
    check_topology_matches(t, cfg);
    const Shape want{image.shape().at(0), cfg.in_channels, cfg.height, cfg.width};
    if (image.shape() != want)
        throw ShapeError("discrete_forward: image shape " + shape_str(image.shape()) + ", expected " + shape_str(want));
    const NodePlan plan = plan_nodes(t);
    const auto edges = make_edges(t.D);

    std::vector<std::optional<ad::Var>> nodes(static_cast<std::size_t>(t.D));
    for (int d = 0; d < t.D; ++d)
        if (plan.present[0][static_cast<std::size_t>(d)]) nodes[static_cast<std::size_t>(d)] = stem_forward_at(w, cfg, image, d);
    for (int i = 0; i < t.L; ++i) {
        std::vector<std::optional<ad::Var>> next(static_cast<std::size_t>(t.D));
        for (const Edge& e : edges) {
            if (!plan.edge_live[static_cast<std::size_t>(i)][static_cast<std::size_t>(e.index)]) continue;
            const ad::Var x = resample_edge(w, i, e, *nodes[static_cast<std::size_t>(e.src_res)]);
            const int op = t.ops.at({i, e.index});
            const ad::Var y = op_forward(w, i, e.index, op, x, op == 0 ? x : ad::relu(x));
            auto& slot = next[static_cast<std::size_t>(e.dst_res)];
            slot = slot ? ad::add(*slot, y) : y;
        }
        for (int d = 0; d < t.D; ++d) {
            const auto& n = next[static_cast<std::size_t>(d)];
            if (!n) continue;
            check_feature(*n, cfg, d, "discrete_forward");
            if (!n->value().all_finite()) throw DivergenceError("non-finite activations at layer " + std::to_string(i + 1));
        }
        nodes = std::move(next);
    }
    return output_head(w, cfg, nodes);
}

inline ad::Var discrete_forward(const VarStore& w, const DiscreteNet& net, ad::Var image)
{
    return discrete_forward(w, net.cfg, net.topology, image);
}

inline Tensor discrete_forward_values(const DiscreteNet& net, const ParamStore& weights, const Tensor& image)
{
    ad::Tape tape;
    const VarStore w = bind_params(tape, weights, false);
    return discrete_forward(w, net, tape.constant(image)).value();
}

/// Same topology with every op replaced by skip.
inline ArchitectureTopology with_all_skip(ArchitectureTopology t)
{
    for (auto& [_, op] : t.ops) op = static_cast<int>(CellOp::skip);
    return t;
}

} // namespace dints
