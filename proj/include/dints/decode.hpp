#pragma once

// Topology-guaranteed discretization. Connection patterns of consecutive
// super nodes form a layered graph; the feasible maximum-likelihood pattern
// sequence is the shortest source->sink path under -log(eta) costs.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <queue>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dints/cell_ops.hpp"
#include "dints/relax.hpp"
#include "dints/space.hpp"

namespace dints {

/// A decoded discrete architecture. Layers are 0-based: I[i] is the input
/// connection pattern of super node i+1.
struct ArchitectureTopology {
    int D = 0;
    int L = 0;
    int N = 0;
    std::vector<std::uint32_t> I;
    std::map<std::pair<int, int>, int> ops; // (layer, edge) -> op, exactly on selected edges
    double total_cost = 0.0;

    int num_edges() const { return 3 * D - 2; }
    SpaceConfig space() const { return SpaceConfig{L, D, N}; }

    bool is_feasible(const FeasibilitySets& sets) const
    {
        for (std::size_t i = 0; i + 1 < I.size(); ++i)
            if (!sets.contains(I[i], I[i + 1])) return false;
        return true;
    }

    bool selected(int layer, int edge) const { return (I.at(static_cast<std::size_t>(layer)) >> edge) & 1u; }

    /// Checks shapes, pattern ranges and that ops cover exactly the selected edges.
    void validate(const FeasibilitySets& sets) const
    {
        space().validate();
        if (sets.D() != D) throw ValidationError("topology and feasibility table disagree on D");
        if (static_cast<int>(I.size()) != L) throw ValidationError("topology: I has wrong length");
        const std::uint32_t M = space().num_patterns();
        for (std::uint32_t j : I)
            if (j < 1 || j > M) throw ValidationError("topology: pattern id " + std::to_string(j) + " out of range");
        if (!is_feasible(sets)) throw ValidationError("topology is infeasible: some node has an input but no output");
        std::size_t n_selected = 0;
        for (int i = 0; i < L; ++i)
            for (int e = 0; e < num_edges(); ++e) {
                if (!selected(i, e)) continue;
                ++n_selected;
                auto it = ops.find({i, e});
                if (it == ops.end())
                    throw ValidationError("topology: no op for selected edge " + std::to_string(e) + " at layer " +
                                          std::to_string(i));
                if (it->second < 0 || it->second >= N) throw ValidationError("topology: op index out of range");
            }
        if (n_selected != ops.size()) throw ValidationError("topology: ops defined on unselected edges");
    }

    nlohmann::json to_json() const
    {
        nlohmann::json o = nlohmann::json::object();
        for (const auto& [key, op] : ops) o[std::to_string(key.first) + "," + std::to_string(key.second)] = op;
        return {{"D", D}, {"L", L}, {"N", N}, {"I", I}, {"ops", o}, {"total_cost", total_cost}};
    }

    static ArchitectureTopology from_json(const nlohmann::json& j)
    {
        for (const char* key : {"D", "L", "N", "I", "ops"})
            if (!j.contains(key)) throw ValidationError(std::string("architecture: missing field '") + key + "'");
        ArchitectureTopology t;
        t.D = j.at("D").get<int>();
        t.L = j.at("L").get<int>();
        t.N = j.at("N").get<int>();
        t.I = j.at("I").get<std::vector<std::uint32_t>>();
        for (auto it = j.at("ops").begin(); it != j.at("ops").end(); ++it) {
            const std::string& k = it.key();
            const auto comma = k.find(',');
            if (comma == std::string::npos) throw ValidationError("architecture: bad ops key '" + k + "'");
            t.ops[{std::stoi(k.substr(0, comma)), std::stoi(k.substr(comma + 1))}] = it.value().get<int>();
        }
        t.total_cost = j.value("total_cost", 0.0);
        return t;
    }

    friend bool operator==(const ArchitectureTopology&, const ArchitectureTopology&) = default;
};

inline void save_architecture(const ArchitectureTopology& t, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path);
    out << t.to_json().dump(2) << '\n';
}

inline ArchitectureTopology load_architecture(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path);
    return ArchitectureTopology::from_json(nlohmann::json::parse(in));
}

inline double neg_log_prob(double eta) { return -std::log(std::max(eta, kProbEps)); }

/// Layered decode graph with L*M + 2 nodes. Arcs are implicit in the
/// feasibility table: c(i-1, m) -> c(i, j) exists iff j is in F(m).
/// The graph borrows `sets`, which must outlive it.
class DecodeGraph {
public:
    static constexpr int kSource = 0;
    static constexpr int kSink = 1;

    DecodeGraph(const Tensor& eta, const FeasibilitySets& sets, double sink_cost = 0.0)
        : sets_(sets), sink_cost_(sink_cost)
    {
        if (eta.rank() != 2 || static_cast<std::uint32_t>(eta.dim(1)) != sets.num_patterns())
            throw ShapeError("decode graph: eta " + shape_str(eta.shape) + " vs " +
                             std::to_string(sets.num_patterns()) + " patterns");
        L_ = eta.dim(0);
        M_ = static_cast<int>(sets.num_patterns());
        cost_.resize(eta.size());
        for (std::size_t k = 0; k < eta.size(); ++k) cost_[k] = neg_log_prob(eta.data[k]);
        src_of_.assign(static_cast<std::size_t>(M_) + 1, 0);
        for (std::uint32_t a = 1; a <= sets.num_activations(); ++a)
            for (std::uint32_t k : sets.F_out({a})) src_of_[k] = a;
    }

    int layers() const { return L_; }
    int patterns() const { return M_; }
    int num_nodes() const { return L_ * M_ + 2; }
    int node(int layer, std::uint32_t j) const { return 2 + layer * M_ + static_cast<int>(j) - 1; }
    int layer_of(int v) const { return (v - 2) / M_; }
    std::uint32_t pattern_of(int v) const { return static_cast<std::uint32_t>((v - 2) % M_ + 1); }

    /// Cost of the arc entering v.
    double arc_cost_into(int v) const
    {
        return v == kSink ? sink_cost_ : cost_[static_cast<std::size_t>(v - 2)];
    }

    template <class F>
    void for_each_successor(int u, F&& f) const
    {
        if (u == kSink) return;
        if (u == kSource) {
            for (int j = 1; j <= M_; ++j) f(node(0, static_cast<std::uint32_t>(j)));
            return;
        }
        const int i = layer_of(u);
        if (i == L_ - 1) {
            f(kSink);
            return;
        }
        for (std::uint32_t k : sets_.F(pattern_of(u))) f(node(i + 1, k));
    }

    template <class F>
    void for_each_predecessor(int v, F&& f) const
    {
        if (v == kSource) return;
        if (v == kSink) {
            for (int j = 1; j <= M_; ++j) f(node(L_ - 1, static_cast<std::uint32_t>(j)));
            return;
        }
        const int i = layer_of(v);
        if (i == 0) {
            f(kSource);
            return;
        }
        for (std::uint32_t m : sets_.F_in({src_of_[pattern_of(v)]})) f(node(i - 1, m));
    }

    bool has_arc(int u, int v) const
    {
        bool found = false;
        for_each_successor(u, [&](int w) { found = found || w == v; });
        return found;
    }

    std::size_t num_arcs() const
    {
        std::size_t n = 0;
        for (int u = 0; u < num_nodes(); ++u) for_each_successor(u, [&](int) { ++n; });
        return n;
    }

private:
    const FeasibilitySets& sets_;
    double sink_cost_;
    int L_ = 0;
    int M_ = 0;
    std::vector<double> cost_;
    std::vector<std::uint32_t> src_of_; // pattern id -> activation it requires of the previous super node
};

inline DecodeGraph build_decode_graph(const Tensor& eta, const FeasibilitySets& sets, double sink_cost = 0.0)
{
    return DecodeGraph(eta, sets, sink_cost);
}

inline double sequence_cost(const Tensor& eta, const std::vector<std::uint32_t>& I)
{
    double c = 0.0;
    for (std::size_t i = 0; i < I.size(); ++i) c += neg_log_prob(eta.at(static_cast<int>(i), static_cast<int>(I[i]) - 1));
    return c;
}

namespace detail {

// Walks forward from the source taking, at each step, the smallest-id
// successor that attains the optimal cost-to-sink. Yields the
// lexicographically smallest optimal sequence.
inline std::vector<std::uint32_t> trace_forward(const DecodeGraph& g, const std::vector<double>& to_sink)
{
    std::vector<std::uint32_t> I;
    int u = DecodeGraph::kSource;
    while (true) {
        int next = -1;
        g.for_each_successor(u, [&](int v) {
            if (next >= 0) return;
            if (g.arc_cost_into(v) + to_sink[static_cast<std::size_t>(v)] == to_sink[static_cast<std::size_t>(u)])
                next = v;
        });
        if (next < 0) throw ValidationError("decode: no optimal successor (graph invariant violated)");
        if (next == DecodeGraph::kSink) break;
        I.push_back(g.pattern_of(next));
        u = next;
    }
    return I;
}

} // namespace detail

/// Dijkstra on the reversed graph from the sink, then a forward trace.
inline std::vector<std::uint32_t> dijkstra_decode_ids(const DecodeGraph& g)
{
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(static_cast<std::size_t>(g.num_nodes()), inf);
    std::vector<char> done(static_cast<std::size_t>(g.num_nodes()), 0);
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    dist[DecodeGraph::kSink] = 0.0;
    heap.push({0.0, DecodeGraph::kSink});
    while (!heap.empty()) {
        const auto [d, v] = heap.top();
        heap.pop();
        if (done[static_cast<std::size_t>(v)]) continue;
        done[static_cast<std::size_t>(v)] = 1;
        const double w = g.arc_cost_into(v);
        g.for_each_predecessor(v, [&](int u) {
            const double cand = w + d;
            if (cand < dist[static_cast<std::size_t>(u)]) {
                dist[static_cast<std::size_t>(u)] = cand;
                heap.push({cand, u});
            }
        });
    }
    if (!std::isfinite(dist[DecodeGraph::kSource]))
        throw ValidationError("decode: sink unreachable from source (feasibility table invariant violated)");
    return detail::trace_forward(g, dist);
}

/// Exact dynamic program over layers; same costs and tie rule as Dijkstra.
inline std::vector<std::uint32_t> layer_sweep_decode_ids(const DecodeGraph& g)
{
    std::vector<double> dist(static_cast<std::size_t>(g.num_nodes()), std::numeric_limits<double>::infinity());
    dist[DecodeGraph::kSink] = 0.0;
    for (int i = g.layers() - 1; i >= 0; --i)
        for (int j = 1; j <= g.patterns(); ++j) {
            const int u = g.node(i, static_cast<std::uint32_t>(j));
            double best = std::numeric_limits<double>::infinity();
            g.for_each_successor(u, [&](int v) {
                best = std::min(best, g.arc_cost_into(v) + dist[static_cast<std::size_t>(v)]);
            });
            dist[static_cast<std::size_t>(u)] = best;
        }
    double best = std::numeric_limits<double>::infinity();
    g.for_each_successor(DecodeGraph::kSource, [&](int v) {
        best = std::min(best, g.arc_cost_into(v) + dist[static_cast<std::size_t>(v)]);
    });
    dist[DecodeGraph::kSource] = best;
    return detail::trace_forward(g, dist);
}

/// Per-layer argmax of eta, ties to the smallest id. May be infeasible.
inline std::vector<std::uint32_t> argmax_decode(const Tensor& eta)
{
    if (eta.rank() != 2) throw ShapeError("argmax_decode expects [L,M], got " + shape_str(eta.shape));
    std::vector<std::uint32_t> I;
    for (int i = 0; i < eta.dim(0); ++i) {
        int best = 0;
        for (int j = 1; j < eta.dim(1); ++j)
            if (eta.at(i, j) > eta.at(i, best)) best = j;
        I.push_back(static_cast<std::uint32_t>(best + 1));
    }
    return I;
}

/// Argmax op on every selected edge, ties to the smallest op index.
inline std::map<std::pair<int, int>, int> select_cell_ops(const Tensor& alpha, const std::vector<std::uint32_t>& I)
{
    if (alpha.rank() != 3 || alpha.dim(0) != static_cast<int>(I.size()))
        throw ShapeError("select_cell_ops: alpha " + shape_str(alpha.shape));
    std::map<std::pair<int, int>, int> ops;
    const int E = alpha.dim(1), N = alpha.dim(2);
    for (int i = 0; i < alpha.dim(0); ++i)
        for (int e = 0; e < E; ++e) {
            if (!((I[static_cast<std::size_t>(i)] >> e) & 1u)) continue;
            int best = 0;
            for (int n = 1; n < N; ++n)
                if (alpha.at(i, e, n) > alpha.at(i, e, best)) best = n;
            ops[{i, e}] = best;
        }
    return ops;
}

/// Hamming distance between the [L, E] edge-indication matrices of two pattern sequences.
inline int gap_metric(const std::vector<std::uint32_t>& c_max, const std::vector<std::uint32_t>& c_top,
                      const SpaceConfig& cfg)
{
    if (static_cast<int>(c_max.size()) != cfg.L || static_cast<int>(c_top.size()) != cfg.L)
        throw ValidationError("gap_metric: sequences must have length L");
    const std::uint32_t mask = (std::uint32_t{1} << cfg.num_edges()) - 1;
    int g = 0;
    for (int i = 0; i < cfg.L; ++i)
        g += __builtin_popcount((c_max[static_cast<std::size_t>(i)] ^ c_top[static_cast<std::size_t>(i)]) & mask);
    return g;
}

inline ArchitectureTopology make_topology(const SpaceConfig& cfg, std::vector<std::uint32_t> I, const Tensor& eta)
{
    ArchitectureTopology t;
    t.D = cfg.D;
    t.L = cfg.L;
    t.N = cfg.N;
    t.total_cost = sequence_cost(eta, I);
    t.I = std::move(I);
    return t;
}

/// Feasibility-constrained maximum-likelihood pattern sequence (ops left empty).
inline ArchitectureTopology shortest_path_decode(const Tensor& eta, const FeasibilitySets& sets, const SpaceConfig& cfg,
                                                 double sink_cost = 0.0)
{
    const DecodeGraph g(eta, sets, sink_cost);
    if (g.layers() != cfg.L) throw ShapeError("shortest_path_decode: eta has wrong layer count");
    return make_topology(cfg, dijkstra_decode_ids(g), eta);
}

inline ArchitectureTopology layer_sweep_decode(const Tensor& eta, const FeasibilitySets& sets, const SpaceConfig& cfg)
{
    const DecodeGraph g(eta, sets);
    return make_topology(cfg, layer_sweep_decode_ids(g), eta);
}

inline constexpr double kBruteForceLimit = 1e7;

/// Exhaustive minimization over all M^L pattern sequences; the first
/// (lexicographically smallest) minimum wins.
inline ArchitectureTopology brute_force_decode(const Tensor& eta, const FeasibilitySets& sets, const SpaceConfig& cfg)
{
    const int L = cfg.L;
    const std::uint32_t M = cfg.num_patterns();
    if (std::pow(static_cast<double>(M), L) > kBruteForceLimit)
        throw ValidationError("brute_force_decode: instance too large (M^L > 1e7)");
    if (eta.rank() != 2 || eta.dim(0) != L || static_cast<std::uint32_t>(eta.dim(1)) != M)
        throw ShapeError("brute_force_decode: eta " + shape_str(eta.shape));

    std::vector<std::uint32_t> cur(static_cast<std::size_t>(L), 1), best;
    double best_cost = std::numeric_limits<double>::infinity();
    while (true) {
        bool ok = true;
        for (int i = 0; i + 1 < L && ok; ++i) ok = sets.contains(cur[static_cast<std::size_t>(i)], cur[static_cast<std::size_t>(i) + 1]);
        if (ok) {
            const double c = sequence_cost(eta, cur);
            if (c < best_cost) {
                best_cost = c;
                best = cur;
            }
        }
        int pos = L - 1;
        while (pos >= 0 && cur[static_cast<std::size_t>(pos)] == M) cur[static_cast<std::size_t>(pos--)] = 1;
        if (pos < 0) break;
        ++cur[static_cast<std::size_t>(pos)];
    }
    if (best.empty()) throw ValidationError("brute_force_decode: no feasible sequence");
    return make_topology(cfg, std::move(best), eta);
}

/// Full discretization of a relaxed state: shortest-path topology plus argmax ops.
inline ArchitectureTopology decode_architecture(const RelaxedState& st, const FeasibilitySets& sets, const SpaceConfig& cfg)
{
    ArchitectureTopology t = shortest_path_decode(st.eta, sets, cfg);
    t.ops = select_cell_ops(st.alpha, t.I);
    return t;
}

/// Feature nodes that carry signal: layer-0 nodes feeding a selected edge and
/// nodes of layers 1..L with at least one selected input. Entries are (layer, resolution).
inline std::vector<std::pair<int, int>> active_feature_nodes(const ArchitectureTopology& t)
{
    std::vector<std::pair<int, int>> nodes;
    const auto edges = make_edges(t.D);
    for (int d = 0; d < t.D; ++d)
        for (const Edge& e : edges)
            if (e.src_res == d && t.selected(0, e.index)) {
                nodes.push_back({0, d});
                break;
            }
    for (int i = 0; i < t.L; ++i)
        for (int d = 0; d < t.D; ++d)
            for (const Edge& e : edges)
                if (e.dst_res == d && t.selected(i, e.index)) {
                    nodes.push_back({i + 1, d});
                    break;
                }
    return nodes;
}

/// Graphviz rendering: feature nodes as graph nodes, selected edges labeled with their ops.
inline std::string export_dot(const ArchitectureTopology& t)
{
    std::ostringstream os;
    os << "digraph architecture {\n  rankdir=LR;\n";
    for (const auto& [layer, d] : active_feature_nodes(t))
        os << "  n" << layer << '_' << d << " [label=\"L" << layer << " r" << d << "\"];\n";
    const auto edges = make_edges(t.D);
    for (int i = 0; i < t.L; ++i)
        for (const Edge& e : edges) {
            if (!t.selected(i, e.index)) continue;
            auto it = t.ops.find({i, e.index});
            const char* label = it == t.ops.end() ? "?" : cell_op_name(it->second);
            os << "  n" << i << '_' << e.src_res << " -> n" << i + 1 << '_' << e.dst_res << " [label=\"" << label;
            if (e.kind() != EdgeKind::same) os << " (" << edge_kind_name(e.kind()) << ")";
            os << "\"];\n";
        }
    os << "}\n";
    return os.str();
}

} // namespace dints
