#pragma once

// Combinatorics of the multi-resolution topology space: candidate edges
// between adjacent super nodes, connection patterns (non-empty edge subsets),
// node activation patterns and the feasibility relation between them.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dints/error.hpp"

namespace dints {

inline constexpr int kMinResolutions = 2;
inline constexpr int kMaxResolutions = 4;

struct SpaceConfig {
    int L = 6; // layers (super nodes)
    int D = 3; // resolution levels; level 0 is full resolution
    int N = 5; // candidate cell operations per edge

    int num_edges() const { return 3 * D - 2; }
    std::uint32_t num_patterns() const { return (std::uint32_t{1} << num_edges()) - 1; }
    std::uint32_t num_activations() const { return (std::uint32_t{1} << D) - 1; }

    void validate() const
    {
        if (L < 1) throw ConfigError("space.L must be >= 1, got " + std::to_string(L));
        if (D < kMinResolutions || D > kMaxResolutions)
            throw ConfigError("space.D must be in [2, 4], got " + std::to_string(D));
        if (N < 1) throw ConfigError("space.N must be >= 1, got " + std::to_string(N));
    }

    friend bool operator==(const SpaceConfig&, const SpaceConfig&) = default;
};

enum class EdgeKind { same, down, up };

/// A candidate input edge of a super node. Resolution levels grow as the
/// spatial size halves, so src < dst is a downsampling edge.
struct Edge {
    int index = 0;
    int src_res = 0;
    int dst_res = 0;

    EdgeKind kind() const
    {
        if (src_res == dst_res) return EdgeKind::same;
        return src_res < dst_res ? EdgeKind::down : EdgeKind::up;
    }
};

/// Canonical edge list, sorted by (dst_res, src_res).
inline std::vector<Edge> make_edges(int D)
{
    std::vector<Edge> out;
    for (int dst = 0; dst < D; ++dst)
        for (int src = std::max(0, dst - 1); src <= std::min(D - 1, dst + 1); ++src)
            out.push_back(Edge{static_cast<int>(out.size()), src, dst});
    return out;
}

inline const char* edge_kind_name(EdgeKind k)
{
    switch (k) {
    case EdgeKind::same: return "same";
    case EdgeKind::down: return "down";
    case EdgeKind::up: return "up";
    }
    return "?";
}

/// Non-empty subset of the E candidate edges; bit e of id selects edge e.
struct ConnectionPattern {
    std::uint32_t id = 0;

    bool has(int e) const { return (id >> e) & 1u; }
    int count() const { return __builtin_popcount(id); }

    std::vector<int> bits(int E) const
    {
        std::vector<int> b(static_cast<std::size_t>(E));
        for (int e = 0; e < E; ++e) b[static_cast<std::size_t>(e)] = has(e) ? 1 : 0;
        return b;
    }

    static ConnectionPattern from_bits(const std::vector<int>& bits)
    {
        std::uint32_t id = 0;
        for (std::size_t e = 0; e < bits.size(); ++e)
            if (bits[e]) id |= std::uint32_t{1} << e;
        if (id == 0) throw ValidationError("connection pattern must select at least one edge");
        return {id};
    }

    friend bool operator==(ConnectionPattern, ConnectionPattern) = default;
};

/// Bit d set iff the resolution-d node of a super node has an input edge.
struct ActivationPattern {
    std::uint32_t bits = 0;

    bool active(int d) const { return (bits >> d) & 1u; }

    friend bool operator==(ActivationPattern, ActivationPattern) = default;
};

/// Edge masks by source and destination resolution.
struct EdgeMasks {
    std::vector<std::uint32_t> by_src;
    std::vector<std::uint32_t> by_dst;

    explicit EdgeMasks(int D) : by_src(static_cast<std::size_t>(D), 0), by_dst(static_cast<std::size_t>(D), 0)
    {
        for (const Edge& e : make_edges(D)) {
            by_src[static_cast<std::size_t>(e.src_res)] |= std::uint32_t{1} << e.index;
            by_dst[static_cast<std::size_t>(e.dst_res)] |= std::uint32_t{1} << e.index;
        }
    }
};

inline std::vector<ConnectionPattern> enumerate_patterns(const SpaceConfig& cfg)
{
    cfg.validate();
    std::vector<ConnectionPattern> out;
    out.reserve(cfg.num_patterns());
    for (std::uint32_t id = 1; id <= cfg.num_patterns(); ++id) out.push_back({id});
    return out;
}

inline ActivationPattern activation_of(ConnectionPattern cp, const SpaceConfig& cfg)
{
    const EdgeMasks masks(cfg.D);
    ActivationPattern a;
    for (int d = 0; d < cfg.D; ++d)
        if (cp.id & masks.by_dst[static_cast<std::size_t>(d)]) a.bits |= std::uint32_t{1} << d;
    return a;
}

/// A super node with activation `a` whose outgoing pattern is `out_cp` is
/// feasible iff active nodes have an output edge and inactive nodes have none.
inline bool is_feasible_pair(ActivationPattern a, ConnectionPattern out_cp, const SpaceConfig& cfg)
{
    const EdgeMasks masks(cfg.D);
    for (int d = 0; d < cfg.D; ++d) {
        const bool has_out = (out_cp.id & masks.by_src[static_cast<std::size_t>(d)]) != 0;
        if (has_out != a.active(d)) return false;
    }
    return true;
}

/// Lookup tables F(j), F_in(a), F_out(a). All id lists are sorted ascending.
class FeasibilitySets {
public:
    FeasibilitySets() = default;

    explicit FeasibilitySets(int D) : D_(D)
    {
        SpaceConfig cfg{1, D, 1};
        cfg.validate();
        const EdgeMasks masks(D);
        const std::uint32_t M = cfg.num_patterns();
        const std::uint32_t A = cfg.num_activations();
        act_of_.assign(M + 1, 0);
        in_.assign(A + 1, {});
        out_.assign(A + 1, {});
        for (std::uint32_t j = 1; j <= M; ++j) {
            std::uint32_t act = 0, src = 0;
            for (int d = 0; d < D; ++d) {
                if (j & masks.by_dst[static_cast<std::size_t>(d)]) act |= std::uint32_t{1} << d;
                if (j & masks.by_src[static_cast<std::size_t>(d)]) src |= std::uint32_t{1} << d;
            }
            act_of_[j] = act;
            in_[act].push_back(j);
            // The set of source resolutions of j is exactly the activation it needs.
            out_[src].push_back(j);
        }
    }

    int D() const { return D_; }
    std::uint32_t num_patterns() const { return static_cast<std::uint32_t>(act_of_.size()) - 1; }
    std::uint32_t num_activations() const { return static_cast<std::uint32_t>(in_.size()) - 1; }

    ActivationPattern activation(std::uint32_t j) const { return {act_of_.at(j)}; }

    const std::vector<std::uint32_t>& F(std::uint32_t j) const { return out_.at(act_of_.at(j)); }
    const std::vector<std::uint32_t>& F_in(ActivationPattern a) const { return in_.at(a.bits); }
    const std::vector<std::uint32_t>& F_out(ActivationPattern a) const { return out_.at(a.bits); }

    bool contains(std::uint32_t j, std::uint32_t k) const
    {
        const auto& f = F(j);
        return std::binary_search(f.begin(), f.end(), k);
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["D"] = D_;
        nlohmann::json F = nlohmann::json::object(), Fin = nlohmann::json::object(), Fout = nlohmann::json::object();
        for (std::uint32_t p = 1; p <= num_patterns(); ++p) F[std::to_string(p)] = this->F(p);
        for (std::uint32_t a = 1; a <= num_activations(); ++a) {
            Fin[std::to_string(a)] = in_[a];
            Fout[std::to_string(a)] = out_[a];
        }
        j["F"] = std::move(F);
        j["F_in"] = std::move(Fin);
        j["F_out"] = std::move(Fout);
        return j;
    }

    /// Loads a cached table and checks it against a fresh enumeration.
    static FeasibilitySets from_json(const nlohmann::json& j)
    {
        if (!j.contains("D") || !j.contains("F") || !j.contains("F_in") || !j.contains("F_out"))
            throw ValidationError("feasibility cache: missing one of D, F, F_in, F_out");
        FeasibilitySets fresh(j.at("D").get<int>());
        if (fresh.to_json() != j) throw ValidationError("feasibility cache does not match the edge definition");
        return fresh;
    }

    friend bool operator==(const FeasibilitySets&, const FeasibilitySets&) = default;

private:
    int D_ = 0;
    std::vector<std::uint32_t> act_of_;           // pattern id -> activation bits
    std::vector<std::vector<std::uint32_t>> in_;  // activation bits -> pattern ids
    std::vector<std::vector<std::uint32_t>> out_; // activation bits -> feasible output ids
};

inline FeasibilitySets feasible_sets(const SpaceConfig& cfg)
{
    cfg.validate();
    return FeasibilitySets(cfg.D);
}

/// Reads the cache file at `path` when it exists and matches; otherwise
/// recomputes the table and writes it there.
inline FeasibilitySets load_or_build_feasibility_cache(const std::string& path, int D)
{
    {
        std::ifstream in(path);
        if (in) {
            try {
                auto sets = FeasibilitySets::from_json(nlohmann::json::parse(in));
                if (sets.D() == D) return sets;
            } catch (const std::exception&) {
                // stale or corrupt cache; rebuild below
            }
        }
    }
    FeasibilitySets sets(D);
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write feasibility cache " + path);
    out << sets.to_json().dump();
    return sets;
}

} // namespace dints
