// Why decoding needs the feasibility constraint: per-layer argmax of the
// pattern probabilities can pick a pattern whose inputs were never produced.

#include <cstdio>

#include "dints/dints.hpp"

namespace {

void print_sequence(const char* label, const std::vector<std::uint32_t>& I, const dints::SpaceConfig& cfg)
{
    std::printf("%-10s", label);
    for (auto j : I) {
        std::printf("  %2u [", j);
        for (int b : dints::ConnectionPattern{j}.bits(cfg.num_edges())) std::printf("%d", b);
        std::printf("]");
    }
    std::printf("\n");
}

} // namespace

int main()
{
    const dints::SpaceConfig cfg{3, 2, 5};
    const auto sets = dints::feasible_sets(cfg);
    std::printf("edges (dst, src):");
    for (const auto& e : dints::make_edges(cfg.D)) std::printf("  e%d %d<-%d", e.index, e.dst_res, e.src_res);
    std::printf("\n%u patterns per layer, %zu feasible successors of pattern 1\n\n", cfg.num_patterns(), sets.F(1).size());

    // Layer 0 prefers pattern 1 (only resolution 0 is produced), layer 1
    // prefers pattern 2 (reads resolution 1). That pair is infeasible.
    dints::ArchParams a = dints::ArchParams::zeros(cfg);
    const double edge_logits[3][4] = {{3, -3, -3, -3}, {-3, 3, -3, -3}, {1, 1, -2, -2}};
    for (int i = 0; i < 3; ++i)
        for (int e = 0; e < 4; ++e) a.p_raw.at(i, e) = edge_logits[i][e];
    a.alpha_raw.at(0, 0, 1) = 2.0;
    const dints::RelaxedState st = dints::relax_all(a);

    const auto argmax = dints::argmax_decode(st.eta);
    const auto t = dints::decode_architecture(st, sets, cfg);
    print_sequence("argmax", argmax, cfg);
    print_sequence("decoded", t.I, cfg);
    std::printf("argmax feasible: %s\n", dints::ArchitectureTopology{2, 3, 5, argmax, {}, 0.0}.is_feasible(sets) ? "yes" : "no");
    std::printf("decoded cost %.4f, argmax cost %.4f, gap G = %d\n\n", t.total_cost, dints::sequence_cost(st.eta, argmax),
                dints::gap_metric(argmax, t.I, cfg));
    std::printf("%s", dints::export_dot(t).c_str());
}
