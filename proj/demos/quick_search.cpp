// Small end-to-end search: two resolutions, three layers, 16x16 images.
// Prints the loss terms every 50 arch updates, the decoded topology and the
// held-out dice of a short retrain.
//
//   demo_quick_search [out_dir]

#include <cstdio>
#include <filesystem>

#include "dints/dints.hpp"

int main(int argc, char** argv)
{
    const std::filesystem::path out = argc > 1 ? argv[1] : std::filesystem::temp_directory_path() / "dints_quick_search";
    std::filesystem::remove_all(out);

    dints::SearchConfig cfg;
    cfg.net.space = dints::SpaceConfig{3, 2, 5};
    cfg.net.base_channels = 4;
    cfg.net.height = cfg.net.width = 16;
    cfg.task.train_size = 32;
    cfg.task.holdout_size = 16;
    cfg.iters = {50, 150, 300};
    cfg.lr_w.milestones = {400};
    cfg.sigma = 0.2;
    cfg.retrain.iters = 300;
    cfg.retrain.warmup_iters = 30;
    cfg.retrain.milestones = {200};

    const dints::SearchResult r = dints::run_search(cfg, out);
    for (std::size_t k = 49; k < r.log.size(); k += 50) {
        const auto& l = r.log[k];
        std::printf("arch step %4zu  l_seg %.4f  l_eta %.5f  l_tp %.3f  m_ratio %.4f  G %d\n", k + 1, l.l_seg, l.l_eta,
                    l.l_tp, l.m_ratio, r.gap[k]);
    }
    std::printf("\ndecoded I:");
    for (auto j : r.topology.I) std::printf(" %u", j);
    std::printf("\ndecoded memory ratio %.4f\n\n%s\n", r.decoded_m_ratio, dints::export_dot(r.topology).c_str());

    const dints::RetrainResult rr = dints::retrain(r.topology, cfg);
    const dints::RetrainResult skip = dints::retrain(dints::with_all_skip(r.topology), cfg);
    std::printf("held-out dice: decoded %.4f, same topology with skip ops %.4f\n", rr.mean_dice, skip.mean_dice);
    std::printf("artifacts in %s\n", out.c_str());
}
