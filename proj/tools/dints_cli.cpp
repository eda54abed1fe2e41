// Command-line driver: search, decode, export-dot, retrain, oracle, gap-report.
// Exit codes: 0 ok, 2 usage/config, 3 validation, 4 numeric divergence.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dints/dints.hpp"

#ifndef DINTS_VERSION
#define DINTS_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitValidation = 3;
constexpr int kExitDivergence = 4;

std::string utc_now()
{
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Refuses a second process in the same output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".dints.lock")
    {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw dints::ValidationError("output directory " + dir.string() + " is in use (lock file " + path_.string() +
                                         " exists; remove it if no other run is active)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        if (::write(fd_, pid.data(), pid.size()) < 0) { /* the lock itself is what matters */ }
    }
    ~DirLock()
    {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

// Written before any computation; completed with the outcome at exit.
class Manifest {
public:
    Manifest(const fs::path& dir, std::string command, const std::vector<std::string>& argv, json extra)
        : path_(dir / "manifest.json")
    {
        j_ = {{"command", std::move(command)}, {"argv", argv}, {"version", DINTS_VERSION}, {"out_dir", fs::absolute(dir).string()},
              {"started_at", utc_now()}};
        for (auto it = extra.begin(); it != extra.end(); ++it) j_[it.key()] = it.value();
        flush();
    }

    void finish(int code, const std::string& message = "")
    {
        j_["finished_at"] = utc_now();
        j_["exit_code"] = code;
        if (!message.empty()) j_["message"] = message;
        flush();
    }

private:
    void flush() const { dints::write_atomic(path_, j_.dump(2) + "\n"); }
    fs::path path_;
    json j_;
};

struct Context {
    std::vector<std::string> argv;
};

void progress(const std::string& m) { std::fprintf(stderr, "%s\n", m.c_str()); }

dints::SearchConfig config_or_defaults(const std::string& path)
{
    return path.empty() ? dints::SearchConfig{} : dints::load_config(path);
}

// ---------------------------------------------------------------- commands

struct SearchArgs {
    std::string config, out;
    std::optional<double> sigma;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    long stop_after = -1;
};

int cmd_search(const SearchArgs& a, const Context& ctx)
{
    dints::SearchConfig cfg = config_or_defaults(a.config);
    if (a.sigma) cfg.sigma = *a.sigma;
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();
    const fs::path out(a.out);
    DirLock lock(out);
    Manifest m(out, "search", ctx.argv,
               {{"config_path", a.config}, {"seed", cfg.seed}, {"sigma", cfg.sigma}, {"config", dints::config_to_json(cfg)}});
    dints::RunOptions opt;
    opt.resume = a.resume;
    opt.stop_after_arch_steps = a.stop_after;
    opt.progress = progress;
    try {
        const dints::SearchResult r = dints::run_search(cfg, out, opt);
        std::printf("%s\n", json{{"finished", r.finished},
                                 {"arch_updates", r.log.size()},
                                 {"final_G", r.gap.empty() ? 0 : r.gap.back()},
                                 {"decoded_m_ratio", r.decoded_m_ratio},
                                 {"I", r.topology.I},
                                 {"wall_seconds", r.wall_seconds}}
                                .dump()
                                .c_str());
        m.finish(kExitOk);
    } catch (const std::exception& e) {
        m.finish(dynamic_cast<const dints::DivergenceError*>(&e) ? kExitDivergence : kExitValidation, e.what());
        throw;
    }
    return kExitOk;
}

int cmd_decode(const std::string& arch_params, const std::string& out_dir, const Context& ctx)
{
    const fs::path out(out_dir);
    DirLock lock(out);
    Manifest m(out, "decode", ctx.argv, {{"arch_params", arch_params}});
    const dints::ArchParams a = dints::load_arch_params(arch_params);
    const auto sets = dints::feasible_sets(a.space);
    const dints::RelaxedState st = dints::relax_all(a);
    const auto t = dints::decode_architecture(st, sets, a.space);
    dints::save_architecture(t, (out / "architecture.json").string());
    const auto argmax = dints::argmax_decode(st.eta);
    const json summary{{"I", t.I}, {"argmax_I", argmax}, {"G", dints::gap_metric(argmax, t.I, a.space)}, {"total_cost", t.total_cost}};
    dints::write_atomic(out / "decode.json", summary.dump(2) + "\n");
    std::printf("%s\n", summary.dump().c_str());
    m.finish(kExitOk);
    return kExitOk;
}

int cmd_export_dot(const std::string& arch, const std::string& out_dir, const Context& ctx)
{
    const auto t = dints::load_architecture(arch);
    t.validate(dints::feasible_sets(t.space()));
    const std::string dot = dints::export_dot(t);
    if (out_dir.empty()) {
        std::fputs(dot.c_str(), stdout);
        return kExitOk;
    }
    const fs::path out(out_dir);
    DirLock lock(out);
    Manifest m(out, "export-dot", ctx.argv, {{"arch", arch}});
    dints::write_atomic(out / "architecture.dot", dot);
    m.finish(kExitOk);
    return kExitOk;
}

int cmd_retrain(const std::string& arch, std::string config, const std::string& out_dir, std::optional<long> iters,
                const Context& ctx)
{
    // Default to the config of the run the architecture came from.
    if (config.empty() && fs::exists(fs::path(arch).parent_path() / dints::run_files::config))
        config = (fs::path(arch).parent_path() / dints::run_files::config).string();
    dints::SearchConfig cfg = config_or_defaults(config);
    if (iters) cfg.retrain.iters = *iters;
    cfg.validate();
    const auto t = dints::load_architecture(arch);
    std::optional<DirLock> lock;
    std::optional<Manifest> m;
    if (!out_dir.empty()) {
        lock.emplace(out_dir);
        m.emplace(out_dir, "retrain", ctx.argv, json{{"arch", arch}, {"config_path", config}, {"seed", cfg.seed}});
    }
    try {
        const dints::RetrainResult r = dints::retrain(t, cfg, progress);
        const json summary{{"mean_dice", r.mean_dice},     {"dice", r.dice},
                           {"final_loss", r.final_loss},   {"param_count", r.param_count},
                           {"base_channels", r.base_channels}, {"iters", cfg.retrain.iters}};
        if (m) dints::write_atomic(fs::path(out_dir) / "retrain.json", summary.dump(2) + "\n");
        std::printf("%s\n", summary.dump().c_str());
        if (m) m->finish(kExitOk);
    } catch (const std::exception& e) {
        if (m) m->finish(dynamic_cast<const dints::DivergenceError*>(&e) ? kExitDivergence : kExitValidation, e.what());
        throw;
    }
    return kExitOk;
}

int cmd_oracle(const std::string& suite, std::uint64_t seed, const std::string& out_dir, const Context& ctx)
{
    std::optional<DirLock> lock;
    std::optional<Manifest> m;
    if (!out_dir.empty()) {
        lock.emplace(out_dir);
        m.emplace(out_dir, "oracle", ctx.argv, json{{"suite", suite}, {"seed", seed}});
    }
    std::vector<dints::oracle::SuiteReport> reports;
    if (suite == "patterns" || suite == "all") reports.push_back(dints::oracle::run_pattern_suite(seed, 100, 1e-9));
    if (suite == "decode" || suite == "all") reports.push_back(dints::oracle::run_decode_suite(seed, 2, 3, 200, 1e-9));
    if (suite == "flow" || suite == "all") reports.push_back(dints::oracle::run_flow_suite(seed, 20, 1e-9));
    if (suite == "feasibility" || suite == "all")
        for (int D : {2, 3, 4}) reports.push_back(dints::oracle::run_feasibility_suite(D));
    bool ok = true;
    json out = json::array();
    for (const auto& r : reports) {
        std::printf("%s\n", dints::oracle::describe(r).c_str());
        ok = ok && r.passed();
        out.push_back({{"suite", r.name}, {"cases", r.cases}, {"failures", r.failures}, {"worst", r.worst}, {"passed", r.passed()}});
    }
    const int code = ok ? kExitOk : kExitValidation;
    if (m) {
        dints::write_atomic(fs::path(out_dir) / "oracle.json", out.dump(2) + "\n");
        m->finish(code);
    }
    return code;
}

int cmd_gap_report(const std::string& run, const std::string& out_dir, const Context& ctx)
{
    const fs::path out = out_dir.empty() ? fs::path(run) / "gap_report" : fs::path(out_dir);
    DirLock lock(out);
    Manifest m(out, "gap-report", ctx.argv, {{"run", run}});
    const dints::GapReport g = dints::gap_report(run);
    std::string csv = "iter,G\n";
    for (const auto& [iter, v] : g.trace) csv += std::to_string(iter) + "," + std::to_string(v) + "\n";
    dints::write_atomic(out / "gap_trace.csv", csv);
    const json summary{{"updates", g.trace.size()}, {"mean_G", g.mean}, {"late_mean_G", g.late_mean}, {"matches_log", g.matches_log}};
    dints::write_atomic(out / "gap_summary.json", summary.dump(2) + "\n");
    std::printf("%s\n", summary.dump().c_str());
    const int code = g.matches_log ? kExitOk : kExitValidation;
    if (!g.matches_log) std::fprintf(stderr, "error: recomputed G trace differs from the run's gap_trace.csv\n");
    m.finish(code);
    return code;
}

} // namespace

int main(int argc, char** argv)
{
    Context ctx;
    for (int k = 0; k < argc; ++k) ctx.argv.emplace_back(argv[k]);

    CLI::App app{"Differentiable network topology search at desk scale"};
    app.set_version_flag("--version", std::string(DINTS_VERSION));
    bool dump_defaults = false;
    app.add_flag("--dump-defaults", dump_defaults, "Print the default configuration as JSON and exit");

    SearchArgs sa;
    auto* search = app.add_subcommand("search", "Run the bi-level architecture search");
    search->add_option("--config", sa.config, "Configuration JSON (defaults when omitted)");
    search->add_option("--sigma", sa.sigma, "Memory budget override");
    search->add_option("--seed", sa.seed, "Run seed override");
    search->add_option("--out", sa.out, "Output directory")->required();
    search->add_flag("--resume", sa.resume, "Continue from the checkpoint in --out");
    search->add_option("--stop-after", sa.stop_after, "Stop with a checkpoint after this many arch updates");

    std::string arch_params, out_dir, arch, config, suite = "all", run;
    std::uint64_t oracle_seed = 1;
    std::optional<long> retrain_iters;
    auto* decode = app.add_subcommand("decode", "Decode architecture parameters into a feasible topology");
    decode->add_option("--arch-params", arch_params, "Architecture parameter file (e.g. arch_params.ckpt)")->required();
    decode->add_option("--out", out_dir, "Output directory")->required();

    auto* dot = app.add_subcommand("export-dot", "Render a decoded architecture as Graphviz DOT");
    dot->add_option("--arch", arch, "architecture.json")->required();
    dot->add_option("--out", out_dir, "Output directory (stdout when omitted)");

    auto* re = app.add_subcommand("retrain", "Retrain a decoded architecture from scratch and report held-out dice");
    re->add_option("--arch", arch, "architecture.json")->required();
    re->add_option("--config", config, "Configuration JSON (default: the run's config.json, else defaults)");
    re->add_option("--iters", retrain_iters, "Override retrain.iters");
    re->add_option("--out", out_dir, "Output directory for retrain.json");

    auto* orc = app.add_subcommand("oracle", "Run brute-force consistency suites");
    orc->add_option("--suite", suite, "patterns | decode | flow | feasibility | all")
        ->check(CLI::IsMember({"patterns", "decode", "flow", "feasibility", "all"}));
    orc->add_option("--seed", oracle_seed, "Suite seed");
    orc->add_option("--out", out_dir, "Output directory for oracle.json");

    auto* gap = app.add_subcommand("gap-report", "Recompute the discretization-gap trace of a run");
    gap->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);
    gap->add_option("--out", out_dir, "Output directory (default: RUN/gap_report)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (dump_defaults) {
            std::printf("%s\n", dints::config_to_json(dints::SearchConfig{}).dump(2).c_str());
            return kExitOk;
        }
        if (*search) return cmd_search(sa, ctx);
        if (*decode) return cmd_decode(arch_params, out_dir, ctx);
        if (*dot) return cmd_export_dot(arch, out_dir, ctx);
        if (*re) return cmd_retrain(arch, config, out_dir, retrain_iters, ctx);
        if (*orc) return cmd_oracle(suite, oracle_seed, out_dir, ctx);
        if (*gap) return cmd_gap_report(run, out_dir, ctx);
        std::fputs(app.help().c_str(), stderr);
        return kExitConfig;
    } catch (const dints::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const dints::DivergenceError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return kExitDivergence;
    } catch (const dints::ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
}
