#pragma once

// Bi-level search loop: warm-up and pretraining of network weights, then
// alternating weight (train1) and architecture (train2) steps. Also the
// retraining of decoded architectures and the run directory format.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dints/arch_loss.hpp"
#include "dints/decode.hpp"
#include "dints/discrete.hpp"
#include "dints/optim.hpp"
#include "dints/supernet.hpp"
#include "dints/task.hpp"

namespace dints {

/// Ratio of the warm-up starting learning rate to the peak.
inline constexpr double kWarmupFloorRatio = 0.125;

struct TaskSection {
    std::uint64_t seed = 1234;
    int train_size = 96;
    int holdout_size = 32;
    double split_ratio = 0.5;
    double noise = 0.05;
};

struct IterSection {
    long warmup_w = 200;
    long pretrain_w = 800;
    long joint = 2000;
};

struct LrSection {
    double peak = 0.05;
    double decay = 0.5;
    std::vector<long> milestones{2000, 2600}; // absolute weight-step indices
};

struct RetrainSection {
    long iters = 1500;
    int batch_size = 4;
    double lr_peak = 0.05;
    long warmup_iters = 100;
    std::vector<long> milestones{1000, 1300};
    int channel_multiplier = 2;
};

struct SearchConfig {
    NetConfig net;
    TaskSection task;
    std::vector<double> memory_factors = default_memory_factors(5);
    double sigma = 0.5;
    double lambda = 0.001;
    IterSection iters;
    int batch_size = 2;
    LrSection lr_w;
    double lr_arch = 0.008;
    double momentum = 0.9;
    double weight_decay = 4e-5;
    double arch_weight_decay = 0.0;
    std::uint64_t seed = 0;
    long checkpoint_every = 0; // arch steps between checkpoints; 0 = only at the end
    RetrainSection retrain;

    long phase1_steps() const { return iters.warmup_w + iters.pretrain_w; }
    long total_w_steps() const { return phase1_steps() + iters.joint; }

    task::GeneratorConfig generator() const
    {
        task::GeneratorConfig g;
        g.height = net.height;
        g.width = net.width;
        g.classes = net.classes;
        g.noise = task.noise;
        return g;
    }

    MemoryGeometry memory_geometry() const { return {net.base_channels, net.height, net.width}; }

    void validate() const
    {
        net.validate();
        generator().validate();
        if (static_cast<int>(memory_factors.size()) != net.space.N)
            throw ConfigError("memory_factors must have space.N = " + std::to_string(net.space.N) + " entries");
        if (!(sigma >= 0.0 && sigma <= 1.0)) throw ConfigError("sigma must be in [0, 1]");
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
        if (iters.warmup_w < 0 || iters.pretrain_w < 0 || iters.joint < 0)
            throw ConfigError("iters: all iteration counts must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (task.train_size < 2) throw ConfigError("task.train_size must be >= 2");
        if (task.holdout_size < 1) throw ConfigError("task.holdout_size must be >= 1");
        if (!(task.split_ratio > 0.0 && task.split_ratio < 1.0)) throw ConfigError("task.split_ratio must be in (0, 1)");
        if (!(lr_w.peak > 0.0)) throw ConfigError("lr_w.peak must be > 0");
        if (!(lr_w.decay > 0.0 && lr_w.decay <= 1.0)) throw ConfigError("lr_w.decay must be in (0, 1]");
        long prev = -1;
        for (long m : lr_w.milestones) {
            if (m < phase1_steps() || m > total_w_steps())
                throw ConfigError("lr_w.milestones must lie within the joint phase [" + std::to_string(phase1_steps()) +
                                  ", " + std::to_string(total_w_steps()) + "], got " + std::to_string(m));
            if (m <= prev) throw ConfigError("lr_w.milestones must be strictly increasing");
            prev = m;
        }
        if (!(lr_arch > 0.0)) throw ConfigError("lr_arch must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
        if (!(weight_decay >= 0.0) || !(arch_weight_decay >= 0.0)) throw ConfigError("weight decays must be >= 0");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
        if (retrain.iters < 0 || retrain.batch_size < 1 || !(retrain.lr_peak > 0.0) || retrain.warmup_iters < 0 ||
            retrain.channel_multiplier < 1)
            throw ConfigError("retrain section has an out-of-range value");
        prev = -1;
        for (long m : retrain.milestones) {
            if (m <= prev || m < 0) throw ConfigError("retrain.milestones must be non-negative and increasing");
            prev = m;
        }
    }
};

// ---------------------------------------------------------------- config JSON

inline nlohmann::json config_to_json(const SearchConfig& c)
{
    return {
        {"space", {{"L", c.net.space.L}, {"D", c.net.space.D}, {"N", c.net.space.N}}},
        {"net", {{"base_channels", c.net.base_channels}, {"height", c.net.height}, {"width", c.net.width}, {"classes", c.net.classes}}},
        {"task", {{"seed", c.task.seed}, {"train_size", c.task.train_size}, {"holdout_size", c.task.holdout_size},
                  {"split_ratio", c.task.split_ratio}, {"noise", c.task.noise}}},
        {"memory_factors", c.memory_factors},
        {"sigma", c.sigma},
        {"lambda", c.lambda},
        {"iters", {{"warmup_w", c.iters.warmup_w}, {"pretrain_w", c.iters.pretrain_w}, {"joint", c.iters.joint}}},
        {"batch_size", c.batch_size},
        {"lr_w", {{"peak", c.lr_w.peak}, {"decay", c.lr_w.decay}, {"milestones", c.lr_w.milestones}}},
        {"lr_arch", c.lr_arch},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"arch_weight_decay", c.arch_weight_decay},
        {"seed", c.seed},
        {"checkpoint_every", c.checkpoint_every},
        {"retrain", {{"iters", c.retrain.iters}, {"batch_size", c.retrain.batch_size}, {"lr_peak", c.retrain.lr_peak},
                     {"warmup_iters", c.retrain.warmup_iters}, {"milestones", c.retrain.milestones},
                     {"channel_multiplier", c.retrain.channel_multiplier}}},
    };
}

namespace detail {

/// Reads `key` from `obj`, naming the full dotted path on any problem.
template <class T>
T field(const nlohmann::json& obj, const std::string& prefix, const char* key)
{
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!obj.is_object() || !obj.contains(key)) throw ConfigError("config: missing field '" + path + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: field '" + path + "' has the wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& obj, const std::string& prefix, std::initializer_list<const char*> known)
{
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("config: unknown field '" + (prefix.empty() ? it.key() : prefix + "." + it.key()) + "'");
    }
}

} // namespace detail

/// Strict parse: every field must be present and no unknown field is accepted.
inline SearchConfig config_from_json(const nlohmann::json& j)
{
    using detail::field;
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    detail::reject_unknown(j, "", {"space", "net", "task", "memory_factors", "sigma", "lambda", "iters", "batch_size", "lr_w",
                                   "lr_arch", "momentum", "weight_decay", "arch_weight_decay", "seed", "checkpoint_every",
                                   "retrain"});
    SearchConfig c;
    const auto space = field<nlohmann::json>(j, "", "space");
    detail::reject_unknown(space, "space", {"L", "D", "N"});
    c.net.space = SpaceConfig{field<int>(space, "space", "L"), field<int>(space, "space", "D"), field<int>(space, "space", "N")};
    const auto net = field<nlohmann::json>(j, "", "net");
    detail::reject_unknown(net, "net", {"base_channels", "height", "width", "classes"});
    c.net.base_channels = field<int>(net, "net", "base_channels");
    c.net.height = field<int>(net, "net", "height");
    c.net.width = field<int>(net, "net", "width");
    c.net.classes = field<int>(net, "net", "classes");
    const auto task = field<nlohmann::json>(j, "", "task");
    detail::reject_unknown(task, "task", {"seed", "train_size", "holdout_size", "split_ratio", "noise"});
    c.task.seed = field<std::uint64_t>(task, "task", "seed");
    c.task.train_size = field<int>(task, "task", "train_size");
    c.task.holdout_size = field<int>(task, "task", "holdout_size");
    c.task.split_ratio = field<double>(task, "task", "split_ratio");
    c.task.noise = field<double>(task, "task", "noise");
    c.memory_factors = field<std::vector<double>>(j, "", "memory_factors");
    c.sigma = field<double>(j, "", "sigma");
    c.lambda = field<double>(j, "", "lambda");
    const auto iters = field<nlohmann::json>(j, "", "iters");
    detail::reject_unknown(iters, "iters", {"warmup_w", "pretrain_w", "joint"});
    c.iters.warmup_w = field<long>(iters, "iters", "warmup_w");
    c.iters.pretrain_w = field<long>(iters, "iters", "pretrain_w");
    c.iters.joint = field<long>(iters, "iters", "joint");
    c.batch_size = field<int>(j, "", "batch_size");
    const auto lr = field<nlohmann::json>(j, "", "lr_w");
    detail::reject_unknown(lr, "lr_w", {"peak", "decay", "milestones"});
    c.lr_w.peak = field<double>(lr, "lr_w", "peak");
    c.lr_w.decay = field<double>(lr, "lr_w", "decay");
    c.lr_w.milestones = field<std::vector<long>>(lr, "lr_w", "milestones");
    c.lr_arch = field<double>(j, "", "lr_arch");
    c.momentum = field<double>(j, "", "momentum");
    c.weight_decay = field<double>(j, "", "weight_decay");
    c.arch_weight_decay = field<double>(j, "", "arch_weight_decay");
    c.seed = field<std::uint64_t>(j, "", "seed");
    c.checkpoint_every = field<long>(j, "", "checkpoint_every");
    const auto re = field<nlohmann::json>(j, "", "retrain");
    detail::reject_unknown(re, "retrain", {"iters", "batch_size", "lr_peak", "warmup_iters", "milestones", "channel_multiplier"});
    c.retrain.iters = field<long>(re, "retrain", "iters");
    c.retrain.batch_size = field<int>(re, "retrain", "batch_size");
    c.retrain.lr_peak = field<double>(re, "retrain", "lr_peak");
    c.retrain.warmup_iters = field<long>(re, "retrain", "warmup_iters");
    c.retrain.milestones = field<std::vector<long>>(re, "retrain", "milestones");
    c.retrain.channel_multiplier = field<int>(re, "retrain", "channel_multiplier");
    c.validate();
    return c;
}

inline SearchConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------- schedules

/// Linear warm-up from kWarmupFloorRatio * peak (t = 0) to peak (t = warmup),
/// then a factor `decay` at each milestone reached.
inline double lr_schedule(long t, double peak, long warmup, double decay, const std::vector<long>& milestones)
{
    if (t < 0) throw ValidationError("learning-rate step must be >= 0");
    if (t < warmup)
        return peak * (kWarmupFloorRatio + (1.0 - kWarmupFloorRatio) * static_cast<double>(t) / static_cast<double>(warmup));
    double lr = peak;
    for (long m : milestones)
        if (t >= m) lr *= decay;
    return lr;
}

inline double lr_w(long t, const SearchConfig& cfg)
{
    return lr_schedule(t, cfg.lr_w.peak, cfg.iters.warmup_w, cfg.lr_w.decay, cfg.lr_w.milestones);
}

// ---------------------------------------------------------------- data

/// Training and held-out samples, generated once per run.
struct SearchData {
    task::Split split;
    std::vector<task::Sample> train;   // index = sample id
    std::vector<task::Sample> holdout; // ids train_size .. train_size + holdout_size - 1
};

inline SearchData make_search_data(const SearchConfig& cfg)
{
    SearchData d;
    const auto gen = cfg.generator();
    std::vector<std::uint64_t> ids;
    for (int k = 0; k < cfg.task.train_size; ++k) {
        ids.push_back(static_cast<std::uint64_t>(k));
        d.train.push_back(task::generate_sample(cfg.task.seed, static_cast<std::uint64_t>(k), gen));
    }
    for (int k = 0; k < cfg.task.holdout_size; ++k)
        d.holdout.push_back(task::generate_sample(cfg.task.seed, static_cast<std::uint64_t>(cfg.task.train_size + k), gen));
    d.split = task::split(ids, cfg.task.split_ratio, cfg.task.seed);
    return d;
}

enum class Stream : std::uint32_t { weights = 1, arch = 2, init = 3, retrain = 4, retrain_init = 5 };

/// Independent generator per (seed, stream, step), so a resumed run draws
/// exactly the batches of an uninterrupted one.
inline std::mt19937_64 stream_rng(std::uint64_t seed, Stream s, std::uint64_t step)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(s),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
    return std::mt19937_64(seq);
}

inline task::Batch draw_batch(const std::vector<task::Sample>& pool, const std::vector<std::uint64_t>& ids, int batch,
                              std::mt19937_64 rng)
{
    std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
    std::vector<task::Sample> chosen;
    for (int b = 0; b < batch; ++b) chosen.push_back(pool[static_cast<std::size_t>(ids[pick(rng)])]);
    return task::make_batch(chosen);
}

// ---------------------------------------------------------------- steps

inline void require_finite_grads(const std::map<std::string, Tensor>& grads)
{
    for (const auto& [name, g] : grads)
        if (!g.all_finite()) throw DivergenceError("non-finite gradient for weight '" + name + "'");
}

/// One SGD step of the supernet weights on L_seg. Architecture values enter
/// as constants, so nothing flows back into them.
inline double weight_step(ParamStore& weights, SgdMomentum& sgd, const NetConfig& net, const RelaxedState& st,
                          const task::Batch& batch, double lr)
{
    ad::Tape tape;
    const VarStore w = bind_params(tape, weights, true);
    const ad::Var logits = relaxed_forward(w, net, tape.constant(st.q), tape.constant(st.alpha), tape.constant(batch.images));
    const ad::Var loss = task::seg_loss(logits, batch.labels);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw DivergenceError("non-finite segmentation loss in a weight step");
    tape.backward(loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, v] : w) grads.emplace(name, tape.grad(v));
    require_finite_grads(grads);
    for (auto& [name, t] : weights) sgd.step(name, t, grads.at(name), lr);
    return value;
}

/// One Adam step of the architecture logits on L_arch. Weights enter as constants.
inline LossReport arch_step(ArchParams& arch, Adam& adam, const ArchLossContext& ctx, const ParamStore& weights,
                            const NetConfig& net, const task::Batch& batch, double sigma, double lambda, double ramp)
{
    const SegLossHook hook = [&](ad::Tape& tape, const RelaxedVars& r) {
        const VarStore w = bind_params(tape, weights, false);
        return task::seg_loss(relaxed_forward(w, net, r.q, r.alpha, tape.constant(batch.images)), batch.labels);
    };
    const ArchGradResult g = arch_grads(arch, ctx, ArchLossWeights{sigma, lambda, ramp}, hook);
    if (!std::isfinite(g.report.l_arch)) throw DivergenceError("non-finite architecture loss");
    adam.begin_step();
    adam.step("alpha_raw", arch.alpha_raw, g.grad_alpha_raw);
    adam.step("p_raw", arch.p_raw, g.grad_p_raw);
    return g.report;
}

/// G between the per-layer argmax patterns and the decoded feasible sequence.
inline int gap_of(const ArchParams& arch, const FeasibilitySets& sets)
{
    const RelaxedState st = relax_all(arch);
    const DecodeGraph g(st.eta, sets);
    return gap_metric(argmax_decode(st.eta), dijkstra_decode_ids(g), arch.space);
}

/// Memory ratio of a discrete architecture: selected (edge, op) costs over M_a.
inline double topology_memory_ratio(const ArchitectureTopology& t, const MemoryTable& table)
{
    double used = 0.0;
    for (const auto& [key, op] : t.ops) used += table.mem.at(key.first, key.second, op);
    return used / memory_maximum(table);
}

// ---------------------------------------------------------------- run directory

namespace run_files {
inline const char* config = "config.json";
inline const char* arch = "arch_params.ckpt";
inline const char* weights = "weights.ckpt";
inline const char* state = "state.json";
inline const char* log = "log.csv";
inline const char* gap = "gap_trace.csv";
inline const char* p_trace = "p_trace.csv";
inline const char* architecture = "architecture.json";
inline const char* result = "result.json";
} // namespace run_files

inline std::string fmt_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_atomic(const std::filesystem::path& path, const std::string& text)
{
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp);
        out << text;
        if (!out) throw ValidationError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string log_header() { return "iter,l_seg,l_alpha,l_eta,l_tp,l_m,m_ratio,ramp"; }

inline std::string log_row(long iter, const LossReport& r)
{
    return std::to_string(iter) + "," + fmt_double(r.l_seg) + "," + fmt_double(r.l_alpha) + "," + fmt_double(r.l_eta) + "," +
           fmt_double(r.l_tp) + "," + fmt_double(r.l_m) + "," + fmt_double(r.m_ratio) + "," + fmt_double(r.ramp);
}

inline std::string p_header(const SpaceConfig& s)
{
    std::string h = "iter";
    for (int i = 0; i < s.L; ++i)
        for (int e = 0; e < s.num_edges(); ++e) h += ",p_raw_" + std::to_string(i) + "_" + std::to_string(e);
    return h;
}

inline std::string p_row(long iter, const ArchParams& a)
{
    std::string r = std::to_string(iter);
    for (double v : a.p_raw.data) r += "," + fmt_double(v);
    return r;
}

/// Parses a numeric CSV written by this module into rows of doubles.
inline std::vector<std::vector<double>> read_csv(const std::filesystem::path& path, std::string* header = nullptr)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(path.string() + " is empty");
    if (header) *header = line;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Keeps the header and the first `rows` data lines.
inline void truncate_csv(const std::filesystem::path& path, long rows)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::string text, line;
    for (long k = 0; k <= rows && std::getline(in, line); ++k) text += line + "\n";
    in.close();
    write_atomic(path, text);
}

// ---------------------------------------------------------------- search

struct SearchResult {
    ArchParams arch;
    ArchitectureTopology topology;
    std::vector<LossReport> log;   // one entry per arch update
    std::vector<int> gap;          // G after each arch update
    std::vector<double> m_ratio;   // relaxed memory ratio per arch update
    double decoded_m_ratio = 0.0;  // memory ratio of the decoded topology
    double wall_seconds = 0.0;
    bool finished = false;         // false when stopped early on request
};

struct RunOptions {
    bool resume = false;
    /// Stop (with a checkpoint) once this many arch updates are done; -1 = run to the end.
    long stop_after_arch_steps = -1;
    std::function<void(const std::string&)> progress;
};

struct SearchState {
    ParamStore weights;
    SgdMomentum sgd;
    ArchParams arch;
    Adam adam;
    long w_step = 0;
    long arch_step = 0;
};

inline void save_checkpoint(const std::filesystem::path& dir, const SearchState& s, const std::string& status)
{
    nlohmann::json arch = s.arch.to_json();
    arch["adam"] = s.adam.state();
    arch["arch_step"] = s.arch_step;
    write_atomic(dir / run_files::arch, arch.dump());
    const nlohmann::json w{{"weights", params_to_json(s.weights)}, {"momentum", s.sgd.state()}, {"w_step", s.w_step}};
    write_atomic(dir / run_files::weights, w.dump());
    const nlohmann::json st{{"w_step", s.w_step}, {"arch_step", s.arch_step}, {"status", status}};
    write_atomic(dir / run_files::state, st.dump(2) + "\n");
}

inline SearchState load_checkpoint(const std::filesystem::path& dir, const SearchConfig& cfg)
{
    auto read = [&](const char* name) {
        std::ifstream in(dir / name);
        if (!in) throw ValidationError("checkpoint file missing: " + (dir / name).string());
        return nlohmann::json::parse(in);
    };
    SearchState s;
    const auto st = read(run_files::state);
    const auto arch = read(run_files::arch);
    const auto w = read(run_files::weights);
    s.arch = ArchParams::from_json(arch);
    if (!(s.arch.space == cfg.net.space)) throw ValidationError("checkpoint space does not match config");
    s.adam.load_state(arch.at("adam"));
    s.weights = params_from_json(w.at("weights"));
    s.sgd.load_state(w.at("momentum"), s.weights);
    s.w_step = st.at("w_step").get<long>();
    s.arch_step = st.at("arch_step").get<long>();
    if (arch.at("arch_step").get<long>() != s.arch_step || w.at("w_step").get<long>() != s.w_step)
        throw ValidationError("checkpoint files are from different steps");
    return s;
}

inline void append_line(const std::filesystem::path& path, const std::string& line)
{
    std::ofstream out(path, std::ios::app);
    if (!out) throw ValidationError("cannot append to " + path.string());
    out << line << '\n';
}

/// Rebuilds the in-memory traces from the CSV files of a run directory.
inline void load_traces(const std::filesystem::path& dir, SearchResult& r)
{
    for (const auto& row : read_csv(dir / run_files::log)) {
        if (row.size() != 8) throw ValidationError("log.csv: malformed row");
        LossReport rep;
        rep.l_seg = row[1];
        rep.l_alpha = row[2];
        rep.l_eta = row[3];
        rep.l_tp = row[4];
        rep.l_m = row[5];
        rep.m_ratio = row[6];
        rep.ramp = row[7];
        r.log.push_back(rep);
        r.m_ratio.push_back(rep.m_ratio);
    }
    for (const auto& row : read_csv(dir / run_files::gap)) r.gap.push_back(static_cast<int>(row.at(1)));
}

/// Runs (or resumes) a search writing everything into `out_dir`.
inline SearchResult run_search(const SearchConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opt = {})
{
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    const SearchData data = make_search_data(cfg);
    const ArchLossContext ctx(cfg.net.space, build_memory_table(cfg.net.space, cfg.memory_geometry(), cfg.memory_factors));
    const double t_all = static_cast<double>(cfg.iters.joint);

    SearchState s;
    SearchResult result;
    if (opt.resume) {
        const SearchConfig saved = load_config((out_dir / run_files::config).string());
        if (config_to_json(saved) != config_to_json(cfg)) throw ValidationError("resume: config differs from the saved run");
        s = load_checkpoint(out_dir, cfg);
        for (const char* f : {run_files::log, run_files::gap, run_files::p_trace}) truncate_csv(out_dir / f, s.arch_step);
        load_traces(out_dir, result);
    } else {
        write_atomic(out_dir / run_files::config, config_to_json(cfg).dump(2) + "\n");
        auto rng = stream_rng(cfg.seed, Stream::init, 0);
        s.weights = init_supernet_weights(cfg.net, rng);
        s.arch = ArchParams::init(cfg.net.space, rng);
        write_atomic(out_dir / run_files::log, log_header() + "\n");
        write_atomic(out_dir / run_files::gap, "iter,G\n");
        write_atomic(out_dir / run_files::p_trace, p_header(cfg.net.space) + "\n");
    }
    s.sgd.momentum = cfg.momentum;
    s.sgd.weight_decay = cfg.weight_decay;
    s.adam.lr = cfg.lr_arch;
    s.adam.weight_decay = cfg.arch_weight_decay;

    auto say = [&](const std::string& m) {
        if (opt.progress) opt.progress(m);
    };
    auto w_update = [&]() {
        const RelaxedState st = relax_all(s.arch);
        const auto batch = draw_batch(data.train, data.split.train1, cfg.batch_size,
                                      stream_rng(cfg.seed, Stream::weights, static_cast<std::uint64_t>(s.w_step)));
        const double loss = weight_step(s.weights, s.sgd, cfg.net, st, batch, lr_w(s.w_step, cfg));
        ++s.w_step;
        return loss;
    };

    try {
        while (s.w_step < cfg.phase1_steps()) {
            const double loss = w_update();
            if (s.w_step % 100 == 0) say("pretrain step " + std::to_string(s.w_step) + " l_seg " + fmt_double(loss));
        }
        while (s.arch_step < cfg.iters.joint) {
            if (opt.stop_after_arch_steps >= 0 && s.arch_step >= opt.stop_after_arch_steps) break;
            // A failed iteration must leave the state as it was at its start.
            const SearchState backup = s;
            try {
                w_update();
                const auto batch = draw_batch(data.train, data.split.train2, cfg.batch_size,
                                              stream_rng(cfg.seed, Stream::arch, static_cast<std::uint64_t>(s.arch_step)));
                const double ramp = static_cast<double>(s.arch_step + 1) / t_all;
                const LossReport rep = arch_step(s.arch, s.adam, ctx, s.weights, cfg.net, batch, cfg.sigma, cfg.lambda, ramp);
                ++s.arch_step;
                const int g = gap_of(s.arch, ctx.sets);
                append_line(out_dir / run_files::log, log_row(s.arch_step, rep));
                append_line(out_dir / run_files::gap, std::to_string(s.arch_step) + "," + std::to_string(g));
                append_line(out_dir / run_files::p_trace, p_row(s.arch_step, s.arch));
                result.log.push_back(rep);
                result.gap.push_back(g);
                result.m_ratio.push_back(rep.m_ratio);
                if (s.arch_step % 100 == 0)
                    say("joint step " + std::to_string(s.arch_step) + " l_seg " + fmt_double(rep.l_seg) + " m_ratio " +
                        fmt_double(rep.m_ratio) + " G " + std::to_string(g));
            } catch (const DivergenceError&) {
                s = backup;
                throw;
            }
            if (cfg.checkpoint_every > 0 && s.arch_step % cfg.checkpoint_every == 0) save_checkpoint(out_dir, s, "running");
        }
    } catch (const DivergenceError& e) {
        save_checkpoint(out_dir, s, "diverged");
        throw DivergenceError(std::string(e.what()) + " (last finite state checkpointed at arch step " +
                              std::to_string(s.arch_step) + ")");
    }

    result.finished = s.arch_step == cfg.iters.joint;
    save_checkpoint(out_dir, s, result.finished ? "finished" : "stopped");
    result.arch = s.arch;
    result.topology = decode_architecture(relax_all(s.arch), ctx.sets, cfg.net.space);
    result.decoded_m_ratio = topology_memory_ratio(result.topology, ctx.memory);
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (result.finished) {
        save_architecture(result.topology, (out_dir / run_files::architecture).string());
        const nlohmann::json summary{{"arch_updates", s.arch_step},
                                     {"weight_updates", s.w_step},
                                     {"final_G", result.gap.empty() ? 0 : result.gap.back()},
                                     {"decoded_m_ratio", result.decoded_m_ratio},
                                     {"final_m_ratio", result.m_ratio.empty() ? 0.0 : result.m_ratio.back()},
                                     {"sigma", cfg.sigma},
                                     {"lambda", cfg.lambda}};
        write_atomic(out_dir / run_files::result, summary.dump(2) + "\n");
    }
    return result;
}

inline SearchResult resume_search(const std::filesystem::path& out_dir, RunOptions opt = {})
{
    opt.resume = true;
    return run_search(load_config((out_dir / run_files::config).string()), out_dir, opt);
}

// ---------------------------------------------------------------- retrain

struct RetrainResult {
    std::vector<double> dice;   // per foreground class, held-out set
    double mean_dice = 0.0;
    double final_loss = 0.0;
    std::size_t param_count = 0;
    int base_channels = 0;
};

inline double evaluate_dice(const DiscreteNet& net, const ParamStore& weights, const std::vector<task::Sample>& samples,
                            std::vector<double>* per_class = nullptr)
{
    task::DiceAccumulator acc(net.cfg.classes);
    for (std::size_t k = 0; k < samples.size(); k += 8) {
        std::vector<task::Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(k),
                                        samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), k + 8)));
        const task::Batch b = task::make_batch(chunk);
        acc.add(discrete_forward_values(net, weights, b.images), b.labels);
    }
    if (per_class) *per_class = acc.foreground_dice();
    return acc.mean_foreground_dice();
}

/// Trains the discrete network from scratch with base channels scaled by
/// retrain.channel_multiplier, on train1 and train2 together.
inline RetrainResult retrain(const ArchitectureTopology& topology, const SearchConfig& cfg,
                             const std::function<void(const std::string&)>& progress = {})
{
    cfg.validate();
    NetConfig net = cfg.net;
    net.base_channels *= cfg.retrain.channel_multiplier;
    auto init_rng = stream_rng(cfg.seed, Stream::retrain_init, 0);
    DiscreteNet dn = instantiate_discrete(topology, net, init_rng);
    const SearchData data = make_search_data(cfg);
    std::vector<std::uint64_t> all_ids;
    for (int k = 0; k < cfg.task.train_size; ++k) all_ids.push_back(static_cast<std::uint64_t>(k));

    SgdMomentum sgd;
    sgd.momentum = cfg.momentum;
    sgd.weight_decay = cfg.weight_decay;
    RetrainResult r;
    r.base_channels = net.base_channels;
    r.param_count = count_params(dn.weights);
    for (long t = 0; t < cfg.retrain.iters; ++t) {
        const auto batch = draw_batch(data.train, all_ids, cfg.retrain.batch_size,
                                      stream_rng(cfg.seed, Stream::retrain, static_cast<std::uint64_t>(t)));
        ad::Tape tape;
        const VarStore w = bind_params(tape, dn.weights, true);
        const ad::Var loss = task::seg_loss(discrete_forward(w, dn, tape.constant(batch.images)), batch.labels);
        r.final_loss = loss.value().item();
        if (!std::isfinite(r.final_loss)) throw DivergenceError("non-finite loss during retraining at step " + std::to_string(t));
        tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, v] : w) grads.emplace(name, tape.grad(v));
        require_finite_grads(grads);
        const double lr = lr_schedule(t, cfg.retrain.lr_peak, cfg.retrain.warmup_iters, 0.5, cfg.retrain.milestones);
        for (auto& [name, p] : dn.weights) sgd.step(name, p, grads.at(name), lr);
        if (progress && (t + 1) % 100 == 0) progress("retrain step " + std::to_string(t + 1) + " loss " + fmt_double(r.final_loss));
    }
    r.mean_dice = evaluate_dice(dn, dn.weights, data.holdout, &r.dice);
    return r;
}

// ---------------------------------------------------------------- gap report

struct GapReport {
    std::vector<std::pair<long, int>> trace; // (iter, G) recomputed from p_trace.csv
    bool matches_log = true;                 // equals the run's gap_trace.csv
    double mean = 0.0;
    double late_mean = 0.0; // over the last 25% of arch updates
};

inline double late_mean(const std::vector<int>& g, double fraction = 0.25)
{
    if (g.empty()) return 0.0;
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(g.size()))));
    double s = 0.0;
    for (std::size_t k = g.size() - n; k < g.size(); ++k) s += g[k];
    return s / static_cast<double>(n);
}

/// Recomputes the G trace of a run from its recorded edge logits.
inline GapReport gap_report(const std::filesystem::path& run_dir)
{
    const SearchConfig cfg = load_config((run_dir / run_files::config).string());
    const FeasibilitySets sets = feasible_sets(cfg.net.space);
    GapReport rep;
    ArchParams a = ArchParams::zeros(cfg.net.space);
    std::vector<int> values;
    for (const auto& row : read_csv(run_dir / run_files::p_trace)) {
        if (row.size() != a.p_raw.size() + 1) throw ValidationError("p_trace.csv: malformed row");
        std::copy(row.begin() + 1, row.end(), a.p_raw.data.begin());
        const int g = gap_of(a, sets);
        rep.trace.push_back({static_cast<long>(row[0]), g});
        values.push_back(g);
    }
    const auto logged = read_csv(run_dir / run_files::gap);
    rep.matches_log = logged.size() == rep.trace.size();
    for (std::size_t k = 0; rep.matches_log && k < logged.size(); ++k)
        rep.matches_log = static_cast<long>(logged[k].at(0)) == rep.trace[k].first && static_cast<int>(logged[k].at(1)) == rep.trace[k].second;
    double s = 0.0;
    for (int v : values) s += v;
    rep.mean = values.empty() ? 0.0 : s / static_cast<double>(values.size());
    rep.late_mean = late_mean(values);
    return rep;
}

} // namespace dints
