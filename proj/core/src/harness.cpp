#include "alora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "alora/autodiff.hpp"
#include "alora/checkpoint.hpp"
#include "alora/ops.hpp"

namespace alora {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
    model.validate();
    allocator.validate();
    ga.validate();
    optimizer.validate();
    task.validate();
    if (batch_size < 1) throw ConfigError("RunConfig.batch_size must be >= 1");
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
        throw ConfigError("RunConfig.warmup_fraction must lie in [0, 1]");
    }
    if (reg.orthogonal < 0.0) throw ConfigError("RunConfig.reg.orthogonal negative");
    if (reg.l0 < 0.0) throw ConfigError("RunConfig.reg.l0 negative");
    if (task.vocab != model.vocab) {
        throw ConfigError("RunConfig: task.vocab (" + std::to_string(task.vocab) +
                          ") must equal model.vocab (" + std::to_string(model.vocab) +
                          ")");
    }
    if (task.seq_len > model.max_seq_len) {
        throw ConfigError("RunConfig: task.seq_len exceeds model.max_seq_len");
    }
    if (out_dir.empty()) throw ConfigError("RunConfig.out_dir empty");
}

namespace {

template <class T>
T get_field(const json& j, const char* section, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config field ") + section + "." + key +
                          " has the wrong type");
    }
}

void check_known_keys(const json& j, const char* section,
                      std::initializer_list<const char*> known) {
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&key](const char* k) {
                return key == k;
            }) == known.end()) {
            throw ConfigError(std::string("unknown config field ") + section + "." +
                              key);
        }
    }
}

Strategy parse_strategy(const std::string& s) {
    if (s == "ablation") return Strategy::ablation;
    if (s == "dnas_baseline") return Strategy::dnas_baseline;
    if (s == "l0_baseline") return Strategy::l0_baseline;
    throw ConfigError("allocator.strategy must be one of ablation, dnas_baseline, "
                      "l0_baseline; got '" + s + "'");
}

TaskKind parse_task_kind(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "modular_add") return TaskKind::modular_add;
    throw ConfigError("task.kind must be one of copy, reverse, modular_add; got '" +
                      s + "'");
}

GAMode parse_ga_mode(const std::string& s) {
    if (s == "soft") return GAMode::soft;
    if (s == "hard") return GAMode::hard;
    if (s == "off") return GAMode::off;
    throw ConfigError("ga.mode must be one of soft, hard, off; got '" + s + "'");
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    check_known_keys(j, "<root>",
                     {"model", "allocator", "ga", "reg", "task", "optimizer",
                      "batch_size", "warmup_fraction", "precision", "seed",
                      "out_dir"});
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_known_keys(m, "model",
                         {"layers", "d", "heads", "d_ff", "vocab", "max_seq_len",
                          "activation"});
        c.model.layers = get_field<int64_t>(m, "model", "layers", c.model.layers);
        c.model.d = get_field<int64_t>(m, "model", "d", c.model.d);
        c.model.heads = get_field<int64_t>(m, "model", "heads", c.model.heads);
        c.model.d_ff = get_field<int64_t>(m, "model", "d_ff", c.model.d_ff);
        c.model.vocab = get_field<int64_t>(m, "model", "vocab", c.model.vocab);
        c.model.max_seq_len =
            get_field<int64_t>(m, "model", "max_seq_len", c.model.max_seq_len);
        std::string act = get_field<std::string>(m, "model", "activation", "gelu");
        if (act != "relu" && act != "gelu") {
            throw ConfigError("model.activation must be relu or gelu");
        }
        c.model.activation = act == "relu" ? Activation::relu : Activation::gelu;
    }
    if (j.contains("allocator")) {
        const json& a = j.at("allocator");
        check_known_keys(a, "allocator",
                         {"r_target", "k1", "k2", "n_a", "r1", "val_batch_size",
                          "strategy", "l0_init_rank", "l0_prune_period",
                          "l0_threshold"});
        c.allocator.r_target =
            get_field<int64_t>(a, "allocator", "r_target", c.allocator.r_target);
        c.allocator.k1 = get_field<int64_t>(a, "allocator", "k1", c.allocator.k1);
        c.allocator.k2 = get_field<int64_t>(a, "allocator", "k2", c.allocator.k2);
        c.allocator.n_a = get_field<int64_t>(a, "allocator", "n_a", c.allocator.n_a);
        c.allocator.r1 = get_field<int64_t>(a, "allocator", "r1", c.allocator.r1);
        c.allocator.val_batch_size = get_field<int64_t>(a, "allocator",
                                                        "val_batch_size",
                                                        c.allocator.val_batch_size);
        c.allocator.strategy = parse_strategy(
            get_field<std::string>(a, "allocator", "strategy", "ablation"));
        c.allocator.l0_init_rank =
            get_field<int64_t>(a, "allocator", "l0_init_rank", c.allocator.l0_init_rank);
        c.allocator.l0_prune_period = get_field<int64_t>(
            a, "allocator", "l0_prune_period", c.allocator.l0_prune_period);
        c.allocator.l0_threshold = get_field<double>(a, "allocator", "l0_threshold",
                                                     c.allocator.l0_threshold);
    }
    if (j.contains("ga")) {
        const json& g = j.at("ga");
        check_known_keys(g, "ga", {"alpha", "mode", "epsilon_norm"});
        c.ga.alpha = get_field<double>(g, "ga", "alpha", c.ga.alpha);
        c.ga.mode = parse_ga_mode(get_field<std::string>(g, "ga", "mode", "hard"));
        c.ga.epsilon_norm =
            get_field<double>(g, "ga", "epsilon_norm", c.ga.epsilon_norm);
    }
    if (j.contains("reg")) {
        const json& r = j.at("reg");
        check_known_keys(r, "reg", {"orthogonal", "l0"});
        c.reg.orthogonal = get_field<double>(r, "reg", "orthogonal", c.reg.orthogonal);
        c.reg.l0 = get_field<double>(r, "reg", "l0", c.reg.l0);
    }
    if (j.contains("task")) {
        const json& t = j.at("task");
        check_known_keys(t, "task",
                         {"kind", "vocab", "seq_len", "train_size", "val_size",
                          "test_size", "seed"});
        c.task.kind =
            parse_task_kind(get_field<std::string>(t, "task", "kind", "copy"));
        c.task.vocab = get_field<int64_t>(t, "task", "vocab", c.task.vocab);
        c.task.seq_len = get_field<int64_t>(t, "task", "seq_len", c.task.seq_len);
        c.task.train_size =
            get_field<int64_t>(t, "task", "train_size", c.task.train_size);
        c.task.val_size = get_field<int64_t>(t, "task", "val_size", c.task.val_size);
        c.task.test_size =
            get_field<int64_t>(t, "task", "test_size", c.task.test_size);
    }
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        check_known_keys(o, "optimizer",
                         {"kind", "lr", "momentum", "beta1", "beta2", "eps"});
        std::string kind = get_field<std::string>(o, "optimizer", "kind", "adaptive");
        if (kind == "sgd_momentum") {
            c.optimizer.kind = OptimizerKind::sgd_momentum;
        } else if (kind == "adaptive") {
            c.optimizer.kind = OptimizerKind::adaptive;
        } else {
            throw ConfigError("optimizer.kind must be sgd_momentum or adaptive");
        }
        c.optimizer.lr = get_field<double>(o, "optimizer", "lr", c.optimizer.lr);
        c.optimizer.momentum =
            get_field<double>(o, "optimizer", "momentum", c.optimizer.momentum);
        c.optimizer.beta1 = get_field<double>(o, "optimizer", "beta1", c.optimizer.beta1);
        c.optimizer.beta2 = get_field<double>(o, "optimizer", "beta2", c.optimizer.beta2);
        c.optimizer.eps = get_field<double>(o, "optimizer", "eps", c.optimizer.eps);
    }
    c.batch_size = get_field<int64_t>(j, "<root>", "batch_size", c.batch_size);
    c.warmup_fraction =
        get_field<double>(j, "<root>", "warmup_fraction", c.warmup_fraction);
    std::string prec = get_field<std::string>(j, "<root>", "precision", "f32");
    if (prec == "f32") {
        c.precision = Precision::f32;
    } else if (prec == "f64") {
        c.precision = Precision::f64;
    } else {
        throw ConfigError("precision must be f32 or f64");
    }
    c.seed = get_field<uint64_t>(j, "<root>", "seed", c.seed);
    c.out_dir = get_field<std::string>(j, "<root>", "out_dir", c.out_dir);
    c.task.seed = c.seed;  // one run seed drives everything
    if (const char* env = std::getenv("ALORA_OUT_DIR")) c.out_dir = env;
    c.validate();
    return c;
}

struct MetricsWriter {
    std::ofstream file;

    explicit MetricsWriter(const std::string& path) : file(path) {
        if (!file) throw IoError("cannot open metrics log " + path);
        file << "step,train_ce,reg_orth,reg_l0,ga_degrees,ga_coefficient,"
                "active_ranks\n";
        file << std::setprecision(17);
    }

    StepLogger logger() {
        return [this](const StepMetrics& m) {
            file << m.step << ',' << m.train_ce << ',' << m.reg_orth << ','
                 << m.reg_l0 << ',' << m.ga_degrees << ',' << m.ga_coefficient << ','
                 << m.active_ranks << '\n';
        };
    }
};

double test_cross_entropy(const SuperNetwork& model, const Batch& test,
                          int64_t batch_size) {
    NoGradGuard ng;
    double weighted = 0.0;
    double total_w = 0.0;
    for (size_t start = 0; start < test.size();
         start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(test.size(), start + static_cast<size_t>(batch_size));
        Batch chunk(test.begin() + static_cast<int64_t>(start),
                    test.begin() + static_cast<int64_t>(end));
        double w = 0.0;
        for (const Sequence& s : chunk) {
            for (double m : s.target_mask) w += m;
        }
        weighted += lm_loss(model, chunk).item() * w;
        total_w += w;
    }
    return weighted / total_w;
}

int64_t planned_steps(const RunConfig& c) {
    int64_t per_epoch = c.task.train_size / c.batch_size;
    int64_t epochs = c.allocator.k1 + c.allocator.n_a * c.allocator.k2;
    return per_epoch * epochs;
}

RunReport finish_run(const RunConfig& config, SuperNetwork& model,
                     const AllocationHistory& history, const Dataset& data,
                     const std::string& metrics_path) {
    RunReport report;
    report.test_ce = test_cross_entropy(model, data.test, config.batch_size);
    report.test_exact_match = greedy_exact_match(model, data.test);
    report.active_rank_total = model.total_active_ranks();
    for (const auto* a : model.all_adapters()) {
        report.rank_map[a->module_id] = a->active_rank();
    }

    fs::path dir(config.out_dir);
    report.checkpoint_path = (dir / "checkpoint.bin").string();
    report.history_json_path = (dir / "history.json").string();
    report.history_csv_path = (dir / "history.csv").string();
    report.metrics_csv_path = metrics_path;
    save_checkpoint(report.checkpoint_path, model);
    {
        std::ofstream f(report.history_json_path);
        f << history_to_json(history);
    }
    {
        std::ofstream f(report.history_csv_path);
        f << history_to_csv(history);
    }
    {
        json r;
        r["test_ce"] = report.test_ce;
        r["test_exact_match"] = report.test_exact_match;
        r["active_rank_total"] = report.active_rank_total;
        r["rank_map"] = report.rank_map;
        std::ofstream f(dir / "report.json");
        f << r.dump(2) << "\n";
    }
    return report;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

RunReport train_eval(const RunConfig& config) {
    config.validate();
    set_precision(config.precision);
    fs::create_directories(config.out_dir);

    Dataset data = gen_task(config.task);
    Rng rng = Rng::derive(config.seed, "run");

    const int64_t modules = config.model.layers * kModulesPerBlock;
    const int64_t budget = config.allocator.strategy == Strategy::l0_baseline
                               ? config.allocator.l0_init_rank * modules
                               : config.allocator.r_target;
    SuperNetwork model = build_supernetwork(config.model, budget, rng);

    MetricsWriter metrics((fs::path(config.out_dir) / "metrics.csv").string());
    TrainOptions train;
    train.optimizer = config.optimizer;
    train.optimizer.warmup_steps = static_cast<int64_t>(
        config.warmup_fraction * static_cast<double>(planned_steps(config)));
    train.batch_size = config.batch_size;
    train.reg = config.reg;
    train.ga = config.ga;
    train.logger = metrics.logger();

    AllocationHistory history;
    switch (config.allocator.strategy) {
        case Strategy::ablation:
            history = run_alora(model, data, config.allocator, train, rng);
            break;
        case Strategy::dnas_baseline:
            history = dnas_baseline_allocate(model, data, config.allocator, train, rng);
            break;
        case Strategy::l0_baseline:
            history = l0_baseline_allocate(model, data, config.allocator, train, rng);
            break;
    }
    return finish_run(config, model, history, data,
                      (fs::path(config.out_dir) / "metrics.csv").string());
}

RunReport eval_checkpoint(const std::string& checkpoint_path,
                          const RunConfig& config) {
    config.validate();
    set_precision(config.precision);
    SuperNetwork model = load_checkpoint(checkpoint_path);
    Dataset data = gen_task(config.task);
    RunReport report;
    report.checkpoint_path = checkpoint_path;
    report.test_ce = test_cross_entropy(model, data.test, config.batch_size);
    report.test_exact_match = greedy_exact_match(model, data.test);
    report.active_rank_total = model.total_active_ranks();
    for (const auto* a : model.all_adapters()) {
        report.rank_map[a->module_id] = a->active_rank();
    }
    return report;
}

RunReport allocate_resume(const std::string& checkpoint_path,
                          const RunConfig& config, int64_t extra_rounds) {
    if (extra_rounds < 1) {
        throw ConfigError("allocate: extra_rounds must be >= 1");
    }
    config.validate();
    set_precision(config.precision);
    fs::create_directories(config.out_dir);

    SuperNetwork model = load_checkpoint(checkpoint_path);
    Dataset data = gen_task(config.task);
    Rng rng = Rng::derive(config.seed, "allocate-resume");

    AllocatorConfig alloc = config.allocator;
    alloc.k1 = 0;
    alloc.n_a = extra_rounds;
    alloc.validate();

    MetricsWriter metrics((fs::path(config.out_dir) / "metrics.csv").string());
    TrainOptions train;
    train.optimizer = config.optimizer;
    train.batch_size = config.batch_size;
    train.reg = config.reg;
    train.ga = config.ga;
    train.logger = metrics.logger();

    AllocationHistory history = run_alora(model, data, alloc, train, rng);
    return finish_run(config, model, history, data,
                      (fs::path(config.out_dir) / "metrics.csv").string());
}

std::string report_tables(const std::string& history_json_path,
                          const std::string& metrics_csv_path) {
    std::ifstream f(history_json_path);
    if (!f) throw IoError("report: cannot open " + history_json_path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("report: corrupt history file " + history_json_path + ": " +
                      e.what());
    }

    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    const int64_t init_rank = j.value("initial_rank_per_module", int64_t{0});
    std::vector<std::string> modules =
        j.value("modules", std::vector<std::string>{});

    os << "allocation snapshots (rank per module)\n";
    os << std::setw(8) << "round";
    for (const auto& m : modules) os << std::setw(8) << m;
    os << "\n" << std::setw(8) << "init";
    for (size_t i = 0; i < modules.size(); ++i) os << std::setw(8) << init_rank;
    os << "\n";
    for (const auto& round : j.at("rounds")) {
        os << std::setw(8) << round.at("round").get<int64_t>();
        if (round.contains("rank_map_after")) {
            for (const auto& m : modules) {
                os << std::setw(8) << round.at("rank_map_after").value(m, int64_t{0});
            }
        }
        os << "\n";
    }

    os << "\nimportance score distribution per round\n";
    os << std::setw(8) << "round" << std::setw(12) << "min" << std::setw(12)
       << "median" << std::setw(12) << "max" << std::setw(12) << "S(M)\n";
    for (const auto& round : j.at("rounds")) {
        if (!round.contains("report")) continue;
        std::vector<double> is;
        for (const auto& rs : round.at("report").at("per_rank")) {
            is.push_back(rs.at("is").get<double>());
        }
        if (is.empty()) continue;
        std::sort(is.begin(), is.end());
        os << std::setw(8) << round.at("round").get<int64_t>() << std::setw(12)
           << is.front() << std::setw(12) << is[is.size() / 2] << std::setw(12)
           << is.back() << std::setw(12)
           << round.at("report").value("s_full", 0.0) << "\n";
    }

    if (!metrics_csv_path.empty()) {
        std::ifstream mf(metrics_csv_path);
        if (!mf) throw IoError("report: cannot open " + metrics_csv_path);
        std::string line;
        std::getline(mf, line);  // header
        std::vector<int64_t> hist(18, 0);
        int64_t total = 0;
        while (std::getline(mf, line)) {
            std::istringstream ls(line);
            std::string cell;
            for (int i = 0; i < 5 && std::getline(ls, cell, ','); ++i) {
                if (i == 4) {
                    double deg = std::stod(cell);
                    int bin = std::min(17, std::max(0, static_cast<int>(deg / 10.0)));
                    ++hist[static_cast<size_t>(bin)];
                    ++total;
                }
            }
        }
        os << "\ngradient angle histogram (degrees)\n";
        for (size_t b = 0; b < hist.size(); ++b) {
            os << std::setw(4) << b * 10 << "-" << std::setw(3) << (b + 1) * 10
               << "  " << std::string(static_cast<size_t>(
                              total ? 60 * hist[b] / total : 0), '#')
               << " " << hist[b] << "\n";
        }
    }
    return os.str();
}

}  // namespace alora
