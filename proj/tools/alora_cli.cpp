#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "alora/harness.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::string strategy;
    std::string task_kind;
    std::string precision;
    std::string ga_mode;
    int64_t seed = -1;
    double lr = -1.0;
    double alpha = -1.0;
    int64_t r_target = -1;
    int64_t batch_size = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("-c,--config", f.config_path, "JSON run configuration file");
    cmd->add_option("-o,--out-dir", f.out_dir,
                    "artifact directory (env ALORA_OUT_DIR overrides)");
    cmd->add_option("--strategy", f.strategy,
                    "ablation | dnas_baseline | l0_baseline");
    cmd->add_option("--task", f.task_kind, "copy | reverse | modular_add");
    cmd->add_option("--precision", f.precision, "f32 | f64");
    cmd->add_option("--ga-mode", f.ga_mode, "soft | hard | off");
    cmd->add_option("--seed", f.seed, "run seed (also seeds the task streams)");
    cmd->add_option("--lr", f.lr, "optimizer learning rate");
    cmd->add_option("--ga-alpha", f.alpha, "gradient alignment blend weight");
    cmd->add_option("--r-target", f.r_target, "total active rank budget");
    cmd->add_option("--batch-size", f.batch_size, "training batch size");
}

alora::RunConfig resolve_config(const CommonFlags& f) {
    alora::RunConfig cfg;
    if (!f.config_path.empty()) cfg = alora::load_run_config(f.config_path);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (const char* env = std::getenv("ALORA_OUT_DIR")) cfg.out_dir = env;
    if (!f.strategy.empty()) {
        if (f.strategy == "ablation") {
            cfg.allocator.strategy = alora::Strategy::ablation;
        } else if (f.strategy == "dnas_baseline") {
            cfg.allocator.strategy = alora::Strategy::dnas_baseline;
        } else if (f.strategy == "l0_baseline") {
            cfg.allocator.strategy = alora::Strategy::l0_baseline;
        } else {
            throw alora::ConfigError("unknown --strategy " + f.strategy);
        }
    }
    if (!f.task_kind.empty()) {
        if (f.task_kind == "copy") {
            cfg.task.kind = alora::TaskKind::copy;
        } else if (f.task_kind == "reverse") {
            cfg.task.kind = alora::TaskKind::reverse;
        } else if (f.task_kind == "modular_add") {
            cfg.task.kind = alora::TaskKind::modular_add;
        } else {
            throw alora::ConfigError("unknown --task " + f.task_kind);
        }
    }
    if (!f.precision.empty()) {
        if (f.precision == "f32") {
            cfg.precision = alora::Precision::f32;
        } else if (f.precision == "f64") {
            cfg.precision = alora::Precision::f64;
        } else {
            throw alora::ConfigError("unknown --precision " + f.precision);
        }
    }
    if (!f.ga_mode.empty()) {
        if (f.ga_mode == "soft") {
            cfg.ga.mode = alora::GAMode::soft;
        } else if (f.ga_mode == "hard") {
            cfg.ga.mode = alora::GAMode::hard;
        } else if (f.ga_mode == "off") {
            cfg.ga.mode = alora::GAMode::off;
        } else {
            throw alora::ConfigError("unknown --ga-mode " + f.ga_mode);
        }
    }
    if (f.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(f.seed);
        cfg.task.seed = cfg.seed;
    }
    if (f.lr > 0.0) cfg.optimizer.lr = f.lr;
    if (f.alpha >= 0.0) cfg.ga.alpha = f.alpha;
    if (f.r_target > 0) cfg.allocator.r_target = f.r_target;
    if (f.batch_size > 0) cfg.batch_size = f.batch_size;
    cfg.validate();
    return cfg;
}

void print_report(const alora::RunReport& r) {
    std::cout << "test_ce            " << r.test_ce << "\n"
              << "test_exact_match   " << r.test_exact_match << "\n"
              << "active_rank_total  " << r.active_rank_total << "\n";
    for (const auto& [module, rank] : r.rank_map) {
        std::cout << "  " << module << "  " << rank << "\n";
    }
    if (!r.checkpoint_path.empty()) {
        std::cout << "checkpoint         " << r.checkpoint_path << "\n"
                  << "history            " << r.history_json_path << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive low-rank adapter laboratory"};
    app.require_subcommand(1);

    CommonFlags train_f, alloc_f, eval_f;
    std::string ckpt, history_path, metrics_path;
    int64_t extra_rounds = 1;

    CLI::App* train = app.add_subcommand("train", "train, allocate, and evaluate");
    add_common(train, train_f);

    CLI::App* alloc = app.add_subcommand(
        "allocate", "resume a checkpoint for extra allocation rounds");
    add_common(alloc, alloc_f);
    alloc->add_option("--checkpoint", ckpt, "checkpoint to resume")->required();
    alloc->add_option("--rounds", extra_rounds, "extra allocation rounds");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_f);
    eval->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();

    CLI::App* report = app.add_subcommand("report", "allocation narrative tables");
    report->add_option("--history", history_path, "history JSON file")->required();
    report->add_option("--metrics", metrics_path, "metrics CSV (angle histogram)");

    app.add_subcommand("selftest", "run the built-in oracle suite");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            print_report(alora::train_eval(resolve_config(train_f)));
        } else if (alloc->parsed()) {
            print_report(
                alora::allocate_resume(ckpt, resolve_config(alloc_f), extra_rounds));
        } else if (eval->parsed()) {
            print_report(alora::eval_checkpoint(ckpt, resolve_config(eval_f)));
        } else if (report->parsed()) {
            std::cout << alora::report_tables(history_path, metrics_path);
        } else {
            return alora::run_selftest(std::cout) == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
