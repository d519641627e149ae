#pragma once

#include <iosfwd>
#include <string>

#include "alora/allocator.hpp"
#include "alora/task.hpp"

namespace alora {

struct RunConfig {
    ModelConfig model;
    AllocatorConfig allocator;
    GAConfig ga;
    RegWeights reg;
    TaskSpec task;
    OptimizerConfig optimizer;
    int64_t batch_size = 16;
    double warmup_fraction = 0.0;  // of the planned step total
    Precision precision = Precision::f32;
    uint64_t seed = 0;
    std::string out_dir = "runs/out";

    // Rejects any out-of-invariant field before compute starts,
    // naming the offender.
    void validate() const;
};

struct RunReport {
    double test_ce = 0.0;
    double test_exact_match = 0.0;
    int64_t active_rank_total = 0;
    std::map<std::string, int64_t> rank_map;
    std::string checkpoint_path;
    std::string history_json_path;
    std::string history_csv_path;
    std::string metrics_csv_path;
};

RunConfig load_run_config(const std::string& path);

// Full pipeline: task generation, strategy run, test evaluation, artifact
// writing (checkpoint, history JSON/CSV, metrics CSV, report JSON).
RunReport train_eval(const RunConfig& config);

// Test-set metrics of an existing checkpoint on the configured task.
RunReport eval_checkpoint(const std::string& checkpoint_path,
                          const RunConfig& config);

// Resume from a checkpoint and run `extra_rounds` more allocation rounds
// (ablation strategy), then re-evaluate and write fresh artifacts.
RunReport allocate_resume(const std::string& checkpoint_path,
                          const RunConfig& config, int64_t extra_rounds);

// Human-readable allocation narrative from a history JSON (plus optional
// metrics CSV for the gradient-angle histogram).
std::string report_tables(const std::string& history_json_path,
                          const std::string& metrics_csv_path = "");

// Quick oracle suite (finite differences, gate equivalences, Monte-Carlo
// gate mass, projection geometry). Prints one line per check; returns the
// number of failures.
int run_selftest(std::ostream& os);

}  // namespace alora
