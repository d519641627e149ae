#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alora/grad_align.hpp"
#include "alora/optimizer.hpp"
#include "alora/regularizers.hpp"
#include "alora/task.hpp"
#include "alora/transformer.hpp"

namespace alora {

enum class Strategy { ablation, dnas_baseline, l0_baseline };

struct AllocatorConfig {
    int64_t r_target = 48;
    int64_t k1 = 3;   // warm-up epochs (early stop on val loss, patience 3)
    int64_t k2 = 1;   // recovery epochs per round
    int64_t n_a = 4;  // allocation rounds
    int64_t r1 = 0;   // ranks pruned per round; 0 -> max(1, r_target/16)
    int64_t val_batch_size = 64;
    Strategy strategy = Strategy::ablation;
    // L0 baseline only:
    int64_t l0_init_rank = 16;
    int64_t l0_prune_period = 400;    // T_p
    double l0_threshold = -1.0;       // prune when log theta drops below

    int64_t effective_r1() const;
    void validate() const;
};

struct RankScore {
    std::string module_id;
    int64_t rank_index = 0;
    double s_without = 0.0;  // S(M \ r)
    double s_alone = 0.0;    // S(M_r)
    double is = 0.0;         // -s_without + s_alone
};

struct ImportanceReport {
    int64_t round = 0;
    std::vector<RankScore> per_rank;
    std::map<std::string, double> per_module_mean;  // mean IS over active ranks
    int64_t val_batch_id = 0;
    double s_full = 0.0;  // S(M), diagnostics only
};

struct AllocationDelta {
    int64_t round = 0;
    std::vector<std::pair<std::string, int64_t>> pruned;  // (module, rank index)
    std::vector<std::pair<std::string, int64_t>> added;   // (module, count)
};

struct AllocationHistory {
    int64_t initial_rank_per_module = 0;
    std::vector<std::string> modules;  // module ids, stable order
    std::vector<ImportanceReport> reports;
    std::vector<AllocationDelta> deltas;
    std::vector<int64_t> active_total_after;  // per round
    std::vector<std::map<std::string, int64_t>> rank_map_after;
};

struct RegWeights {
    double orthogonal = 0.1;
    double l0 = 1e-3;
};

struct StepMetrics {
    int64_t step = 0;
    double train_ce = 0.0;
    double reg_orth = 0.0;
    double reg_l0 = 0.0;
    double ga_degrees = 0.0;
    double ga_coefficient = 1.0;
    int64_t active_ranks = 0;
};

using StepLogger = std::function<void(const StepMetrics&)>;

struct TrainOptions {
    OptimizerConfig optimizer;
    int64_t batch_size = 16;
    RegWeights reg;
    GAConfig ga;
    StepLogger logger;  // optional
};

// Negative validation cross-entropy of a gate-overridden view (no-grad,
// read-only; higher is better).
double metric_S(const SuperNetwork& model, const Batch& b_val,
                const GateTensorMap* gates = nullptr);

// Two ablation evaluations per active rank: gate forced to zero (M\r) and
// acting alone (M_r). Pure views; model state is untouched.
ImportanceReport importance_scores(const SuperNetwork& model, const Batch& b_val,
                                   int64_t round = 0, int64_t val_batch_id = 0);

// Prunes the r1 active ranks with the lowest IS (ties: lower module_id,
// then lower rank index); grows the module with the highest mean IS by r1
// iff none of its ranks were pruned this round.
AllocationDelta reallocate_step(SuperNetwork& model, const ImportanceReport& report,
                                int64_t r1, Rng& rng);

// Algorithm: K1 warm-up epochs on adapter parameters (gate logits frozen at
// zero), then N_A rounds of {fresh B_val; importance_scores;
// reallocate_step; K2 recovery epochs}.
AllocationHistory run_alora(SuperNetwork& model, const Dataset& data,
                            const AllocatorConfig& config, const TrainOptions& train,
                            Rng& rng);

// First-order bi-level alternation: adapter steps on D1, gate-logit steps on
// D2 (80/20 split); rounds prune the r1 smallest relaxed gate values.
AllocationHistory dnas_baseline_allocate(SuperNetwork& model, const Dataset& data,
                                         const AllocatorConfig& config,
                                         const TrainOptions& train, Rng& rng);

// Hard-Concrete gates, CE + l0_weight * expected_l0 objective; prunes ranks
// whose log theta fell below the threshold every T_p steps; never grows.
AllocationHistory l0_baseline_allocate(SuperNetwork& model, const Dataset& data,
                                       const AllocatorConfig& config,
                                       const TrainOptions& train, Rng& rng);

std::string history_to_json(const AllocationHistory& h);
std::string history_to_csv(const AllocationHistory& h);

}  // namespace alora
