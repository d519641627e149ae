#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alora/ops.hpp"
#include "alora/rng.hpp"
#include "alora/tensor.hpp"

namespace alora {

enum class GateState : uint8_t { Active = 0, Pruned = 1 };

// How the per-rank gate vector enters the forward pass when no explicit
// gate tensor is supplied: `fixed` evaluates 2*sigmoid(a') as a constant
// (ALoRA training, logits frozen), `trainable` builds it on the tape so
// gradients reach the logits (DNAS baseline).
enum class GateMode { fixed, trainable };

// Low-rank pair with per-rank gates. Rank i contributes
// scaling * gate_i * (x . col_i(W_A)) row_i(W_B); pruning a rank forces its
// gate to exactly 0 while keeping the column/row in place so rank indices
// stay stable within an allocation round.
struct GatedLoraAdapter {
    std::string module_id;
    Tensor w_a;          // d_in x r
    Tensor w_b;          // r x d_out
    Tensor gate_logits;  // length r, trainable only under GateMode::trainable
    std::vector<GateState> gate_state;
    GateMode mode = GateMode::fixed;
    double scaling = 1.0;

    int64_t rank() const { return static_cast<int64_t>(gate_state.size()); }
    int64_t active_rank() const;
    int64_t d_in() const { return w_a.rows(); }
    int64_t d_out() const { return w_b.cols(); }

    // Effective gate values: Pruned -> 0 exactly, Active -> 2*sigmoid(a').
    std::vector<double> effective_gates() const;
};

// Pruned -> exactly 0; Active -> 2*sigmoid(a') in (0, 2), exactly 1 at a'=0.
double gate_value(double gate_logit, GateState state);

// Fresh adapter: W_A ~ normal(0, 0.02), W_B zero (the initial contribution
// vanishes, so attaching adapters leaves the base model intact), all gates
// active with zero logits.
GatedLoraAdapter make_adapter(std::string module_id, int64_t d_in, int64_t d_out,
                              int64_t rank, Rng& rng);

// Low-rank contribution for a row-major batch x (n x d_in) -> (n x d_out).
// `gates` overrides the adapter's own gate vector; it may be a constant
// (ablation views) or a taped tensor (Hard-Concrete sampling).
Tensor adapter_forward(const Tensor& x, const GatedLoraAdapter& adapter,
                       const Tensor* gates = nullptr);

// True when the contribution is exactly zero for non-taped gates, so the
// host layer may skip the addition entirely (bitwise base equality).
bool adapter_inert(const GatedLoraAdapter& adapter, const Tensor* gates = nullptr);

// Dense W0 + W_A diag(g) W_B with the current effective gates.
Tensor merge(const GatedLoraAdapter& adapter, const Tensor& w0);

void prune_rank(GatedLoraAdapter& adapter, int64_t rank_index);

// Appends `delta` ranks: new W_A columns ~ normal(0, 0.02), new W_B rows
// zero, new gates active at logit 0. Existing parameter values are
// bit-unchanged and all outputs stay identical until the next update step.
void grow_ranks(GatedLoraAdapter& adapter, int64_t delta, Rng& rng);

// Physically removes pruned columns/rows (checkpoint-time maintenance).
GatedLoraAdapter compact(const GatedLoraAdapter& adapter);

}  // namespace alora
