#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "alora/adapter.hpp"
#include "alora/rng.hpp"
#include "alora/tensor.hpp"

namespace alora {

enum class Activation { relu, gelu };

struct ModelConfig {
    int64_t layers = 2;
    int64_t d = 64;
    int64_t heads = 4;
    int64_t d_ff = 256;
    int64_t vocab = 32;
    int64_t max_seq_len = 24;
    Activation activation = Activation::gelu;

    void validate() const;
};

// The six adapter-injectable weights of one block, plus FFN biases.
struct BlockWeights {
    Tensor w_q, w_k, w_v, w_o;  // d x d
    Tensor w_u;                 // d x d_ff
    Tensor w_d;                 // d_ff x d
    Tensor b_u, b_d;
};

// Number of adapter-injectable weights per block.
inline constexpr int64_t kModulesPerBlock = 6;

// Adapter slots within a block, in module-id order.
inline constexpr const char* kModuleNames[kModulesPerBlock] = {"wq", "wk", "wv",
                                                               "wo", "wu", "wd"};

// One token sequence; target_mask[t] = 1 marks token t as a prediction
// target (the loss runs on the logit row that predicts it).
struct Sequence {
    std::vector<int> tokens;
    std::vector<double> target_mask;
};

using Batch = std::vector<Sequence>;

// Per-module gate overrides for ablation views or taped Hard-Concrete
// gates; forward passes read them, never the adapters' own state.
using GateTensorMap = std::map<std::string, Tensor>;

// Frozen toy decoder with one gated adapter per injectable weight.
// Layout: token+position embeddings, pre-norm blocks
// (x += MHA(LN(x)); x += FFN(LN(x))), logits through the tied embedding.
struct SuperNetwork {
    ModelConfig config;
    int64_t budget = 0;
    Tensor tok_embed;    // vocab x d, frozen
    Tensor pos_embed;    // max_seq_len x d, frozen
    Tensor unembed;      // d x vocab, tied transpose of tok_embed, frozen
    std::vector<BlockWeights> blocks;
    std::vector<std::vector<GatedLoraAdapter>> adapters;  // [layer][6]

    std::vector<GatedLoraAdapter*> all_adapters();
    std::vector<const GatedLoraAdapter*> all_adapters() const;
    GatedLoraAdapter* find_adapter(const std::string& module_id);
    int64_t total_active_ranks() const;

    // Adapter weight matrices (and optionally gate logits) as a parameter
    // list for training/backward.
    std::vector<Tensor> adapter_params(bool include_gate_logits = false) const;

    // Logits for a batch, shape (batch*len x vocab). Read-only over
    // parameters; safe to call concurrently under NoGradGuard.
    Tensor forward_logits(const Batch& batch,
                          const GateTensorMap* gates = nullptr) const;
};

Tensor mha_forward(const Tensor& h, const BlockWeights& weights, int64_t heads,
                   bool causal_mask,
                   std::span<const GatedLoraAdapter> adapters = {},
                   const GateTensorMap* gates = nullptr, int64_t nseq = 1);

Tensor ffn_forward(const Tensor& h, const BlockWeights& weights,
                   Activation activation,
                   std::span<const GatedLoraAdapter> adapters = {},
                   const GateTensorMap* gates = nullptr);

// Frozen random base (normal(0, 0.02), zero biases) with uniform initial
// rank budget / (layers * 6) per module. Uneven division is an error.
SuperNetwork build_supernetwork(const ModelConfig& config, int64_t budget,
                                Rng& rng);

// Mean next-token cross-entropy over target positions.
Tensor lm_loss(const SuperNetwork& model, const Batch& batch,
               const GateTensorMap* gates = nullptr);

// Fraction of sequences whose whole target region is reproduced by greedy
// autoregressive decoding from the prompt.
double greedy_exact_match(const SuperNetwork& model, const Batch& batch);

}  // namespace alora
