#include "alora/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "alora/ops.hpp"

namespace alora {

namespace {

// Base linear plus the adapter contribution (skipped when exactly zero so
// the all-gates-off model is bitwise the base model).
Tensor linear_adapted(const Tensor& x, const Tensor& w, const Tensor* bias,
                      const GatedLoraAdapter* adapter, const GateTensorMap* gates) {
    Tensor y = ops::matmul(x, w);
    if (bias != nullptr) y = ops::add(y, *bias);
    if (adapter != nullptr) {
        const Tensor* g = nullptr;
        if (gates != nullptr) {
            auto it = gates->find(adapter->module_id);
            if (it != gates->end()) g = &it->second;
        }
        if (!adapter_inert(*adapter, g)) {
            y = ops::add(y, adapter_forward(x, *adapter, g));
        }
    }
    return y;
}

const GatedLoraAdapter* slot(std::span<const GatedLoraAdapter> adapters, size_t i) {
    return adapters.empty() ? nullptr : &adapters[i];
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigError("ModelConfig.layers must be >= 1");
    if (d < 1) throw ConfigError("ModelConfig.d must be >= 1");
    if (heads < 1 || d % heads != 0) {
        throw ConfigError("ModelConfig.heads must divide d (" + std::to_string(heads) +
                          " vs d=" + std::to_string(d) + ")");
    }
    if (d_ff < 1) throw ConfigError("ModelConfig.d_ff must be >= 1");
    if (vocab < 1) throw ConfigError("ModelConfig.vocab must be >= 1");
    if (max_seq_len < 1) throw ConfigError("ModelConfig.max_seq_len must be >= 1");
}

Tensor mha_forward(const Tensor& h, const BlockWeights& weights, int64_t heads,
                   bool causal_mask, std::span<const GatedLoraAdapter> adapters,
                   const GateTensorMap* gates, int64_t nseq) {
    const int64_t d = h.cols();
    if (weights.w_q.rows() != d) {
        throw DimensionError("mha_forward: input width " + std::to_string(d) +
                             " vs W_Q rows " + std::to_string(weights.w_q.rows()));
    }
    if (heads < 1 || d % heads != 0) {
        throw DimensionError("mha_forward: heads must divide d");
    }

    Tensor q = linear_adapted(h, weights.w_q, nullptr, slot(adapters, 0), gates);
    Tensor k = linear_adapted(h, weights.w_k, nullptr, slot(adapters, 1), gates);
    Tensor v = linear_adapted(h, weights.w_v, nullptr, slot(adapters, 2), gates);
    Tensor att = ops::attention(q, k, v, nseq, heads, causal_mask);
    return linear_adapted(att, weights.w_o, nullptr, slot(adapters, 3), gates);
}

Tensor ffn_forward(const Tensor& h, const BlockWeights& weights,
                   Activation activation, std::span<const GatedLoraAdapter> adapters,
                   const GateTensorMap* gates) {
    if (h.cols() != weights.w_u.rows()) {
        throw DimensionError("ffn_forward: input width " + std::to_string(h.cols()) +
                             " vs W_U rows " + std::to_string(weights.w_u.rows()));
    }
    Tensor pre = linear_adapted(h, weights.w_u, &weights.b_u, slot(adapters, 4), gates);
    Tensor act = activation == Activation::relu ? ops::relu(pre) : ops::gelu(pre);
    return linear_adapted(act, weights.w_d, &weights.b_d, slot(adapters, 5), gates);
}

SuperNetwork build_supernetwork(const ModelConfig& config, int64_t budget, Rng& rng) {
    config.validate();
    const int64_t modules = config.layers * kModulesPerBlock;
    if (budget < modules) {
        throw ConfigError("budget " + std::to_string(budget) + " below module count " +
                          std::to_string(modules));
    }
    if (budget % modules != 0) {
        throw ConfigError("budget " + std::to_string(budget) +
                          " not divisible by module count " + std::to_string(modules));
    }
    const int64_t r_init = budget / modules;

    SuperNetwork net;
    net.config = config;
    net.budget = budget;

    auto frozen = [&rng](Shape shape) {
        size_t n = static_cast<size_t>(numel(shape));
        return Tensor::from(std::move(shape), rng.normal_vec(n, 0.0, 0.02));
    };

    net.tok_embed = frozen({config.vocab, config.d});
    net.pos_embed = frozen({config.max_seq_len, config.d});
    {
        // Tied readout: transpose of the token embedding.
        std::vector<double> u(static_cast<size_t>(config.d * config.vocab));
        for (int64_t t = 0; t < config.vocab; ++t) {
            for (int64_t j = 0; j < config.d; ++j) {
                u[static_cast<size_t>(j * config.vocab + t)] = net.tok_embed.at(t, j);
            }
        }
        net.unembed = Tensor::from({config.d, config.vocab}, std::move(u));
    }

    for (int64_t layer = 0; layer < config.layers; ++layer) {
        BlockWeights bw;
        bw.w_q = frozen({config.d, config.d});
        bw.w_k = frozen({config.d, config.d});
        bw.w_v = frozen({config.d, config.d});
        bw.w_o = frozen({config.d, config.d});
        bw.w_u = frozen({config.d, config.d_ff});
        bw.w_d = frozen({config.d_ff, config.d});
        bw.b_u = Tensor::zeros({config.d_ff});
        bw.b_d = Tensor::zeros({config.d});
        net.blocks.push_back(std::move(bw));

        std::vector<GatedLoraAdapter> row;
        const int64_t dims[kModulesPerBlock][2] = {
            {config.d, config.d},    {config.d, config.d}, {config.d, config.d},
            {config.d, config.d},    {config.d, config.d_ff},
            {config.d_ff, config.d}};
        for (int64_t m = 0; m < kModulesPerBlock; ++m) {
            std::string id = "b" + std::to_string(layer) + "." + kModuleNames[m];
            row.push_back(make_adapter(std::move(id), dims[m][0], dims[m][1], r_init, rng));
        }
        net.adapters.push_back(std::move(row));
    }
    return net;
}

std::vector<GatedLoraAdapter*> SuperNetwork::all_adapters() {
    std::vector<GatedLoraAdapter*> out;
    for (auto& row : adapters) {
        for (auto& a : row) out.push_back(&a);
    }
    return out;
}

std::vector<const GatedLoraAdapter*> SuperNetwork::all_adapters() const {
    std::vector<const GatedLoraAdapter*> out;
    for (const auto& row : adapters) {
        for (const auto& a : row) out.push_back(&a);
    }
    return out;
}

GatedLoraAdapter* SuperNetwork::find_adapter(const std::string& module_id) {
    for (auto& row : adapters) {
        for (auto& a : row) {
            if (a.module_id == module_id) return &a;
        }
    }
    return nullptr;
}

int64_t SuperNetwork::total_active_ranks() const {
    int64_t n = 0;
    for (const auto* a : all_adapters()) n += a->active_rank();
    return n;
}

std::vector<Tensor> SuperNetwork::adapter_params(bool include_gate_logits) const {
    std::vector<Tensor> out;
    for (const auto* a : all_adapters()) {
        if (a->rank() == 0) continue;
        out.push_back(a->w_a);
        out.push_back(a->w_b);
        if (include_gate_logits) out.push_back(a->gate_logits);
    }
    return out;
}

Tensor SuperNetwork::forward_logits(const Batch& batch,
                                    const GateTensorMap* gates) const {
    if (batch.empty()) throw ContractError("forward_logits: empty batch");
    const int64_t l = static_cast<int64_t>(batch[0].tokens.size());
    if (l < 1 || l > config.max_seq_len) {
        throw ContractError("forward_logits: sequence length " + std::to_string(l) +
                            " out of [1," + std::to_string(config.max_seq_len) + "]");
    }
    std::vector<int> flat_ids;
    std::vector<int> pos_ids;
    flat_ids.reserve(batch.size() * static_cast<size_t>(l));
    pos_ids.reserve(flat_ids.capacity());
    for (const Sequence& s : batch) {
        if (static_cast<int64_t>(s.tokens.size()) != l) {
            throw ContractError("forward_logits: ragged batch");
        }
        for (int t : s.tokens) {
            if (t < 0 || t >= config.vocab) {
                throw ContractError("forward_logits: token id " + std::to_string(t) +
                                    " out of vocab " + std::to_string(config.vocab));
            }
            flat_ids.push_back(t);
        }
        for (int64_t p = 0; p < l; ++p) pos_ids.push_back(static_cast<int>(p));
    }

    Tensor x = ops::add(ops::gather_rows(tok_embed, flat_ids),
                        ops::gather_rows(pos_embed, pos_ids));
    const int64_t nseq = static_cast<int64_t>(batch.size());
    for (int64_t layer = 0; layer < config.layers; ++layer) {
        Tensor h1 = ops::layernorm_rows(x);
        Tensor att = mha_forward(h1, blocks[static_cast<size_t>(layer)], config.heads,
                                 /*causal_mask=*/true,
                                 adapters[static_cast<size_t>(layer)], gates, nseq);
        x = ops::add(x, att);
        Tensor h2 = ops::layernorm_rows(x);
        x = ops::add(x, ffn_forward(h2, blocks[static_cast<size_t>(layer)],
                                    config.activation,
                                    adapters[static_cast<size_t>(layer)], gates));
    }
    return ops::matmul(x, unembed);
}

Tensor lm_loss(const SuperNetwork& model, const Batch& batch,
               const GateTensorMap* gates) {
    if (batch.empty()) throw ContractError("lm_loss: empty batch");
    Tensor logits = model.forward_logits(batch, gates);
    const int64_t l = static_cast<int64_t>(batch[0].tokens.size());
    std::vector<int> targets(batch.size() * static_cast<size_t>(l), 0);
    std::vector<double> weights(targets.size(), 0.0);
    for (size_t b = 0; b < batch.size(); ++b) {
        const Sequence& s = batch[b];
        for (int64_t t = 0; t + 1 < l; ++t) {
            size_t row = b * static_cast<size_t>(l) + static_cast<size_t>(t);
            targets[row] = s.tokens[static_cast<size_t>(t + 1)];
            weights[row] = s.target_mask[static_cast<size_t>(t + 1)];
        }
    }
    return ops::cross_entropy_logits(logits, targets, weights);
}

double greedy_exact_match(const SuperNetwork& model, const Batch& batch) {
    if (batch.empty()) throw ContractError("greedy_exact_match: empty batch");
    NoGradGuard ng;
    int64_t hits = 0;
    for (const Sequence& s : batch) {
        const int64_t l = static_cast<int64_t>(s.tokens.size());
        int64_t first_target = -1;
        for (int64_t t = 0; t < l; ++t) {
            if (s.target_mask[static_cast<size_t>(t)] > 0.0) {
                first_target = t;
                break;
            }
        }
        if (first_target < 1) {
            throw ContractError("greedy_exact_match: sequence without target region");
        }
        Sequence work = s;
        bool ok = true;
        for (int64_t t = first_target; t < l; ++t) {
            if (work.target_mask[static_cast<size_t>(t)] == 0.0) continue;
            Sequence prefix;
            prefix.tokens.assign(work.tokens.begin(), work.tokens.begin() + t);
            prefix.target_mask.assign(static_cast<size_t>(t), 0.0);
            Tensor logits = model.forward_logits({prefix});
            const int64_t v = model.config.vocab;
            int best = 0;
            double best_v = logits.at(t - 1, 0);
            for (int64_t j = 1; j < v; ++j) {
                double x = logits.at(t - 1, j);
                if (x > best_v) {
                    best_v = x;
                    best = static_cast<int>(j);
                }
            }
            if (best != s.tokens[static_cast<size_t>(t)]) ok = false;
            work.tokens[static_cast<size_t>(t)] = best;
        }
        if (ok) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

}  // namespace alora
