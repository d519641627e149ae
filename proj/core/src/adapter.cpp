#include "alora/adapter.hpp"

#include <cmath>

namespace alora {

double gate_value(double gate_logit, GateState state) {
    if (state == GateState::Pruned) return 0.0;
    return 2.0 / (1.0 + std::exp(-gate_logit));
}

int64_t GatedLoraAdapter::active_rank() const {
    int64_t n = 0;
    for (GateState s : gate_state) {
        if (s == GateState::Active) ++n;
    }
    return n;
}

std::vector<double> GatedLoraAdapter::effective_gates() const {
    std::vector<double> g(gate_state.size());
    for (size_t i = 0; i < gate_state.size(); ++i) {
        g[i] = gate_value(gate_logits.at(static_cast<int64_t>(i)), gate_state[i]);
    }
    return g;
}

GatedLoraAdapter make_adapter(std::string module_id, int64_t d_in, int64_t d_out,
                              int64_t rank, Rng& rng) {
    if (rank < 0) throw ContractError("make_adapter: negative rank");
    GatedLoraAdapter a;
    a.module_id = std::move(module_id);
    a.w_a = Tensor::param(a.module_id + ".A", {d_in, rank},
                          rng.normal_vec(static_cast<size_t>(d_in * rank), 0.0, 0.02));
    a.w_b = Tensor::param(a.module_id + ".B", {rank, d_out},
                          std::vector<double>(static_cast<size_t>(rank * d_out), 0.0));
    a.gate_logits = Tensor::param(a.module_id + ".gate", {rank},
                                  std::vector<double>(static_cast<size_t>(rank), 0.0));
    a.gate_state.assign(static_cast<size_t>(rank), GateState::Active);
    return a;
}

namespace {

Tensor gate_tensor(const GatedLoraAdapter& a) {
    if (a.mode == GateMode::trainable) {
        // 2*sigmoid(a') masked by the hard prune state, on the tape.
        std::vector<double> mask(a.gate_state.size());
        for (size_t i = 0; i < a.gate_state.size(); ++i) {
            mask[i] = a.gate_state[i] == GateState::Active ? 1.0 : 0.0;
        }
        Tensor relaxed = ops::scale(ops::sigmoid(a.gate_logits), 2.0);
        return ops::mul(relaxed, Tensor::from({a.rank()}, std::move(mask)));
    }
    return Tensor::from({a.rank()}, a.effective_gates());
}

bool all_zero(std::span<const double> v) {
    for (double x : v) {
        if (x != 0.0) return false;
    }
    return true;
}

}  // namespace

bool adapter_inert(const GatedLoraAdapter& adapter, const Tensor* gates) {
    if (adapter.rank() == 0) return true;
    if (gates != nullptr) {
        return !gates->node()->needs_grad && all_zero(gates->data());
    }
    if (adapter.mode == GateMode::trainable) return false;
    auto g = adapter.effective_gates();
    return all_zero(g);
}

Tensor adapter_forward(const Tensor& x, const GatedLoraAdapter& adapter,
                       const Tensor* gates) {
    if (x.shape().size() != 2 || x.cols() != adapter.d_in()) {
        throw DimensionError("adapter_forward[" + adapter.module_id + "]: input " +
                             shape_str(x.shape()) + " vs d_in " +
                             std::to_string(adapter.d_in()));
    }
    if (adapter.rank() == 0) {
        return Tensor::zeros({x.rows(), adapter.d_out()});
    }
    Tensor g = gates != nullptr ? *gates : gate_tensor(adapter);
    if (g.size() != adapter.rank()) {
        throw DimensionError("adapter_forward[" + adapter.module_id +
                             "]: gate vector length " + std::to_string(g.size()) +
                             " vs rank " + std::to_string(adapter.rank()));
    }
    Tensor h = ops::col_scale(ops::matmul(x, adapter.w_a), g);
    Tensor out = ops::matmul(h, adapter.w_b);
    return adapter.scaling == 1.0 ? out : ops::scale(out, adapter.scaling);
}

Tensor merge(const GatedLoraAdapter& adapter, const Tensor& w0) {
    if (w0.shape().size() != 2 || w0.rows() != adapter.d_in() ||
        w0.cols() != adapter.d_out()) {
        throw DimensionError("merge[" + adapter.module_id + "]: W0 " +
                             shape_str(w0.shape()) + " vs adapter " +
                             std::to_string(adapter.d_in()) + "x" +
                             std::to_string(adapter.d_out()));
    }
    NoGradGuard ng;
    auto g = adapter.effective_gates();
    const int64_t din = adapter.d_in(), dout = adapter.d_out(), r = adapter.rank();
    std::vector<double> out(w0.data().begin(), w0.data().end());
    for (int64_t i = 0; i < din; ++i) {
        for (int64_t k = 0; k < r; ++k) {
            double aik = adapter.w_a.at(i, k) * g[static_cast<size_t>(k)] *
                         adapter.scaling;
            if (aik == 0.0) continue;
            for (int64_t j = 0; j < dout; ++j) {
                out[static_cast<size_t>(i * dout + j)] += aik * adapter.w_b.at(k, j);
            }
        }
    }
    return Tensor::from({din, dout}, std::move(out));
}

void prune_rank(GatedLoraAdapter& adapter, int64_t rank_index) {
    if (rank_index < 0 || rank_index >= adapter.rank()) {
        throw ContractError("prune_rank[" + adapter.module_id + "]: index " +
                            std::to_string(rank_index) + " out of rank " +
                            std::to_string(adapter.rank()));
    }
    auto& s = adapter.gate_state[static_cast<size_t>(rank_index)];
    if (s == GateState::Pruned) {
        throw ContractError("prune_rank[" + adapter.module_id + "]: rank " +
                            std::to_string(rank_index) + " already pruned");
    }
    s = GateState::Pruned;
}

void grow_ranks(GatedLoraAdapter& adapter, int64_t delta, Rng& rng) {
    if (delta < 1) throw ContractError("grow_ranks: delta must be >= 1");
    const int64_t din = adapter.d_in(), dout = adapter.d_out(), r = adapter.rank();
    const int64_t nr = r + delta;

    std::vector<double> wa(static_cast<size_t>(din * nr));
    for (int64_t i = 0; i < din; ++i) {
        for (int64_t k = 0; k < r; ++k) {
            wa[static_cast<size_t>(i * nr + k)] = adapter.w_a.at(i, k);
        }
        for (int64_t k = r; k < nr; ++k) {
            wa[static_cast<size_t>(i * nr + k)] = rng.normal(0.0, 0.02);
        }
    }
    std::vector<double> wb(adapter.w_b.data().begin(), adapter.w_b.data().end());
    wb.resize(static_cast<size_t>(nr * dout), 0.0);

    std::vector<double> logits(adapter.gate_logits.data().begin(),
                               adapter.gate_logits.data().end());
    logits.resize(static_cast<size_t>(nr), 0.0);

    adapter.w_a = Tensor::param(adapter.module_id + ".A", {din, nr}, std::move(wa));
    adapter.w_b = Tensor::param(adapter.module_id + ".B", {nr, dout}, std::move(wb));
    adapter.gate_logits =
        Tensor::param(adapter.module_id + ".gate", {nr}, std::move(logits));
    adapter.gate_state.resize(static_cast<size_t>(nr), GateState::Active);
}

GatedLoraAdapter compact(const GatedLoraAdapter& adapter) {
    const int64_t din = adapter.d_in(), dout = adapter.d_out();
    std::vector<int64_t> keep;
    for (int64_t k = 0; k < adapter.rank(); ++k) {
        if (adapter.gate_state[static_cast<size_t>(k)] == GateState::Active) {
            keep.push_back(k);
        }
    }
    const int64_t nr = static_cast<int64_t>(keep.size());
    std::vector<double> wa(static_cast<size_t>(din * nr));
    std::vector<double> wb(static_cast<size_t>(nr * dout));
    std::vector<double> logits(static_cast<size_t>(nr));
    for (int64_t k = 0; k < nr; ++k) {
        for (int64_t i = 0; i < din; ++i) {
            wa[static_cast<size_t>(i * nr + k)] = adapter.w_a.at(i, keep[k]);
        }
        for (int64_t j = 0; j < dout; ++j) {
            wb[static_cast<size_t>(k * dout + j)] = adapter.w_b.at(keep[k], j);
        }
        logits[static_cast<size_t>(k)] = adapter.gate_logits.at(keep[k]);
    }
    GatedLoraAdapter out;
    out.module_id = adapter.module_id;
    out.mode = adapter.mode;
    out.scaling = adapter.scaling;
    out.w_a = Tensor::param(adapter.module_id + ".A", {din, nr}, std::move(wa));
    out.w_b = Tensor::param(adapter.module_id + ".B", {nr, dout}, std::move(wb));
    out.gate_logits =
        Tensor::param(adapter.module_id + ".gate", {nr}, std::move(logits));
    out.gate_state.assign(static_cast<size_t>(nr), GateState::Active);
    return out;
}

}  // namespace alora
