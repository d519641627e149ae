#include "alora/regularizers.hpp"

#include <cmath>

#include "alora/ops.hpp"

namespace alora {

void HardConcreteGate::validate() const {
    if (tau <= 0.0) throw ConfigError("HardConcreteGate.tau must be positive");
    if (!(gamma_lower < 0.0)) {
        throw ConfigError("HardConcreteGate.gamma_lower must be negative");
    }
    if (!(zeta_upper > 1.0)) {
        throw ConfigError("HardConcreteGate.zeta_upper must exceed 1");
    }
}

HardConcreteGate make_hard_concrete(const std::string& name, int64_t rank,
                                    double init_log_theta) {
    HardConcreteGate g;
    g.log_theta = Tensor::param(
        name, {rank}, std::vector<double>(static_cast<size_t>(rank), init_log_theta));
    g.validate();
    return g;
}

Tensor hard_concrete_sample(const HardConcreteGate& gate,
                            const std::vector<double>& u) {
    gate.validate();
    if (static_cast<int64_t>(u.size()) != gate.rank()) {
        throw DimensionError("hard_concrete_sample: " + std::to_string(u.size()) +
                             " draws vs rank " + std::to_string(gate.rank()));
    }
    std::vector<double> logits(u.size());
    for (size_t i = 0; i < u.size(); ++i) {
        double ui = std::min(1.0 - 1e-6, std::max(1e-6, u[i]));
        logits[i] = std::log(ui / (1.0 - ui));
    }
    Tensor noise = Tensor::from({gate.rank()}, std::move(logits));
    Tensor s = ops::sigmoid(
        ops::scale(ops::add(noise, gate.log_theta), 1.0 / gate.tau));
    Tensor stretched = ops::add_scalar(
        ops::scale(s, gate.zeta_upper - gate.gamma_lower), gate.gamma_lower);
    return ops::clamp(stretched, 0.0, 1.0);
}

Tensor hard_concrete_sample(const HardConcreteGate& gate, Rng& rng) {
    std::vector<double> u(static_cast<size_t>(gate.rank()));
    for (double& x : u) x = rng.uniform();
    return hard_concrete_sample(gate, u);
}

Tensor expected_l0(const HardConcreteGate& gate) {
    gate.validate();
    double shift = gate.tau * std::log(-gate.gamma_lower / gate.zeta_upper);
    return ops::sum(ops::sigmoid(ops::add_scalar(gate.log_theta, -shift)));
}

namespace {

// ||G/Trace(G) - I/r||_F^2 for a taped r x r Gram matrix.
Tensor gram_term(const Tensor& gram, int64_t r) {
    double tr = 0.0;
    for (int64_t i = 0; i < r; ++i) tr += gram.at(i, i);
    if (tr == 0.0) {
        // Zero factor: the normalized Gram is undefined, the distance to
        // I/Trace(I) degenerates to ||I/r||_F^2 = 1/r.
        return Tensor::scalar(1.0 / static_cast<double>(r));
    }
    Tensor inv_tr = ops::reciprocal(ops::trace(gram));
    Tensor normalized = ops::mul(gram, inv_tr);
    Tensor eye = Tensor::zeros({r, r});
    for (int64_t i = 0; i < r; ++i) {
        eye.mutable_data()[static_cast<size_t>(i * r + i)] =
            1.0 / static_cast<double>(r);
    }
    return ops::sum_squares(ops::sub(normalized, eye));
}

std::vector<int> active_indices(const GatedLoraAdapter& a) {
    std::vector<int> idx;
    for (int64_t k = 0; k < a.rank(); ++k) {
        if (a.gate_state[static_cast<size_t>(k)] == GateState::Active) {
            idx.push_back(static_cast<int>(k));
        }
    }
    return idx;
}

}  // namespace

Tensor orthogonal_reg(const std::vector<const GatedLoraAdapter*>& adapters) {
    Tensor total = Tensor::scalar(0.0);
    for (const GatedLoraAdapter* a : adapters) {
        auto idx = active_indices(*a);
        const int64_t r = static_cast<int64_t>(idx.size());
        if (r == 0) continue;
        // Active rows of W_B and active columns of W_A.
        Tensor b_rows = ops::gather_rows(a->w_b, idx);
        Tensor a_cols = ops::gather_rows(ops::transpose(a->w_a), idx);
        Tensor gram_b = ops::matmul(b_rows, ops::transpose(b_rows));
        Tensor gram_a = ops::matmul(a_cols, ops::transpose(a_cols));
        total = ops::add(total, ops::add(gram_term(gram_b, r), gram_term(gram_a, r)));
    }
    return total;
}

}  // namespace alora
