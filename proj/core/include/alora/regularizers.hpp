#pragma once

#include <vector>

#include "alora/adapter.hpp"
#include "alora/rng.hpp"
#include "alora/tensor.hpp"

namespace alora {

// Stretched, clipped binary-concrete gates with point mass at 0 and 1.
// Stretch interval is (gamma_lower, zeta_upper) around [0, 1]; the letter
// roles follow the stretch formula s*(zeta-gamma)+gamma with a negative
// lower end and an upper end above 1.
struct HardConcreteGate {
    Tensor log_theta;  // length r, trainable
    double tau = 2.0 / 3.0;
    double gamma_lower = -0.1;
    double zeta_upper = 1.1;

    void validate() const;
    int64_t rank() const { return log_theta.size(); }
};

HardConcreteGate make_hard_concrete(const std::string& name, int64_t rank,
                                    double init_log_theta = 0.0);

// lambda = clip_[0,1]( sigmoid((logit(u) + log_theta)/tau) stretched ),
// differentiable in log_theta through the sample path. u entries are
// clamped to [1e-6, 1-1e-6].
Tensor hard_concrete_sample(const HardConcreteGate& gate,
                            const std::vector<double>& u);

// Convenience: draws u from rng, then samples.
Tensor hard_concrete_sample(const HardConcreteGate& gate, Rng& rng);

// Closed-form E[#{lambda_k > 0}] = sum_k sigmoid(log_theta_k -
// tau*log(-gamma/zeta)); differentiable in log_theta.
Tensor expected_l0(const HardConcreteGate& gate);

// Trace-normalized Gram penalty over active ranks:
//   ||B Bt/Tr - I/Tr(I)||_F^2 + ||At A/Tr - I/Tr(I)||_F^2
// per adapter, pruned columns/rows excluded. A zero factor (legitimate right
// after rank growth) contributes the identity-distance constant 1/r.
Tensor orthogonal_reg(const std::vector<const GatedLoraAdapter*>& adapters);

}  // namespace alora
