#pragma once

#include <map>
#include <string>
#include <vector>

#include "alora/autodiff.hpp"
#include "alora/tensor.hpp"

namespace alora {

enum class OptimizerKind { sgd_momentum, adaptive };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adaptive;
    double lr = 1e-2;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t warmup_steps = 0;  // linear warm-up from 0 over this many steps

    void validate() const;
};

// Keyed by parameter name; state vectors follow parameter growth (rank adds
// extend them with zeros, which matches fresh-parameter semantics).
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config);

    void step(const std::vector<Tensor>& params, const GradientMap& grads);

    int64_t steps_taken() const { return step_count_; }
    const OptimizerConfig& config() const { return config_; }

private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };

    OptimizerConfig config_;
    int64_t step_count_ = 0;
    std::map<std::string, Slot> state_;
};

}  // namespace alora
