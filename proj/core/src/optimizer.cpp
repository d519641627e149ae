#include "alora/optimizer.hpp"

#include <cmath>

namespace alora {

void OptimizerConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("OptimizerConfig.lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("OptimizerConfig.momentum must lie in [0, 1)");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("OptimizerConfig.beta1/beta2 must lie in [0, 1)");
    }
    if (eps <= 0.0) throw ConfigError("OptimizerConfig.eps must be positive");
    if (warmup_steps < 0) throw ConfigError("OptimizerConfig.warmup_steps negative");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(const std::vector<Tensor>& params, const GradientMap& grads) {
    ++step_count_;
    double lr = config_.lr;
    if (config_.warmup_steps > 0 && step_count_ <= config_.warmup_steps) {
        lr *= static_cast<double>(step_count_) /
              static_cast<double>(config_.warmup_steps);
    }

    for (const Tensor& pc : params) {
        Tensor p = pc;
        auto it = grads.find(p.name());
        if (it == grads.end()) continue;
        const std::vector<double>& g = it->second;
        auto vals = p.mutable_data();
        if (g.size() != vals.size()) {
            throw ContractError("Optimizer::step: gradient size mismatch for '" +
                                p.name() + "'");
        }
        Slot& slot = state_[p.name()];
        if (slot.m.size() != vals.size()) {
            // Rank growth re-lays-out the parameter, so stale moments would
            // misalign; restart the state for this tensor.
            slot.m.assign(vals.size(), 0.0);
            slot.v.clear();
        }

        if (config_.kind == OptimizerKind::sgd_momentum) {
            for (size_t i = 0; i < vals.size(); ++i) {
                slot.m[i] = config_.momentum * slot.m[i] + g[i];
                vals[i] -= lr * slot.m[i];
            }
        } else {
            if (slot.v.size() != vals.size()) slot.v.assign(vals.size(), 0.0);
            double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
            double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
            for (size_t i = 0; i < vals.size(); ++i) {
                slot.m[i] = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * g[i];
                slot.v[i] = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                double mh = slot.m[i] / bc1;
                double vh = slot.v[i] / bc2;
                vals[i] -= lr * mh / (std::sqrt(vh) + config_.eps);
            }
        }
        detail::round_precision(p.node()->value);
        detail::check_finite(p.node()->value, "optimizer step");
    }
}

}  // namespace alora
