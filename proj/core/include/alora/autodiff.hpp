#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "alora/tensor.hpp"

namespace alora {

// Parameter identifier -> gradient values (same layout as the parameter).
using GradientMap = std::map<std::string, std::vector<double>>;

// Reverse-mode sweep from a scalar loss. Returns gradients for every
// requires_grad leaf reachable from the loss; `params`, when given, pins the
// full parameter set so unreachable entries come back as zeros.
GradientMap backward(const Tensor& loss);
GradientMap backward(const Tensor& loss, const std::vector<Tensor>& params);

// Central-difference gradient check: rebuilds the loss via `loss_fn` under
// coordinate perturbations of each parameter and reports the maximum
// relative error against backward(). Never throws on a large error.
double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, double step = 1e-5);

}  // namespace alora
