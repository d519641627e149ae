#include "alora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace alora {

namespace {

void collect_reachable(const NodePtr& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const NodePtr& p : n->parents) {
            if (p->needs_grad && seen.insert(p.get()).second) {
                stack.push_back(p.get());
            }
        }
    }
    // Node ids are creation-ordered, so descending id is a valid reverse
    // topological order for a define-by-run tape.
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
}

}  // namespace

GradientMap backward(const Tensor& loss) { return backward(loss, {}); }

GradientMap backward(const Tensor& loss, const std::vector<Tensor>& params) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ContractError("backward: loss must be a defined scalar tensor");
    }
    GradientMap out;
    for (const Tensor& p : params) {
        if (!p.requires_grad()) {
            throw ContractError("backward: parameter '" + p.name() +
                                "' has requires_grad = false");
        }
        out[p.name()] = std::vector<double>(p.data().size(), 0.0);
    }
    if (!loss.node()->needs_grad) {
        return out;  // loss does not depend on any trainable leaf
    }

    std::vector<Node*> order;
    collect_reachable(loss.node(), order);
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
    loss.node()->grad[0] = 1.0;

    for (Node* n : order) {
        if (n->backprop) n->backprop(*n);
        detail::check_finite(n->grad, "backward");
    }

    for (Node* n : order) {
        if (n->requires_grad) out[n->name] = n->grad;
    }
    return out;
}

double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, double step) {
    if (step <= 0.0) throw ContractError("finite_diff_check: step must be positive");

    Tensor loss = loss_fn();
    GradientMap analytic = backward(loss, params);

    double max_rel = 0.0;
    for (const Tensor& p : params) {
        Tensor param = p;  // shallow handle, perturbs in place
        const auto& grads = analytic.at(param.name());
        auto vals = param.mutable_data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + step;
            double fp = loss_fn().item();
            vals[i] = orig - step;
            double fm = loss_fn().item();
            vals[i] = orig;
            double numeric = (fp - fm) / (2.0 * step);
            double denom = std::max({std::abs(numeric), std::abs(grads[i]), 1.0});
            max_rel = std::max(max_rel, std::abs(numeric - grads[i]) / denom);
        }
    }
    return max_rel;
}

}  // namespace alora
