#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "alora/adapter.hpp"
#include "alora/autodiff.hpp"
#include "alora/grad_align.hpp"
#include "alora/harness.hpp"
#include "alora/ops.hpp"
#include "alora/regularizers.hpp"
#include "alora/rng.hpp"

namespace alora {

using namespace ops;

namespace {

struct Checker {
    std::ostream& os;
    int failures = 0;

    void report(const std::string& name, bool ok, double worst, double tol) {
        os << (ok ? "[PASS] " : "[FAIL] ") << name << "  (worst " << std::scientific
           << std::setprecision(3) << worst << ", tol " << tol << ")\n";
        if (!ok) ++failures;
    }
};

Tensor random_tensor(Rng& rng, int64_t rows, int64_t cols) {
    return Tensor::from({rows, cols}, rng.normal_vec(
        static_cast<size_t>(rows * cols), 0.0, 1.0));
}

Tensor random_param(Rng& rng, int64_t rows, int64_t cols, const std::string& name) {
    return Tensor::param(name, {rows, cols}, rng.normal_vec(
        static_cast<size_t>(rows * cols), 0.0, 1.0));
}

void check_gradients(Checker& ck) {
    Rng rng(20260826);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_param(rng, 3, 4, "a");
        Tensor b = random_param(rng, 4, 5, "b");
        auto loss_fn = [&]() {
            Tensor h = sigmoid(matmul(a, b));
            return sum(mul(softmax_rows(h), h));
        };
        worst = std::max(worst, finite_diff_check(loss_fn, {a, b}, 1e-5));
    }
    ck.report("autodiff gradients vs central differences", worst < 1e-4, worst, 1e-4);
}

void check_gate_zero(Checker& ck) {
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        GatedLoraAdapter ad = make_adapter("st" + std::to_string(trial), 8, 8, 4, rng);
        for (auto& v : ad.w_b.mutable_data()) v = rng.normal(0.0, 0.1);
        for (auto& s : ad.gate_state) s = GateState::Pruned;
        Tensor x = random_tensor(rng, 5, 8);
        NoGradGuard ng;
        Tensor y = adapter_forward(x, ad, nullptr);
        for (double v : y.data()) worst = std::max(worst, std::abs(v));
    }
    ck.report("all-pruned adapter output is exactly zero", worst <= 1e-12, worst,
              1e-12);
}

void check_merge(Checker& ck) {
    Rng rng(78);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        GatedLoraAdapter ad = make_adapter("mg" + std::to_string(trial), 6, 7, 3, rng);
        for (auto& v : ad.w_b.mutable_data()) v = rng.normal(0.0, 0.1);
        ad.gate_logits.mutable_data()[1] = rng.normal(0.0, 1.0);
        Tensor w = random_tensor(rng, 6, 7);
        Tensor x = random_tensor(rng, 4, 6);
        NoGradGuard ng;
        Tensor merged = merge(ad, w);
        Tensor base = add(matmul(x, w), adapter_forward(x, ad, nullptr));
        Tensor fused = matmul(x, merged);
        for (int64_t i = 0; i < base.size(); ++i) {
            worst = std::max(worst, std::abs(base.data()[static_cast<size_t>(i)] -
                                             fused.data()[static_cast<size_t>(i)]));
        }
    }
    ck.report("merged weights match adapter forward", worst <= 1e-10, worst, 1e-10);
}

void check_rank_one(Checker& ck) {
    Rng rng(79);
    double worst = 0.0;
    for (int64_t r : {1, 2, 4, 8}) {
        GatedLoraAdapter ad = make_adapter("r1_" + std::to_string(r), 8, 8, r, rng);
        for (auto& v : ad.w_b.mutable_data()) v = rng.normal(0.0, 0.1);
        Tensor x = random_tensor(rng, 5, 8);
        NoGradGuard ng;
        Tensor full = adapter_forward(x, ad, nullptr);
        std::vector<double> acc(static_cast<size_t>(full.size()), 0.0);
        for (int64_t k = 0; k < r; ++k) {
            GatedLoraAdapter one = ad;
            for (int64_t j = 0; j < r; ++j) {
                if (j != k) one.gate_state[static_cast<size_t>(j)] = GateState::Pruned;
            }
            Tensor part = adapter_forward(x, one, nullptr);
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += part.data()[i];
        }
        for (size_t i = 0; i < acc.size(); ++i) {
            worst = std::max(worst, std::abs(acc[i] - full.data()[i]));
        }
    }
    ck.report("adapter forward equals sum of rank-one terms", worst <= 1e-12, worst,
              1e-12);
}

void check_hard_concrete(Checker& ck) {
    Rng rng(80);
    HardConcreteGate gate = make_hard_concrete("st.hc", 1, 0.3);
    const int64_t n = 20000;
    double open = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        NoGradGuard ng;
        Tensor lam = hard_concrete_sample(gate, rng);
        if (lam.data()[0] > 0.0) open += 1.0;
    }
    double p_hat = open / static_cast<double>(n);
    double p = expected_l0(gate).item();
    double se = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    double dev = std::abs(p_hat - p);
    ck.report("hard-concrete open probability matches closed form", dev <= 4.0 * se,
              dev, 4.0 * se);
}

void check_grad_align(Checker& ck) {
    Rng rng(81);
    GAConfig cfg;
    cfg.alpha = 0.5;
    cfg.mode = GAMode::hard;
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> g_main = rng.normal_vec(16, 0.0, 1.0);
        std::vector<double> g_aux = rng.normal_vec(16, 0.0, 1.0);
        GAResult res = combine(g_main, g_aux, cfg);
        // combined update must stay a scalar multiple of the main gradient
        for (size_t i = 0; i < g_main.size(); ++i) {
            worst = std::max(worst,
                             std::abs(res.grad[i] - res.coefficient * g_main[i]));
        }
        if (res.degenerate) continue;
        if (res.degrees > 90.0) {
            worst = std::max(worst, std::abs(res.coefficient - 1.0));
        } else {
            worst = std::max(worst, std::max(0.0, (1.0 - cfg.alpha) - res.coefficient));
        }
    }
    ck.report("gradient alignment output colinear with main gradient",
              worst <= 1e-10, worst, 1e-10);
}

void check_orth_reg(Checker& ck) {
    Rng rng(82);
    // orthogonal columns of A / rows of B give the exact minimum, and the
    // trace normalization makes the penalty invariant to uniform rescaling
    GatedLoraAdapter ad = make_adapter("st.orth", 6, 6, 3, rng);
    std::fill(ad.w_a.mutable_data().begin(), ad.w_a.mutable_data().end(), 0.0);
    std::fill(ad.w_b.mutable_data().begin(), ad.w_b.mutable_data().end(), 0.0);
    for (int64_t k = 0; k < 3; ++k) {
        ad.w_a.mutable_data()[static_cast<size_t>(k * 3 + k)] = 2.5;
        ad.w_b.mutable_data()[static_cast<size_t>(k * 6 + k)] = 0.7;
    }
    NoGradGuard ng;
    std::vector<const GatedLoraAdapter*> one{&ad};
    double at_min = orthogonal_reg(one).item();
    for (auto& v : ad.w_a.mutable_data()) v *= 3.0;
    for (auto& v : ad.w_b.mutable_data()) v *= 0.25;
    double scaled = orthogonal_reg(one).item();
    double worst = std::max(std::abs(at_min), std::abs(scaled - at_min));
    ck.report("orthogonality penalty zero and scale-invariant at optimum",
              worst <= 1e-10, worst, 1e-10);
}

}  // namespace

int run_selftest(std::ostream& os) {
    set_precision(Precision::f64);
    Checker ck{os};
    check_gradients(ck);
    check_gate_zero(ck);
    check_merge(ck);
    check_rank_one(ck);
    check_hard_concrete(ck);
    check_grad_align(ck);
    check_orth_reg(ck);
    os << (ck.failures == 0 ? "selftest OK\n"
                            : "selftest FAILED (" + std::to_string(ck.failures) +
                                  " checks)\n");
    return ck.failures;
}

}  // namespace alora
