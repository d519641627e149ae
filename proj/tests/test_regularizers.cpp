#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "alora/adapter.hpp"
#include "alora/autodiff.hpp"
#include "alora/ops.hpp"
#include "alora/regularizers.hpp"
#include "alora/rng.hpp"

using namespace alora;

namespace {

struct PrecisionF64 {
    PrecisionF64() { set_precision(Precision::f64); }
};

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE_FIXTURE(PrecisionF64, "hard-concrete parameter validation") {
    HardConcreteGate g = make_hard_concrete("g", 3);
    CHECK_NOTHROW(g.validate());
    CHECK(g.gamma_lower < 0.0);
    CHECK(g.zeta_upper > 1.0);
    CHECK(g.tau == doctest::Approx(2.0 / 3.0));
    g.tau = 0.0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = make_hard_concrete("g", 3);
    g.gamma_lower = 0.1;  // stretch must straddle [0, 1]
    CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE_FIXTURE(PrecisionF64, "samples live in [0,1] with point masses at both ends") {
    Rng rng(1);
    HardConcreteGate g = make_hard_concrete("g", 4, 0.0);
    int zeros = 0, ones = 0, inside = 0;
    for (int i = 0; i < 2000; ++i) {
        NoGradGuard ng;
        Tensor s = hard_concrete_sample(g, rng);
        for (double v : s.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            if (v == 0.0) ++zeros;
            else if (v == 1.0) ++ones;
            else ++inside;
        }
    }
    CHECK(zeros > 0);   // clipping creates exact point masses
    CHECK(ones > 0);
    CHECK(inside > 0);
}

TEST_CASE_FIXTURE(PrecisionF64, "expected L0 closed form matches Monte-Carlo") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        double log_theta = rng.uniform(-2.0, 2.0);
        HardConcreteGate g = make_hard_concrete("g", 1, log_theta);
        double p = expected_l0(g).item();
        const int n = 40000;
        int open = 0;
        for (int i = 0; i < n; ++i) {
            NoGradGuard ng;
            if (hard_concrete_sample(g, rng).data()[0] > 0.0) ++open;
        }
        double se = std::sqrt(p * (1.0 - p) / n);
        CHECK(std::abs(static_cast<double>(open) / n - p) <= 4.0 * se);
        // and against the direct formula
        double shift = g.tau * std::log(-g.gamma_lower / g.zeta_upper);
        CHECK(p == doctest::Approx(sigmoid_d(log_theta - shift)).epsilon(1e-12));
    }
}

TEST_CASE_FIXTURE(PrecisionF64, "expected L0 gradient matches finite differences") {
    HardConcreteGate g = make_hard_concrete("g", 5, 0.3);
    auto loss = [&]() { return expected_l0(g); };
    CHECK(finite_diff_check(loss, {g.log_theta}, 1e-5) < 1e-4);
}

TEST_CASE_FIXTURE(PrecisionF64, "sample path is differentiable in log theta") {
    HardConcreteGate g = make_hard_concrete("g", 4, 0.2);
    Rng rng(3);
    // a fixed noise draw that avoids the clipped (zero-gradient) region
    std::vector<double> u;
    while (u.size() < 4) {
        double c = rng.uniform(0.35, 0.65);
        u.push_back(c);
    }
    auto loss = [&]() { return ops::sum(hard_concrete_sample(g, u)); };
    CHECK(finite_diff_check(loss, {g.log_theta}, 1e-6) < 1e-4);
}

TEST_CASE_FIXTURE(PrecisionF64, "orthogonal factors give zero penalty, scale-invariantly") {
    Rng rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t d = 8, r = 4;
        GatedLoraAdapter ad = make_adapter("m", d, d, r, rng);
        std::fill(ad.w_a.mutable_data().begin(), ad.w_a.mutable_data().end(), 0.0);
        std::fill(ad.w_b.mutable_data().begin(), ad.w_b.mutable_data().end(), 0.0);
        // orthogonal columns of A and rows of B with a common norm
        double ca = rng.uniform(0.2, 3.0), cb = rng.uniform(0.2, 3.0);
        for (int64_t k = 0; k < r; ++k) {
            ad.w_a.mutable_data()[static_cast<size_t>((2 * k) * r + k)] = ca;
            ad.w_b.mutable_data()[static_cast<size_t>(k * d + 2 * k)] = cb;
        }
        NoGradGuard ng;
        std::vector<const GatedLoraAdapter*> v{&ad};
        double zero = orthogonal_reg(v).item();
        worst = std::max(worst, std::abs(zero));
        // uniform rescales leave the trace-normalized Gram unchanged
        double s = rng.uniform(0.1, 10.0);
        for (auto& x : ad.w_a.mutable_data()) x *= s;
        double scaled = orthogonal_reg(v).item();
        worst = std::max(worst, std::abs(scaled - zero));
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE_FIXTURE(PrecisionF64, "penalty ignores pruned ranks") {
    Rng rng(5);
    GatedLoraAdapter ad = make_adapter("m", 6, 6, 3, rng);
    for (auto& v : ad.w_b.mutable_data()) v = rng.normal(0.0, 0.5);
    std::vector<const GatedLoraAdapter*> v{&ad};
    NoGradGuard ng;
    // wreck one rank, then prune it: penalty must match the compacted adapter
    for (int64_t j = 0; j < 6; ++j) {
        ad.w_b.mutable_data()[static_cast<size_t>(2 * 6 + j)] = 100.0;
    }
    prune_rank(ad, 2);
    GatedLoraAdapter small = compact(ad);
    std::vector<const GatedLoraAdapter*> vs{&small};
    CHECK(orthogonal_reg(v).item() ==
          doctest::Approx(orthogonal_reg(vs).item()).epsilon(1e-12));
}

TEST_CASE_FIXTURE(PrecisionF64, "zero factors contribute the identity-distance constant") {
    Rng rng(6);
    GatedLoraAdapter ad = make_adapter("m", 6, 6, 4, rng);
    std::fill(ad.w_a.mutable_data().begin(), ad.w_a.mutable_data().end(), 0.0);
    // B is already zero at init; both Grams vanish -> 2 * (1/r)
    std::vector<const GatedLoraAdapter*> v{&ad};
    NoGradGuard ng;
    CHECK(orthogonal_reg(v).item() == doctest::Approx(2.0 / 4.0).epsilon(1e-12));
}

TEST_CASE_FIXTURE(PrecisionF64, "orthogonal penalty gradient matches finite differences") {
    Rng rng(7);
    GatedLoraAdapter ad = make_adapter("m", 6, 5, 3, rng);
    for (auto& v : ad.w_b.mutable_data()) v = rng.normal(0.0, 0.4);
    std::vector<const GatedLoraAdapter*> v{&ad};
    auto loss = [&]() { return orthogonal_reg(v); };
    CHECK(finite_diff_check(loss, {ad.w_a, ad.w_b}, 1e-5) < 1e-4);
}
