#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "alora/autodiff.hpp"
#include "alora/ops.hpp"
#include "alora/rng.hpp"
#include "alora/task.hpp"
#include "alora/transformer.hpp"

using namespace alora;

namespace {

struct PrecisionF64 {
    PrecisionF64() { set_precision(Precision::f64); }
};

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 1;
    c.d = 8;
    c.heads = 2;
    c.d_ff = 16;
    c.vocab = 6;
    c.max_seq_len = 8;
    return c;
}

Batch tiny_batch(int64_t n, int64_t l, int64_t vocab, uint64_t seed) {
    Rng rng(seed);
    Batch b;
    for (int64_t i = 0; i < n; ++i) {
        Sequence s;
        for (int64_t t = 0; t < l; ++t) {
            s.tokens.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
            s.target_mask.push_back(t >= l / 2 ? 1.0 : 0.0);
        }
        b.push_back(std::move(s));
    }
    return b;
}

}  // namespace

TEST_CASE_FIXTURE(PrecisionF64, "config and budget validation") {
    ModelConfig c = tiny_config();
    c.heads = 3;  // does not divide d = 8
    CHECK_THROWS_AS(c.validate(), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(build_supernetwork(tiny_config(), 5, rng), ConfigError);
    CHECK_THROWS_AS(build_supernetwork(tiny_config(), 13, rng), ConfigError);
    SuperNetwork net = build_supernetwork(tiny_config(), 12, rng);
    CHECK(net.total_active_ranks() == 12);
    CHECK(net.all_adapters().size() == 6);
    for (const auto* a : net.all_adapters()) CHECK(a->rank() == 2);
}

TEST_CASE_FIXTURE(PrecisionF64, "fresh supernetwork logits are near-uniform and loss near ln(vocab)") {
    Rng rng(2);
    ModelConfig c = tiny_config();
    c.vocab = 32;
    SuperNetwork net = build_supernetwork(c, 12, rng);
    Batch b = tiny_batch(4, 8, 32, 7);
    NoGradGuard ng;
    double ce = lm_loss(net, b).item();
    // frozen weights at scale 0.02 give logits close to zero
    CHECK(ce == doctest::Approx(std::log(32.0)).epsilon(0.02));
}

TEST_CASE_FIXTURE(PrecisionF64, "causal masking: future tokens cannot change a logit row") {
    Rng rng(3);
    SuperNetwork net = build_supernetwork(tiny_config(), 12, rng);
    // make adapters act so the property covers adapted paths too
    for (auto* a : net.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = rng.normal(0.0, 0.3);
    }
    Batch b = tiny_batch(1, 8, 6, 9);
    NoGradGuard ng;
    Tensor base = net.forward_logits(b);
    for (int64_t t = 7; t >= 1; --t) {
        Batch perturbed = b;
        perturbed[0].tokens[static_cast<size_t>(t)] =
            (perturbed[0].tokens[static_cast<size_t>(t)] + 1) % 6;
        Tensor got = net.forward_logits(perturbed);
        for (int64_t row = 0; row < t; ++row) {
            for (int64_t v = 0; v < 6; ++v) {
                CHECK(got.at(row, v) == base.at(row, v));  // bitwise
            }
        }
    }
}

TEST_CASE_FIXTURE(PrecisionF64, "stacked batch equals per-sequence forwards") {
    Rng rng(4);
    SuperNetwork net = build_supernetwork(tiny_config(), 12, rng);
    for (auto* a : net.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = rng.normal(0.0, 0.3);
    }
    Batch b = tiny_batch(3, 8, 6, 11);
    NoGradGuard ng;
    Tensor all = net.forward_logits(b);
    for (size_t i = 0; i < b.size(); ++i) {
        Tensor one = net.forward_logits({b[i]});
        for (int64_t r = 0; r < 8; ++r) {
            for (int64_t v = 0; v < 6; ++v) {
                CHECK(all.at(static_cast<int64_t>(i) * 8 + r, v) ==
                      doctest::Approx(one.at(r, v)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE_FIXTURE(PrecisionF64, "attention op matches a scripted dense oracle") {
    Rng rng(5);
    const int64_t l = 5, d = 6, heads = 2, dh = d / heads;
    Tensor q = Tensor::from({l, d}, rng.normal_vec(static_cast<size_t>(l * d), 0, 1));
    Tensor k = Tensor::from({l, d}, rng.normal_vec(static_cast<size_t>(l * d), 0, 1));
    Tensor v = Tensor::from({l, d}, rng.normal_vec(static_cast<size_t>(l * d), 0, 1));
    NoGradGuard ng;
    Tensor out = ops::attention(q, k, v, 1, heads, true);
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < l; ++i) {
            std::vector<double> scores(static_cast<size_t>(i + 1));
            double m = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (int64_t a = 0; a < dh; ++a) {
                    dot += q.at(i, h * dh + a) * k.at(j, h * dh + a);
                }
                scores[static_cast<size_t>(j)] = dot / std::sqrt(double(dh));
                m = std::max(m, scores[static_cast<size_t>(j)]);
            }
            double z = 0.0;
            for (auto& s : scores) {
                s = std::exp(s - m);
                z += s;
            }
            for (int64_t b = 0; b < dh; ++b) {
                double want = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    want += scores[static_cast<size_t>(j)] / z * v.at(j, h * dh + b);
                }
                CHECK(out.at(i, h * dh + b) ==
                      doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE_FIXTURE(PrecisionF64, "lm loss targets only masked positions") {
    Rng rng(6);
    ModelConfig c = tiny_config();
    SuperNetwork net = build_supernetwork(c, 12, rng);
    Batch b = tiny_batch(2, 8, 6, 13);
    // flipping a non-target, non-context token beyond every target cannot
    // change the loss; flipping a target token must
    NoGradGuard ng;
    double base = lm_loss(net, b).item();
    Batch flipped = b;
    // last token is a target; change it
    flipped[0].tokens.back() = (flipped[0].tokens.back() + 1) % 6;
    CHECK(lm_loss(net, flipped).item() != base);
    // zero mask everywhere -> contract error (no targets)
    Batch none = b;
    for (auto& s : none) {
        std::fill(s.target_mask.begin(), s.target_mask.end(), 0.0);
    }
    CHECK_THROWS(lm_loss(net, none));
}

TEST_CASE_FIXTURE(PrecisionF64, "lm loss gradient validates against finite differences") {
    Rng rng(7);
    ModelConfig c = tiny_config();
    SuperNetwork net = build_supernetwork(c, 12, rng);
    for (auto* a : net.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = rng.normal(0.0, 0.2);
    }
    Batch b = tiny_batch(2, 6, 6, 17);
    std::vector<Tensor> params = net.adapter_params(false);
    auto loss = [&]() { return lm_loss(net, b); };
    CHECK(finite_diff_check(loss, params, 1e-5) < 1e-4);
}

TEST_CASE_FIXTURE(PrecisionF64, "greedy exact match is 1 when the model is forced") {
    // craft a single-sequence evaluation where the target is what the model
    // already argmax-predicts: take the model's own greedy output as target
    Rng rng(8);
    ModelConfig c = tiny_config();
    SuperNetwork net = build_supernetwork(c, 12, rng);
    Batch b = tiny_batch(1, 8, 6, 19);
    NoGradGuard ng;
    Batch greedy = b;
    for (int64_t t = 4; t < 8; ++t) {
        Batch prefix = greedy;
        Tensor logits = net.forward_logits(prefix);
        int best = 0;
        for (int64_t v = 1; v < 6; ++v) {
            if (logits.at(t - 1, v) > logits.at(t - 1, best)) {
                best = static_cast<int>(v);
            }
        }
        greedy[0].tokens[static_cast<size_t>(t)] = best;
    }
    CHECK(greedy_exact_match(net, greedy) == 1.0);
    // and 0 when any target token differs from the greedy continuation
    Batch off = greedy;
    off[0].tokens[7] = (off[0].tokens[7] + 1) % 6;
    CHECK(greedy_exact_match(net, off) == 0.0);
}

TEST_CASE_FIXTURE(PrecisionF64, "all-gates-pruned supernetwork is bitwise the base model") {
    Rng rng1(21), rng2(21);
    SuperNetwork adapted = build_supernetwork(tiny_config(), 12, rng1);
    SuperNetwork pruned = build_supernetwork(tiny_config(), 12, rng2);
    for (auto* a : adapted.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = 0.5;
    }
    for (auto* a : pruned.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = 0.5;
        for (auto& s : a->gate_state) s = GateState::Pruned;
    }
    // a third, adapter-free reference: same rng stream gives same base
    Rng rng3(21);
    SuperNetwork bare = build_supernetwork(tiny_config(), 12, rng3);
    for (auto* a : bare.all_adapters()) {
        for (auto& s : a->gate_state) s = GateState::Pruned;
    }
    Batch b = tiny_batch(2, 8, 6, 23);
    NoGradGuard ng;
    Tensor lp = pruned.forward_logits(b);
    Tensor lb = bare.forward_logits(b);
    Tensor la = adapted.forward_logits(b);
    bool adapters_act = false;
    for (int64_t i = 0; i < lp.size(); ++i) {
        CHECK(lp.data()[static_cast<size_t>(i)] ==
              lb.data()[static_cast<size_t>(i)]);  // bitwise
        if (la.data()[static_cast<size_t>(i)] !=
            lp.data()[static_cast<size_t>(i)]) {
            adapters_act = true;
        }
    }
    CHECK(adapters_act);
}
