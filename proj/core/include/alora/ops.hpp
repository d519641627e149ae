#pragma once

#include <span>
#include <vector>

#include "alora/tensor.hpp"

// Differentiable primitives. Every op records enough tape state to
// backpropagate unless grad recording is disabled (NoGradGuard) or no
// operand needs gradients. Shapes are checked loudly; broadcasting is
// limited to a scalar operand, a (1,d) row against (n,d), or an (n,1)
// column against (n,d).
namespace alora::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Row-wise softmax over the last axis of a 2-D tensor.
Tensor softmax_rows(const Tensor& a);
// Row-wise mean/variance normalization (no affine part), eps inside sqrt.
Tensor layernorm_rows(const Tensor& a, double eps = 1e-5);

// Diagonal scale: column j of a multiplied by v[j]; differentiable in both.
Tensor col_scale(const Tensor& a, const Tensor& v);

Tensor slice_rows(const Tensor& a, int64_t start, int64_t len);
Tensor slice_cols(const Tensor& a, int64_t start, int64_t len);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// Row gather from a 2-D table; backward scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);

// Fused scaled-dot-product attention over `nseq` stacked sequences. q, k, v
// are (nseq*l) x d with `heads` interleaved head blocks of width d/heads;
// per sequence and head: softmax(Q Kᵀ / sqrt(d/heads) [+ causal mask]) V.
// One tape node; the backward replays the cached attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t nseq,
                 int64_t heads, bool causal);

Tensor sum(const Tensor& a);
Tensor sum_squares(const Tensor& a);
Tensor frobenius_norm(const Tensor& a);
Tensor trace(const Tensor& a);

// Mean token cross-entropy: rows of logits are positions, targets are class
// ids, weights select/weight positions (typically 0/1); normalized by the
// weight total.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& weights);

}  // namespace alora::ops
