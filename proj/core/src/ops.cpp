#include "alora/ops.hpp"

#include <cblas.h>

#include <cmath>
#include <limits>
#include <utility>

namespace alora::ops {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

bool any_needs_grad(std::span<const Tensor> ts) {
    if (!grad_enabled()) return false;
    for (const Tensor& t : ts) {
        if (t.node()->needs_grad) return true;
    }
    return false;
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents, std::function<void(Node&)> bp) {
    NodePtr n = detail::make_node(std::move(shape), std::move(value));
    detail::finish_value(*n, op);
    if (any_needs_grad(parents)) {
        n->needs_grad = true;
        n->parents.reserve(parents.size());
        for (Tensor& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(bp);
    }
    return Tensor(n);
}

void require_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) {
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got shape " +
                             shape_str(t.shape()));
    }
}

enum class Bcast { same, row, col, scalar };

Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Bcast::same;
    if (numel(b) == 1) return Bcast::scalar;
    if (a.size() == 2) {
        if ((b.size() == 2 && b[0] == 1 && b[1] == a[1]) ||
            (b.size() == 1 && b[0] == a[1])) {
            return Bcast::row;
        }
        if (b.size() == 2 && b[1] == 1 && b[0] == a[0]) return Bcast::col;
    }
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                         shape_str(b) + " do not conform");
}

// Elementwise binary op with limited broadcasting of b onto a's shape.
template <class Fwd, class DfA, class DfB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DfA dfa,
                 DfB dfb) {
    Bcast kind = broadcast_kind(a.shape(), b.shape(), op);
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    const int64_t n = a.size();
    const int64_t cols = (kind == Bcast::row || kind == Bcast::col) ? a.cols() : 0;

    auto bindex = [kind, cols](int64_t i) -> int64_t {
        switch (kind) {
            case Bcast::same: return i;
            case Bcast::scalar: return 0;
            case Bcast::row: return i % cols;
            case Bcast::col: return i / cols;
        }
        return 0;
    };

    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] =
            fwd(av[static_cast<size_t>(i)], bv[static_cast<size_t>(bindex(i))]);
    }

    auto an = a.node();
    auto bn = b.node();
    return make_op(op, a.shape(), std::move(out), {a, b},
                   [an, bn, bindex, n, dfa, dfb](Node& self) {
                       if (an->needs_grad) {
                           ensure_grad(*an);
                           for (int64_t i = 0; i < n; ++i) {
                               auto si = static_cast<size_t>(i);
                               an->grad[si] +=
                                   self.grad[si] *
                                   dfa(an->value[si],
                                       bn->value[static_cast<size_t>(bindex(i))]);
                           }
                       }
                       if (bn->needs_grad) {
                           ensure_grad(*bn);
                           for (int64_t i = 0; i < n; ++i) {
                               auto si = static_cast<size_t>(i);
                               auto bi = static_cast<size_t>(bindex(i));
                               bn->grad[bi] +=
                                   self.grad[si] *
                                   dfb(an->value[si], bn->value[bi]);
                           }
                       }
                   });
}

// Elementwise unary op given value-and-derivative callables.
template <class Fwd, class Df>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Df df) {
    const auto& av = a.node()->value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto an = a.node();
    return make_op(op, a.shape(), std::move(out), {a}, [an, df](Node& self) {
        ensure_grad(*an);
        for (size_t i = 0; i < self.value.size(); ++i) {
            an->grad[i] += self.grad[i] * df(an->value[i], self.value[i]);
        }
    });
}

void dgemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
           int64_t lda, const double* b, int64_t ldb, double beta, double* c,
           int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
                static_cast<int>(ldc));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    dgemm(false, false, m, n, k, a.data().data(), k, b.data().data(), n, 0.0,
          out.data(), n);
    auto an = a.node();
    auto bn = b.node();
    return make_op("matmul", {m, n}, std::move(out), {a, b},
                   [an, bn, m, n, k](Node& self) {
                       if (an->needs_grad) {
                           ensure_grad(*an);
                           // dA += dC * B^T
                           dgemm(false, true, m, k, n, self.grad.data(), n,
                                 bn->value.data(), n, 1.0, an->grad.data(), k);
                       }
                       if (bn->needs_grad) {
                           ensure_grad(*bn);
                           // dB += A^T * dC
                           dgemm(true, false, k, n, m, an->value.data(), k,
                                 self.grad.data(), n, 1.0, bn->grad.data(), n);
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int64_t r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) {
            out[static_cast<size_t>(j * r + i)] = a.at(i, j);
        }
    }
    auto an = a.node();
    return make_op("transpose", {c, r}, std::move(out), {a}, [an, r, c](Node& self) {
        ensure_grad(*an);
        for (int64_t i = 0; i < r; ++i) {
            for (int64_t j = 0; j < c; ++j) {
                an->grad[static_cast<size_t>(i * c + j)] +=
                    self.grad[static_cast<size_t>(j * r + i)];
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        "scale", a, [c](double x) { return c * x; },
        [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        "add_scalar", a, [c](double x) { return x + c; },
        [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor reciprocal(const Tensor& a) {
    return unary_op(
        "reciprocal", a, [](double x) { return 1.0 / x; },
        [](double, double y) { return -y * y; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        "clamp", a,
        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor softmax_rows(const Tensor& a) {
    require_2d(a, "softmax_rows");
    const int64_t r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i) {
        const double* row = a.data().data() + i * c;
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = std::exp(row[j] - mx);
            out[static_cast<size_t>(i * c + j)] = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] /= z;
    }
    auto an = a.node();
    return make_op("softmax_rows", a.shape(), std::move(out), {a},
                   [an, r, c](Node& self) {
                       ensure_grad(*an);
                       for (int64_t i = 0; i < r; ++i) {
                           const double* y = self.value.data() + i * c;
                           const double* dy = self.grad.data() + i * c;
                           double dot = 0.0;
                           for (int64_t j = 0; j < c; ++j) dot += y[j] * dy[j];
                           double* dx = an->grad.data() + i * c;
                           for (int64_t j = 0; j < c; ++j) {
                               dx[j] += y[j] * (dy[j] - dot);
                           }
                       }
                   });
}

Tensor layernorm_rows(const Tensor& a, double eps) {
    require_2d(a, "layernorm_rows");
    const int64_t r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r * c));
    std::vector<double> inv_std(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        const double* row = a.data().data() + i * c;
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < c; ++j) {
            out[static_cast<size_t>(i * c + j)] = (row[j] - mean) * is;
        }
    }
    auto an = a.node();
    return make_op("layernorm_rows", a.shape(), std::move(out), {a},
                   [an, r, c, inv_std = std::move(inv_std)](Node& self) {
                       ensure_grad(*an);
                       for (int64_t i = 0; i < r; ++i) {
                           const double* y = self.value.data() + i * c;
                           const double* dy = self.grad.data() + i * c;
                           double mdy = 0.0, mydy = 0.0;
                           for (int64_t j = 0; j < c; ++j) {
                               mdy += dy[j];
                               mydy += y[j] * dy[j];
                           }
                           mdy /= static_cast<double>(c);
                           mydy /= static_cast<double>(c);
                           double is = inv_std[static_cast<size_t>(i)];
                           double* dx = an->grad.data() + i * c;
                           for (int64_t j = 0; j < c; ++j) {
                               dx[j] += is * (dy[j] - mdy - y[j] * mydy);
                           }
                       }
                   });
}

Tensor col_scale(const Tensor& a, const Tensor& v) {
    require_2d(a, "col_scale");
    if (v.size() != a.cols()) {
        throw DimensionError("col_scale: vector length " + std::to_string(v.size()) +
                             " != column count " + std::to_string(a.cols()));
    }
    const int64_t r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) {
            out[static_cast<size_t>(i * c + j)] = a.at(i, j) * v.at(j);
        }
    }
    auto an = a.node();
    auto vn = v.node();
    return make_op("col_scale", a.shape(), std::move(out), {a, v},
                   [an, vn, r, c](Node& self) {
                       if (an->needs_grad) {
                           ensure_grad(*an);
                           for (int64_t i = 0; i < r; ++i) {
                               for (int64_t j = 0; j < c; ++j) {
                                   an->grad[static_cast<size_t>(i * c + j)] +=
                                       self.grad[static_cast<size_t>(i * c + j)] *
                                       vn->value[static_cast<size_t>(j)];
                               }
                           }
                       }
                       if (vn->needs_grad) {
                           ensure_grad(*vn);
                           for (int64_t j = 0; j < c; ++j) {
                               double g = 0.0;
                               for (int64_t i = 0; i < r; ++i) {
                                   g += self.grad[static_cast<size_t>(i * c + j)] *
                                        an->value[static_cast<size_t>(i * c + j)];
                               }
                               vn->grad[static_cast<size_t>(j)] += g;
                           }
                       }
                   });
}

Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
    require_2d(a, "slice_rows");
    if (start < 0 || len < 0 || start + len > a.rows()) {
        throw DimensionError("slice_rows: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of " +
                             std::to_string(a.rows()) + " rows");
    }
    const int64_t c = a.cols();
    std::vector<double> out(a.data().begin() + start * c,
                            a.data().begin() + (start + len) * c);
    auto an = a.node();
    return make_op("slice_rows", {len, c}, std::move(out), {a},
                   [an, start, c](Node& self) {
                       ensure_grad(*an);
                       for (size_t i = 0; i < self.grad.size(); ++i) {
                           an->grad[static_cast<size_t>(start * c) + i] += self.grad[i];
                       }
                   });
}

Tensor slice_cols(const Tensor& a, int64_t start, int64_t len) {
    require_2d(a, "slice_cols");
    if (start < 0 || len < 0 || start + len > a.cols()) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of " +
                             std::to_string(a.cols()) + " columns");
    }
    const int64_t r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r * len));
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < len; ++j) {
            out[static_cast<size_t>(i * len + j)] = a.at(i, start + j);
        }
    }
    auto an = a.node();
    return make_op("slice_cols", {r, len}, std::move(out), {a},
                   [an, start, len, r, c](Node& self) {
                       ensure_grad(*an);
                       for (int64_t i = 0; i < r; ++i) {
                           for (int64_t j = 0; j < len; ++j) {
                               an->grad[static_cast<size_t>(i * c + start + j)] +=
                                   self.grad[static_cast<size_t>(i * len + j)];
                           }
                       }
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty part list");
    const int64_t c = parts[0].cols();
    int64_t rows = 0;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != c) {
            throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
        }
        rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(rows * c));
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<Tensor> ps(parts.begin(), parts.end());
    std::vector<NodePtr> pn;
    pn.reserve(ps.size());
    for (const Tensor& p : ps) pn.push_back(p.node());
    return make_op("concat_rows", {rows, c}, std::move(out), std::move(ps),
                   [pn = std::move(pn)](Node& self) {
                       size_t off = 0;
                       for (const NodePtr& p : pn) {
                           if (p->needs_grad) {
                               ensure_grad(*p);
                               for (size_t i = 0; i < p->value.size(); ++i) {
                                   p->grad[i] += self.grad[off + i];
                               }
                           }
                           off += p->value.size();
                       }
                   });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty part list");
    const int64_t r = parts[0].rows();
    int64_t cols = 0;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != r) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
        }
        cols += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(r * cols));
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t pc = p.cols();
        for (int64_t i = 0; i < r; ++i) {
            for (int64_t j = 0; j < pc; ++j) {
                out[static_cast<size_t>(i * cols + off + j)] = p.at(i, j);
            }
        }
        off += pc;
    }
    std::vector<Tensor> ps(parts.begin(), parts.end());
    std::vector<NodePtr> pn;
    pn.reserve(ps.size());
    for (const Tensor& p : ps) pn.push_back(p.node());
    return make_op("concat_cols", {r, cols}, std::move(out), std::move(ps),
                   [pn = std::move(pn), r, cols](Node& self) {
                       int64_t off = 0;
                       for (const NodePtr& p : pn) {
                           const int64_t pc = p->shape[1];
                           if (p->needs_grad) {
                               ensure_grad(*p);
                               for (int64_t i = 0; i < r; ++i) {
                                   for (int64_t j = 0; j < pc; ++j) {
                                       p->grad[static_cast<size_t>(i * pc + j)] +=
                                           self.grad[static_cast<size_t>(i * cols + off +
                                                                         j)];
                                   }
                               }
                           }
                           off += pc;
                       }
                   });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
    require_2d(table, "gather_rows");
    const int64_t c = table.cols();
    std::vector<double> out;
    out.reserve(idx.size() * static_cast<size_t>(c));
    for (int i : idx) {
        if (i < 0 || i >= table.rows()) {
            throw ContractError("gather_rows: index " + std::to_string(i) +
                                " out of " + std::to_string(table.rows()) + " rows");
        }
        auto begin = table.data().begin() + static_cast<int64_t>(i) * c;
        out.insert(out.end(), begin, begin + c);
    }
    auto tn = table.node();
    return make_op("gather_rows", {static_cast<int64_t>(idx.size()), c},
                   std::move(out), {table}, [tn, idx, c](Node& self) {
                       ensure_grad(*tn);
                       for (size_t k = 0; k < idx.size(); ++k) {
                           double* dst = tn->grad.data() +
                                         static_cast<int64_t>(idx[k]) * c;
                           const double* src = self.grad.data() +
                                               static_cast<int64_t>(k) * c;
                           for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                   });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t nseq,
                 int64_t heads, bool causal) {
    require_2d(q, "attention");
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("attention: q/k/v shapes differ");
    }
    const int64_t rows = q.rows(), d = q.cols();
    if (nseq < 1 || rows % nseq != 0) {
        throw DimensionError("attention: rows " + std::to_string(rows) +
                             " not divisible into " + std::to_string(nseq) +
                             " sequences");
    }
    if (heads < 1 || d % heads != 0) {
        throw DimensionError("attention: heads must divide width");
    }
    const int64_t l = rows / nseq;
    const int64_t dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();

    // Cached attention weights, one l x l block per (sequence, head);
    // masked entries are exact zeros.
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<size_t>(nseq * heads * l * l), 0.0);
    std::vector<double> out(static_cast<size_t>(rows * d), 0.0);

    for (int64_t s = 0; s < nseq; ++s) {
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t off = h * dh;
            double* p = probs->data() + (s * heads + h) * l * l;
            for (int64_t i = 0; i < l; ++i) {
                const double* qi = qd + (s * l + i) * d + off;
                const int64_t jmax = causal ? i + 1 : l;
                double* pi = p + i * l;
                double m = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < jmax; ++j) {
                    const double* kj = kd + (s * l + j) * d + off;
                    double dot = 0.0;
                    for (int64_t a = 0; a < dh; ++a) dot += qi[a] * kj[a];
                    pi[j] = dot * inv;
                    m = std::max(m, pi[j]);
                }
                double z = 0.0;
                for (int64_t j = 0; j < jmax; ++j) {
                    pi[j] = std::exp(pi[j] - m);
                    z += pi[j];
                }
                double* oi = out.data() + (s * l + i) * d + off;
                for (int64_t j = 0; j < jmax; ++j) {
                    pi[j] /= z;
                    const double* vj = vd + (s * l + j) * d + off;
                    for (int64_t b = 0; b < dh; ++b) oi[b] += pi[j] * vj[b];
                }
            }
        }
    }

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return make_op(
        "attention", q.shape(), std::move(out), {q, k, v},
        [qn, kn, vn, probs, nseq, heads, l, dh, d, inv, causal](Node& self) {
            if (qn->needs_grad) ensure_grad(*qn);
            if (kn->needs_grad) ensure_grad(*kn);
            if (vn->needs_grad) ensure_grad(*vn);
            std::vector<double> dp(static_cast<size_t>(l));
            for (int64_t s = 0; s < nseq; ++s) {
                for (int64_t h = 0; h < heads; ++h) {
                    const int64_t off = h * dh;
                    const double* p = probs->data() + (s * heads + h) * l * l;
                    for (int64_t i = 0; i < l; ++i) {
                        const double* go = self.grad.data() + (s * l + i) * d + off;
                        const double* pi = p + i * l;
                        const int64_t jmax = causal ? i + 1 : l;
                        // dP, then the softmax Jacobian product dS
                        double dot_pp = 0.0;
                        for (int64_t j = 0; j < jmax; ++j) {
                            const double* vj =
                                vn->value.data() + (s * l + j) * d + off;
                            double g = 0.0;
                            for (int64_t b = 0; b < dh; ++b) g += go[b] * vj[b];
                            dp[static_cast<size_t>(j)] = g;
                            dot_pp += g * pi[j];
                        }
                        for (int64_t j = 0; j < jmax; ++j) {
                            const double ds =
                                pi[j] * (dp[static_cast<size_t>(j)] - dot_pp) * inv;
                            if (qn->needs_grad) {
                                double* gq =
                                    qn->grad.data() + (s * l + i) * d + off;
                                const double* kj =
                                    kn->value.data() + (s * l + j) * d + off;
                                for (int64_t a = 0; a < dh; ++a) gq[a] += ds * kj[a];
                            }
                            if (kn->needs_grad) {
                                double* gk =
                                    kn->grad.data() + (s * l + j) * d + off;
                                const double* qi =
                                    qn->value.data() + (s * l + i) * d + off;
                                for (int64_t a = 0; a < dh; ++a) gk[a] += ds * qi[a];
                            }
                            if (vn->needs_grad) {
                                double* gv =
                                    vn->grad.data() + (s * l + j) * d + off;
                                for (int64_t b = 0; b < dh; ++b) {
                                    gv[b] += pi[j] * go[b];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    auto an = a.node();
    return make_op("sum", {1}, {s}, {a}, [an](Node& self) {
        ensure_grad(*an);
        for (double& g : an->grad) g += self.grad[0];
    });
}

Tensor sum_squares(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    auto an = a.node();
    return make_op("sum_squares", {1}, {s}, {a}, [an](Node& self) {
        ensure_grad(*an);
        for (size_t i = 0; i < an->value.size(); ++i) {
            an->grad[i] += 2.0 * an->value[i] * self.grad[0];
        }
    });
}

Tensor frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    double f = std::sqrt(s);
    auto an = a.node();
    return make_op("frobenius_norm", {1}, {f}, {a}, [an, f](Node& self) {
        ensure_grad(*an);
        if (f == 0.0) return;  // subgradient 0 at the origin
        for (size_t i = 0; i < an->value.size(); ++i) {
            an->grad[i] += self.grad[0] * an->value[i] / f;
        }
    });
}

Tensor trace(const Tensor& a) {
    require_2d(a, "trace");
    if (a.rows() != a.cols()) {
        throw DimensionError("trace: non-square shape " + shape_str(a.shape()));
    }
    const int64_t n = a.rows();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += a.at(i, i);
    auto an = a.node();
    return make_op("trace", {1}, {s}, {a}, [an, n](Node& self) {
        ensure_grad(*an);
        for (int64_t i = 0; i < n; ++i) {
            an->grad[static_cast<size_t>(i * n + i)] += self.grad[0];
        }
    });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& weights) {
    require_2d(logits, "cross_entropy_logits");
    const int64_t n = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n ||
        static_cast<int64_t>(weights.size()) != n) {
        throw DimensionError("cross_entropy_logits: " + std::to_string(n) +
                             " logit rows vs " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(weights.size()) +
                             " weights");
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum <= 0.0) {
        throw ContractError("cross_entropy_logits: no weighted positions");
    }
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (weights[static_cast<size_t>(i)] == 0.0) continue;
        int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v) {
            throw ContractError("cross_entropy_logits: target id " + std::to_string(t) +
                                " out of vocab " + std::to_string(v));
        }
        const double* row = logits.data().data() + i * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        loss += weights[static_cast<size_t>(i)] *
                (std::log(z) + mx - row[t]);
    }
    loss /= wsum;
    auto ln = logits.node();
    return make_op("cross_entropy_logits", {1}, {loss}, {logits},
                   [ln, targets, weights, wsum, n, v](Node& self) {
                       ensure_grad(*ln);
                       for (int64_t i = 0; i < n; ++i) {
                           double w = weights[static_cast<size_t>(i)];
                           if (w == 0.0) continue;
                           const double* row = ln->value.data() + i * v;
                           double* drow = ln->grad.data() + i * v;
                           double mx = row[0];
                           for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                           double z = 0.0;
                           for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                           double coeff = self.grad[0] * w / wsum;
                           for (int64_t j = 0; j < v; ++j) {
                               drow[j] += coeff * (std::exp(row[j] - mx) / z);
                           }
                           drow[targets[static_cast<size_t>(i)]] -= coeff;
                       }
                   });
}

}  // namespace alora::ops
