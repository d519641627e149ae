#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "alora/errors.hpp"

namespace alora {

// Numeric precision of forward/backward values. f32 keeps double storage but
// rounds every op result through IEEE single precision; f64 is full double.
// All oracle-backed tests run in f64.
enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;  // trainable leaf
    bool needs_grad = false;     // requires_grad or depends on one
    std::string name;            // parameter identifier for leaves
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;  // accumulates into parents' grad
    uint64_t id = 0;                      // creation order, used for topo sort
};

// Handle to a tape node. Copies are shallow; the tape is rebuilt every
// forward pass (define-by-run), only leaves persist across steps.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    // Named trainable leaf.
    static Tensor param(std::string name, Shape shape, std::vector<double> data);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return static_cast<int64_t>(n_->value.size()); }
    int64_t dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
    int64_t rows() const { return n_->shape.at(0); }
    int64_t cols() const { return n_->shape.at(1); }
    bool is_scalar() const { return n_->value.size() == 1; }

    std::span<const double> data() const { return n_->value; }
    std::span<double> mutable_data() { return n_->value; }
    double item() const;
    double at(int64_t i) const { return n_->value[static_cast<size_t>(i)]; }
    double at(int64_t i, int64_t j) const {
        return n_->value[static_cast<size_t>(i * cols() + j)];
    }

    bool requires_grad() const { return n_->requires_grad; }
    const std::string& name() const { return n_->name; }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// Thread-local switch: when disabled, ops record no tape state and the
// result carries no parents (read-only evaluation, safe to run concurrently).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {
NodePtr make_node(Shape shape, std::vector<double> value);
// Op epilogue: f32 rounding (if active) + finiteness scan.
void finish_value(Node& n, const char* op);
void round_precision(std::vector<double>& v);
void check_finite(std::span<const double> v, const char* what);
uint64_t next_node_id();
}  // namespace detail

}  // namespace alora
