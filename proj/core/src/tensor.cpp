#include "alora/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace alora {

namespace {
thread_local Precision g_precision = Precision::f64;
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_node_counter{1};
}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

namespace detail {

uint64_t next_node_id() { return g_node_counter.fetch_add(1); }

NodePtr make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = next_node_id();
    return n;
}

void round_precision(std::vector<double>& v) {
    if (g_precision == Precision::f32) {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
}

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

void finish_value(Node& n, const char* op) {
    round_precision(n.value);
    check_finite(n.value, op);
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape) {
    auto n = numel(shape);
    return Tensor(detail::make_node(std::move(shape),
                                    std::vector<double>(static_cast<size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
    auto n = numel(shape);
    return Tensor(detail::make_node(std::move(shape),
                                    std::vector<double>(static_cast<size_t>(n), v)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (numel(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    detail::round_precision(data);
    return Tensor(detail::make_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::param(std::string name, Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node()->requires_grad = true;
    t.node()->needs_grad = true;
    t.node()->name = std::move(name);
    return t;
}

double Tensor::item() const {
    if (!is_scalar()) {
        throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    }
    return n_->value[0];
}

}  // namespace alora
