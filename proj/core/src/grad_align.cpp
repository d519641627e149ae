#include "alora/grad_align.hpp"

#include <cmath>
#include <numbers>

namespace alora {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace

GradAngle grad_angle(std::span<const double> g_main, std::span<const double> g_aux,
                     double epsilon_norm) {
    if (g_main.size() != g_aux.size()) {
        throw DimensionError("grad_angle: vector lengths differ, " +
                             std::to_string(g_main.size()) + " vs " +
                             std::to_string(g_aux.size()));
    }
    GradAngle out;
    double nm = norm(g_main), na = norm(g_aux);
    if (nm <= epsilon_norm || na <= epsilon_norm) {
        out.degenerate = true;
        return out;
    }
    double c = dot(g_aux, g_main) / (na * nm);
    out.cos = std::min(1.0, std::max(-1.0, c));
    out.degrees = std::acos(out.cos) * 180.0 / std::numbers::pi;
    return out;
}

std::vector<double> project(std::span<const double> g_aux,
                            std::span<const double> g_main, double epsilon_norm) {
    GradAngle ang = grad_angle(g_main, g_aux, epsilon_norm);
    std::vector<double> out(g_main.size(), 0.0);
    if (ang.degenerate) return out;
    // |g_aux| cos(theta) / |g_main| * g_main == (g_aux.g_main)/(g_main.g_main) g_main
    double coeff = norm(g_aux) * ang.cos / norm(g_main);
    for (size_t i = 0; i < g_main.size(); ++i) out[i] = coeff * g_main[i];
    return out;
}

GAResult combine(std::span<const double> g_main, std::span<const double> g_aux,
                 const GAConfig& config) {
    config.validate();
    if (g_main.size() != g_aux.size()) {
        throw DimensionError("combine: vector lengths differ");
    }
    GAResult out;
    out.grad.assign(g_main.begin(), g_main.end());
    if (config.mode == GAMode::off) return out;

    GradAngle ang = grad_angle(g_main, g_aux, config.epsilon_norm);
    out.degrees = ang.degrees;
    out.degenerate = ang.degenerate;
    if (ang.degenerate) return out;

    if (config.mode == GAMode::hard && ang.degrees > 90.0) {
        return out;  // opposing projection dropped, raw main gradient kept
    }
    double nm = norm(g_main);
    double proj_coeff = norm(g_aux) * ang.cos / nm;
    out.coefficient = (1.0 - config.alpha) + config.alpha * proj_coeff;
    for (size_t i = 0; i < out.grad.size(); ++i) {
        out.grad[i] = out.coefficient * g_main[i];
    }
    return out;
}

}  // namespace alora
