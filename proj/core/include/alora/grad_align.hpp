#pragma once

#include <span>
#include <vector>

#include "alora/errors.hpp"

namespace alora {

enum class GAMode { soft, hard, off };

struct GAConfig {
    double alpha = 0.5;
    GAMode mode = GAMode::hard;
    double epsilon_norm = 1e-12;

    void validate() const {
        if (alpha < 0.0 || alpha > 1.0) {
            throw ConfigError("GAConfig.alpha must lie in [0, 1]");
        }
        if (epsilon_norm <= 0.0) {
            throw ConfigError("GAConfig.epsilon_norm must be positive");
        }
    }
};

struct GradAngle {
    double cos = 1.0;
    double degrees = 0.0;
    bool degenerate = false;  // a norm fell below epsilon_norm
};

// cos = (g_aux . g_main)/(|g_aux| |g_main|), clamped to [-1, 1].
GradAngle grad_angle(std::span<const double> g_main, std::span<const double> g_aux,
                     double epsilon_norm = 1e-12);

// Signed vector projection of g_aux onto g_main.
std::vector<double> project(std::span<const double> g_aux,
                            std::span<const double> g_main,
                            double epsilon_norm = 1e-12);

struct GAResult {
    std::vector<double> grad;   // always a scalar multiple of g_main
    double coefficient = 1.0;   // that scalar
    double degrees = 0.0;
    bool degenerate = false;
};

// soft: (1-alpha) g_main + alpha proj(g_aux -> g_main) always;
// hard: same blend for angles <= 90 deg, plain g_main otherwise;
// off / degenerate norms: g_main unchanged (bitwise).
GAResult combine(std::span<const double> g_main, std::span<const double> g_aux,
                 const GAConfig& config);

}  // namespace alora
