#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace alora {

// Deterministic RNG wrapper. Streams derived from (seed, tag) are
// independent and reproducible across runs of the same binary.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    static Rng derive(uint64_t seed, const std::string& tag) {
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : tag) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return Rng(seed ^ h);
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
    }

    std::vector<double> normal_vec(size_t n, double mean, double stddev) {
        std::vector<double> v(n);
        for (double& x : v) x = normal(mean, stddev);
        return v;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace alora
