// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace memcycle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Json = nlohmann::json;

/// Exact value comparison that tolerates differing sizes.
bool same_values(const Vector& a, const Vector& b);
bool same_values(const Matrix& a, const Matrix& b);

Json vector_to_json(const Vector& v);
Vector vector_from_json(const Json& j);
/// Row-major nested arrays.
Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

/// Cosine similarity; 0 when either side has zero norm.
double cosine_or_zero(const Vector& a, const Vector& b);

inline double logistic(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// -log(sigmoid(x)).
inline double neg_log_sigmoid(double x) { return softplus(-x); }

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Seeded generator with platform-independent transforms (the standard
/// distributions are implementation-defined, mt19937_64 itself is not).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    bool bernoulli(double p) { return uniform() < p; }

    Vector normal_vector(Eigen::Index n, double scale = 1.0);
    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double scale = 1.0);

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace memcycle
