// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/linalg.hpp"
#include "memcycle/memory_core.hpp"
#include "memcycle/metrics.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace memcycle {

inline constexpr std::size_t kDefaultGateHidden = 32;
inline constexpr std::size_t kDefaultTopK = 10;

/// theta_r: g = softmax(W2 sigmoid(W1 [h_s; h_m] + b1) + b2).
struct GateParams {
    Matrix w1;  // H x 2D, columns [0, D) act on the state, [D, 2D) on the memory
    Vector b1;
    Matrix w2;  // n x H
    Vector b2;

    static GateParams zeros(std::size_t dim, std::size_t metrics, std::size_t hidden = kDefaultGateHidden);
    static GateParams random(std::size_t dim, std::size_t metrics, Rng& rng, double scale = 0.1,
                             std::size_t hidden = kDefaultGateHidden);

    std::size_t dim() const { return static_cast<std::size_t>(w1.cols() / 2); }
    std::size_t hidden() const { return static_cast<std::size_t>(w1.rows()); }
    std::size_t metrics() const { return static_cast<std::size_t>(w2.rows()); }
    std::size_t parameter_count() const;
    bool all_finite() const;
    /// Throws ContractError on inconsistent shapes.
    void check_shapes() const;

    /// Flat view in the order w1 (column-major), b1, w2 (column-major), b2.
    Vector flatten() const;
    void unflatten(const Vector& flat);

    Json to_json() const;
    static GateParams from_json(const Json& j);

    friend bool operator==(const GateParams& a, const GateParams& b);
};

/// Mixture weights for one (state, memory) pair. Throws on non-finite parameters.
Vector gate_forward(const GateParams& params, const Vector& state, const Vector& memory);

/// f = g . d.
double match_score(const Vector& weights, const Vector& metrics);
double match_score(const GateParams& params, const Vector& state, const Vector& memory, const Vector& metrics);

struct RankedEntry {
    MemoryId id = 0;
    double score = 0.0;
    int step = 0;
};

struct RankedMemories {
    std::vector<RankedEntry> entries;
    int query_step = 0;

    std::vector<MemoryId> ids() const;
    std::vector<MemoryId> top(std::size_t k) const;
    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

/// Sorts descending by score; ties go to the higher step, then the higher id.
RankedMemories rank_by_scores(const MemoryStore& store, std::span<const double> scores, int query_step);

RankedMemories rank(const GateParams& params, const MetricSuite& suite, const QueryState& query,
                    const MemoryStore& store);
/// Ranking with a fixed state-independent weight vector over the suite's metrics.
RankedMemories rank_with_weights(const Vector& weights, const MetricSuite& suite, const QueryState& query,
                                 const MemoryStore& store);

struct PairWeighting {
    double gamma = 0.5;
    std::vector<int> exponents;       // v_j
    std::vector<double> magnitudes;   // gamma^v_j / sum gamma^v
    std::vector<int> orientations;    // sign(t - 2j + 1)
    std::vector<double> weights;      // orientation * magnitude

    std::size_t size() const { return weights.size(); }
};

/// Pair j (1-based) matches rank j with rank t - j + 1. Empty for t < 2.
PairWeighting pair_weights(std::size_t t, double gamma);

/// One retrieval event of a successful trajectory, memories listed in the
/// observed rank order.
struct RankingSample {
    Vector query;     // D
    Matrix memories;  // t x D
    Matrix metrics;   // t x n
};

/// Samples that came from one trajectory.
struct RankingGroup {
    std::vector<RankingSample> samples;
};

/// Weighted pairwise logistic loss of one sample; 0 when t < 2.
double sample_loss(const GateParams& params, const RankingSample& sample, double gamma);
/// Mean over groups of the mean sample loss; groups without pairs are skipped.
double retrieval_loss(const GateParams& params, std::span<const RankingGroup> groups, double gamma);
/// Loss together with its analytic gradient (same layout as GateParams).
double retrieval_loss_and_gradient(const GateParams& params, std::span<const RankingGroup> groups, double gamma,
                                   GateParams& gradient);

struct GateTrainingOptions {
    double learning_rate = 0.1;
    std::size_t steps = 100;
    double gamma = 0.5;
    /// Groups per step; 0 trains full-batch.
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
    std::optional<std::string> loss_log_path;
};

struct GateTrainingResult {
    GateParams params;
    std::vector<double> losses;
};

/// Plain gradient descent. Throws DivergenceError when the loss turns non-finite.
GateTrainingResult train_gate(const GateParams& initial, std::span<const RankingGroup> groups,
                              const GateTrainingOptions& options);

/// Writes "step,loss" rows.
void write_loss_csv(const std::string& path, std::span<const double> losses);

/// Kendall tau-a between two score lists of equal length; pairs tied in
/// either list count as neither concordant nor discordant.
double kendall_tau(std::span<const double> a, std::span<const double> b);

}  // namespace memcycle
