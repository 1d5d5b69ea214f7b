// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/environment.hpp"
#include "memcycle/gate.hpp"
#include "memcycle/memory_core.hpp"
#include "memcycle/metrics.hpp"
#include "memcycle/storage.hpp"
#include "memcycle/utilization.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace memcycle {

struct StageHyper {
    double learning_rate = 1e-4;
    std::size_t batch_size = 16;

    friend bool operator==(const StageHyper&, const StageHyper&) = default;
};

struct OptimizationConfig {
    double success_threshold = 0.5;  // beta_r
    double storage_threshold = 0.5;  // beta_s
    double gamma = 0.5;
    double gate_learning_rate = 0.1;  // alpha_r
    std::size_t gate_steps = 200;
    std::size_t gate_batch = 0;
    StageHyper sft{1e-4, 16};
    StageHyper dpo{1e-4, 16};
    double dpo_beta = 0.1;
    std::size_t reflection_size = 40;
    std::size_t reflection_lines = 2;
    std::size_t hint_cap = kDefaultHintCap;
    std::size_t sample_batch = 30;  // n
    std::size_t epochs = 5;         // L
    std::uint64_t seed = 1;

    static OptimizationConfig off_policy_defaults();
    /// SFT lr 5e-4, reflection size 15, one gate step per epoch.
    static OptimizationConfig on_policy_defaults();
    void validate() const;

    Json to_json() const;
    /// Keys absent from `j` keep the values of `base`.
    static OptimizationConfig from_json(const Json& j, const OptimizationConfig& base);

    friend bool operator==(const OptimizationConfig&, const OptimizationConfig&) = default;
};

/// theta = {theta_s, theta_r, theta_u}, versioned.
struct PolicyBundle {
    GateParams gate;
    UtilizationPolicy utilization;
    TaskPrompt task_prompt;
    int version = 0;
    /// Last completed stage; "complete" when a pipeline finished.
    std::string stage = "initial";

    /// Writes gate.json, utilization.json, task_prompt.json and manifest.json.
    void save(const std::string& dir) const;
    static PolicyBundle load(const std::string& dir);

    friend bool operator==(const PolicyBundle& a, const PolicyBundle& b);
};

std::vector<Trajectory> filter_successful(std::span<const Trajectory> trajectories, double threshold);

/// One group per trajectory, one sample per step whose ranking has at least
/// two entries; the query is re-embedded from the step's state text.
std::vector<RankingGroup> build_ranking_groups(std::span<const Trajectory> trajectories,
                                               const EmbeddingProvider& embedder, const MetricSuite& suite);

/// Services the pipelines draw on.
struct OptimizationContext {
    std::shared_ptr<const EmbeddingProvider> embedder;
    std::shared_ptr<const MetricSuite> suite;
    const EndpointRegistry* endpoints = nullptr;
    std::string expert_endpoint = "expert";
    std::string reflector_endpoint = "reflector";
    FineTuneHook* hook = nullptr;
    /// Datasets and bundle snapshots go here; empty keeps everything in memory.
    std::string output_dir;
    std::function<void(const std::string&)> warn;
};

struct StageReport {
    std::size_t trajectories = 0;
    std::size_t successes = 0;
    std::vector<double> gate_losses;
    std::size_t sft_records = 0;
    std::size_t sft_skipped = 0;
    std::size_t dpo_records = 0;
    std::size_t dpo_skipped = 0;
    std::vector<std::string> positive_hints;
    std::vector<std::string> negative_hints;
    std::vector<std::string> warnings;
    std::string sft_jsonl;
    std::string dpo_jsonl;
};

struct OffPolicyResult {
    PolicyBundle bundle;
    StageReport report;
};

/// gate training on the successful subset, SFT export + hook, DPO export +
/// hook, then reflection into the task prompt. A failing stage persists the
/// partial bundle (stage marker = last completed stage) and rethrows.
OffPolicyResult off_policy_optimize(std::span<const Trajectory> log, const PolicyBundle& bundle,
                                    const OptimizationConfig& config, const OptimizationContext& context);

/// Samples n trajectories under a bundle; epoch selects the task draw.
using TrajectorySampler =
    std::function<std::vector<Trajectory>(const PolicyBundle& bundle, std::size_t epoch, std::size_t n)>;

struct EpochMetrics {
    std::size_t epoch = 0;
    int bundle_version = 0;
    std::size_t trajectories = 0;
    double mean_reward = 0.0;
    double mean_steps = 0.0;
    double success_rate = 0.0;
    bool discarded = false;

    friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct OnPolicyResult {
    PolicyBundle bundle;
    /// Entry l measures trajectories sampled with the epoch-l bundle, l = 0..L.
    std::vector<EpochMetrics> metrics;
    std::vector<StageReport> reports;
    std::vector<Trajectory> trajectories;
};

OnPolicyResult on_policy_optimize(const TrajectorySampler& sampler, const PolicyBundle& bundle,
                                  const OptimizationConfig& config, const OptimizationContext& context);

std::string epoch_metrics_csv(std::span<const EpochMetrics> metrics);

/// Memory-policy and agent wiring for sampling episodes.
struct RunnerConfig {
    /// adaptive, full, long-term, short-term or fixed-weight.
    std::string memory_policy = "adaptive";
    AdaptiveMemoryConfig adaptive;
    AgentConfig agent;
    std::size_t short_term_window = 3;
    Vector fixed_alpha = Vector::Unit(3, 0);
    std::size_t top_k = kDefaultTopK;
    std::size_t parallelism = 1;
    double success_threshold = 0.5;
    std::uint64_t seed = 1;
    bool record_timings = false;
};

class EpisodeRunner {
public:
    EpisodeRunner(std::vector<QaTask> tasks, std::shared_ptr<const Corpus> corpus, const EndpointRegistry& endpoints,
                  std::string actor, std::string extractor, std::shared_ptr<const EmbeddingProvider> embedder,
                  std::shared_ptr<const MetricSuite> suite, std::shared_ptr<const ImportanceScorer> importance,
                  RunnerConfig config);

    std::unique_ptr<MemoryPolicy> make_memory(const PolicyBundle& bundle) const;
    /// Trajectory i of an epoch uses its own seed, so output does not depend
    /// on parallelism as long as the endpoints are pure functions of their input.
    std::vector<Trajectory> sample(const PolicyBundle& bundle, std::size_t epoch, std::size_t n) const;
    /// Every task once, in file order.
    std::vector<Trajectory> run_all(const PolicyBundle& bundle) const;

    TrajectorySampler sampler() const;
    const std::vector<QaTask>& tasks() const { return tasks_; }

private:
    Trajectory run_one(const PolicyBundle& bundle, const QaTask& task, std::uint64_t seed, std::string id) const;
    std::vector<Trajectory> run_indexed(const PolicyBundle& bundle, const std::vector<std::size_t>& indices,
                                        std::size_t epoch) const;

    std::vector<QaTask> tasks_;
    std::shared_ptr<const Corpus> corpus_;
    const EndpointRegistry& endpoints_;
    std::string actor_;
    std::string extractor_;
    std::shared_ptr<const EmbeddingProvider> embedder_;
    std::shared_ptr<const MetricSuite> suite_;
    std::shared_ptr<const ImportanceScorer> importance_;
    RunnerConfig config_;
};

}  // namespace memcycle
