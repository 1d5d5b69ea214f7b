// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/environment.hpp"
#include "memcycle/metrics.hpp"
#include "memcycle/optimization.hpp"
#include "memcycle/scorer_training.hpp"
#include "memcycle/synthetic.hpp"
#include "memcycle/utilization.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace memcycle {

struct EmbeddingConfig {
    std::string backend = "mock";  // mock | remote
    std::size_t dim = 768;
    std::uint64_t seed = 3;
    RemoteEndpointConfig remote;
};

struct EndpointConfig {
    std::string backend = "synthetic";  // synthetic | scripted | remote
    std::string role;                   // synthetic
    std::vector<ScriptStep> script;     // scripted
    std::string model_ref;              // scripted
    RemoteEndpointConfig remote;        // remote
};

/// Which endpoint plays each part.
struct RoleConfig {
    std::string actor = "actor";
    std::string extractor = "extractor";
    std::string utilization = "merger";
    std::string expert = "expert";
    std::string reflector = "reflector";
    std::string emotion_writer = "emotion-writer";
    std::string enricher = "enricher";
    std::string judge = "judge";
};

struct EnvironmentConfig {
    std::string backend = "synthetic";  // synthetic | files
    SyntheticWorldOptions synthetic{40, 5, 11};
    std::string tasks_path;
    std::string corpus_path;
};

struct MemoryConfig {
    std::string policy = "adaptive";
    std::size_t top_k = kDefaultTopK;
    std::size_t cache_capacity = kDefaultCacheCapacity;
    std::size_t max_iters = 10;
    std::size_t short_term_window = 3;
    std::vector<double> fixed_alpha{1.0, 0.0, 0.0};
    MetricConfig metrics;
    bool store_thoughts = true;
    std::size_t emotion_hidden = EmotionScorer::kDefaultHidden;
    std::size_t importance_projection = ImportanceScorer::kDefaultProjection;
    /// Scorer files written by pretrain-scorers; empty means a seeded random init.
    std::string emotion_scorer;
    std::string importance_scorer;
};

struct ScorerConfig {
    std::size_t emotion_train = 300;
    std::size_t emotion_test = 100;
    std::size_t chains_train = 40;
    std::size_t chains_test = 20;
    std::size_t chain_length = 6;
    std::size_t pairs_per_chain = 15;
    ScorerTrainingOptions emotion{0.1, 300};
    ScorerTrainingOptions importance{0.5, 300};
    double init_scale = 0.1;
    std::string train_seed_sentence = "the team met at the harbor";
    std::string test_seed_sentence = "a letter arrived this morning";
    /// Exemplars prepended for the few-shot prompting rows.
    std::size_t few_shot_examples = 3;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    EmbeddingConfig embedding;
    std::map<std::string, EndpointConfig> endpoints;
    RoleConfig roles;
    EnvironmentConfig environment;
    MemoryConfig memory;
    /// Overrides on top of the off- or on-policy defaults.
    Json optimization = Json::object();
    std::string trajectory_log;
    /// Bundle directory to start from; empty starts from a zero gate.
    std::string bundle;
    /// Fine-tune command; empty for the no-op hook.
    std::string fine_tune_hook;
    std::size_t parallelism = 1;
    /// 0 runs every task once.
    std::size_t episodes = 0;
    ScorerConfig scorers;

    /// Every synthetic role registered under its own name.
    static std::map<std::string, EndpointConfig> default_endpoints();

    OptimizationConfig optimization_config(bool on_policy) const;
    std::string trajectory_log_path() const;

    Json to_json() const;
    /// Missing keys keep their defaults. Throws ConfigError with a JSON pointer.
    static RunConfig from_json(const Json& j);
    static RunConfig load(const std::string& path);
    void validate() const;
};

/// Live objects built from a RunConfig. Each instance owns its own endpoints
/// and scorers, so two runs never share state.
struct Services {
    EndpointRegistry endpoints;
    std::shared_ptr<const EmbeddingProvider> embedder;
    std::shared_ptr<const EmotionScorer> emotion;
    std::shared_ptr<const ImportanceScorer> importance;
    std::shared_ptr<const MetricSuite> suite;
    std::vector<QaTask> tasks;
    std::shared_ptr<const Corpus> corpus;

    static Services build(const RunConfig& config);
    RunnerConfig runner_config(const RunConfig& config) const;
    EpisodeRunner runner(const RunConfig& config) const;
    PolicyBundle initial_bundle(const RunConfig& config) const;
};

std::string read_file(const std::string& path);
/// Creates parent directories as needed.
void write_file(const std::string& path, const std::string& contents);

}  // namespace memcycle
