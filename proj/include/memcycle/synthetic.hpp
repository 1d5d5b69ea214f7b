// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/environment.hpp"
#include "memcycle/gate.hpp"
#include "memcycle/metrics.hpp"
#include "memcycle/scorer_training.hpp"

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

/// Two-hop film world: "In which city was the director of F born?" needs the
/// film page (director) and then the director's page (birthplace). Both
/// pages bury the key sentence among distractors in shuffled order.
struct SyntheticWorldOptions {
    std::size_t films = 40;
    std::size_t distractors = 5;
    std::uint64_t seed = 1;
};

struct SyntheticWorld {
    std::shared_ptr<InMemoryCorpus> corpus;
    std::vector<QaTask> tasks;
};

SyntheticWorld make_multihop_world(const SyntheticWorldOptions& options);

/// Splits text into sentences ending in '.', '?' or '!' (or text end).
std::vector<std::string> split_sentences(std::string_view text);

/// Rule-based stand-ins for the model roles, all deterministic:
///   actor      - think/act prompts for the film world
///   extractor  - storage prompts; keeps the first two sentences, plus any
///                sentence containing a phrase quoted in the hint line
///   merger     - merge prompts; appends the new memory's unseen sentences
///   expert     - like merger, also dropping Thought/Action bookkeeping
///   reflector  - reflection prompts; turns question keywords found in the
///                observations into quoted keep-sentence hints
///   emotion-writer, enricher, judge - scorer dataset generation and rating
std::shared_ptr<ChatEndpoint> make_synthetic_endpoint(std::string_view role);
std::vector<std::string> synthetic_roles();

/// Emotion words used by the emotion writer and the judge.
const std::vector<std::vector<std::string>>& emotion_lexicon();
/// Tokens the enricher appends; shared by every chain.
const std::vector<std::string>& enrichment_vocabulary();

std::vector<ChainSeed> make_chain_seeds(std::size_t n, Rng& rng);

enum class DesignatedMetric { relevance, importance, recency };
std::string_view to_string(DesignatedMetric m);

/// Ranking data whose true order follows one designated metric. Metrics are
/// (rel, imp, rec_1). One other metric is anti-correlated with the
/// designated one and the third is independent, so an evenly mixed score
/// carries almost no ranking signal.
struct GateRecoveryOptions {
    std::size_t dim = 32;
    std::size_t train_queries = 40;
    std::size_t test_queries = 20;
    std::size_t memories = 12;
    double noise = 0.1;
    std::uint64_t seed = 7;
};

struct RecoveryQuery {
    QueryState query;
    MemoryStore store;
    std::vector<double> truth;  // designated metric value per unit, store order
};

struct GateRecoveryData {
    std::shared_ptr<const MetricSuite> suite;
    std::vector<RankingGroup> train;
    std::vector<RecoveryQuery> test;
};

GateRecoveryData make_gate_recovery_data(DesignatedMetric designated, const GateRecoveryOptions& options);

/// Mean Kendall tau between the gate's match scores and the truth.
double recovery_tau(const GateParams& gate, const GateRecoveryData& data);

}  // namespace memcycle
