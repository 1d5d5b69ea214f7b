// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/error.hpp"
#include "memcycle/linalg.hpp"
#include "memcycle/metrics.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

using EmotionCombo = std::vector<std::size_t>;

/// All non-empty subsets of the 8 emotions with at most three members, in
/// lexicographic order of their index lists (92 in total).
const std::vector<EmotionCombo>& emotion_combos();
Vector combo_label(const EmotionCombo& combo);

struct EmotionSample {
    std::string sentence;
    Vector label;  // 8 entries in {0, 1}
};

inline constexpr std::string_view kEmotionGenerationTemplate =
    "Seed sentence: {seed}\n"
    "Rewrite the seed sentence so that it clearly expresses these emotions: {emotions}.\n"
    "Output only the new sentence.";

struct EmotionDataset {
    std::vector<EmotionSample> samples;
    std::size_t calls = 0;
    std::size_t failures = 0;
};

/// One endpoint call per requested sample; failed or blank replies are skipped.
EmotionDataset gen_emotion_dataset(ChatEndpoint& endpoint, std::string_view seed_sentence, std::size_t n, Rng& rng,
                                   std::string_view tmpl = kEmotionGenerationTemplate);

struct ScorerTrainingOptions {
    double learning_rate = 0.5;
    std::size_t epochs = 200;
};

template <typename Scorer>
struct ScorerTrainingResult {
    Scorer scorer;
    std::vector<double> losses;  // loss before each epoch's update
};

/// Mean over samples of the squared Euclidean error.
double emotion_loss(const EmotionScorer& scorer, std::span<const Vector> inputs, std::span<const Vector> labels);
double emotion_loss_and_gradient(const EmotionScorer& scorer, std::span<const Vector> inputs,
                                 std::span<const Vector> labels, EmotionScorer& gradient);
/// Full-batch gradient descent. Throws DivergenceError on a non-finite loss.
ScorerTrainingResult<EmotionScorer> train_emotion_scorer(const EmotionScorer& initial, std::span<const Vector> inputs,
                                                         std::span<const Vector> labels,
                                                         const ScorerTrainingOptions& options);

struct EnrichmentChain {
    std::size_t id = 0;
    std::string query;
    std::vector<std::string> sentences;  // increasingly enriched, seed first
};

struct ImportanceTriple {
    std::string query;
    std::string positive;
    std::string negative;
    std::size_t chain_id = 0;
};

struct ChainSeed {
    std::string query;
    std::string seed;
};

inline constexpr std::string_view kEnrichmentTemplate =
    "Query: {query}\n"
    "Sentence: {sentence}\n"
    "Rewrite the sentence by adding one more piece of information that is useful for the query.\n"
    "Output only the new sentence.";

struct ImportanceDataset {
    std::vector<EnrichmentChain> chains;
    std::vector<ImportanceTriple> triples;
    std::size_t calls = 0;
    std::size_t failures = 0;
};

/// Enriches each seed chain_length - 1 times, then samples up to
/// pairs_per_chain distinct ordered pairs within each chain. A failed call
/// drops its chain.
ImportanceDataset gen_importance_dataset(ChatEndpoint& endpoint, std::span<const ChainSeed> seeds,
                                         std::size_t chain_length, std::size_t pairs_per_chain, Rng& rng,
                                         std::string_view tmpl = kEnrichmentTemplate);

struct EmbeddedTriple {
    Vector query;
    Vector positive;
    Vector negative;
};

std::vector<EmbeddedTriple> embed_triples(const EmbeddingProvider& embedder, std::span<const ImportanceTriple> triples);

/// Mean of -log sigmoid(d_imp(q, s+) - d_imp(q, s-)).
double importance_loss(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples);
double importance_loss_and_gradient(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples,
                                    ImportanceScorer& gradient);
ScorerTrainingResult<ImportanceScorer> train_importance_scorer(const ImportanceScorer& initial,
                                                               std::span<const EmbeddedTriple> triples,
                                                               const ScorerTrainingOptions& options);

/// Fraction of triples with d_imp(q, s+) > d_imp(q, s-).
double pair_accuracy(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples);

/// DCG with gain rel / log2(position + 1) over the first k entries, divided
/// by the ideal DCG (0 when the ideal is 0). Throws on empty input or k = 0.
double ndcg_at_k(std::span<const double> ranked_relevances, std::size_t k);
/// Mean over samples of the squared Euclidean error.
double mse(std::span<const Vector> predictions, std::span<const Vector> labels);
/// Instruction-following failure rate. Throws when total == 0.
double ifr(std::size_t failures, std::size_t total);

/// NDCG@k of ranking each chain by a scoring function, gain = chain position.
/// Mean over chains.
template <typename ScoreFn>
double chain_ndcg(std::span<const EnrichmentChain> chains, std::size_t k, ScoreFn&& score);

/// One row of the scorer comparison.
struct ScorerEvalRow {
    std::string method;
    std::string base_model;
    double ndcg5 = 0.0;
    double importance_ifr = 0.0;
    double emotion_mse = 0.0;
    double emotion_ifr = 0.0;
};

inline constexpr std::string_view kImportanceRatingTemplate =
    "{examples}Query: {query}\n"
    "Sentence: {sentence}\n"
    "Rate how important the sentence is for the query on a scale from 0 to 10. Output only the number.";

inline constexpr std::string_view kEmotionRatingTemplate =
    "{examples}Sentence: {sentence}\n"
    "For each of joy, acceptance, fear, surprise, sadness, disgust, anger and anticipation output 1 if the "
    "sentence expresses it and 0 otherwise, as eight comma-separated numbers and nothing else.";

struct PromptScorerOptions {
    /// Rendered in front of the question; empty for zero-shot.
    std::string importance_examples;
    std::string emotion_examples;
};

/// First number in the reply, if any.
std::optional<double> parse_rating(std::string_view reply);
/// Exactly eight numbers, if present.
std::optional<Vector> parse_emotion_vector(std::string_view reply);

struct EvalInputs {
    std::vector<EnrichmentChain> chains;
    std::vector<EmotionSample> emotion_samples;
};

ScorerEvalRow evaluate_random(const EvalInputs& inputs, Rng& rng);
ScorerEvalRow evaluate_prompted(const EvalInputs& inputs, ChatEndpoint& endpoint, const PromptScorerOptions& options,
                                std::string method);
ScorerEvalRow evaluate_trained(const EvalInputs& inputs, const EmbeddingProvider& embedder,
                               const EmotionScorer& emotion, const ImportanceScorer& importance);

std::string eval_rows_csv(std::span<const ScorerEvalRow> rows);

template <typename ScoreFn>
double chain_ndcg(std::span<const EnrichmentChain> chains, std::size_t k, ScoreFn&& score) {
    if (chains.empty()) {
        throw ContractError("no chains to evaluate");
    }
    double total = 0.0;
    for (const auto& chain : chains) {
        std::vector<std::pair<double, double>> scored;
        for (std::size_t i = 0; i < chain.sentences.size(); ++i) {
            scored.emplace_back(score(chain, i), static_cast<double>(i));
        }
        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::vector<double> rels;
        for (const auto& s : scored) {
            rels.push_back(s.second);
        }
        total += ndcg_at_k(rels, k);
    }
    return total / static_cast<double>(chains.size());
}

}  // namespace memcycle
