// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/linalg.hpp"
#include "memcycle/memory_core.hpp"

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    /// Unit-norm embedding of `text`. Throws ContractError on blank text.
    virtual Vector embed(std::string_view text) const = 0;
};

/// Offline provider: every normalized whitespace token is hashed with the seed
/// into a pseudo-random direction, and the token directions are summed and
/// normalized. Texts sharing tokens therefore have positive cosine.
class MockEmbeddingProvider final : public EmbeddingProvider {
public:
    MockEmbeddingProvider(std::uint64_t seed, std::size_t dim);

    std::size_t dim() const override { return dim_; }
    Vector embed(std::string_view text) const override;

    /// Lowercases and strips leading/trailing punctuation; empty when nothing remains.
    static std::string normalize_token(std::string_view token);
    /// FNV-1a over the token bytes, mixed with the seed.
    static std::uint64_t token_hash(std::uint64_t seed, std::string_view token);
    Vector token_direction(std::string_view token) const;

private:
    std::uint64_t seed_;
    std::size_t dim_;
};

/// Embeddings endpoint client speaking the OpenAI-compatible /embeddings
/// wire format. Returned vectors are normalized on receipt.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
public:
    RemoteEmbeddingProvider(RemoteEndpointConfig config, std::size_t dim,
                            std::shared_ptr<HttpTransport> transport = nullptr);

    std::size_t dim() const override { return dim_; }
    Vector embed(std::string_view text) const override;

private:
    RemoteEndpointConfig config_;
    std::size_t dim_;
    std::shared_ptr<HttpTransport> transport_;
};

inline constexpr std::size_t kEmotionDims = 8;
inline constexpr std::array<std::string_view, kEmotionDims> kEmotionNames{
    "joy", "acceptance", "fear", "surprise", "sadness", "disgust", "anger", "anticipation"};

/// h_e(x) = W2 tanh(W1 x + b1) + b2, an 8-way emotion decomposition.
struct EmotionScorer {
    Matrix w1;
    Vector b1;
    Matrix w2;
    Vector b2;

    static constexpr std::size_t kDefaultHidden = 64;

    static EmotionScorer random(std::size_t dim, std::size_t hidden, Rng& rng, double scale = 0.1);
    Vector forward(const Vector& x) const;
    std::size_t input_dim() const { return static_cast<std::size_t>(w1.cols()); }

    Json to_json() const;
    static EmotionScorer from_json(const Json& j);
};

/// Asymmetric projections: query side W1 x + b1, memory side W2 x + b2.
struct ImportanceScorer {
    Matrix query_w;
    Vector query_b;
    Matrix memory_w;
    Vector memory_b;

    static constexpr std::size_t kDefaultProjection = 64;

    static ImportanceScorer random(std::size_t dim, std::size_t projection, Rng& rng, double scale = 0.1);
    static ImportanceScorer identity(std::size_t dim);
    Vector project_query(const Vector& x) const { return query_w * x + query_b; }
    Vector project_memory(const Vector& x) const { return memory_w * x + memory_b; }
    std::size_t input_dim() const { return static_cast<std::size_t>(query_w.cols()); }

    Json to_json() const;
    static ImportanceScorer from_json(const Json& j);
};

/// Cosine similarity. Throws ContractError on a zero vector or unequal sizes.
double relevance(const Vector& state, const Vector& memory);
/// Cosine of emotion vectors; 0 when either is the zero vector.
double emotional_relevance(const EmotionScorer& scorer, const Vector& state, const Vector& memory);
/// Cosine of the asymmetric projections; 0 when either projection is zero.
double importance(const ImportanceScorer& scorer, const Vector& state, const Vector& memory);
/// (1 - (now - mem_step) / now)^p. Requires 0 <= mem_step <= now, now >= 1, p > 0.
double recency(int now, int mem_step, double p);

struct MetricConfig {
    bool relevance = true;
    bool emotion = true;
    bool importance = true;
    std::vector<double> recency_powers{0.5, 1.0, 2.0};

    std::size_t size() const;
    /// Entries in evaluation order: rel, emo, imp, rec_p for each p.
    std::vector<std::string> names() const;
    /// Position of a named metric, or -1.
    int index_of(std::string_view name) const;

    Json to_json() const;
    static MetricConfig from_json(const Json& j);
};

struct MetricVector {
    Vector values;
    std::vector<std::string> names;
};

/// Retrieval query: the embedded state s^t and its step t.
struct QueryState {
    Vector embedding;
    int step = 1;
};

/// Evaluates d(s^t, m_i) under one configuration. Read-only once built.
class MetricSuite {
public:
    MetricSuite(MetricConfig config, std::shared_ptr<const EmotionScorer> emotion = nullptr,
                std::shared_ptr<const ImportanceScorer> importance = nullptr);

    const MetricConfig& config() const { return config_; }
    std::size_t size() const { return config_.size(); }

    /// Metric values in configured order. Zero vectors score 0 for the cosine
    /// metrics so that ranking stays total.
    Vector values(const QueryState& query, const MemoryUnit& unit) const;
    MetricVector evaluate(const QueryState& query, const MemoryUnit& unit) const;

    /// Fills the unit's cached emotion and importance features.
    void annotate(MemoryUnit& unit) const;

    const EmotionScorer* emotion_scorer() const { return emotion_.get(); }
    const ImportanceScorer* importance_scorer() const { return importance_.get(); }

private:
    MetricConfig config_;
    std::shared_ptr<const EmotionScorer> emotion_;
    std::shared_ptr<const ImportanceScorer> importance_;
};

}  // namespace memcycle
