// SPDX-License-Identifier: Apache-2.0
#include "memcycle/metrics.hpp"

#include "memcycle/error.hpp"
#include "memcycle/text.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace memcycle {

MockEmbeddingProvider::MockEmbeddingProvider(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {
    if (dim == 0) {
        throw ContractError("embedding dimension must be positive");
    }
}

std::string MockEmbeddingProvider::normalize_token(std::string_view token) {
    std::size_t b = 0;
    std::size_t e = token.size();
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    while (b < e && !alnum(token[b])) {
        ++b;
    }
    while (e > b && !alnum(token[e - 1])) {
        --e;
    }
    return to_lower(token.substr(b, e - b));
}

std::uint64_t MockEmbeddingProvider::token_hash(std::uint64_t seed, std::string_view token) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : token) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix_seed(h, seed);
}

Vector MockEmbeddingProvider::token_direction(std::string_view token) const {
    std::uint64_t state = token_hash(seed_, token);
    Vector v(static_cast<Eigen::Index>(dim_));
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        // Uniform in [-1, 1) from the top 53 bits.
        v[i] = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-52 - 1.0;
    }
    return v;
}

Vector MockEmbeddingProvider::embed(std::string_view text) const {
    const auto raw = split_words(text);
    if (raw.empty()) {
        throw ContractError("cannot embed blank text");
    }
    Vector sum = Vector::Zero(static_cast<Eigen::Index>(dim_));
    for (const auto& word : raw) {
        auto token = normalize_token(word);
        sum += token_direction(token.empty() ? std::string_view(word) : std::string_view(token));
    }
    const double norm = sum.norm();
    if (norm == 0.0) {
        throw ContractError("degenerate embedding");
    }
    return sum / norm;
}

RemoteEmbeddingProvider::RemoteEmbeddingProvider(RemoteEndpointConfig config, std::size_t dim,
                                                 std::shared_ptr<HttpTransport> transport)
    : config_(std::move(config)), dim_(dim),
      transport_(transport ? std::move(transport) : std::make_shared<HttplibTransport>()) {}

Vector RemoteEmbeddingProvider::embed(std::string_view text) const {
    if (trim(text).empty()) {
        throw ContractError("cannot embed blank text");
    }
    const Json body{{"model", config_.model}, {"input", std::string(text)}};
    const auto payload = body.dump();
    const auto headers = auth_headers(config_.token_env);
    std::size_t retries = 0;
    return with_retries(config_.retry, retries, [&] {
        auto res = transport_->post(config_.url, payload, headers, config_.timeout);
        if (res.status == 429 || res.status >= 500) {
            throw RetryableError("embeddings endpoint returned HTTP " + std::to_string(res.status));
        }
        if (res.status != 200) {
            throw Error("embeddings endpoint returned HTTP " + std::to_string(res.status));
        }
        Vector v;
        try {
            v = vector_from_json(Json::parse(res.body).at("data").at(0).at("embedding"));
        } catch (const std::exception& e) {
            throw Error(std::string("malformed embeddings response: ") + e.what());
        }
        if (static_cast<std::size_t>(v.size()) != dim_) {
            throw DimensionMismatch(dim_, static_cast<std::size_t>(v.size()));
        }
        const double norm = v.norm();
        if (norm == 0.0 || !std::isfinite(norm)) {
            throw Error("embeddings endpoint returned a degenerate vector");
        }
        return Vector(v / norm);
    });
}

EmotionScorer EmotionScorer::random(std::size_t dim, std::size_t hidden, Rng& rng, double scale) {
    const auto d = static_cast<Eigen::Index>(dim);
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto e = static_cast<Eigen::Index>(kEmotionDims);
    return EmotionScorer{rng.normal_matrix(h, d, scale), Vector::Zero(h), rng.normal_matrix(e, h, scale),
                         Vector::Zero(e)};
}

Vector EmotionScorer::forward(const Vector& x) const {
    if (x.size() != w1.cols()) {
        throw DimensionMismatch(static_cast<std::size_t>(w1.cols()), static_cast<std::size_t>(x.size()));
    }
    const Vector hidden = (w1 * x + b1).array().tanh().matrix();
    return w2 * hidden + b2;
}

Json EmotionScorer::to_json() const {
    return Json{{"kind", "emotion_scorer"},
                {"w1", matrix_to_json(w1)},
                {"b1", vector_to_json(b1)},
                {"w2", matrix_to_json(w2)},
                {"b2", vector_to_json(b2)}};
}

EmotionScorer EmotionScorer::from_json(const Json& j) {
    EmotionScorer s{matrix_from_json(j.at("w1")), vector_from_json(j.at("b1")), matrix_from_json(j.at("w2")),
                    vector_from_json(j.at("b2"))};
    if (s.w1.rows() != s.b1.size() || s.w2.cols() != s.w1.rows() || s.w2.rows() != s.b2.size() ||
        s.b2.size() != static_cast<Eigen::Index>(kEmotionDims)) {
        throw ContractError("emotion scorer shapes are inconsistent");
    }
    return s;
}

ImportanceScorer ImportanceScorer::random(std::size_t dim, std::size_t projection, Rng& rng, double scale) {
    const auto d = static_cast<Eigen::Index>(dim);
    const auto p = static_cast<Eigen::Index>(projection);
    return ImportanceScorer{rng.normal_matrix(p, d, scale), rng.normal_vector(p, scale),
                            rng.normal_matrix(p, d, scale), rng.normal_vector(p, scale)};
}

ImportanceScorer ImportanceScorer::identity(std::size_t dim) {
    const auto d = static_cast<Eigen::Index>(dim);
    return ImportanceScorer{Matrix::Identity(d, d), Vector::Zero(d), Matrix::Identity(d, d), Vector::Zero(d)};
}

Json ImportanceScorer::to_json() const {
    return Json{{"kind", "importance_scorer"},
                {"query_w", matrix_to_json(query_w)},
                {"query_b", vector_to_json(query_b)},
                {"memory_w", matrix_to_json(memory_w)},
                {"memory_b", vector_to_json(memory_b)}};
}

ImportanceScorer ImportanceScorer::from_json(const Json& j) {
    ImportanceScorer s{matrix_from_json(j.at("query_w")), vector_from_json(j.at("query_b")),
                       matrix_from_json(j.at("memory_w")), vector_from_json(j.at("memory_b"))};
    if (s.query_w.rows() != s.query_b.size() || s.memory_w.rows() != s.memory_b.size() ||
        s.query_w.rows() != s.memory_w.rows() || s.query_w.cols() != s.memory_w.cols()) {
        throw ContractError("importance scorer shapes are inconsistent");
    }
    return s;
}

double relevance(const Vector& state, const Vector& memory) {
    if (state.size() != memory.size()) {
        throw DimensionMismatch(static_cast<std::size_t>(state.size()), static_cast<std::size_t>(memory.size()));
    }
    if (state.norm() == 0.0 || memory.norm() == 0.0) {
        throw ContractError("relevance of a zero vector is undefined");
    }
    return cosine_or_zero(state, memory);
}

double emotional_relevance(const EmotionScorer& scorer, const Vector& state, const Vector& memory) {
    return cosine_or_zero(scorer.forward(state), scorer.forward(memory));
}

double importance(const ImportanceScorer& scorer, const Vector& state, const Vector& memory) {
    if (state.size() != scorer.query_w.cols() || memory.size() != scorer.memory_w.cols()) {
        throw DimensionMismatch(static_cast<std::size_t>(scorer.query_w.cols()),
                                static_cast<std::size_t>(state.size()));
    }
    return cosine_or_zero(scorer.project_query(state), scorer.project_memory(memory));
}

double recency(int now, int mem_step, double p) {
    if (now < 1 || mem_step < 0 || mem_step > now) {
        throw ContractError("recency requires 0 <= step_mem <= t and t >= 1 (t=" + std::to_string(now) +
                            ", step_mem=" + std::to_string(mem_step) + ")");
    }
    if (!(p > 0.0)) {
        throw ContractError("recency power must be positive");
    }
    const double fraction = static_cast<double>(mem_step) / static_cast<double>(now);
    return std::pow(fraction, p);
}

std::size_t MetricConfig::size() const {
    return static_cast<std::size_t>(relevance) + emotion + importance + recency_powers.size();
}

std::vector<std::string> MetricConfig::names() const {
    std::vector<std::string> out;
    if (relevance) {
        out.emplace_back("rel");
    }
    if (emotion) {
        out.emplace_back("emo");
    }
    if (importance) {
        out.emplace_back("imp");
    }
    for (double p : recency_powers) {
        std::ostringstream name;
        name << "rec_" << p;
        out.push_back(name.str());
    }
    return out;
}

int MetricConfig::index_of(std::string_view name) const {
    const auto all = names();
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (all[i] == name) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

Json MetricConfig::to_json() const {
    return Json{{"relevance", relevance}, {"emotion", emotion}, {"importance", importance},
                {"recency_powers", recency_powers}};
}

MetricConfig MetricConfig::from_json(const Json& j) {
    MetricConfig c;
    c.relevance = j.value("relevance", c.relevance);
    c.emotion = j.value("emotion", c.emotion);
    c.importance = j.value("importance", c.importance);
    c.recency_powers = j.value("recency_powers", c.recency_powers);
    for (double p : c.recency_powers) {
        if (!(p > 0.0)) {
            throw ContractError("recency powers must be positive");
        }
    }
    if (c.size() == 0) {
        throw ContractError("at least one metric must be enabled");
    }
    return c;
}

MetricSuite::MetricSuite(MetricConfig config, std::shared_ptr<const EmotionScorer> emotion,
                         std::shared_ptr<const ImportanceScorer> importance)
    : config_(std::move(config)), emotion_(std::move(emotion)), importance_(std::move(importance)) {
    if (config_.size() == 0) {
        throw ContractError("at least one metric must be enabled");
    }
    if (config_.emotion && !emotion_) {
        throw ContractError("emotion metric enabled without an emotion scorer");
    }
    if (config_.importance && !importance_) {
        throw ContractError("importance metric enabled without an importance scorer");
    }
}

Vector MetricSuite::values(const QueryState& query, const MemoryUnit& unit) const {
    if (query.embedding.size() != unit.embedding.size()) {
        throw DimensionMismatch(static_cast<std::size_t>(query.embedding.size()),
                                static_cast<std::size_t>(unit.embedding.size()));
    }
    Vector out(static_cast<Eigen::Index>(size()));
    Eigen::Index k = 0;
    if (config_.relevance) {
        out[k++] = cosine_or_zero(query.embedding, unit.embedding);
    }
    if (config_.emotion) {
        const Vector s = emotion_->forward(query.embedding);
        const Vector m = unit.emotion ? *unit.emotion : emotion_->forward(unit.embedding);
        out[k++] = cosine_or_zero(s, m);
    }
    if (config_.importance) {
        const Vector s = importance_->project_query(query.embedding);
        const Vector m = unit.importance_feat ? *unit.importance_feat : importance_->project_memory(unit.embedding);
        out[k++] = cosine_or_zero(s, m);
    }
    for (double p : config_.recency_powers) {
        out[k++] = recency(query.step, unit.step, p);
    }
    return out;
}

MetricVector MetricSuite::evaluate(const QueryState& query, const MemoryUnit& unit) const {
    return MetricVector{values(query, unit), config_.names()};
}

void MetricSuite::annotate(MemoryUnit& unit) const {
    if (emotion_) {
        unit.emotion = emotion_->forward(unit.embedding);
    }
    if (importance_) {
        unit.importance_feat = importance_->project_memory(unit.embedding);
    }
}

}  // namespace memcycle
