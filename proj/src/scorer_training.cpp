// SPDX-License-Identifier: Apache-2.0
#include "memcycle/scorer_training.hpp"

#include "memcycle/error.hpp"
#include "memcycle/text.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <sstream>

namespace memcycle {

const std::vector<EmotionCombo>& emotion_combos() {
    static const std::vector<EmotionCombo> combos = [] {
        std::vector<EmotionCombo> out;
        for (std::size_t a = 0; a < kEmotionDims; ++a) {
            out.push_back({a});
            for (std::size_t b = a + 1; b < kEmotionDims; ++b) {
                out.push_back({a, b});
                for (std::size_t c = b + 1; c < kEmotionDims; ++c) {
                    out.push_back({a, b, c});
                }
            }
        }
        return out;
    }();
    return combos;
}

Vector combo_label(const EmotionCombo& combo) {
    Vector label = Vector::Zero(static_cast<Eigen::Index>(kEmotionDims));
    for (auto i : combo) {
        label[static_cast<Eigen::Index>(i)] = 1.0;
    }
    return label;
}

EmotionDataset gen_emotion_dataset(ChatEndpoint& endpoint, std::string_view seed_sentence, std::size_t n, Rng& rng,
                                   std::string_view tmpl) {
    if (n == 0) {
        throw ContractError("emotion dataset size must be at least 1");
    }
    const auto& combos = emotion_combos();
    EmotionDataset out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& combo = combos[rng.index(combos.size())];
        std::vector<std::string> names;
        for (auto e : combo) {
            names.emplace_back(kEmotionNames[e]);
        }
        const auto prompt =
            render_template(tmpl, {{"seed", std::string(seed_sentence)}, {"emotions", join(names, ", ")}});
        ++out.calls;
        std::string sentence;
        try {
            sentence = trim(endpoint.complete(prompt));
        } catch (const Error&) {
            sentence.clear();
        }
        if (sentence.empty()) {
            ++out.failures;
            continue;
        }
        out.samples.push_back(EmotionSample{std::move(sentence), combo_label(combo)});
    }
    return out;
}

namespace {

void check_pairs(std::span<const Vector> a, std::span<const Vector> b) {
    if (a.size() != b.size()) {
        throw DimensionMismatch(a.size(), b.size());
    }
    if (a.empty()) {
        throw ContractError("empty dataset");
    }
}

EmotionScorer zero_like(const EmotionScorer& s) {
    return EmotionScorer{Matrix::Zero(s.w1.rows(), s.w1.cols()), Vector::Zero(s.b1.size()),
                         Matrix::Zero(s.w2.rows(), s.w2.cols()), Vector::Zero(s.b2.size())};
}

ImportanceScorer zero_like(const ImportanceScorer& s) {
    return ImportanceScorer{Matrix::Zero(s.query_w.rows(), s.query_w.cols()), Vector::Zero(s.query_b.size()),
                            Matrix::Zero(s.memory_w.rows(), s.memory_w.cols()), Vector::Zero(s.memory_b.size())};
}

}  // namespace

double emotion_loss(const EmotionScorer& scorer, std::span<const Vector> inputs, std::span<const Vector> labels) {
    check_pairs(inputs, labels);
    double total = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        total += (scorer.forward(inputs[i]) - labels[i]).squaredNorm();
    }
    return total / static_cast<double>(inputs.size());
}

double emotion_loss_and_gradient(const EmotionScorer& scorer, std::span<const Vector> inputs,
                                 std::span<const Vector> labels, EmotionScorer& gradient) {
    check_pairs(inputs, labels);
    gradient = zero_like(scorer);
    const double inv_n = 1.0 / static_cast<double>(inputs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Vector h = (scorer.w1 * inputs[i] + scorer.b1).array().tanh().matrix();
        const Vector err = scorer.w2 * h + scorer.b2 - labels[i];
        total += err.squaredNorm();
        const Vector dout = 2.0 * inv_n * err;
        gradient.w2.noalias() += dout * h.transpose();
        gradient.b2 += dout;
        const Vector dpre = (scorer.w2.transpose() * dout).cwiseProduct((1.0 - h.array().square()).matrix());
        gradient.w1.noalias() += dpre * inputs[i].transpose();
        gradient.b1 += dpre;
    }
    return total * inv_n;
}

ScorerTrainingResult<EmotionScorer> train_emotion_scorer(const EmotionScorer& initial, std::span<const Vector> inputs,
                                                         std::span<const Vector> labels,
                                                         const ScorerTrainingOptions& options) {
    check_pairs(inputs, labels);
    ScorerTrainingResult<EmotionScorer> r{initial, {}};
    EmotionScorer grad;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        const double loss = emotion_loss_and_gradient(r.scorer, inputs, labels, grad);
        if (!std::isfinite(loss)) {
            throw DivergenceError("emotion scorer training diverged", epoch);
        }
        r.losses.push_back(loss);
        r.scorer.w1 -= options.learning_rate * grad.w1;
        r.scorer.b1 -= options.learning_rate * grad.b1;
        r.scorer.w2 -= options.learning_rate * grad.w2;
        r.scorer.b2 -= options.learning_rate * grad.b2;
    }
    return r;
}

ImportanceDataset gen_importance_dataset(ChatEndpoint& endpoint, std::span<const ChainSeed> seeds,
                                         std::size_t chain_length, std::size_t pairs_per_chain, Rng& rng,
                                         std::string_view tmpl) {
    if (chain_length < 2) {
        throw ContractError("chain_length must be at least 2");
    }
    ImportanceDataset out;
    for (std::size_t c = 0; c < seeds.size(); ++c) {
        EnrichmentChain chain{c, seeds[c].query, {seeds[c].seed}};
        bool ok = true;
        while (chain.sentences.size() < chain_length) {
            const auto prompt =
                render_template(tmpl, {{"query", chain.query}, {"sentence", chain.sentences.back()}});
            ++out.calls;
            std::string next;
            try {
                next = trim(endpoint.complete(prompt));
            } catch (const Error&) {
                next.clear();
            }
            if (next.empty()) {
                ok = false;
                break;
            }
            chain.sentences.push_back(std::move(next));
        }
        if (!ok) {
            ++out.failures;
            continue;
        }
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t a = 0; a < chain_length; ++a) {
            for (std::size_t b = a + 1; b < chain_length; ++b) {
                pairs.emplace_back(a, b);
            }
        }
        rng.shuffle(pairs.begin(), pairs.end());
        if (pairs.size() > pairs_per_chain) {
            pairs.resize(pairs_per_chain);
        }
        for (const auto& [a, b] : pairs) {
            out.triples.push_back(ImportanceTriple{chain.query, chain.sentences[b], chain.sentences[a], chain.id});
        }
        out.chains.push_back(std::move(chain));
    }
    return out;
}

std::vector<EmbeddedTriple> embed_triples(const EmbeddingProvider& embedder, std::span<const ImportanceTriple> triples) {
    std::vector<EmbeddedTriple> out;
    out.reserve(triples.size());
    for (const auto& t : triples) {
        out.push_back(EmbeddedTriple{embedder.embed(t.query), embedder.embed(t.positive), embedder.embed(t.negative)});
    }
    return out;
}

namespace {

// Cosine of the projections and, when requested, its gradient w.r.t. both projections.
double projected_cosine(const Vector& u, const Vector& v, Vector* du, Vector* dv) {
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu == 0.0 || nv == 0.0) {
        if (du != nullptr) {
            du->setZero(u.size());
            dv->setZero(v.size());
        }
        return 0.0;
    }
    const double c = u.dot(v) / (nu * nv);
    if (du != nullptr) {
        *du = v / (nu * nv) - c * u / (nu * nu);
        *dv = u / (nu * nv) - c * v / (nv * nv);
    }
    return c;
}

}  // namespace

double importance_loss(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples) {
    if (triples.empty()) {
        throw ContractError("empty dataset");
    }
    double total = 0.0;
    for (const auto& t : triples) {
        total += neg_log_sigmoid(importance(scorer, t.query, t.positive) - importance(scorer, t.query, t.negative));
    }
    return total / static_cast<double>(triples.size());
}

double importance_loss_and_gradient(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples,
                                    ImportanceScorer& gradient) {
    if (triples.empty()) {
        throw ContractError("empty dataset");
    }
    gradient = zero_like(scorer);
    const double inv_n = 1.0 / static_cast<double>(triples.size());
    double total = 0.0;
    Vector du_p, dv_p, du_n, dv_n;
    for (const auto& t : triples) {
        const Vector u = scorer.project_query(t.query);
        const Vector vp = scorer.project_memory(t.positive);
        const Vector vn = scorer.project_memory(t.negative);
        const double cp = projected_cosine(u, vp, &du_p, &dv_p);
        const double cn = projected_cosine(u, vn, &du_n, &dv_n);
        const double margin = cp - cn;
        total += neg_log_sigmoid(margin);
        const double g = -logistic(-margin) * inv_n;  // dL/dmargin
        const Vector du = g * (du_p - du_n);
        gradient.query_w.noalias() += du * t.query.transpose();
        gradient.query_b += du;
        const Vector gp = g * dv_p;
        const Vector gn = -g * dv_n;
        gradient.memory_w.noalias() += gp * t.positive.transpose() + gn * t.negative.transpose();
        gradient.memory_b += gp + gn;
    }
    return total * inv_n;
}

ScorerTrainingResult<ImportanceScorer> train_importance_scorer(const ImportanceScorer& initial,
                                                               std::span<const EmbeddedTriple> triples,
                                                               const ScorerTrainingOptions& options) {
    ScorerTrainingResult<ImportanceScorer> r{initial, {}};
    ImportanceScorer grad;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        const double loss = importance_loss_and_gradient(r.scorer, triples, grad);
        if (!std::isfinite(loss)) {
            throw DivergenceError("importance scorer training diverged", epoch);
        }
        r.losses.push_back(loss);
        r.scorer.query_w -= options.learning_rate * grad.query_w;
        r.scorer.query_b -= options.learning_rate * grad.query_b;
        r.scorer.memory_w -= options.learning_rate * grad.memory_w;
        r.scorer.memory_b -= options.learning_rate * grad.memory_b;
    }
    return r;
}

double pair_accuracy(const ImportanceScorer& scorer, std::span<const EmbeddedTriple> triples) {
    if (triples.empty()) {
        throw ContractError("empty dataset");
    }
    std::size_t correct = 0;
    for (const auto& t : triples) {
        correct += importance(scorer, t.query, t.positive) > importance(scorer, t.query, t.negative) ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(triples.size());
}

double ndcg_at_k(std::span<const double> ranked_relevances, std::size_t k) {
    if (ranked_relevances.empty()) {
        throw ContractError("ndcg of an empty ranking");
    }
    if (k == 0) {
        throw ContractError("ndcg needs k >= 1");
    }
    auto dcg = [k](std::span<const double> rels) {
        double s = 0.0;
        for (std::size_t i = 0; i < std::min(k, rels.size()); ++i) {
            s += rels[i] / std::log2(static_cast<double>(i) + 2.0);
        }
        return s;
    };
    std::vector<double> ideal(ranked_relevances.begin(), ranked_relevances.end());
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    const double idcg = dcg(ideal);
    if (idcg == 0.0) {
        return 0.0;
    }
    return dcg(ranked_relevances) / idcg;
}

double mse(std::span<const Vector> predictions, std::span<const Vector> labels) {
    check_pairs(predictions, labels);
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].size() != labels[i].size()) {
            throw DimensionMismatch(static_cast<std::size_t>(labels[i].size()),
                                    static_cast<std::size_t>(predictions[i].size()));
        }
        total += (predictions[i] - labels[i]).squaredNorm();
    }
    return total / static_cast<double>(predictions.size());
}

double ifr(std::size_t failures, std::size_t total) {
    if (total == 0) {
        throw ContractError("ifr over zero calls");
    }
    if (failures > total) {
        throw ContractError("more failures than calls");
    }
    return static_cast<double>(failures) / static_cast<double>(total);
}

namespace {

std::vector<double> numbers_in(std::string_view reply) {
    std::vector<double> out;
    const std::string s(reply);
    const char* p = s.c_str();
    while (*p != '\0') {
        if (std::isdigit(static_cast<unsigned char>(*p)) != 0 ||
            ((*p == '-' || *p == '.') && std::isdigit(static_cast<unsigned char>(p[1])) != 0)) {
            char* end = nullptr;
            const double v = std::strtod(p, &end);
            if (end != p) {
                out.push_back(v);
                p = end;
                continue;
            }
        }
        ++p;
    }
    return out;
}

}  // namespace

std::optional<double> parse_rating(std::string_view reply) {
    const auto nums = numbers_in(reply);
    if (nums.empty() || !std::isfinite(nums.front())) {
        return std::nullopt;
    }
    return nums.front();
}

std::optional<Vector> parse_emotion_vector(std::string_view reply) {
    const auto nums = numbers_in(reply);
    if (nums.size() != kEmotionDims) {
        return std::nullopt;
    }
    Vector v(static_cast<Eigen::Index>(kEmotionDims));
    for (std::size_t i = 0; i < kEmotionDims; ++i) {
        v[static_cast<Eigen::Index>(i)] = nums[i];
    }
    return v;
}

namespace {

std::vector<Vector> labels_of(const EvalInputs& inputs) {
    std::vector<Vector> out;
    for (const auto& s : inputs.emotion_samples) {
        out.push_back(s.label);
    }
    return out;
}

}  // namespace

ScorerEvalRow evaluate_random(const EvalInputs& inputs, Rng& rng) {
    ScorerEvalRow row{"random", "-", 0.0, 0.0, 0.0, 0.0};
    row.ndcg5 = chain_ndcg(inputs.chains, 5, [&](const EnrichmentChain&, std::size_t) { return rng.uniform(); });
    std::vector<Vector> preds;
    for (std::size_t i = 0; i < inputs.emotion_samples.size(); ++i) {
        Vector p(static_cast<Eigen::Index>(kEmotionDims));
        for (Eigen::Index d = 0; d < p.size(); ++d) {
            p[d] = rng.uniform();
        }
        preds.push_back(std::move(p));
    }
    row.emotion_mse = mse(preds, labels_of(inputs));
    return row;
}

ScorerEvalRow evaluate_prompted(const EvalInputs& inputs, ChatEndpoint& endpoint, const PromptScorerOptions& options,
                                std::string method) {
    ScorerEvalRow row{std::move(method), endpoint.model_ref(), 0.0, 0.0, 0.0, 0.0};
    std::size_t imp_calls = 0;
    std::size_t imp_fail = 0;
    row.ndcg5 = chain_ndcg(inputs.chains, 5, [&](const EnrichmentChain& chain, std::size_t i) {
        ++imp_calls;
        std::optional<double> rating;
        try {
            rating = parse_rating(endpoint.complete(render_template(
                kImportanceRatingTemplate,
                {{"examples", options.importance_examples}, {"query", chain.query}, {"sentence", chain.sentences[i]}})));
        } catch (const Error&) {
            rating.reset();
        }
        if (!rating) {
            ++imp_fail;
            return 0.0;
        }
        return *rating;
    });
    row.importance_ifr = ifr(imp_fail, imp_calls);
    std::vector<Vector> preds;
    std::vector<Vector> labels;
    std::size_t emo_fail = 0;
    for (const auto& s : inputs.emotion_samples) {
        std::optional<Vector> v;
        try {
            v = parse_emotion_vector(endpoint.complete(render_template(
                kEmotionRatingTemplate, {{"examples", options.emotion_examples}, {"sentence", s.sentence}})));
        } catch (const Error&) {
            v.reset();
        }
        if (!v) {
            ++emo_fail;
            continue;
        }
        preds.push_back(*v);
        labels.push_back(s.label);
    }
    row.emotion_ifr = ifr(emo_fail, inputs.emotion_samples.size());
    row.emotion_mse = preds.empty() ? std::nan("") : mse(preds, labels);
    return row;
}

ScorerEvalRow evaluate_trained(const EvalInputs& inputs, const EmbeddingProvider& embedder,
                               const EmotionScorer& emotion, const ImportanceScorer& importance_scorer) {
    ScorerEvalRow row{"trained", "-", 0.0, 0.0, 0.0, 0.0};
    row.ndcg5 = chain_ndcg(inputs.chains, 5, [&](const EnrichmentChain& chain, std::size_t i) {
        return importance(importance_scorer, embedder.embed(chain.query), embedder.embed(chain.sentences[i]));
    });
    std::vector<Vector> preds;
    for (const auto& s : inputs.emotion_samples) {
        preds.push_back(emotion.forward(embedder.embed(s.sentence)));
    }
    row.emotion_mse = mse(preds, labels_of(inputs));
    return row;
}

std::string eval_rows_csv(std::span<const ScorerEvalRow> rows) {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    out << "method,base_model,ndcg5,importance_ifr,emotion_mse,emotion_ifr\n";
    for (const auto& r : rows) {
        out << r.method << ',' << r.base_model << ',' << r.ndcg5 << ',' << r.importance_ifr << ',' << r.emotion_mse
            << ',' << r.emotion_ifr << '\n';
    }
    return out.str();
}

}  // namespace memcycle
