// SPDX-License-Identifier: Apache-2.0
#include "memcycle/gate.hpp"

#include "memcycle/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace memcycle {

namespace {

Vector sigmoid(const Vector& x) {
    Vector out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        out[i] = logistic(x[i]);
    }
    return out;
}

Vector softmax(const Vector& z) {
    const double top = z.maxCoeff();
    Vector e = (z.array() - top).exp().matrix();
    return e / e.sum();
}

// Forward pass pieces kept for backprop.
struct GateEval {
    Vector hidden;   // sigmoid activations
    Vector weights;  // softmax output
};

GateEval evaluate(const GateParams& p, const Vector& state_pre, const Vector& memory) {
    const auto d = static_cast<Eigen::Index>(p.dim());
    GateEval e;
    e.hidden = sigmoid(state_pre + p.w1.rightCols(d) * memory);
    e.weights = softmax(p.w2 * e.hidden + p.b2);
    return e;
}

// W1_s h_s + b1, shared by all memories of one query.
Vector state_part(const GateParams& p, const Vector& state) {
    const auto d = static_cast<Eigen::Index>(p.dim());
    return p.w1.leftCols(d) * state + p.b1;
}

void check_inputs(const GateParams& p, const Vector& state, const Vector& memory) {
    if (static_cast<std::size_t>(state.size()) != p.dim()) {
        throw DimensionMismatch(p.dim(), static_cast<std::size_t>(state.size()));
    }
    if (static_cast<std::size_t>(memory.size()) != p.dim()) {
        throw DimensionMismatch(p.dim(), static_cast<std::size_t>(memory.size()));
    }
}

}  // namespace

GateParams GateParams::zeros(std::size_t dim, std::size_t metrics, std::size_t hidden) {
    const auto d = static_cast<Eigen::Index>(dim);
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto n = static_cast<Eigen::Index>(metrics);
    return GateParams{Matrix::Zero(h, 2 * d), Vector::Zero(h), Matrix::Zero(n, h), Vector::Zero(n)};
}

GateParams GateParams::random(std::size_t dim, std::size_t metrics, Rng& rng, double scale, std::size_t hidden) {
    const auto d = static_cast<Eigen::Index>(dim);
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto n = static_cast<Eigen::Index>(metrics);
    GateParams p;
    p.w1 = rng.normal_matrix(h, 2 * d, scale);
    p.b1 = rng.normal_vector(h, scale);
    p.w2 = rng.normal_matrix(n, h, scale);
    p.b2 = rng.normal_vector(n, scale);
    return p;
}

std::size_t GateParams::parameter_count() const {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
}

bool GateParams::all_finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
}

void GateParams::check_shapes() const {
    if (w1.cols() % 2 != 0 || w1.rows() != b1.size() || w2.cols() != w1.rows() || w2.rows() != b2.size() ||
        b2.size() == 0) {
        throw ContractError("gate parameter shapes are inconsistent");
    }
}

Vector GateParams::flatten() const {
    Vector flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    auto put = [&](const auto& block) {
        flat.segment(k, block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
        k += block.size();
    };
    put(w1);
    put(b1);
    put(w2);
    put(b2);
    return flat;
}

void GateParams::unflatten(const Vector& flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count()) {
        throw DimensionMismatch(parameter_count(), static_cast<std::size_t>(flat.size()));
    }
    Eigen::Index k = 0;
    auto take = [&](auto& block) {
        Eigen::Map<Vector>(block.data(), block.size()) = flat.segment(k, block.size());
        k += block.size();
    };
    take(w1);
    take(b1);
    take(w2);
    take(b2);
}

Json GateParams::to_json() const {
    return Json{{"kind", "gate"},
                {"w1", matrix_to_json(w1)},
                {"b1", vector_to_json(b1)},
                {"w2", matrix_to_json(w2)},
                {"b2", vector_to_json(b2)}};
}

GateParams GateParams::from_json(const Json& j) {
    GateParams p{matrix_from_json(j.at("w1")), vector_from_json(j.at("b1")), matrix_from_json(j.at("w2")),
                 vector_from_json(j.at("b2"))};
    p.check_shapes();
    return p;
}

bool operator==(const GateParams& a, const GateParams& b) {
    return same_values(a.w1, b.w1) && same_values(a.b1, b.b1) && same_values(a.w2, b.w2) &&
           same_values(a.b2, b.b2);
}

Vector gate_forward(const GateParams& params, const Vector& state, const Vector& memory) {
    params.check_shapes();
    if (!params.all_finite()) {
        throw ContractError("gate parameters contain non-finite entries");
    }
    check_inputs(params, state, memory);
    return evaluate(params, state_part(params, state), memory).weights;
}

double match_score(const Vector& weights, const Vector& metrics) {
    if (weights.size() != metrics.size()) {
        throw DimensionMismatch(static_cast<std::size_t>(weights.size()), static_cast<std::size_t>(metrics.size()));
    }
    return weights.dot(metrics);
}

double match_score(const GateParams& params, const Vector& state, const Vector& memory, const Vector& metrics) {
    return match_score(gate_forward(params, state, memory), metrics);
}

std::vector<MemoryId> RankedMemories::ids() const {
    std::vector<MemoryId> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        out.push_back(e.id);
    }
    return out;
}

std::vector<MemoryId> RankedMemories::top(std::size_t k) const {
    auto out = ids();
    if (out.size() > k) {
        out.resize(k);
    }
    return out;
}

RankedMemories rank_by_scores(const MemoryStore& store, std::span<const double> scores, int query_step) {
    if (scores.size() != store.size()) {
        throw DimensionMismatch(store.size(), scores.size());
    }
    RankedMemories out;
    out.query_step = query_step;
    out.entries.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& u = store.units()[i];
        out.entries.push_back(RankedEntry{u.id, scores[i], u.step});
    }
    std::sort(out.entries.begin(), out.entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        if (a.step != b.step) {
            return a.step > b.step;
        }
        return a.id > b.id;
    });
    return out;
}

RankedMemories rank(const GateParams& params, const MetricSuite& suite, const QueryState& query,
                    const MemoryStore& store) {
    params.check_shapes();
    if (!params.all_finite()) {
        throw ContractError("gate parameters contain non-finite entries");
    }
    if (params.metrics() != suite.size()) {
        throw DimensionMismatch(suite.size(), params.metrics());
    }
    std::vector<double> scores;
    scores.reserve(store.size());
    if (!store.empty()) {
        check_inputs(params, query.embedding, store.units().front().embedding);
        const Vector pre = state_part(params, query.embedding);
        for (const auto& u : store.units()) {
            scores.push_back(evaluate(params, pre, u.embedding).weights.dot(suite.values(query, u)));
        }
    }
    return rank_by_scores(store, scores, query.step);
}

RankedMemories rank_with_weights(const Vector& weights, const MetricSuite& suite, const QueryState& query,
                                 const MemoryStore& store) {
    if (static_cast<std::size_t>(weights.size()) != suite.size()) {
        throw DimensionMismatch(suite.size(), static_cast<std::size_t>(weights.size()));
    }
    std::vector<double> scores;
    scores.reserve(store.size());
    for (const auto& u : store.units()) {
        scores.push_back(weights.dot(suite.values(query, u)));
    }
    return rank_by_scores(store, scores, query.step);
}

PairWeighting pair_weights(std::size_t t, double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw ContractError("gamma must lie in (0, 1)");
    }
    PairWeighting w;
    w.gamma = gamma;
    if (t < 2) {
        return w;
    }
    const auto tt = static_cast<long>(t);
    double total = 0.0;
    for (long j = 1; j <= tt; ++j) {
        const long gap = tt - 2 * j + 1;
        const int v = static_cast<int>(tt - 1 - std::labs(gap));
        w.exponents.push_back(v);
        w.orientations.push_back(gap > 0 ? 1 : (gap < 0 ? -1 : 0));
        w.magnitudes.push_back(std::pow(gamma, v));
        total += w.magnitudes.back();
    }
    for (std::size_t j = 0; j < t; ++j) {
        w.magnitudes[j] /= total;
        w.weights.push_back(w.orientations[j] * w.magnitudes[j]);
    }
    return w;
}

namespace {

void check_sample(const GateParams& p, const RankingSample& s) {
    if (static_cast<std::size_t>(s.query.size()) != p.dim()) {
        throw DimensionMismatch(p.dim(), static_cast<std::size_t>(s.query.size()));
    }
    if (static_cast<std::size_t>(s.memories.cols()) != p.dim()) {
        throw DimensionMismatch(p.dim(), static_cast<std::size_t>(s.memories.cols()));
    }
    if (static_cast<std::size_t>(s.metrics.cols()) != p.metrics()) {
        throw DimensionMismatch(p.metrics(), static_cast<std::size_t>(s.metrics.cols()));
    }
    if (s.memories.rows() != s.metrics.rows()) {
        throw DimensionMismatch(static_cast<std::size_t>(s.memories.rows()),
                                static_cast<std::size_t>(s.metrics.rows()));
    }
}

// Loss of one sample; when `grad` is set, adds scale * dL/dtheta to it.
double sample_loss_impl(const GateParams& p, const RankingSample& s, double gamma, GateParams* grad,
                        double scale) {
    check_sample(p, s);
    const auto t = static_cast<std::size_t>(s.memories.rows());
    if (t < 2) {
        return 0.0;
    }
    const auto d = static_cast<Eigen::Index>(p.dim());
    const Vector pre = state_part(p, s.query);
    std::vector<GateEval> evals;
    std::vector<double> f(t);
    evals.reserve(t);
    for (std::size_t i = 0; i < t; ++i) {
        evals.push_back(evaluate(p, pre, s.memories.row(static_cast<Eigen::Index>(i)).transpose()));
        f[i] = evals.back().weights.dot(s.metrics.row(static_cast<Eigen::Index>(i)).transpose());
    }
    const auto pw = pair_weights(t, gamma);
    double loss = 0.0;
    std::vector<double> df(t, 0.0);
    for (std::size_t j = 0; j < t; ++j) {
        const int o = pw.orientations[j];
        if (o == 0) {
            continue;
        }
        const std::size_t hi = o > 0 ? j : t - 1 - j;
        const std::size_t lo = o > 0 ? t - 1 - j : j;
        const double margin = f[hi] - f[lo];
        const double mag = pw.magnitudes[j];
        loss += mag * neg_log_sigmoid(margin);
        // d/dmargin softplus(-margin) = -sigmoid(-margin)
        const double g = -mag * logistic(-margin);
        df[hi] += g;
        df[lo] -= g;
    }
    if (grad != nullptr) {
        Vector dpre = Vector::Zero(pre.size());
        for (std::size_t i = 0; i < t; ++i) {
            const double c = df[i] * scale;
            if (c == 0.0) {
                continue;
            }
            const auto& e = evals[i];
            const Vector metrics = s.metrics.row(static_cast<Eigen::Index>(i)).transpose();
            const Vector dz = c * e.weights.cwiseProduct((metrics.array() - f[i]).matrix());
            grad->w2.noalias() += dz * e.hidden.transpose();
            grad->b2 += dz;
            const Vector dh = (p.w2.transpose() * dz).cwiseProduct(
                (e.hidden.array() * (1.0 - e.hidden.array())).matrix());
            grad->w1.rightCols(d).noalias() += dh * s.memories.row(static_cast<Eigen::Index>(i));
            dpre += dh;
        }
        grad->w1.leftCols(d).noalias() += dpre * s.query.transpose();
        grad->b1 += dpre;
    }
    return loss;
}

double groups_loss(const GateParams& p, std::span<const RankingGroup> groups,
                   std::span<const std::size_t> order, double gamma, GateParams* grad) {
    std::size_t used = 0;
    for (std::size_t gi : order) {
        bool has_pairs = false;
        for (const auto& s : groups[gi].samples) {
            has_pairs = has_pairs || s.memories.rows() >= 2;
        }
        used += has_pairs ? 1 : 0;
    }
    if (used == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t gi : order) {
        const auto& g = groups[gi];
        std::size_t n = 0;
        for (const auto& s : g.samples) {
            n += s.memories.rows() >= 2 ? 1 : 0;
        }
        if (n == 0) {
            continue;
        }
        const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(used));
        for (const auto& s : g.samples) {
            total += scale * sample_loss_impl(p, s, gamma, grad, scale);
        }
    }
    return total;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

}  // namespace

double sample_loss(const GateParams& params, const RankingSample& sample, double gamma) {
    return sample_loss_impl(params, sample, gamma, nullptr, 1.0);
}

double retrieval_loss(const GateParams& params, std::span<const RankingGroup> groups, double gamma) {
    params.check_shapes();
    const auto order = all_indices(groups.size());
    return groups_loss(params, groups, order, gamma, nullptr);
}

double retrieval_loss_and_gradient(const GateParams& params, std::span<const RankingGroup> groups, double gamma,
                                   GateParams& gradient) {
    params.check_shapes();
    gradient = GateParams::zeros(params.dim(), params.metrics(), params.hidden());
    const auto order = all_indices(groups.size());
    return groups_loss(params, groups, order, gamma, &gradient);
}

GateTrainingResult train_gate(const GateParams& initial, std::span<const RankingGroup> groups,
                              const GateTrainingOptions& options) {
    initial.check_shapes();
    if (!(options.learning_rate > 0.0)) {
        throw ContractError("gate learning rate must be positive");
    }
    for (const auto& g : groups) {
        for (const auto& s : g.samples) {
            if (!s.query.allFinite() || !s.memories.allFinite() || !s.metrics.allFinite()) {
                throw ContractError("ranking sample contains a non-finite value");
            }
        }
    }
    GateTrainingResult result{initial, {}};
    Rng rng(options.seed);
    auto order = all_indices(groups.size());
    GateParams grad = GateParams::zeros(initial.dim(), initial.metrics(), initial.hidden());
    for (std::size_t step = 0; step < options.steps; ++step) {
        std::vector<std::size_t> batch = order;
        if (options.batch_size > 0 && options.batch_size < groups.size()) {
            rng.shuffle(batch.begin(), batch.end());
            batch.resize(options.batch_size);
            std::sort(batch.begin(), batch.end());
        }
        grad.w1.setZero();
        grad.b1.setZero();
        grad.w2.setZero();
        grad.b2.setZero();
        const double loss = groups_loss(result.params, groups, batch, options.gamma, &grad);
        if (!std::isfinite(loss) || !grad.all_finite()) {
            throw DivergenceError("gate training diverged", step);
        }
        result.losses.push_back(loss);
        result.params.w1 -= options.learning_rate * grad.w1;
        result.params.b1 -= options.learning_rate * grad.b1;
        result.params.w2 -= options.learning_rate * grad.w2;
        result.params.b2 -= options.learning_rate * grad.b2;
    }
    if (options.loss_log_path) {
        write_loss_csv(*options.loss_log_path, result.losses);
    }
    return result;
}

void write_loss_csv(const std::string& path, std::span<const double> losses) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write loss log " + path);
    }
    out.precision(17);
    out << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
        out << i << ',' << losses[i] << '\n';
    }
}

double kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionMismatch(a.size(), b.size());
    }
    const std::size_t n = a.size();
    if (n < 2) {
        throw ContractError("kendall tau needs at least two items");
    }
    long balance = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double x = a[i] - a[j];
            const double y = b[i] - b[j];
            if (x * y > 0) {
                ++balance;
            } else if (x * y < 0) {
                --balance;
            }
        }
    }
    return static_cast<double>(balance) / (static_cast<double>(n * (n - 1)) / 2.0);
}

}  // namespace memcycle
