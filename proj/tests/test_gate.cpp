// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "memcycle/error.hpp"
#include "memcycle/gate.hpp"
#include "memcycle/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <tuple>

using namespace memcycle;
using namespace memcycle::testing;

namespace {

Vector oracle_gate(const GateParams& p, const Vector& s, const Vector& m) {
    const auto d = s.size();
    std::vector<double> a(static_cast<std::size_t>(p.w1.rows()));
    for (Eigen::Index r = 0; r < p.w1.rows(); ++r) {
        double acc = p.b1[r];
        for (Eigen::Index c = 0; c < d; ++c) {
            acc += p.w1(r, c) * s[c] + p.w1(r, d + c) * m[c];
        }
        a[static_cast<std::size_t>(r)] = 1.0 / (1.0 + std::exp(-acc));
    }
    Vector z(p.w2.rows());
    for (Eigen::Index r = 0; r < p.w2.rows(); ++r) {
        double acc = p.b2[r];
        for (Eigen::Index c = 0; c < p.w2.cols(); ++c) {
            acc += p.w2(r, c) * a[static_cast<std::size_t>(c)];
        }
        z[r] = acc;
    }
    const double mx = z.maxCoeff();
    double total = 0.0;
    for (Eigen::Index r = 0; r < z.size(); ++r) {
        z[r] = std::exp(z[r] - mx);
        total += z[r];
    }
    return z / total;
}

RankingGroup random_group(Rng& rng, std::size_t dim, std::size_t metrics, std::size_t samples) {
    RankingGroup g;
    for (std::size_t i = 0; i < samples; ++i) {
        const auto t = 2 + rng.index(5);
        RankingSample s{unit_vector(rng, dim), Matrix(t, dim), Matrix(t, metrics)};
        for (std::size_t r = 0; r < t; ++r) {
            s.memories.row(static_cast<Eigen::Index>(r)) = unit_vector(rng, dim).transpose();
            for (std::size_t c = 0; c < metrics; ++c) {
                s.metrics(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.uniform(-1.0, 1.0);
            }
        }
        g.samples.push_back(std::move(s));
    }
    return g;
}

}  // namespace

TEST_CASE("zero gate gives uniform weights") {
    const auto p = GateParams::zeros(4, 5);
    Rng rng(1);
    const Vector w = gate_forward(p, unit_vector(rng, 4), unit_vector(rng, 4));
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        CHECK(w[i] == doctest::Approx(0.2));
    }
}

TEST_CASE("gate weights are positive, normalized and match the two-layer formula") {
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
        const auto dim = 1 + rng.index(6);
        const auto n = 1 + rng.index(6);
        const auto p = GateParams::random(dim, n, rng, 2.0, 1 + rng.index(8));
        const Vector s = rng.normal_vector(static_cast<Eigen::Index>(dim));
        const Vector m = rng.normal_vector(static_cast<Eigen::Index>(dim));
        const Vector w = gate_forward(p, s, m);
        CHECK(std::abs(w.sum() - 1.0) < 1e-9);
        CHECK(w.minCoeff() > 0.0);
        CHECK((w - oracle_gate(p, s, m)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("non-finite gate parameters are rejected") {
    auto p = GateParams::zeros(2, 2);
    p.b2[0] = std::nan("");
    CHECK_THROWS_AS(gate_forward(p, Vector::Ones(2), Vector::Ones(2)), ContractError);
    CHECK_THROWS_AS(gate_forward(GateParams::zeros(2, 2), Vector::Ones(3), Vector::Ones(2)), Error);
}

TEST_CASE("match score is the weighted metric combination") {
    Vector d(3);
    d << 0.2, 0.4, 0.6;
    CHECK(match_score(Vector::Unit(3, 1), d) == doctest::Approx(0.4));
    CHECK(match_score(Vector::Constant(3, 1.0 / 3.0), d) == doctest::Approx(0.4));
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const auto p = GateParams::random(3, 3, rng, 1.0);
        const Vector s = unit_vector(rng, 3);
        const Vector m = unit_vector(rng, 3);
        const Vector metrics = rng.normal_vector(3);
        const double f = match_score(p, s, m, metrics);
        CHECK(f == doctest::Approx(oracle_gate(p, s, m).dot(metrics)).epsilon(1e-12));
        CHECK(f <= metrics.maxCoeff() + 1e-12);
        CHECK(f >= metrics.minCoeff() - 1e-12);
    }
}

TEST_CASE("rank singleton, empty and recency-only") {
    Rng rng(4);
    MetricConfig cfg;
    cfg.emotion = false;
    cfg.importance = false;
    cfg.recency_powers = {1.0};
    MetricSuite suite(cfg);
    MemoryStore empty(4);
    QueryState q{unit_vector(rng, 4), 10};
    CHECK(rank(GateParams::zeros(4, 2), suite, q, empty).empty());

    MemoryStore one(4);
    const auto id = one.insert(random_unit(rng, 4, 3));
    CHECK(rank(GateParams::zeros(4, 2), suite, q, one).ids() == std::vector<MemoryId>{id});

    MemoryStore store(4);
    std::vector<MemoryId> ids;
    for (int s = 1; s <= 8; ++s) {
        ids.push_back(store.insert(random_unit(rng, 4, s)));
    }
    std::reverse(ids.begin(), ids.end());
    CHECK(rank_with_weights(Vector::Unit(2, 1), suite, q, store).ids() == ids);
}

TEST_CASE("ties go to the higher step, then to the higher id") {
    Rng rng(5);
    MemoryStore store(2);
    const auto a = store.insert(random_unit(rng, 2, 1));
    const auto b = store.insert(random_unit(rng, 2, 2));
    const auto c = store.insert(random_unit(rng, 2, 2));
    const auto d = store.insert(random_unit(rng, 2, 1));
    const std::vector<double> scores{0.5, 0.5, 0.5, 0.9};
    CHECK(rank_by_scores(store, scores, 3).ids() == std::vector<MemoryId>{d, c, b, a});
}

TEST_CASE("rank equals brute-force argsort of match scores") {
    Rng rng(6);
    const std::size_t dim = 6;
    auto imp = std::make_shared<ImportanceScorer>(ImportanceScorer::random(dim, 4, rng, 0.5));
    MetricConfig cfg;
    cfg.emotion = false;
    MetricSuite suite(cfg, nullptr, imp);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = GateParams::random(dim, suite.size(), rng, 1.0, 4);
        MemoryStore store(dim);
        const auto n = 1 + rng.index(60);
        for (std::size_t i = 0; i < n; ++i) {
            if (i > 0 && rng.bernoulli(0.2)) {
                store.insert(store.units()[rng.index(store.size())]);
            } else {
                store.insert(random_unit(rng, dim, 1 + static_cast<int>(rng.index(10))));
            }
        }
        QueryState q{unit_vector(rng, dim), 10};
        std::vector<std::tuple<double, int, MemoryId>> brute;
        for (const auto& u : store.units()) {
            brute.emplace_back(match_score(p, q.embedding, u.embedding, suite.values(q, u)), u.step, u.id);
        }
        std::sort(brute.begin(), brute.end(), std::greater<>());
        std::vector<MemoryId> want;
        for (const auto& e : brute) {
            want.push_back(std::get<2>(e));
        }
        const auto got = rank(p, suite, q, store);
        REQUIRE(got.ids() == want);
        for (std::size_t i = 1; i < got.size(); ++i) {
            CHECK(got.entries[i - 1].score >= got.entries[i].score);
        }
    }
}

TEST_CASE("pair weights for t = 5 and small cases") {
    const auto w = pair_weights(5, 0.5);
    REQUIRE(w.size() == 5);
    CHECK(w.exponents == std::vector<int>{0, 2, 4, 2, 0});
    const double want[] = {0.3902, 0.0976, 0.0244, 0.0976, 0.3902};
    for (std::size_t j = 0; j < 5; ++j) {
        CHECK(std::abs(w.magnitudes[j] - want[j]) < 1e-4);
    }
    CHECK(w.orientations == std::vector<int>{1, 1, 0, -1, -1});

    const auto two = pair_weights(2, 0.5);
    CHECK(two.orientations == std::vector<int>{1, -1});
    CHECK(two.magnitudes[0] + two.magnitudes[1] == doctest::Approx(1.0));
    CHECK(pair_weights(1, 0.5).size() == 0);
    CHECK_THROWS_AS(pair_weights(3, 1.0), ContractError);
    for (std::size_t t = 2; t < 30; ++t) {
        const auto pw = pair_weights(t, 0.7);
        double total = 0.0;
        for (double x : pw.weights) {
            total += std::abs(x);
        }
        CHECK(total <= 1.0 + 1e-9);
        if (t % 2 == 1) {
            CHECK(pw.weights[t / 2] == 0.0);
        }
    }
}

TEST_CASE("retrieval loss examples") {
    Rng rng(7);
    const auto p = GateParams::zeros(3, 2);
    RankingSample flat{unit_vector(rng, 3), Matrix(5, 3), Matrix::Constant(5, 2, 0.3)};
    for (int r = 0; r < 5; ++r) {
        flat.memories.row(r) = unit_vector(rng, 3).transpose();
    }
    const auto pw = pair_weights(5, 0.5);
    double mass = 0.0;
    for (double x : pw.weights) {
        mass += std::abs(x);
    }
    CHECK(sample_loss(p, flat, 0.5) == doctest::Approx(std::log(2.0) * mass).epsilon(1e-12));

    RankingSample ordered = flat;
    for (int r = 0; r < 5; ++r) {
        ordered.metrics.row(r).setConstant(1000.0 * (5 - r));
    }
    CHECK(sample_loss(p, ordered, 0.5) < 1e-12);

    RankingSample single{unit_vector(rng, 3), Matrix(1, 3), Matrix(1, 2)};
    single.memories.row(0) = unit_vector(rng, 3).transpose();
    single.metrics.setZero();
    CHECK(sample_loss(p, single, 0.5) == 0.0);
}

TEST_CASE("retrieval loss matches recomputation from pair weights and match scores") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = GateParams::random(4, 3, rng, 1.0, 5);
        std::vector<RankingGroup> groups;
        for (int g = 0; g < 3; ++g) {
            groups.push_back(random_group(rng, 4, 3, 1 + rng.index(3)));
        }
        double total = 0.0;
        for (const auto& g : groups) {
            double group_total = 0.0;
            for (const auto& s : g.samples) {
                const auto t = static_cast<std::size_t>(s.memories.rows());
                std::vector<double> f(t);
                for (std::size_t i = 0; i < t; ++i) {
                    const auto r = static_cast<Eigen::Index>(i);
                    f[i] = oracle_gate(p, s.query, s.memories.row(r).transpose()).dot(s.metrics.row(r).transpose());
                }
                const auto pw = pair_weights(t, 0.5);
                for (std::size_t j = 0; j < t; ++j) {
                    const double k = static_cast<double>(t) - 2.0 * static_cast<double>(j + 1) + 1.0;
                    if (k == 0.0) {
                        continue;
                    }
                    const std::size_t hi = std::min(j, t - 1 - j);
                    const std::size_t lo = std::max(j, t - 1 - j);
                    group_total += pw.magnitudes[j] * std::log1p(std::exp(-(f[hi] - f[lo])));
                }
            }
            total += group_total / static_cast<double>(g.samples.size());
        }
        const double want = total / static_cast<double>(groups.size());
        CHECK(retrieval_loss(p, groups, 0.5) == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("analytic retrieval gradient matches central differences") {
    Rng rng(9);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = GateParams::random(3, 3, rng, 1.0, 4);
        std::vector<RankingGroup> groups{random_group(rng, 3, 3, 2), random_group(rng, 3, 3, 1)};
        GateParams grad;
        retrieval_loss_and_gradient(p, groups, 0.5, grad);
        const Vector analytic = grad.flatten();
        const Vector theta = p.flatten();
        Vector numeric(theta.size());
        const double eps = 1e-5;
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            GateParams plus = p;
            GateParams minus = p;
            Vector tp = theta;
            Vector tm = theta;
            tp[k] += eps;
            tm[k] -= eps;
            plus.unflatten(tp);
            minus.unflatten(tm);
            numeric[k] = (retrieval_loss(plus, groups, 0.5) - retrieval_loss(minus, groups, 0.5)) / (2 * eps);
        }
        const double rel = (analytic - numeric).norm() / std::max(1e-12, analytic.norm() + numeric.norm());
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("zero training steps leave the gate unchanged") {
    Rng rng(10);
    const auto p = GateParams::random(3, 2, rng);
    std::vector<RankingGroup> groups{random_group(rng, 3, 2, 2)};
    GateTrainingOptions opts;
    opts.steps = 0;
    CHECK(train_gate(p, groups, opts).params == p);
    opts.learning_rate = 0.0;
    CHECK_THROWS_AS(train_gate(p, groups, opts), ContractError);
}

TEST_CASE("training lowers the loss and is deterministic") {
    Rng rng(11);
    const auto p = GateParams::random(4, 3, rng, 0.1);
    std::vector<RankingGroup> groups;
    for (int g = 0; g < 4; ++g) {
        groups.push_back(random_group(rng, 4, 3, 2));
    }
    GateTrainingOptions opts;
    opts.steps = 50;
    opts.batch_size = 2;
    opts.seed = 3;
    const auto a = train_gate(p, groups, opts);
    const auto b = train_gate(p, groups, opts);
    CHECK(a.params == b.params);
    CHECK(a.losses == b.losses);
    opts.batch_size = 0;
    const auto full = train_gate(p, groups, opts);
    CHECK(retrieval_loss(full.params, groups, 0.5) < retrieval_loss(p, groups, 0.5));
}

TEST_CASE("divergent training aborts") {
    Rng rng(12);
    auto p = GateParams::random(3, 2, rng);
    std::vector<RankingGroup> groups{random_group(rng, 3, 2, 2)};
    groups[0].samples[0].metrics(0, 0) = std::numeric_limits<double>::infinity();
    GateTrainingOptions opts;
    opts.steps = 3;
    CHECK_THROWS_AS(train_gate(p, groups, opts), Error);
}

TEST_CASE("kendall tau") {
    const std::vector<double> a{1, 2, 3, 4};
    const std::vector<double> r{4, 3, 2, 1};
    const std::vector<double> tied{1, 1, 1, 1};
    CHECK(kendall_tau(a, a) == doctest::Approx(1.0));
    CHECK(kendall_tau(a, r) == doctest::Approx(-1.0));
    CHECK(kendall_tau(a, tied) == doctest::Approx(0.0));
    const std::vector<double> b{1, 3, 2, 4};
    CHECK(kendall_tau(a, b) == doctest::Approx(4.0 / 6.0));
}

TEST_CASE("gate params json and flatten round-trip") {
    Rng rng(13);
    const auto p = GateParams::random(3, 4, rng, 1.0, 5);
    CHECK(GateParams::from_json(p.to_json()) == p);
    GateParams q = GateParams::zeros(3, 4, 5);
    q.unflatten(p.flatten());
    CHECK(q == p);
    CHECK(p.parameter_count() == static_cast<std::size_t>(p.flatten().size()));
}

TEST_CASE("loss csv lists every step") {
    const auto dir = temp_dir("gate-csv");
    const std::vector<double> losses{0.5, 0.25};
    write_loss_csv(dir + "/loss.csv", losses);
    std::ifstream in(dir + "/loss.csv");
    std::string all((std::istreambuf_iterator<char>(in)), {});
    CHECK(all.rfind("step,loss\n", 0) == 0);
    CHECK(std::count(all.begin(), all.end(), '\n') == 3);
}

TEST_CASE("a short training run starts recovering the designated metric") {
    GateRecoveryOptions opts;
    opts.train_queries = 20;
    opts.test_queries = 10;
    const auto data = make_gate_recovery_data(DesignatedMetric::recency, opts);
    const auto dim = opts.dim;
    const auto initial = GateParams::zeros(dim, data.suite->size());
    GateTrainingOptions t;
    t.learning_rate = 1.0;
    t.steps = 200;
    const auto trained = train_gate(initial, data.train, t);
    CHECK(recovery_tau(trained.params, data) > recovery_tau(initial, data));
}
