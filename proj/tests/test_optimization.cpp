// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "memcycle/config.hpp"
#include "memcycle/error.hpp"
#include "memcycle/optimization.hpp"
#include "memcycle/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>

using namespace memcycle;
using namespace memcycle::testing;

namespace {

struct Rig {
    SyntheticWorld world = make_multihop_world({12, 3, 5});
    EndpointRegistry endpoints;
    std::shared_ptr<MockEmbeddingProvider> embedder = std::make_shared<MockEmbeddingProvider>(3, 64);
    std::shared_ptr<MetricSuite> suite;
    NoOpFineTuneHook hook;

    Rig() {
        for (const auto& role : synthetic_roles()) {
            endpoints.add(role, make_synthetic_endpoint(role));
        }
        MetricConfig cfg;
        cfg.emotion = false;
        cfg.importance = false;
        suite = std::make_shared<MetricSuite>(cfg);
    }

    EpisodeRunner runner(std::uint64_t seed = 5, std::size_t parallelism = 1) const {
        RunnerConfig rc;
        rc.seed = seed;
        rc.parallelism = parallelism;
        return EpisodeRunner(world.tasks, world.corpus, endpoints, "actor", "extractor", embedder, suite, nullptr, rc);
    }

    PolicyBundle bundle() const {
        PolicyBundle b;
        b.gate = GateParams::zeros(64, suite->size());
        b.utilization.model_ref = "merger";
        return b;
    }

    OptimizationContext context(const std::string& out = "") {
        OptimizationContext c;
        c.embedder = embedder;
        c.suite = suite;
        c.endpoints = &endpoints;
        c.hook = &hook;
        c.output_dir = out;
        return c;
    }
};

OptimizationConfig quick(std::size_t epochs = 1, std::size_t n = 2) {
    auto c = OptimizationConfig::on_policy_defaults();
    c.epochs = epochs;
    c.sample_batch = n;
    return c;
}

class ThrowingHook final : public FineTuneHook {
public:
    std::string run(const FineTuneRequest&) override { throw Error("trainer unavailable"); }
};

}  // namespace

TEST_CASE("successful subset") {
    std::vector<Trajectory> ts(4);
    ts[0].reward = 1.0;
    ts[1].reward = 0.0;
    ts[2].reward = 0.5;
    ts[3].reward = 0.2;
    CHECK(filter_successful(ts, 0.5).size() == 2);
    CHECK(filter_successful(ts, 0.0).size() == 4);
    CHECK_THROWS_AS(filter_successful(ts, -0.1), ContractError);
}

TEST_CASE("optimization config defaults, json and validation") {
    const auto off = OptimizationConfig::off_policy_defaults();
    const auto on = OptimizationConfig::on_policy_defaults();
    CHECK(on.sft.learning_rate == doctest::Approx(5e-4));
    CHECK(on.reflection_size == 15);
    CHECK(on.gate_steps == 1);
    CHECK(off.sft.learning_rate == doctest::Approx(1e-4));
    CHECK(off.success_threshold == 0.5);
    CHECK(OptimizationConfig::from_json(on.to_json(), off) == on);
    CHECK(OptimizationConfig::from_json(Json::object(), on) == on);
    const auto changed = OptimizationConfig::from_json(Json{{"epochs", 2}}, on);
    CHECK(changed.epochs == 2);
    CHECK(changed.reflection_size == 15);
    try {
        (void)OptimizationConfig::from_json(Json{{"gamma", 1.5}}, off);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.pointer() == "/optimization/gamma");
    }
    auto bad = off;
    bad.success_threshold = 2.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("bundle save and load") {
    Rng rng(1);
    PolicyBundle b;
    b.gate = GateParams::random(4, 3, rng, 1.0, 5);
    b.utilization = {"m", "a", "b", 0.2};
    b.task_prompt.hints = {"keep names"};
    b.version = 3;
    b.stage = "complete";
    const auto dir = temp_dir("bundle");
    b.save(dir);
    CHECK(PolicyBundle::load(dir) == b);
    for (const char* f : {"gate.json", "utilization.json", "task_prompt.json", "manifest.json"}) {
        CHECK(std::filesystem::exists(std::filesystem::path(dir) / f));
    }
    CHECK_THROWS_AS(PolicyBundle::load(dir + "/missing"), Error);
}

TEST_CASE("ranking groups skip short rankings") {
    Rig rig;
    const auto ts = rig.runner().run_all(rig.bundle());
    const auto groups = build_ranking_groups(ts, *rig.embedder, *rig.suite);
    std::size_t expected = 0;
    for (const auto& t : ts) {
        for (const auto& s : t.steps) {
            expected += s.ranked_ids.size() >= 2 ? 1 : 0;
        }
    }
    std::size_t samples = 0;
    for (const auto& g : groups) {
        CHECK_FALSE(g.samples.empty());
        for (const auto& s : g.samples) {
            CHECK(s.memories.rows() == s.metrics.rows());
            CHECK(s.metrics.cols() == static_cast<Eigen::Index>(rig.suite->size()));
        }
        samples += g.samples.size();
    }
    CHECK(samples == expected);
}

TEST_CASE("off-policy with no successes keeps the gate and warns") {
    Rig rig;
    auto ts = rig.runner().run_all(rig.bundle());
    for (auto& t : ts) {
        t.reward = 0.0;
        t.success = false;
    }
    std::vector<std::string> warnings;
    auto ctx = rig.context();
    ctx.warn = [&](const std::string& w) { warnings.push_back(w); };
    const auto r = off_policy_optimize(ts, rig.bundle(), OptimizationConfig::off_policy_defaults(), ctx);
    CHECK(r.bundle.gate == rig.bundle().gate);
    CHECK(r.report.successes == 0);
    CHECK(r.report.gate_losses.empty());
    REQUIRE_FALSE(warnings.empty());
    CHECK(warnings[0].find("no successful") != std::string::npos);
    CHECK(r.bundle.version == 1);
    CHECK(r.bundle.stage == "complete");
    CHECK_THROWS_AS(off_policy_optimize(std::vector<Trajectory>{}, rig.bundle(),
                                        OptimizationConfig::off_policy_defaults(), ctx),
                    ContractError);
}

TEST_CASE("off-policy trains the gate, exports datasets and adds hints") {
    Rig rig;
    const auto ts = rig.runner().run_all(rig.bundle());
    const auto dir = temp_dir("offpolicy");
    auto cfg = OptimizationConfig::off_policy_defaults();
    cfg.gate_steps = 5;
    const auto r = off_policy_optimize(ts, rig.bundle(), cfg, rig.context(dir));
    CHECK(r.report.trajectories == ts.size());
    if (r.report.successes > 0 && !r.report.gate_losses.empty()) {
        CHECK(r.report.gate_losses.size() == 5);
    }
    CHECK(r.report.sft_records + r.report.sft_skipped <= ts.size());
    CHECK(std::filesystem::exists(dir + "/sft.jsonl"));
    CHECK(std::filesystem::exists(dir + "/dpo.jsonl"));
    CHECK(PolicyBundle::load(dir + "/bundle") == r.bundle);
    CHECK(r.bundle.task_prompt.hints.size() <= cfg.hint_cap);
    CHECK(sft_from_jsonl(read_file(dir + "/sft.jsonl")).size() == r.report.sft_records);

    const auto again = off_policy_optimize(ts, rig.bundle(), cfg, rig.context());
    CHECK(again.bundle.gate == r.bundle.gate);
    CHECK(again.bundle.task_prompt == r.bundle.task_prompt);
}

TEST_CASE("a failing stage persists the partial bundle") {
    Rig rig;
    const auto ts = rig.runner().run_all(rig.bundle());
    ThrowingHook hook;
    const auto dir = temp_dir("partial");
    auto ctx = rig.context(dir);
    ctx.hook = &hook;
    CHECK_THROWS_AS(off_policy_optimize(ts, rig.bundle(), OptimizationConfig::off_policy_defaults(), ctx), Error);
    const auto partial = PolicyBundle::load(dir + "/bundle-partial");
    CHECK(partial.stage == "gate");
    CHECK_FALSE(std::filesystem::exists(dir + "/bundle"));
}

TEST_CASE("an unknown model_ref from the hook is a config error") {
    Rig rig;
    const auto ts = rig.runner().run_all(rig.bundle());
    CommandFineTuneHook hook("echo nowhere");
    auto ctx = rig.context();
    ctx.hook = &hook;
    CHECK_THROWS_AS(off_policy_optimize(ts, rig.bundle(), OptimizationConfig::off_policy_defaults(), ctx), Error);
}

TEST_CASE("on-policy with one epoch") {
    Rig rig;
    const auto runner = rig.runner();
    const auto r = on_policy_optimize(runner.sampler(), rig.bundle(), quick(1, 2), rig.context());
    CHECK(r.bundle.version == 1);
    REQUIRE(r.metrics.size() == 2);
    CHECK(r.metrics[0].epoch == 0);
    CHECK(r.metrics[0].bundle_version == 0);
    CHECK(r.metrics[1].bundle_version == 1);
    CHECK(r.metrics[0].trajectories == 2);
    CHECK(r.trajectories.size() == 4);
    CHECK(r.trajectories[0].bundle_version == 0);
    CHECK(r.trajectories[3].bundle_version == 1);
    CHECK(r.reports.size() == 1);
}

TEST_CASE("on-policy is deterministic and independent of parallelism") {
    Rig rig;
    const auto serial = rig.runner(5, 1);
    const auto parallel = rig.runner(5, 4);
    const auto a = on_policy_optimize(serial.sampler(), rig.bundle(), quick(2, 4), rig.context());
    const auto b = on_policy_optimize(serial.sampler(), rig.bundle(), quick(2, 4), rig.context());
    const auto c = on_policy_optimize(parallel.sampler(), rig.bundle(), quick(2, 4), rig.context());
    CHECK(a.bundle == b.bundle);
    CHECK(a.metrics == b.metrics);
    CHECK(serialize_log(a.trajectories) == serialize_log(b.trajectories));
    CHECK(serialize_log(a.trajectories) == serialize_log(c.trajectories));
    CHECK(a.bundle == c.bundle);
}

TEST_CASE("a sampler failure discards the epoch") {
    Rig rig;
    const auto runner = rig.runner();
    const auto inner = runner.sampler();
    TrajectorySampler flaky = [&](const PolicyBundle& b, std::size_t epoch, std::size_t n) {
        if (epoch == 1) {
            throw Error("endpoint down");
        }
        return inner(b, epoch, n);
    };
    const auto dir = temp_dir("onpolicy");
    const auto r = on_policy_optimize(flaky, rig.bundle(), quick(3, 2), rig.context(dir));
    REQUIRE(r.metrics.size() == 4);
    CHECK_FALSE(r.metrics[0].discarded);
    CHECK(r.metrics[1].discarded);
    CHECK(r.metrics[1].bundle_version == 1);
    CHECK(r.metrics[2].bundle_version == 1);
    CHECK(r.bundle.version == 2);
    CHECK(std::filesystem::exists(dir + "/bundles/v0/manifest.json"));
    CHECK(std::filesystem::exists(dir + "/bundles/v2/manifest.json"));
    CHECK(std::filesystem::exists(dir + "/epoch_metrics.csv"));
    const auto csv = epoch_metrics_csv(r.metrics);
    CHECK(csv.rfind("epoch,bundle_version,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("runner sampling") {
    Rig rig;
    const auto runner = rig.runner();
    const auto a = runner.sample(rig.bundle(), 0, 20);
    CHECK(a.size() == 20);
    CHECK(runner.run_all(rig.bundle()).size() == rig.world.tasks.size());
    RunnerConfig rc;
    rc.memory_policy = "nope";
    EpisodeRunner bad(rig.world.tasks, rig.world.corpus, rig.endpoints, "actor", "extractor", rig.embedder, rig.suite,
                      nullptr, rc);
    CHECK_THROWS_AS(bad.make_memory(rig.bundle()), ConfigError);
    rc.memory_policy = "fixed-weight";
    EpisodeRunner no_scorer(rig.world.tasks, rig.world.corpus, rig.endpoints, "actor", "extractor", rig.embedder,
                            rig.suite, nullptr, rc);
    CHECK_THROWS_AS(no_scorer.make_memory(rig.bundle()), ConfigError);
    for (const char* p : {"full", "long-term", "short-term"}) {
        rc.memory_policy = p;
        EpisodeRunner r(rig.world.tasks, rig.world.corpus, rig.endpoints, "actor", "extractor", rig.embedder,
                        rig.suite, nullptr, rc);
        const auto ts = r.sample(rig.bundle(), 0, 3);
        for (const auto& t : ts) {
            CHECK(t.policy == p);
            validate(t);
        }
    }
}
