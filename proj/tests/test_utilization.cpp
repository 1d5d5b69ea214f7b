// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "memcycle/error.hpp"
#include "memcycle/utilization.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace memcycle;
using namespace memcycle::testing;

namespace {

std::vector<std::string> texts(std::initializer_list<const char*> xs) { return {xs.begin(), xs.end()}; }

// Merger that appends each new memory verbatim.
std::shared_ptr<FunctionChatEndpoint> appender() {
    return FunctionChatEndpoint::from_prompt(
        [](const std::string& p) {
            const auto existing = field_after(p, "Existing Memory:");
            const auto added = field_after(p, "New Memory:");
            return existing.empty() ? added : existing + " " + added;
        },
        "appender");
}

std::string words(std::size_t n, const std::string& w = "w") {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        out += (i ? " " : "") + w;
    }
    return out;
}

Trajectory merge_trajectory(const std::vector<std::string>& memories, std::size_t merges) {
    Trajectory t;
    t.id = "x";
    t.store = MemoryStore(2);
    StepRecord s;
    s.step = 1;
    s.state_text = "where was the director born";
    s.contexts.push_back("");
    for (const auto& m : memories) {
        MemoryUnit u;
        u.text = m;
        u.step = 1;
        u.embedding = Vector::Unit(2, 0);
        s.ranked_ids.push_back(t.store.insert(u));
    }
    s.store_size = memories.size();
    std::string acc;
    for (std::size_t i = 0; i < merges; ++i) {
        acc += (i ? " " : "") + memories[i];
        s.contexts.push_back(acc);
    }
    s.context = s.contexts.back();
    t.steps.push_back(s);
    return t;
}

}  // namespace

TEST_CASE("info gain and stop probability") {
    CHECK(info_gain(0, 0) == 0.0);
    CHECK(info_gain(5, 0) == 1.0);
    CHECK(info_gain(2, 4) == doctest::Approx(0.5));
    CHECK(info_gain(8, 4) == 1.0);
    CHECK(info_gain(-3, 4) == 0.0);
    CHECK(info_gain(3, -4) == 1.0);
    CHECK(stop_prob(0.2, 0.7) == doctest::Approx(0.3));
    CHECK(stop_prob(1.0, 0.0) == 0.0);
    CHECK(stop_prob(0.0, 0.0) == 1.0);
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const long a = static_cast<long>(rng.index(20)) - 5;
        const long b = static_cast<long>(rng.index(20)) - 5;
        const double c = info_gain(a, b);
        CHECK(c >= 0.0);
        CHECK(c <= 1.0);
    }
}

TEST_CASE("merge prompt renders the default template") {
    const auto p = render_merge_prompt(kDefaultMergeTemplate, "obs", "ctx", "new");
    CHECK(p.rfind("Observation: obs\nExisting Memory: ctx\nNew Memory: new\n", 0) == 0);
}

TEST_CASE("single memory aggregation makes one call") {
    Rng rng(2);
    auto ep = appender();
    const auto r = aggregate(*ep, texts({"paris is a city"}), "obs", rng);
    CHECK(r.context == "paris is a city");
    CHECK(r.trace.contexts == std::vector<std::string>{"", "paris is a city"});
    CHECK(r.trace.word_deltas == std::vector<long>{4});
    CHECK(r.trace.gains == std::vector<double>{1.0});
    CHECK(r.trace.stop_draws.empty());
    CHECK(r.trace.stop_step == 1);
    CHECK(r.trace.calls == 1);
    CHECK_THROWS_AS(aggregate(*ep, std::vector<std::string>{}, "obs", rng), ContractError);
}

TEST_CASE("no growth stops by the third merge") {
    Rng rng(3);
    auto ep = FunctionChatEndpoint::from_prompt([](const std::string&) { return std::string("same"); }, "fixed");
    const auto r = aggregate(*ep, texts({"a", "b", "c", "d", "e"}), "obs", rng);
    // c = (1, 0, 0): z_2 has probability 0, z_3 fires surely
    CHECK(r.trace.gains == std::vector<double>{1.0, 0.0, 0.0});
    CHECK(r.trace.stop_step == 3);
    CHECK(r.trace.stop_draws == std::vector<int>{0, 1});
}

TEST_CASE("constant growth drives the stop probability to zero") {
    Rng rng(4);
    auto ep = appender();
    std::vector<std::string> many(20, "one two");
    AggregationOptions opts;
    opts.max_iters = 7;
    const auto r = aggregate(*ep, many, "obs", rng, opts);
    CHECK(r.trace.stop_step == 7);
    CHECK(r.trace.calls == 7);
    CHECK(r.trace.stop_draws.size() == 6);
    CHECK(std::all_of(r.trace.stop_draws.begin(), r.trace.stop_draws.end(), [](int z) { return z == 0; }));
    CHECK(word_count(r.context) == 14);
}

TEST_CASE("aggregation traces are consistent and deterministic") {
    Rng a_rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> mems;
        const auto n = 1 + a_rng.index(12);
        for (std::size_t i = 0; i < n; ++i) {
            mems.push_back(random_text(a_rng, 4));
        }
        const auto seed = a_rng.next();
        auto ep = appender();
        Rng r1(seed);
        Rng r2(seed);
        const auto x = aggregate(*ep, mems, "o", r1);
        const auto y = aggregate(*ep, mems, "o", r2);
        CHECK(x.context == y.context);
        CHECK(x.trace.stop_draws == y.trace.stop_draws);
        const auto k = x.trace.stop_step;
        REQUIRE(k >= 1);
        CHECK(k <= std::min<std::size_t>(10, n));
        CHECK(x.trace.contexts.size() == k + 1);
        CHECK(x.trace.contexts.front().empty());
        CHECK(x.trace.word_deltas.size() == k);
        CHECK(x.trace.gains.size() == k);
        CHECK(x.trace.stop_draws.size() == k - 1);
        for (std::size_t i = 0; i + 1 < x.trace.stop_draws.size(); ++i) {
            CHECK(x.trace.stop_draws[i] == 0);
        }
        for (std::size_t i = 0; i < k; ++i) {
            const long want = static_cast<long>(word_count(x.trace.contexts[i + 1])) -
                              static_cast<long>(word_count(x.trace.contexts[i]));
            CHECK(x.trace.word_deltas[i] == want);
        }
    }
}

TEST_CASE("merged context is capped") {
    Rng rng(6);
    auto ep = FunctionChatEndpoint::from_prompt([](const std::string&) { return words(9000); }, "big");
    const auto r = aggregate(*ep, texts({"a"}), "obs", rng);
    CHECK(word_count(r.context) == kContextWordCap);
    CHECK(split_words(r.context).back() == kTruncationMarker);
    AggregationOptions small;
    small.word_cap = 5;
    const auto s = aggregate(*ep, texts({"a"}), "obs", rng, small);
    CHECK(s.context == "w w w w [truncated]");
}

TEST_CASE("a failing utilizer raises") {
    Rng rng(7);
    ScriptedChatEndpoint ep({{"", true}, {"", true}});
    CHECK_THROWS_AS(aggregate(ep, texts({"a"}), "obs", rng), Error);
    ScriptedChatEndpoint flaky({{"", true}, {"ok", false}});
    AggregationOptions opts;
    opts.retry.max_retries = 1;
    CHECK(aggregate(flaky, texts({"a"}), "obs", rng, opts).context == "ok");
}

TEST_CASE("final merge reproduces the last prompt") {
    const auto t = merge_trajectory(texts({"m one", "m two", "m three"}), 2);
    const auto fm = final_merge(t);
    REQUIRE(fm);
    CHECK(fm->prompt == render_merge_prompt(kDefaultMergeTemplate, "where was the director born", "m one", "m two"));
    CHECK(fm->output == "m one m two");
    CHECK_FALSE(final_merge(merge_trajectory(texts({"m"}), 0)));
    CHECK_FALSE(final_merge(Trajectory{}));
}

TEST_CASE("SFT and DPO builders") {
    const auto t = merge_trajectory(texts({"m one", "m two"}), 2);
    const std::vector<Trajectory> ts{t, merge_trajectory(texts({"z"}), 0), t};
    auto expert = ScriptedChatEndpoint::replies({"expert one", "  "});
    const auto sft = build_sft_dataset(ts, *expert);
    REQUIRE(sft.records.size() == 1);
    CHECK(sft.skipped == 1);
    CHECK(sft.records[0].prompt == final_merge(t)->prompt);
    CHECK(sft.records[0].target == "expert one");
    const auto received = expert->received();
    REQUIRE(received.size() == 2);
    CHECK(received[0].back().content == final_merge(t)->prompt);

    auto sft_model = ScriptedChatEndpoint::replies({"better", "m one m two"});
    const auto dpo = build_dpo_dataset(ts, *sft_model, 0.2);
    REQUIRE(dpo.records.size() == 1);
    CHECK(dpo.skipped == 1);
    CHECK(dpo.records[0].chosen == "better");
    CHECK(dpo.records[0].rejected == "m one m two");
    CHECK(dpo.records[0].beta == 0.2);
    CHECK_THROWS_AS(build_dpo_dataset(ts, *sft_model, 0.0), ContractError);
}

TEST_CASE("dataset jsonl round-trip and schema") {
    const std::vector<SftRecord> sft{{"p \"q\"\n", "t"}, {"p2", "caf\xc3\xa9"}};
    CHECK(sft_from_jsonl(to_jsonl(sft)) == sft);
    const std::vector<DpoRecord> dpo{{"p", "a", "b", 0.1}};
    CHECK(dpo_from_jsonl(to_jsonl(dpo)) == dpo);
    const auto line = Json::parse(split_lines(to_jsonl(dpo))[0]);
    CHECK(line.size() == 4);
    CHECK(line.contains("prompt"));
    CHECK(line.contains("chosen"));
    CHECK(line.contains("rejected"));
    CHECK(line.contains("beta"));
    CHECK_THROWS_AS(dpo_from_jsonl("{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"a\"}\n"), ContractError);
    CHECK_THROWS_AS(sft_from_jsonl("{\"prompt\":\"p\"\n"), ParseError);
}

TEST_CASE("DPO loss") {
    PreferenceTrace zero{0.0, 0.0, 0.0, 0.0};
    CHECK(dpo_term(zero, 0.1) == doctest::Approx(std::log(2.0)));
    PreferenceTrace t{-1.0, -3.0, -2.0, -2.5};
    const double margin = (-1.0 - -2.0) - (-3.0 - -2.5);
    CHECK(dpo_term(t, 0.5) == doctest::Approx(std::log1p(std::exp(-0.5 * margin))));
    PreferenceTrace swapped{t.policy_rejected, t.policy_chosen, t.reference_rejected, t.reference_chosen};
    // swapping chosen and rejected flips the margin: l(m) - l(-m) = -m
    CHECK(dpo_term(t, 0.5) - dpo_term(swapped, 0.5) == doctest::Approx(-0.5 * margin));
    PreferenceTrace missing{1.0, std::nullopt, 0.0, 0.0};
    const std::vector<PreferenceTrace> all{t, zero, missing};
    const auto s = dpo_loss(all, 0.5);
    CHECK(s.used == 2);
    CHECK(s.skipped == 1);
    CHECK(s.loss == doctest::Approx((dpo_term(t, 0.5) + dpo_term(zero, 0.5)) / 2));
    CHECK_THROWS_AS(dpo_loss(all, -1.0), ContractError);
}

TEST_CASE("SFT loss") {
    const std::vector<std::vector<double>> traces{{-1.0, -3.0}, {}, {-0.5}};
    const auto s = sft_loss(traces);
    CHECK(s.used == 2);
    CHECK(s.skipped == 1);
    CHECK(s.loss == doctest::Approx((2.0 + 0.5) / 2));
    CHECK(sft_loss(std::vector<std::vector<double>>{}).loss == 0.0);
}

TEST_CASE("fine-tune hooks") {
    NoOpFineTuneHook noop;
    FineTuneRequest req{"sft", "/tmp/data set.jsonl", "base", 5e-4, 8};
    CHECK(noop.run(req) == "base");

    CommandFineTuneHook echo("echo ignored; echo {stage}-{model_ref}-{batch}");
    CHECK(echo.run(req) == "sft-base-8");
    CommandFineTuneHook dataset("printf '%s\\n' {dataset}");
    CHECK(dataset.run(req) == "/tmp/data set.jsonl");
    CommandFineTuneHook quiet("true");
    CHECK(quiet.run(req) == "base");
    CommandFineTuneHook failing("exit 3");
    CHECK_THROWS_AS(failing.run(req), Error);
}

TEST_CASE("utilization policy json round-trip") {
    UtilizationPolicy p{"m", "a.jsonl", "b.jsonl", 0.3};
    CHECK(UtilizationPolicy::from_json(p.to_json()) == p);
}
