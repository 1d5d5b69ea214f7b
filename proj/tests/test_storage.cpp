// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "memcycle/error.hpp"
#include "memcycle/storage.hpp"

#include <doctest.h>

#include <algorithm>

using namespace memcycle;
using namespace memcycle::testing;

namespace {

Trajectory episode(const std::string& question, double reward) {
    Trajectory t;
    t.question = question;
    t.reward = reward;
    t.success = reward >= 0.5;
    t.store = MemoryStore(2);
    StepRecord s;
    s.step = 1;
    s.observation = "obs of " + question;
    MemoryUnit u;
    u.text = "kept " + question;
    u.source = s.observation;
    u.step = 1;
    u.embedding = Vector::Unit(2, 1);
    t.store.insert(u);
    t.steps.push_back(s);
    return t;
}

}  // namespace

TEST_CASE("task prompt rendering") {
    TaskPrompt p;
    CHECK(p.render("o") == "Observation: o\n" + std::string(kDefaultStorageInstruction));
    p.hints = {"keep names", "keep dates"};
    CHECK(p.render("o") == "Observation: o\nHint: keep names keep dates\n" + std::string(kDefaultStorageInstruction));
    CHECK(TaskPrompt::from_json(p.to_json()) == p);
}

TEST_CASE("extraction uses the reply or falls back to the observation") {
    MockEmbeddingProvider emb(1, 8);
    TaskPrompt prompt;
    auto ep = ScriptedChatEndpoint::replies({"  short fact  ", "   "});
    const auto a = extract(*ep, prompt, emb, "a long observation", 3);
    CHECK(a.text == "short fact");
    CHECK_FALSE(a.fallback);
    CHECK(a.source == "a long observation");
    CHECK(a.step == 3);
    CHECK(same_values(a.embedding, emb.embed("short fact")));
    CHECK(ep->received()[0].back().content == prompt.render("a long observation"));

    const auto b = extract(*ep, prompt, emb, "obs two", 4);
    CHECK(b.fallback);
    CHECK(b.text == "obs two");

    ScriptedChatEndpoint failing({{"", true}});
    const auto c = extract(failing, prompt, emb, "obs three", 5);
    CHECK(c.fallback);
    CHECK(c.text == "obs three");
    CHECK_THROWS_AS(extract(failing, prompt, emb, "  ", 5), ContractError);
}

TEST_CASE("observation cache flushes when full") {
    ObservationCache cache(3);
    CHECK(cache.put("a", 1).empty());
    CHECK(cache.put("b", 2).empty());
    const auto out = cache.put("c", 3);
    REQUIRE(out.size() == 3);
    CHECK(out[0] == PendingObservation{"a", 1});
    CHECK(out[2] == PendingObservation{"c", 3});
    CHECK(cache.size() == 0);
    CHECK(cache.put("d", 4).empty());
    CHECK(cache.drain() == std::vector<PendingObservation>{{"d", 4}});
    CHECK(cache.drain().empty());
    CHECK_THROWS_AS(ObservationCache(0), ContractError);

    ObservationCache one(1);
    CHECK(one.put("x", 1).size() == 1);
}

TEST_CASE("partition by reward") {
    const std::vector<Trajectory> ts{episode("a", 1.0), episode("b", 0.0), episode("c", 0.5), episode("d", 0.49)};
    const auto p = partition_trajectories(ts, 0.5);
    REQUIRE(p.positive.size() == 2);
    REQUIRE(p.negative.size() == 2);
    CHECK(p.positive[1].question == "c");
    CHECK(p.negative[1].question == "d");
    CHECK_THROWS_AS(partition_trajectories(ts, 1.5), ContractError);
}

TEST_CASE("experiences list observations with their stored memories") {
    const std::vector<Trajectory> ts{episode("q1", 1.0), episode("q2", 1.0)};
    const auto text = render_experiences(ts, 1);
    CHECK(text == "Question: q1\nObservation: obs of q1\nMemory: kept q1\n\n");
    CHECK(render_experiences(ts, 5).find("q2") != std::string::npos);
}

TEST_CASE("reflection parses hint lines") {
    const std::vector<Trajectory> ts{episode("q1", 1.0)};
    auto ep = ScriptedChatEndpoint::replies({"- keep names\n\n2. keep dates\nthird"});
    ReflectionOptions opts;
    const auto hints = reflect(*ep, ts, Polarity::positive, opts);
    CHECK(hints == std::vector<std::string>{"keep names", "keep dates"});
    const auto prompt = ep->received()[0].back().content;
    CHECK(prompt.find("ended in success") != std::string::npos);
    CHECK(prompt.find("Question: q1") != std::string::npos);
    CHECK(prompt.find("at most 2 short") != std::string::npos);

    auto neg = ScriptedChatEndpoint::replies({"store the birthplace"});
    CHECK(reflect(*neg, ts, Polarity::negative, opts) == std::vector<std::string>{"store the birthplace"});
    CHECK(neg->received()[0].back().content.find("ended in failure") != std::string::npos);
}

TEST_CASE("reflection on an empty group makes no call and failures yield nothing") {
    auto ep = ScriptedChatEndpoint::replies(std::vector<std::string>{});
    CHECK(reflect(*ep, std::vector<Trajectory>{}, Polarity::positive).empty());
    CHECK(ep->stats().calls == 0);
    ScriptedChatEndpoint failing({{"", true}});
    const std::vector<Trajectory> ts{episode("q", 0.0)};
    CHECK(reflect(failing, ts, Polarity::negative).empty());
}

TEST_CASE("task prompt update dedupes, orders and caps") {
    TaskPrompt p;
    p.hints = {"a"};
    const std::vector<std::string> pos{"b", "a", "c"};
    const std::vector<std::string> neg{"d", "b", ""};
    const auto q = update_task_prompt(p, pos, neg);
    CHECK(q.hints == std::vector<std::string>{"a", "b", "c", "d"});
    CHECK(q.global == p.global);
    CHECK(update_task_prompt(q, pos, neg) == q);

    TaskPrompt full;
    std::vector<std::string> many;
    for (int i = 0; i < 25; ++i) {
        many.push_back("h" + std::to_string(i));
    }
    const auto capped = update_task_prompt(full, many, {}, 20);
    REQUIRE(capped.hints.size() == 20);
    CHECK(capped.hints.front() == "h5");
    CHECK(capped.hints.back() == "h24");

    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        TaskPrompt base;
        std::vector<std::string> a;
        std::vector<std::string> b;
        for (std::size_t i = rng.index(15); i > 0; --i) {
            a.push_back("x" + std::to_string(rng.index(12)));
        }
        for (std::size_t i = rng.index(15); i > 0; --i) {
            b.push_back("x" + std::to_string(rng.index(12)));
        }
        const auto cap = 1 + rng.index(10);
        const auto r = update_task_prompt(base, a, b, cap);
        CHECK(r.hints.size() <= cap);
        auto sorted = r.hints;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    }
}
