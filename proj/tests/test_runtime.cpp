// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "memcycle/chat.hpp"
#include "memcycle/cli.hpp"
#include "memcycle/config.hpp"
#include "memcycle/error.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <thread>

using namespace memcycle;
using namespace memcycle::testing;
namespace fs = std::filesystem;

namespace {

class FakeTransport final : public HttpTransport {
public:
    std::vector<HttpResponse> responses;
    std::vector<std::string> bodies;
    std::vector<HttpHeaders> headers;
    std::size_t next = 0;

    HttpResponse post(const std::string&, const std::string& body, const HttpHeaders& h,
                      std::chrono::milliseconds) override {
        bodies.push_back(body);
        headers.push_back(h);
        if (next >= responses.size()) {
            throw RetryableError("no response");
        }
        return responses[next++];
    }
};

std::string chat_body(const std::string& text) {
    return Json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}}}.dump();
}

Json small_config(const std::string& out) {
    return Json{{"seed", 4},
                {"output_dir", out},
                {"embedding", {{"dim", 48}}},
                {"environment", {{"films", 8}, {"distractors", 2}, {"seed", 3}}},
                {"memory", {{"emotion_hidden", 8}, {"importance_projection", 8}}},
                {"optimization", {{"epochs", 2}, {"sample_batch", 3}, {"gate_steps", 3}}},
                {"scorers",
                 {{"emotion_train", 12},
                  {"emotion_test", 6},
                  {"chains_train", 4},
                  {"chains_test", 3},
                  {"chain_length", 4},
                  {"pairs_per_chain", 3},
                  {"emotion_epochs", 5},
                  {"importance_epochs", 5}}}};
}

std::map<std::string, std::string> snapshot(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) {
            out[fs::relative(e.path(), dir).string()] = read_file(e.path().string());
        }
    }
    return out;
}

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string write_config(const std::string& dir, const Json& j) {
    const auto path = dir + "/config.json";
    write_file(path, j.dump(2));
    return path;
}

}  // namespace

TEST_CASE("scripted endpoints replay in order and then refuse") {
    ScriptedChatEndpoint ep({{"one", false}, {"boom", true}, {"three", false}}, "s");
    CHECK(ep.complete("a") == "one");
    CHECK_THROWS_AS(ep.complete("b"), RetryableError);
    CHECK(ep.complete("c") == "three");
    CHECK_THROWS_AS(ep.complete("d"), ContractError);
    CHECK(ep.stats().calls == 3);
    CHECK(ep.stats().failures == 1);
    CHECK(ep.received().size() == 3);
    CHECK_THROWS_AS(ep.chat(std::vector<ChatMessage>{}), ContractError);
}

TEST_CASE("retry policy") {
    std::size_t retries = 0;
    int attempts = 0;
    const auto v = with_retries(RetryPolicy{2, std::chrono::milliseconds{0}}, retries, [&] {
        if (++attempts < 3) {
            throw RetryableError("again");
        }
        return 7;
    });
    CHECK(v == 7);
    CHECK(retries == 2);
    retries = 0;
    CHECK_THROWS_AS(with_retries(RetryPolicy{1, std::chrono::milliseconds{0}}, retries,
                                 []() -> int { throw RetryableError("down"); }),
                    RetryableError);
    CHECK(retries == 1);
    CHECK_THROWS_AS(with_retries(RetryPolicy{3, std::chrono::milliseconds{0}}, retries,
                                 []() -> int { throw Error("fatal"); }),
                    Error);
}

TEST_CASE("remote chat client over a fake transport") {
    auto transport = std::make_shared<FakeTransport>();
    transport->responses = {{503, "busy"}, {200, chat_body("hello")}};
    RemoteEndpointConfig cfg;
    cfg.url = "http://localhost:1/v1/chat/completions";
    cfg.model = "m1";
    cfg.retry = {2, std::chrono::milliseconds{0}};
    RemoteChatEndpoint ep(cfg, transport);
    CHECK(ep.complete("hi") == "hello");
    CHECK(ep.stats().calls == 1);
    CHECK(ep.stats().retries == 1);
    CHECK(ep.model_ref() == "m1");
    const auto body = Json::parse(transport->bodies[0]);
    CHECK(body["model"] == "m1");
    CHECK(body["messages"][0]["role"] == "user");
    CHECK(body["messages"][0]["content"] == "hi");

    transport->responses.push_back({400, "bad request"});
    CHECK_THROWS_AS(ep.complete("x"), Error);
    CHECK(ep.stats().failures == 1);
}

TEST_CASE("remote response parsing") {
    const auto r = RemoteChatEndpoint::parse_response(chat_body("x"));
    CHECK(r.text == "x");
    CHECK_FALSE(r.token_logprobs);
    const Json with_lp{{"choices",
                        {{{"message", {{"content", "ab"}}},
                          {"logprobs", {{"content", {{{"token", "a"}, {"logprob", -0.5}},
                                                     {{"token", "b"}, {"logprob", -1.0}}}}}}}}}};
    const auto lp = RemoteChatEndpoint::parse_response(with_lp.dump());
    REQUIRE(lp.token_logprobs);
    CHECK(*lp.token_logprobs == std::vector<double>{-0.5, -1.0});
    CHECK_THROWS_AS(RemoteChatEndpoint::parse_response("{}"), Error);
    CHECK_THROWS_AS(RemoteChatEndpoint::parse_response("not json"), Error);
    RemoteEndpointConfig cfg;
    cfg.model = "m";
    cfg.logprobs = true;
    const std::vector<ChatMessage> msgs{{"system", "s"}, {"user", "u"}};
    const auto body = RemoteChatEndpoint::request_body(cfg, msgs);
    CHECK(body["logprobs"] == true);
    CHECK(body["messages"].size() == 2);
}

TEST_CASE("tokens come from the environment") {
    CHECK(auth_headers("").empty());
    ::setenv("MEMCYCLE_TEST_TOKEN", "abc", 1);
    const auto h = auth_headers("MEMCYCLE_TEST_TOKEN");
    REQUIRE(h.size() == 1);
    CHECK(h[0].second == "Bearer abc");
}

TEST_CASE("endpoint registry") {
    EndpointRegistry r;
    r.add("a", ScriptedChatEndpoint::replies({"x"}));
    CHECK(r.contains("a"));
    CHECK_FALSE(r.contains("b"));
    CHECK_THROWS_AS(r.get("b"), ConfigError);
}

TEST_CASE("run config defaults and round-trip") {
    const auto c = RunConfig::from_json(Json::object());
    c.validate();
    CHECK(c.embedding.dim == 768);
    CHECK(c.memory.policy == "adaptive");
    CHECK(c.endpoints.size() == synthetic_roles().size());
    const auto back = RunConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(c.trajectory_log_path() == (fs::path("out") / "trajectories.jsonl").string());
    CHECK(c.optimization_config(true).sft.learning_rate == doctest::Approx(5e-4));
    const auto o = RunConfig::from_json(Json{{"optimization", {{"epochs", 9}}}});
    CHECK(o.optimization_config(false).epochs == 9);
}

TEST_CASE("config errors carry a JSON pointer") {
    auto pointer_of = [](const Json& j) {
        try {
            RunConfig::from_json(j).validate();
        } catch (const ConfigError& e) {
            return e.pointer();
        }
        return std::string("<none>");
    };
    CHECK(pointer_of(Json{{"memory", {{"top_k", -1}}}}) == "/memory/top_k");
    CHECK(pointer_of(Json{{"memory", {{"topk", 3}}}}).find("/memory/topk") == 0);
    CHECK(pointer_of(Json{{"embedding", {{"dim", "big"}}}}) == "/embedding/dim");
    CHECK(pointer_of(Json{{"memory", {{"policy", "psychic"}}}}) == "/memory/policy");
    CHECK(pointer_of(Json{{"roles", {{"actor", "ghost"}}}}).find("/roles/actor") == 0);
    CHECK(pointer_of(Json{{"optimization", {{"gamma", 2.0}}}}) == "/optimization/gamma");
    CHECK(pointer_of(Json{{"memory", {{"fixed_alpha", {1, 2}}}}}) == "/memory/fixed_alpha");
    const Json secret{{"endpoints", {{"actor", {{"backend", "remote"}, {"url", "http://x"}, {"token", "s"}}}}}};
    try {
        RunConfig::from_json(secret);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("token_env") != std::string::npos);
    }
}

TEST_CASE("services build deterministic scorers and wire endpoints") {
    const auto c = RunConfig::from_json(small_config("unused"));
    const auto a = Services::build(c);
    const auto b = Services::build(c);
    REQUIRE(a.emotion);
    CHECK(same_values(a.emotion->w1, b.emotion->w1));
    CHECK(a.tasks == b.tasks);
    CHECK(a.endpoints.contains("actor"));
    CHECK(a.embedder->dim() == 48);
    CHECK(a.suite->size() == 6);
    const auto bundle = a.initial_bundle(c);
    CHECK(bundle.gate.dim() == 48);
    CHECK(bundle.utilization.model_ref == "merger");
}

TEST_CASE("report csv") {
    std::vector<Trajectory> ts(3);
    ts[0].policy = "adaptive";
    ts[0].reward = 1.0;
    ts[0].steps.resize(2);
    ts[1].policy = "adaptive";
    ts[1].steps.resize(4);
    ts[2].policy = "full";
    ts[2].reward = 1.0;
    ts[2].steps.resize(1);
    ts[2].steps[0].llm_calls = 3;
    const auto csv = report_csv(ts);
    const auto lines = split_lines(csv);
    REQUIRE(lines.size() >= 4);
    CHECK(lines[0].rfind("policy,episodes,em,success_rate,mean_steps,", 0) == 0);
    CHECK(lines[1].rfind("all,3,", 0) == 0);
    CHECK(lines[2].rfind("adaptive,2,0.500000,", 0) == 0);
    CHECK(lines[3].rfind("full,1,1.000000,", 0) == 0);
    CHECK(lines[1].back() == ',');
}

TEST_CASE("cli usage errors") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"no-such-command"}).code == 2);
    const auto dir = temp_dir("cli-bad");
    const auto path = write_config(dir, Json{{"memory", {{"top_k", -3}}}});
    const auto r = cli({"run", "--config", path});
    CHECK(r.code == 2);
    CHECK(r.err.find("/memory/top_k") != std::string::npos);
    CHECK(cli({"run", "--config", dir + "/missing.json"}).code == 2);
    CHECK(cli({"train-off", "--output-dir", dir + "/x", "--log", dir + "/nope.jsonl"}).code == 2);
}

TEST_CASE("every subcommand is byte-deterministic") {
    const auto root = temp_dir("cli-det");
    const auto out = root + "/out";
    const auto cfg = write_config(root, small_config(out));
    const std::vector<std::vector<std::string>> commands{
        {"run", "--config", cfg},
        {"report", "--config", cfg},
        {"export-datasets", "--config", cfg},
        {"train-off", "--config", cfg},
        {"train-on", "--config", cfg},
        {"pretrain-scorers", "--config", cfg},
        {"eval-scorers", "--config", cfg},
    };
    std::vector<std::map<std::string, std::string>> first;
    std::vector<std::string> stdout_first;
    for (int pass = 0; pass < 2; ++pass) {
        fs::remove_all(out);
        for (std::size_t i = 0; i < commands.size(); ++i) {
            const auto r = cli(commands[i]);
            INFO(commands[i][0], " ", r.err);
            REQUIRE(r.code == 0);
            if (pass == 0) {
                first.push_back(snapshot(out));
                stdout_first.push_back(r.out);
            } else {
                CHECK(snapshot(out) == first[i]);
                CHECK(r.out == stdout_first[i]);
            }
        }
    }
    const auto files = first.back();
    for (const char* f : {"trajectories.jsonl", "run_config.json", "report.csv", "sft.jsonl", "dpo.jsonl",
                          "train_off_report.json", "bundle/manifest.json", "epoch_metrics.csv",
                          "emotion_scorer.json", "importance_scorer.json", "scorer_eval.csv"}) {
        CHECK_MESSAGE(files.count(f) == 1, f);
    }
    for (const auto& line : split_lines(files.at("sft.jsonl"))) {
        if (line.empty()) {
            continue;
        }
        const auto j = Json::parse(line);
        CHECK(j.size() == 2);
        CHECK(j.contains("prompt"));
        CHECK(j.contains("target"));
    }
    CHECK(deserialize_log(files.at("trajectories.jsonl")).size() == 8);
}

TEST_CASE("the scorers written by pretrain-scorers load back into a run") {
    const auto root = temp_dir("cli-scorers");
    const auto out = root + "/out";
    auto j = small_config(out);
    REQUIRE(cli({"pretrain-scorers", "--config", write_config(root, j)}).code == 0);
    j["memory"]["emotion_scorer"] = out + "/emotion_scorer.json";
    j["memory"]["importance_scorer"] = out + "/importance_scorer.json";
    const auto c = RunConfig::from_json(j);
    const auto s = Services::build(c);
    CHECK(same_values(s.emotion->w1, EmotionScorer::from_json(Json::parse(read_file(out + "/emotion_scorer.json"))).w1));
    j["embedding"]["dim"] = 32;
    CHECK_THROWS_AS(Services::build(RunConfig::from_json(j)), ConfigError);
}

TEST_CASE("concurrent runs with distinct configs do not interfere") {
    const auto root = temp_dir("cli-par");
    auto ja = small_config(root + "/a");
    auto jb = small_config(root + "/b");
    jb["seed"] = 9;
    jb["memory"]["policy"] = "full";
    write_file(root + "/a.json", ja.dump());
    write_file(root + "/b.json", jb.dump());
    REQUIRE(cli({"run", "--config", root + "/a.json"}).code == 0);
    REQUIRE(cli({"run", "--config", root + "/b.json"}).code == 0);
    const auto serial_a = read_file(root + "/a/trajectories.jsonl");
    const auto serial_b = read_file(root + "/b/trajectories.jsonl");
    fs::remove_all(root + "/a");
    fs::remove_all(root + "/b");
    int ca = -1;
    int cb = -1;
    std::thread ta([&] { ca = cli({"run", "--config", root + "/a.json", "--parallelism", "3"}).code; });
    std::thread tb([&] { cb = cli({"run", "--config", root + "/b.json"}).code; });
    ta.join();
    tb.join();
    CHECK(ca == 0);
    CHECK(cb == 0);
    CHECK(read_file(root + "/a/trajectories.jsonl") == serial_a);
    CHECK(read_file(root + "/b/trajectories.jsonl") == serial_b);
    CHECK(serial_a != serial_b);
}

TEST_CASE("timings are opt-in") {
    const auto root = temp_dir("cli-time");
    const auto cfg = write_config(root, small_config(root + "/out"));
    REQUIRE(cli({"run", "--config", cfg, "--episodes", "2", "--timings"}).code == 0);
    const auto log = read_trajectory_log(root + "/out/trajectories.jsonl");
    REQUIRE(log.size() == 2);
    REQUIRE_FALSE(log[0].steps.empty());
    CHECK(log[0].steps[0].seconds);
    REQUIRE(cli({"report", "--config", cfg}).code == 0);
    const auto lines = split_lines(read_file(root + "/out/report.csv"));
    CHECK(lines[1].back() != ',');
}

#ifdef MEMCYCLE_CLI_PATH
TEST_CASE("the installed binary reports usage errors") {
    const std::string cmd = std::string("\"") + MEMCYCLE_CLI_PATH + "\" bogus >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 2);
}
#endif
