// SPDX-License-Identifier: Apache-2.0
#include "memcycle/config.hpp"

#include "memcycle/error.hpp"
#include "memcycle/synthetic.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace memcycle {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kPolicies{"adaptive", "full", "long-term", "short-term", "fixed-weight"};
const std::set<std::string> kSecretKeys{"token", "api_key", "apikey", "password", "secret"};

/// Reads one JSON object, tracking its pointer and rejecting unknown keys.
class Section {
public:
    Section(const Json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
        if (!j_.is_object()) {
            throw ConfigError(pointer_.empty() ? "/" : pointer_, "expected an object");
        }
    }

    std::string at(const std::string& key) const { return pointer_ + "/" + key; }
    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    const Json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        if (!has(key)) {
            return;
        }
        const Json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) {
                    throw ConfigError(at(key), "expected a boolean");
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) {
                    throw ConfigError(at(key), "expected a string");
                }
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!v.is_number_integer() || v.get<long long>() < 0) {
                    throw ConfigError(at(key), "expected a non-negative integer");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) {
                    throw ConfigError(at(key), "expected a number");
                }
            }
            out = v.get<T>();
        } catch (const Json::exception& e) {
            throw ConfigError(at(key), e.what());
        }
    }

    Section child(const std::string& key) { return Section(raw(key), at(key)); }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (kSecretKeys.count(key) > 0) {
                throw ConfigError(at(key), "secrets must come from an environment variable (token_env)");
            }
            if (seen_.count(key) == 0) {
                throw ConfigError(at(key), "unknown key");
            }
        }
    }

private:
    const Json& j_;
    std::string pointer_;
    std::set<std::string> seen_;
};

void read_remote(Section& s, RemoteEndpointConfig& r) {
    s.read("url", r.url);
    s.read("model", r.model);
    s.read("token_env", r.token_env);
    std::size_t timeout_ms = static_cast<std::size_t>(r.timeout.count());
    s.read("timeout_ms", timeout_ms);
    r.timeout = std::chrono::milliseconds(timeout_ms);
    std::size_t retries = static_cast<std::size_t>(r.retry.max_retries);
    s.read("max_retries", retries);
    r.retry.max_retries = static_cast<int>(retries);
    std::size_t backoff_ms = static_cast<std::size_t>(r.retry.backoff.count());
    s.read("backoff_ms", backoff_ms);
    r.retry.backoff = std::chrono::milliseconds(backoff_ms);
    s.read("logprobs", r.logprobs);
    s.read("temperature", r.temperature);
}

Json remote_json(const RemoteEndpointConfig& r) {
    return Json{{"url", r.url},
                {"model", r.model},
                {"token_env", r.token_env},
                {"timeout_ms", r.timeout.count()},
                {"max_retries", r.retry.max_retries},
                {"backoff_ms", r.retry.backoff.count()},
                {"logprobs", r.logprobs},
                {"temperature", r.temperature}};
}

EndpointConfig read_endpoint(Section s) {
    EndpointConfig e;
    s.read("backend", e.backend);
    if (e.backend == "synthetic") {
        s.read("role", e.role);
    } else if (e.backend == "scripted") {
        s.read("model_ref", e.model_ref);
        if (s.has("replies")) {
            const Json& replies = s.raw("replies");
            if (!replies.is_array()) {
                throw ConfigError(s.at("replies"), "expected an array");
            }
            for (std::size_t i = 0; i < replies.size(); ++i) {
                const Json& r = replies[i];
                const auto ptr = s.at("replies") + "/" + std::to_string(i);
                if (r.is_string()) {
                    e.script.push_back({r.get<std::string>(), false});
                } else {
                    Section rs(r, ptr);
                    ScriptStep step;
                    rs.read("text", step.text);
                    rs.read("fail", step.fail);
                    rs.finish();
                    e.script.push_back(step);
                }
            }
        }
    } else if (e.backend == "remote") {
        read_remote(s, e.remote);
    } else {
        throw ConfigError(s.at("backend"), "unknown endpoint backend '" + e.backend + "'");
    }
    s.finish();
    return e;
}

Json endpoint_json(const EndpointConfig& e) {
    Json j{{"backend", e.backend}};
    if (e.backend == "synthetic") {
        j["role"] = e.role;
    } else if (e.backend == "scripted") {
        j["model_ref"] = e.model_ref;
        Json replies = Json::array();
        for (const auto& step : e.script) {
            replies.push_back(Json{{"text", step.text}, {"fail", step.fail}});
        }
        j["replies"] = replies;
    } else {
        for (auto& [k, v] : remote_json(e.remote).items()) {
            j[k] = v;
        }
    }
    return j;
}

std::shared_ptr<ChatEndpoint> make_endpoint(const std::string& name, const EndpointConfig& e) {
    if (e.backend == "synthetic") {
        return make_synthetic_endpoint(e.role);
    }
    if (e.backend == "scripted") {
        return std::make_shared<ScriptedChatEndpoint>(e.script, e.model_ref.empty() ? name : e.model_ref);
    }
    return std::make_shared<RemoteChatEndpoint>(e.remote);
}

template <typename S>
S load_or_random(const std::string& path, const std::string& pointer, S random) {
    if (path.empty()) {
        return random;
    }
    try {
        return S::from_json(Json::parse(read_file(path)));
    } catch (const Json::exception& e) {
        throw ConfigError(pointer, path + ": " + e.what());
    } catch (const Error& e) {
        throw ConfigError(pointer, e.what());
    }
}

}  // namespace

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot read " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    const fs::path p(path);
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path);
    }
    out << contents;
}

std::map<std::string, EndpointConfig> RunConfig::default_endpoints() {
    std::map<std::string, EndpointConfig> out;
    for (const auto& role : synthetic_roles()) {
        EndpointConfig e;
        e.role = role;
        out[role] = e;
    }
    return out;
}

OptimizationConfig RunConfig::optimization_config(bool on_policy) const {
    const auto base = on_policy ? OptimizationConfig::on_policy_defaults() : OptimizationConfig::off_policy_defaults();
    return OptimizationConfig::from_json(optimization, base);
}

std::string RunConfig::trajectory_log_path() const {
    return trajectory_log.empty() ? (fs::path(output_dir) / "trajectories.jsonl").string() : trajectory_log;
}

Json RunConfig::to_json() const {
    Json endpoints_json = Json::object();
    for (const auto& [name, e] : endpoints) {
        endpoints_json[name] = endpoint_json(e);
    }
    Json embedding_json{{"backend", embedding.backend}, {"dim", embedding.dim}, {"seed", embedding.seed}};
    if (embedding.backend == "remote") {
        for (auto& [k, v] : remote_json(embedding.remote).items()) {
            embedding_json[k] = v;
        }
    }
    Json env{{"backend", environment.backend}};
    if (environment.backend == "synthetic") {
        env["films"] = environment.synthetic.films;
        env["distractors"] = environment.synthetic.distractors;
        env["seed"] = environment.synthetic.seed;
    } else {
        env["tasks"] = environment.tasks_path;
        env["corpus"] = environment.corpus_path;
    }
    const Json roles_json{{"actor", roles.actor},
                          {"extractor", roles.extractor},
                          {"utilization", roles.utilization},
                          {"expert", roles.expert},
                          {"reflector", roles.reflector},
                          {"emotion_writer", roles.emotion_writer},
                          {"enricher", roles.enricher},
                          {"judge", roles.judge}};
    const Json memory_json{{"policy", memory.policy},
                           {"top_k", memory.top_k},
                           {"cache_capacity", memory.cache_capacity},
                           {"max_iters", memory.max_iters},
                           {"short_term_window", memory.short_term_window},
                           {"fixed_alpha", memory.fixed_alpha},
                           {"metrics", memory.metrics.to_json()},
                           {"store_thoughts", memory.store_thoughts},
                           {"emotion_hidden", memory.emotion_hidden},
                           {"importance_projection", memory.importance_projection},
                           {"emotion_scorer", memory.emotion_scorer},
                           {"importance_scorer", memory.importance_scorer}};
    const auto& sc = scorers;
    const Json scorers_json{{"emotion_train", sc.emotion_train},
                            {"emotion_test", sc.emotion_test},
                            {"chains_train", sc.chains_train},
                            {"chains_test", sc.chains_test},
                            {"chain_length", sc.chain_length},
                            {"pairs_per_chain", sc.pairs_per_chain},
                            {"emotion_lr", sc.emotion.learning_rate},
                            {"emotion_epochs", sc.emotion.epochs},
                            {"importance_lr", sc.importance.learning_rate},
                            {"importance_epochs", sc.importance.epochs},
                            {"init_scale", sc.init_scale},
                            {"train_seed_sentence", sc.train_seed_sentence},
                            {"test_seed_sentence", sc.test_seed_sentence},
                            {"few_shot_examples", sc.few_shot_examples}};
    return Json{{"seed", seed},
                {"output_dir", output_dir},
                {"embedding", embedding_json},
                {"endpoints", endpoints_json},
                {"roles", roles_json},
                {"environment", env},
                {"memory", memory_json},
                {"optimization", optimization},
                {"trajectory_log", trajectory_log},
                {"bundle", bundle},
                {"fine_tune_hook", fine_tune_hook},
                {"parallelism", parallelism},
                {"episodes", episodes},
                {"scorers", scorers_json}};
}

RunConfig RunConfig::from_json(const Json& j) {
    RunConfig c;
    c.endpoints = default_endpoints();
    Section root(j, "");
    root.read("seed", c.seed);
    root.read("output_dir", c.output_dir);
    root.read("trajectory_log", c.trajectory_log);
    root.read("bundle", c.bundle);
    root.read("fine_tune_hook", c.fine_tune_hook);
    root.read("parallelism", c.parallelism);
    root.read("episodes", c.episodes);

    if (root.has("embedding")) {
        auto s = root.child("embedding");
        s.read("backend", c.embedding.backend);
        s.read("dim", c.embedding.dim);
        s.read("seed", c.embedding.seed);
        read_remote(s, c.embedding.remote);
        s.finish();
    }
    if (root.has("endpoints")) {
        auto s = root.child("endpoints");
        c.endpoints.clear();
        for (const auto& [name, value] : root.raw("endpoints").items()) {
            c.endpoints[name] = read_endpoint(s.child(name));
        }
        s.finish();
    }
    if (root.has("roles")) {
        auto s = root.child("roles");
        s.read("actor", c.roles.actor);
        s.read("extractor", c.roles.extractor);
        s.read("utilization", c.roles.utilization);
        s.read("expert", c.roles.expert);
        s.read("reflector", c.roles.reflector);
        s.read("emotion_writer", c.roles.emotion_writer);
        s.read("enricher", c.roles.enricher);
        s.read("judge", c.roles.judge);
        s.finish();
    }
    if (root.has("environment")) {
        auto s = root.child("environment");
        s.read("backend", c.environment.backend);
        s.read("films", c.environment.synthetic.films);
        s.read("distractors", c.environment.synthetic.distractors);
        s.read("seed", c.environment.synthetic.seed);
        s.read("tasks", c.environment.tasks_path);
        s.read("corpus", c.environment.corpus_path);
        s.finish();
    }
    if (root.has("memory")) {
        auto s = root.child("memory");
        s.read("policy", c.memory.policy);
        s.read("top_k", c.memory.top_k);
        s.read("cache_capacity", c.memory.cache_capacity);
        s.read("max_iters", c.memory.max_iters);
        s.read("short_term_window", c.memory.short_term_window);
        s.read("store_thoughts", c.memory.store_thoughts);
        s.read("emotion_hidden", c.memory.emotion_hidden);
        s.read("importance_projection", c.memory.importance_projection);
        s.read("emotion_scorer", c.memory.emotion_scorer);
        s.read("importance_scorer", c.memory.importance_scorer);
        if (s.has("fixed_alpha")) {
            const Json& a = s.raw("fixed_alpha");
            if (!a.is_array() || a.size() != 3) {
                throw ConfigError(s.at("fixed_alpha"), "expected three numbers (rel, imp, rec)");
            }
            for (std::size_t i = 0; i < 3; ++i) {
                if (!a[i].is_number()) {
                    throw ConfigError(s.at("fixed_alpha") + "/" + std::to_string(i), "expected a number");
                }
                c.memory.fixed_alpha[i] = a[i].get<double>();
            }
        }
        if (s.has("metrics")) {
            try {
                c.memory.metrics = MetricConfig::from_json(s.raw("metrics"));
            } catch (const Json::exception& e) {
                throw ConfigError(s.at("metrics"), e.what());
            } catch (const ContractError& e) {
                throw ConfigError(s.at("metrics"), e.what());
            }
        }
        s.finish();
    }
    if (root.has("optimization")) {
        c.optimization = root.raw("optimization");
        if (!c.optimization.is_object()) {
            throw ConfigError("/optimization", "expected an object");
        }
    }
    if (root.has("scorers")) {
        auto s = root.child("scorers");
        auto& sc = c.scorers;
        s.read("emotion_train", sc.emotion_train);
        s.read("emotion_test", sc.emotion_test);
        s.read("chains_train", sc.chains_train);
        s.read("chains_test", sc.chains_test);
        s.read("chain_length", sc.chain_length);
        s.read("pairs_per_chain", sc.pairs_per_chain);
        s.read("emotion_lr", sc.emotion.learning_rate);
        s.read("emotion_epochs", sc.emotion.epochs);
        s.read("importance_lr", sc.importance.learning_rate);
        s.read("importance_epochs", sc.importance.epochs);
        s.read("init_scale", sc.init_scale);
        s.read("train_seed_sentence", sc.train_seed_sentence);
        s.read("test_seed_sentence", sc.test_seed_sentence);
        s.read("few_shot_examples", sc.few_shot_examples);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error& e) {
        throw ConfigError("/", e.what());
    }
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ConfigError("/", path + ": " + e.what());
    }
    return from_json(j);
}

void RunConfig::validate() const {
    if (embedding.backend != "mock" && embedding.backend != "remote") {
        throw ConfigError("/embedding/backend", "unknown embedding backend '" + embedding.backend + "'");
    }
    if (embedding.dim == 0) {
        throw ConfigError("/embedding/dim", "must be positive");
    }
    if (embedding.backend == "remote" && embedding.remote.url.empty()) {
        throw ConfigError("/embedding/url", "remote embedding needs a url");
    }
    for (const auto& [name, e] : endpoints) {
        const auto ptr = "/endpoints/" + name;
        if (e.backend == "synthetic") {
            const auto roles_list = synthetic_roles();
            if (std::find(roles_list.begin(), roles_list.end(), e.role) == roles_list.end()) {
                throw ConfigError(ptr + "/role", "unknown synthetic role '" + e.role + "'");
            }
        } else if (e.backend == "remote" && e.remote.url.empty()) {
            throw ConfigError(ptr + "/url", "remote endpoint needs a url");
        }
    }
    const std::vector<std::pair<std::string, std::string>> role_refs{
        {"actor", roles.actor},       {"extractor", roles.extractor}, {"utilization", roles.utilization},
        {"expert", roles.expert},     {"reflector", roles.reflector}, {"emotion_writer", roles.emotion_writer},
        {"enricher", roles.enricher}, {"judge", roles.judge}};
    for (const auto& [role, name] : role_refs) {
        if (endpoints.count(name) == 0) {
            throw ConfigError("/roles/" + role, "no endpoint named '" + name + "'");
        }
    }
    if (environment.backend == "synthetic") {
        if (environment.synthetic.films < 2) {
            throw ConfigError("/environment/films", "need at least two films");
        }
    } else if (environment.backend == "files") {
        if (environment.tasks_path.empty()) {
            throw ConfigError("/environment/tasks", "files environment needs a tasks path");
        }
        if (environment.corpus_path.empty()) {
            throw ConfigError("/environment/corpus", "files environment needs a corpus path");
        }
    } else {
        throw ConfigError("/environment/backend", "unknown environment backend '" + environment.backend + "'");
    }
    if (kPolicies.count(memory.policy) == 0) {
        throw ConfigError("/memory/policy", "unknown memory policy '" + memory.policy + "'");
    }
    if (memory.top_k == 0) {
        throw ConfigError("/memory/top_k", "must be positive");
    }
    if (memory.cache_capacity == 0) {
        throw ConfigError("/memory/cache_capacity", "must be positive");
    }
    if (memory.max_iters == 0) {
        throw ConfigError("/memory/max_iters", "must be positive");
    }
    if (memory.short_term_window == 0) {
        throw ConfigError("/memory/short_term_window", "must be positive");
    }
    if (memory.metrics.size() == 0) {
        throw ConfigError("/memory/metrics", "at least one metric must be enabled");
    }
    if (parallelism == 0) {
        throw ConfigError("/parallelism", "must be positive");
    }
    if (scorers.chain_length < 2) {
        throw ConfigError("/scorers/chain_length", "chains need at least two sentences");
    }
    (void)optimization_config(false);
    (void)optimization_config(true);
}

Services Services::build(const RunConfig& config) {
    Services s;
    for (const auto& [name, e] : config.endpoints) {
        s.endpoints.add(name, make_endpoint(name, e));
    }
    const auto dim = config.embedding.dim;
    if (config.embedding.backend == "mock") {
        s.embedder = std::make_shared<MockEmbeddingProvider>(config.embedding.seed, dim);
    } else {
        s.embedder = std::make_shared<RemoteEmbeddingProvider>(config.embedding.remote, dim);
    }

    Rng rng(mix_seed(config.seed, 0x5c0e));
    const auto& mem = config.memory;
    auto emotion = load_or_random(mem.emotion_scorer, "/memory/emotion_scorer",
                                  EmotionScorer::random(dim, mem.emotion_hidden, rng));
    auto importance_scorer = load_or_random(mem.importance_scorer, "/memory/importance_scorer",
                                            ImportanceScorer::random(dim, mem.importance_projection, rng));
    if (emotion.input_dim() != dim) {
        throw ConfigError("/memory/emotion_scorer", "scorer input size does not match the embedding dimension");
    }
    if (importance_scorer.input_dim() != dim) {
        throw ConfigError("/memory/importance_scorer", "scorer input size does not match the embedding dimension");
    }
    s.emotion = std::make_shared<EmotionScorer>(std::move(emotion));
    s.importance = std::make_shared<ImportanceScorer>(std::move(importance_scorer));
    s.suite = std::make_shared<MetricSuite>(mem.metrics, s.emotion, s.importance);

    if (config.environment.backend == "synthetic") {
        auto world = make_multihop_world(config.environment.synthetic);
        s.tasks = std::move(world.tasks);
        s.corpus = std::move(world.corpus);
    } else {
        try {
            s.tasks = read_tasks_jsonl(read_file(config.environment.tasks_path));
        } catch (const Error& e) {
            throw ConfigError("/environment/tasks", e.what());
        }
        try {
            s.corpus = std::make_shared<InMemoryCorpus>(InMemoryCorpus::from_jsonl(read_file(config.environment.corpus_path)));
        } catch (const Error& e) {
            throw ConfigError("/environment/corpus", e.what());
        }
    }
    return s;
}

RunnerConfig Services::runner_config(const RunConfig& config) const {
    RunnerConfig r;
    r.memory_policy = config.memory.policy;
    r.adaptive.top_k = config.memory.top_k;
    r.adaptive.cache_capacity = config.memory.cache_capacity;
    r.adaptive.aggregation.max_iters = config.memory.max_iters;
    r.agent.store_thoughts = config.memory.store_thoughts;
    r.short_term_window = config.memory.short_term_window;
    r.fixed_alpha = Vector::Map(config.memory.fixed_alpha.data(), 3);
    r.top_k = config.memory.top_k;
    r.parallelism = config.parallelism;
    r.success_threshold = config.optimization_config(true).success_threshold;
    r.seed = config.seed;
    return r;
}

EpisodeRunner Services::runner(const RunConfig& config) const {
    return EpisodeRunner(tasks, corpus, endpoints, config.roles.actor, config.roles.extractor, embedder, suite,
                         importance, runner_config(config));
}

PolicyBundle Services::initial_bundle(const RunConfig& config) const {
    if (!config.bundle.empty()) {
        try {
            return PolicyBundle::load(config.bundle);
        } catch (const Error& e) {
            throw ConfigError("/bundle", e.what());
        } catch (const Json::exception& e) {
            throw ConfigError("/bundle", e.what());
        }
    }
    PolicyBundle b;
    b.gate = GateParams::zeros(embedder->dim(), suite->size());
    b.utilization.model_ref = config.roles.utilization;
    return b;
}

}  // namespace memcycle
