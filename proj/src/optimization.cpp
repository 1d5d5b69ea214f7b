// SPDX-License-Identifier: Apache-2.0
#include "memcycle/optimization.hpp"

#include "memcycle/error.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace memcycle {

namespace fs = std::filesystem;

OptimizationConfig OptimizationConfig::off_policy_defaults() { return OptimizationConfig{}; }

OptimizationConfig OptimizationConfig::on_policy_defaults() {
    OptimizationConfig c;
    c.sft = StageHyper{5e-4, 16};
    c.dpo = StageHyper{1e-4, 16};
    c.reflection_size = 15;
    c.gate_steps = 1;
    c.sample_batch = 30;
    c.epochs = 5;
    return c;
}

void OptimizationConfig::validate() const {
    auto unit = [](double v, const char* name) {
        if (v < 0.0 || v > 1.0) {
            throw ConfigError(std::string("/optimization/") + name, "must lie in [0, 1]");
        }
    };
    unit(success_threshold, "success_threshold");
    unit(storage_threshold, "storage_threshold");
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw ConfigError("/optimization/gamma", "must lie in (0, 1)");
    }
    if (!(gate_learning_rate > 0.0)) {
        throw ConfigError("/optimization/gate_learning_rate", "must be positive");
    }
    if (epochs < 1) {
        throw ConfigError("/optimization/epochs", "must be at least 1");
    }
    if (sample_batch < 1) {
        throw ConfigError("/optimization/sample_batch", "must be at least 1");
    }
    if (!(dpo_beta > 0.0)) {
        throw ConfigError("/optimization/dpo_beta", "must be positive");
    }
}

Json OptimizationConfig::to_json() const {
    return Json{{"success_threshold", success_threshold},
                {"storage_threshold", storage_threshold},
                {"gamma", gamma},
                {"gate_learning_rate", gate_learning_rate},
                {"gate_steps", gate_steps},
                {"gate_batch", gate_batch},
                {"sft", {{"learning_rate", sft.learning_rate}, {"batch_size", sft.batch_size}}},
                {"dpo", {{"learning_rate", dpo.learning_rate}, {"batch_size", dpo.batch_size}}},
                {"dpo_beta", dpo_beta},
                {"reflection_size", reflection_size},
                {"reflection_lines", reflection_lines},
                {"hint_cap", hint_cap},
                {"sample_batch", sample_batch},
                {"epochs", epochs},
                {"seed", seed}};
}

OptimizationConfig OptimizationConfig::from_json(const Json& j, const OptimizationConfig& base) {
    OptimizationConfig c = base;
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) {
            return;
        }
        try {
            field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
        } catch (const Json::exception& e) {
            throw ConfigError(std::string("/optimization/") + key, e.what());
        }
    };
    auto get_stage = [&](const char* key, StageHyper& h) {
        if (!j.contains(key)) {
            return;
        }
        const auto& s = j.at(key);
        if (!s.is_object()) {
            throw ConfigError(std::string("/optimization/") + key, "must be an object");
        }
        h.learning_rate = s.value("learning_rate", h.learning_rate);
        h.batch_size = s.value("batch_size", h.batch_size);
    };
    get("success_threshold", c.success_threshold);
    get("storage_threshold", c.storage_threshold);
    get("gamma", c.gamma);
    get("gate_learning_rate", c.gate_learning_rate);
    get("gate_steps", c.gate_steps);
    get("gate_batch", c.gate_batch);
    get_stage("sft", c.sft);
    get_stage("dpo", c.dpo);
    get("dpo_beta", c.dpo_beta);
    get("reflection_size", c.reflection_size);
    get("reflection_lines", c.reflection_lines);
    get("hint_cap", c.hint_cap);
    get("sample_batch", c.sample_batch);
    get("epochs", c.epochs);
    get("seed", c.seed);
    c.validate();
    return c;
}

namespace {

Json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot read " + path.string());
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), 1, e.byte);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << text;
}

}  // namespace

void PolicyBundle::save(const std::string& dir) const {
    const fs::path d(dir);
    fs::create_directories(d);
    write_text(d / "gate.json", gate.to_json().dump() + "\n");
    write_text(d / "utilization.json", utilization.to_json().dump(2) + "\n");
    write_text(d / "task_prompt.json", task_prompt.to_json().dump(2) + "\n");
    const Json manifest{{"version", version},
                        {"stage", stage},
                        {"files", {"gate.json", "utilization.json", "task_prompt.json"}}};
    write_text(d / "manifest.json", manifest.dump(2) + "\n");
}

PolicyBundle PolicyBundle::load(const std::string& dir) {
    const fs::path d(dir);
    const auto manifest = read_json_file(d / "manifest.json");
    PolicyBundle b;
    b.version = manifest.at("version").get<int>();
    b.stage = manifest.value("stage", std::string("initial"));
    b.gate = GateParams::from_json(read_json_file(d / "gate.json"));
    b.utilization = UtilizationPolicy::from_json(read_json_file(d / "utilization.json"));
    b.task_prompt = TaskPrompt::from_json(read_json_file(d / "task_prompt.json"));
    return b;
}

bool operator==(const PolicyBundle& a, const PolicyBundle& b) {
    return a.gate == b.gate && a.utilization == b.utilization && a.task_prompt == b.task_prompt &&
           a.version == b.version && a.stage == b.stage;
}

std::vector<Trajectory> filter_successful(std::span<const Trajectory> trajectories, double threshold) {
    if (threshold < 0.0 || threshold > 1.0) {
        throw ContractError("success threshold must lie in [0, 1]");
    }
    std::vector<Trajectory> out;
    for (const auto& t : trajectories) {
        if (t.reward >= threshold) {
            out.push_back(t);
        }
    }
    return out;
}

std::vector<RankingGroup> build_ranking_groups(std::span<const Trajectory> trajectories,
                                               const EmbeddingProvider& embedder, const MetricSuite& suite) {
    std::vector<RankingGroup> groups;
    const auto d = static_cast<Eigen::Index>(embedder.dim());
    const auto n = static_cast<Eigen::Index>(suite.size());
    for (const auto& t : trajectories) {
        RankingGroup g;
        for (const auto& step : t.steps) {
            if (step.ranked_ids.size() < 2) {
                continue;
            }
            const QueryState q{embedder.embed(step.state_text), step.step};
            RankingSample s;
            s.query = q.embedding;
            const auto rows = static_cast<Eigen::Index>(step.ranked_ids.size());
            s.memories.resize(rows, d);
            s.metrics.resize(rows, n);
            for (Eigen::Index i = 0; i < rows; ++i) {
                const auto& u = t.store.at(step.ranked_ids[static_cast<std::size_t>(i)]);
                s.memories.row(i) = u.embedding.transpose();
                s.metrics.row(i) = suite.values(q, u).transpose();
            }
            g.samples.push_back(std::move(s));
        }
        if (!g.samples.empty()) {
            groups.push_back(std::move(g));
        }
    }
    return groups;
}

namespace {

void warn(const OptimizationContext& ctx, StageReport& report, const std::string& message) {
    report.warnings.push_back(message);
    if (ctx.warn) {
        ctx.warn(message);
    }
}

std::string dataset_path(const OptimizationContext& ctx, const std::string& relative) {
    return ctx.output_dir.empty() ? std::string() : (fs::path(ctx.output_dir) / relative).string();
}

// Cumulative datasets for one pipeline run.
struct DatasetState {
    std::vector<SftRecord> sft;
    std::vector<DpoRecord> dpo;
};

// One round of the three procedure updates. `bundle` is advanced in place;
// `bundle.stage` tracks the last completed stage.
StageReport update_round(PolicyBundle& bundle, std::span<const Trajectory> trajectories,
                         const OptimizationConfig& config, const OptimizationContext& ctx, DatasetState& datasets,
                         const std::string& prefix) {
    if (!ctx.embedder || !ctx.suite || ctx.endpoints == nullptr) {
        throw ContractError("optimization context is incomplete");
    }
    NoOpFineTuneHook noop;
    FineTuneHook& hook = ctx.hook != nullptr ? *ctx.hook : noop;
    StageReport report;
    report.trajectories = trajectories.size();

    const auto successes = filter_successful(trajectories, config.success_threshold);
    report.successes = successes.size();
    if (successes.empty()) {
        warn(ctx, report, "no successful trajectories; gate unchanged");
    } else {
        const auto groups = build_ranking_groups(successes, *ctx.embedder, *ctx.suite);
        if (groups.empty()) {
            warn(ctx, report, "successful trajectories carry no rankings; gate unchanged");
        } else {
            GateTrainingOptions opts;
            opts.learning_rate = config.gate_learning_rate;
            opts.steps = config.gate_steps;
            opts.gamma = config.gamma;
            opts.batch_size = config.gate_batch;
            opts.seed = mix_seed(config.seed, static_cast<std::uint64_t>(bundle.version));
            auto trained = train_gate(bundle.gate, groups, opts);
            bundle.gate = std::move(trained.params);
            report.gate_losses = std::move(trained.losses);
        }
    }
    bundle.stage = "gate";

    auto& expert = ctx.endpoints->get(ctx.expert_endpoint);
    auto sft = build_sft_dataset(trajectories, expert);
    report.sft_records = sft.records.size();
    report.sft_skipped = sft.skipped;
    datasets.sft.insert(datasets.sft.end(), sft.records.begin(), sft.records.end());
    report.sft_jsonl = to_jsonl(datasets.sft);
    const auto sft_path = dataset_path(ctx, prefix + "sft.jsonl");
    if (!sft_path.empty()) {
        write_text(sft_path, report.sft_jsonl);
    }
    bundle.utilization.sft_dataset = sft_path;
    const auto sft_ref = hook.run(FineTuneRequest{"sft", sft_path, bundle.utilization.model_ref,
                                                  config.sft.learning_rate, config.sft.batch_size});
    bundle.stage = "sft";

    auto dpo = build_dpo_dataset(trajectories, ctx.endpoints->get(sft_ref), config.dpo_beta);
    report.dpo_records = dpo.records.size();
    report.dpo_skipped = dpo.skipped;
    datasets.dpo.insert(datasets.dpo.end(), dpo.records.begin(), dpo.records.end());
    report.dpo_jsonl = to_jsonl(datasets.dpo);
    const auto dpo_path = dataset_path(ctx, prefix + "dpo.jsonl");
    if (!dpo_path.empty()) {
        write_text(dpo_path, report.dpo_jsonl);
    }
    bundle.utilization.dpo_dataset = dpo_path;
    bundle.utilization.beta = config.dpo_beta;
    bundle.utilization.model_ref =
        hook.run(FineTuneRequest{"dpo", dpo_path, sft_ref, config.dpo.learning_rate, config.dpo.batch_size});
    if (!ctx.endpoints->contains(bundle.utilization.model_ref)) {
        throw ConfigError("/endpoints/" + bundle.utilization.model_ref, "fine-tune hook returned an unknown model_ref");
    }
    bundle.stage = "dpo";

    const auto parts = partition_trajectories(trajectories, config.storage_threshold);
    ReflectionOptions ropts;
    ropts.max_lines = config.reflection_lines;
    ropts.reflection_size = config.reflection_size;
    auto& reflector = ctx.endpoints->get(ctx.reflector_endpoint);
    report.positive_hints = reflect(reflector, parts.positive, Polarity::positive, ropts);
    report.negative_hints = reflect(reflector, parts.negative, Polarity::negative, ropts);
    bundle.task_prompt =
        update_task_prompt(bundle.task_prompt, report.positive_hints, report.negative_hints, config.hint_cap);
    bundle.stage = "reflection";
    return report;
}

void persist_partial(const PolicyBundle& bundle, const OptimizationContext& ctx, const std::string& name) {
    if (!ctx.output_dir.empty()) {
        bundle.save((fs::path(ctx.output_dir) / name).string());
    }
}

}  // namespace

OffPolicyResult off_policy_optimize(std::span<const Trajectory> log, const PolicyBundle& bundle,
                                    const OptimizationConfig& config, const OptimizationContext& context) {
    config.validate();
    if (log.empty()) {
        throw ContractError("off-policy optimization needs a non-empty trajectory log");
    }
    OffPolicyResult result{bundle, {}};
    DatasetState datasets;
    try {
        result.report = update_round(result.bundle, log, config, context, datasets, "");
    } catch (const Error& e) {
        persist_partial(result.bundle, context, "bundle-partial");
        throw Error("off-policy optimization failed after stage '" + result.bundle.stage + "': " + e.what());
    }
    result.bundle.version = bundle.version + 1;
    result.bundle.stage = "complete";
    if (!context.output_dir.empty()) {
        result.bundle.save((fs::path(context.output_dir) / "bundle").string());
    }
    return result;
}

namespace {

EpochMetrics measure(std::size_t epoch, int version, std::span<const Trajectory> trajectories) {
    const auto s = summarize(trajectories);
    return EpochMetrics{epoch, version, s.episodes, s.mean_reward, s.mean_steps, s.success_rate, false};
}

}  // namespace

OnPolicyResult on_policy_optimize(const TrajectorySampler& sampler, const PolicyBundle& bundle,
                                  const OptimizationConfig& config, const OptimizationContext& context) {
    config.validate();
    OnPolicyResult result{bundle, {}, {}, {}};
    DatasetState datasets;
    auto snapshot = [&](const PolicyBundle& b) {
        if (!context.output_dir.empty()) {
            b.save((fs::path(context.output_dir) / "bundles" / ("v" + std::to_string(b.version))).string());
        }
    };
    snapshot(result.bundle);
    for (std::size_t l = 1; l <= config.epochs; ++l) {
        std::vector<Trajectory> sampled;
        try {
            sampled = sampler(result.bundle, l - 1, config.sample_batch);
        } catch (const Error& e) {
            EpochMetrics m;
            m.epoch = l - 1;
            m.bundle_version = result.bundle.version;
            m.discarded = true;
            result.metrics.push_back(m);
            StageReport r;
            warn(context, r, "epoch " + std::to_string(l) + " discarded: " + e.what());
            result.reports.push_back(std::move(r));
            continue;
        }
        result.metrics.push_back(measure(l - 1, result.bundle.version, sampled));
        PolicyBundle next = result.bundle;
        try {
            result.reports.push_back(update_round(next, sampled, config, context, datasets,
                                                  "epoch-" + std::to_string(l) + "/"));
        } catch (const Error& e) {
            persist_partial(next, context, "bundle-partial");
            throw Error("on-policy epoch " + std::to_string(l) + " failed after stage '" + next.stage +
                        "': " + e.what());
        }
        next.version = result.bundle.version + 1;
        next.stage = "complete";
        result.bundle = std::move(next);
        snapshot(result.bundle);
        result.trajectories.insert(result.trajectories.end(), sampled.begin(), sampled.end());
    }
    try {
        auto final_batch = sampler(result.bundle, config.epochs, config.sample_batch);
        result.metrics.push_back(measure(config.epochs, result.bundle.version, final_batch));
        result.trajectories.insert(result.trajectories.end(), final_batch.begin(), final_batch.end());
    } catch (const Error& e) {
        EpochMetrics m;
        m.epoch = config.epochs;
        m.bundle_version = result.bundle.version;
        m.discarded = true;
        result.metrics.push_back(m);
        StageReport r;
        warn(context, r, "final evaluation discarded: " + std::string(e.what()));
        result.reports.push_back(std::move(r));
    }
    if (!context.output_dir.empty()) {
        write_text(fs::path(context.output_dir) / "epoch_metrics.csv", epoch_metrics_csv(result.metrics));
    }
    return result;
}

std::string epoch_metrics_csv(std::span<const EpochMetrics> metrics) {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    out << "epoch,bundle_version,trajectories,mean_reward,mean_steps,success_rate,discarded\n";
    for (const auto& m : metrics) {
        out << m.epoch << ',' << m.bundle_version << ',' << m.trajectories << ',' << m.mean_reward << ','
            << m.mean_steps << ',' << m.success_rate << ',' << (m.discarded ? 1 : 0) << '\n';
    }
    return out.str();
}

EpisodeRunner::EpisodeRunner(std::vector<QaTask> tasks, std::shared_ptr<const Corpus> corpus,
                             const EndpointRegistry& endpoints, std::string actor, std::string extractor,
                             std::shared_ptr<const EmbeddingProvider> embedder,
                             std::shared_ptr<const MetricSuite> suite,
                             std::shared_ptr<const ImportanceScorer> importance, RunnerConfig config)
    : tasks_(std::move(tasks)), corpus_(std::move(corpus)), endpoints_(endpoints), actor_(std::move(actor)),
      extractor_(std::move(extractor)), embedder_(std::move(embedder)), suite_(std::move(suite)),
      importance_(std::move(importance)), config_(std::move(config)) {
    if (tasks_.empty()) {
        throw ContractError("episode runner needs at least one task");
    }
    if (!corpus_ || !embedder_) {
        throw ContractError("episode runner needs a corpus and an embedder");
    }
    if (config_.parallelism == 0) {
        config_.parallelism = 1;
    }
}

std::unique_ptr<MemoryPolicy> EpisodeRunner::make_memory(const PolicyBundle& bundle) const {
    const auto& kind = config_.memory_policy;
    if (kind == "adaptive") {
        auto cfg = config_.adaptive;
        cfg.top_k = config_.top_k;
        return std::make_unique<AdaptiveMemory>(endpoints_.shared(extractor_),
                                                endpoints_.shared(bundle.utilization.model_ref), embedder_, suite_,
                                                bundle.gate, bundle.task_prompt, cfg);
    }
    if (kind == "full") {
        return std::make_unique<FullMemory>(embedder_);
    }
    if (kind == "long-term") {
        return std::make_unique<LongTermMemory>(embedder_, config_.top_k);
    }
    if (kind == "short-term") {
        return std::make_unique<ShortTermMemory>(embedder_, config_.short_term_window);
    }
    if (kind == "fixed-weight") {
        if (!importance_) {
            throw ConfigError("/memory/importance_scorer", "fixed-weight memory needs an importance scorer");
        }
        return std::make_unique<FixedWeightMemory>(embedder_, importance_, config_.fixed_alpha, config_.top_k);
    }
    throw ConfigError("/memory/policy", "unknown memory policy '" + kind + "'");
}

Trajectory EpisodeRunner::run_one(const PolicyBundle& bundle, const QaTask& task, std::uint64_t seed,
                                  std::string id) const {
    auto memory = make_memory(bundle);
    Agent agent(endpoints_.shared(actor_), *memory, config_.agent);
    QaEnvironment env(corpus_, task);
    Rng rng(seed);
    return run_trajectory(agent, env, rng, std::move(id), bundle.version, config_.success_threshold,
                          config_.record_timings);
}

std::vector<Trajectory> EpisodeRunner::run_indexed(const PolicyBundle& bundle, const std::vector<std::size_t>& indices,
                                                   std::size_t epoch) const {
    std::vector<Trajectory> out(indices.size());
    auto work = [&](std::size_t i) {
        const auto& task = tasks_[indices[i]];
        const auto seed = mix_seed(mix_seed(config_.seed, epoch), i);
        out[i] = run_one(bundle, task, seed, "e" + std::to_string(epoch) + "-" + std::to_string(i) + "-" + task.id);
    };
    const std::size_t width = std::min(config_.parallelism, indices.size());
    if (width <= 1) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
            work(i);
        }
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(width);
    for (std::size_t w = 0; w < width; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < indices.size(); i += width) {
                    work(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

std::vector<Trajectory> EpisodeRunner::sample(const PolicyBundle& bundle, std::size_t epoch, std::size_t n) const {
    std::vector<std::size_t> order(tasks_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config_.seed ^ 0x5eed, epoch));
    rng.shuffle(order.begin(), order.end());
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < n; ++i) {
        picked.push_back(order[i % order.size()]);
    }
    return run_indexed(bundle, picked, epoch);
}

std::vector<Trajectory> EpisodeRunner::run_all(const PolicyBundle& bundle) const {
    std::vector<std::size_t> all(tasks_.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return run_indexed(bundle, all, 0);
}

TrajectorySampler EpisodeRunner::sampler() const {
    return [this](const PolicyBundle& bundle, std::size_t epoch, std::size_t n) { return sample(bundle, epoch, n); };
}

}  // namespace memcycle
