// SPDX-License-Identifier: Apache-2.0
#include "memcycle/cli.hpp"

#include "memcycle/config.hpp"
#include "memcycle/error.hpp"
#include "memcycle/optimization.hpp"
#include "memcycle/scorer_training.hpp"
#include "memcycle/synthetic.hpp"
#include "memcycle/text.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

namespace memcycle {

namespace fs = std::filesystem;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::optional<std::string> log;
    std::optional<std::string> bundle;
    std::optional<std::size_t> episodes;
    std::optional<std::string> policy;
    std::optional<std::size_t> parallelism;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> sample_batch;
    bool timings = false;
};

void add_common_options(CLI::App& sub, Overrides& o) {
    sub.add_option("--config", o.config, "RunConfig JSON file");
    sub.add_option("--seed", o.seed, "Run seed");
    sub.add_option("--output-dir", o.output_dir, "Artifact directory");
    sub.add_option("--log", o.log, "Trajectory log path");
    sub.add_option("--bundle", o.bundle, "Policy bundle directory to start from");
    sub.add_option("--episodes", o.episodes, "Episodes to run (0 = every task)");
    sub.add_option("--policy", o.policy, "Memory policy");
    sub.add_option("--parallelism", o.parallelism, "Concurrent trajectories");
    sub.add_option("--epochs", o.epochs, "On-policy epochs");
    sub.add_option("--sample-batch", o.sample_batch, "Trajectories sampled per epoch");
    sub.add_flag("--timings", o.timings, "Record wall-clock step timings (non-deterministic)");
}

RunConfig resolve_config(const Overrides& o) {
    Json j = Json::object();
    if (!o.config.empty()) {
        try {
            j = Json::parse(read_file(o.config));
        } catch (const Json::parse_error& e) {
            throw ConfigError("/", o.config + ": " + e.what());
        } catch (const Error& e) {
            throw ConfigError("/", e.what());
        }
        if (!j.is_object()) {
            throw ConfigError("/", "expected an object");
        }
    }
    if (o.seed) {
        j["seed"] = *o.seed;
    }
    if (o.output_dir) {
        j["output_dir"] = *o.output_dir;
    }
    if (o.log) {
        j["trajectory_log"] = *o.log;
    }
    if (o.bundle) {
        j["bundle"] = *o.bundle;
    }
    if (o.episodes) {
        j["episodes"] = *o.episodes;
    }
    if (o.parallelism) {
        j["parallelism"] = *o.parallelism;
    }
    if (o.policy) {
        j["memory"]["policy"] = *o.policy;
    }
    if (o.epochs) {
        j["optimization"]["epochs"] = *o.epochs;
    }
    if (o.sample_batch) {
        j["optimization"]["sample_batch"] = *o.sample_batch;
    }
    return RunConfig::from_json(j);
}

std::string out_path(const RunConfig& c, const std::string& name) { return (fs::path(c.output_dir) / name).string(); }

void write_resolved(const RunConfig& c) { write_file(out_path(c, "run_config.json"), c.to_json().dump(2) + "\n"); }

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(6);
    s << std::fixed << v;
    return s.str();
}

std::vector<Trajectory> load_log(const RunConfig& c) {
    const auto path = c.trajectory_log_path();
    try {
        return read_trajectory_log(path);
    } catch (const Error& e) {
        throw ConfigError("/trajectory_log", e.what());
    }
}

OptimizationContext make_context(const RunConfig& c, const Services& s, FineTuneHook* hook, std::ostream& err) {
    OptimizationContext ctx;
    ctx.embedder = s.embedder;
    ctx.suite = s.suite;
    ctx.endpoints = &s.endpoints;
    ctx.expert_endpoint = c.roles.expert;
    ctx.reflector_endpoint = c.roles.reflector;
    ctx.hook = hook;
    ctx.output_dir = c.output_dir;
    ctx.warn = [&err](const std::string& w) { err << "warning: " << w << "\n"; };
    return ctx;
}

std::unique_ptr<FineTuneHook> make_hook(const RunConfig& c) {
    if (c.fine_tune_hook.empty()) {
        return std::make_unique<NoOpFineTuneHook>();
    }
    return std::make_unique<CommandFineTuneHook>(c.fine_tune_hook);
}

std::string report_json(const StageReport& r) {
    const Json j{{"trajectories", r.trajectories},
                 {"successes", r.successes},
                 {"gate_losses", r.gate_losses},
                 {"sft_records", r.sft_records},
                 {"sft_skipped", r.sft_skipped},
                 {"dpo_records", r.dpo_records},
                 {"dpo_skipped", r.dpo_skipped},
                 {"positive_hints", r.positive_hints},
                 {"negative_hints", r.negative_hints},
                 {"warnings", r.warnings}};
    return j.dump(2) + "\n";
}

int cmd_run(const RunConfig& c, bool timings, std::ostream& out) {
    auto services = Services::build(c);
    auto rc = services.runner_config(c);
    rc.record_timings = timings;
    EpisodeRunner runner(services.tasks, services.corpus, services.endpoints, c.roles.actor, c.roles.extractor,
                         services.embedder, services.suite, services.importance, rc);
    const auto bundle = services.initial_bundle(c);
    const auto trajectories = c.episodes == 0 ? runner.run_all(bundle) : runner.sample(bundle, 0, c.episodes);
    write_resolved(c);
    write_trajectory_log(c.trajectory_log_path(), trajectories);
    const auto stats = summarize(trajectories);
    out << "episodes " << stats.episodes << " em " << fmt(stats.mean_reward) << " mean_steps " << fmt(stats.mean_steps)
        << "\n";
    return 0;
}

int cmd_train_off(const RunConfig& c, std::ostream& out, std::ostream& err) {
    auto services = Services::build(c);
    const auto log = load_log(c);
    auto hook = make_hook(c);
    const auto result = off_policy_optimize(log, services.initial_bundle(c), c.optimization_config(false),
                                            make_context(c, services, hook.get(), err));
    write_resolved(c);
    write_file(out_path(c, "train_off_report.json"), report_json(result.report));
    out << "bundle v" << result.bundle.version << " hints " << result.bundle.task_prompt.hints.size() << "\n";
    return 0;
}

int cmd_train_on(const RunConfig& c, bool timings, std::ostream& out, std::ostream& err) {
    auto services = Services::build(c);
    auto rc = services.runner_config(c);
    rc.record_timings = timings;
    EpisodeRunner runner(services.tasks, services.corpus, services.endpoints, c.roles.actor, c.roles.extractor,
                         services.embedder, services.suite, services.importance, rc);
    auto hook = make_hook(c);
    const auto result = on_policy_optimize(runner.sampler(), services.initial_bundle(c), c.optimization_config(true),
                                           make_context(c, services, hook.get(), err));
    write_resolved(c);
    result.bundle.save(out_path(c, "bundle"));
    write_trajectory_log(out_path(c, "on_policy_trajectories.jsonl"), result.trajectories);
    Json reports = Json::array();
    for (const auto& r : result.reports) {
        reports.push_back(Json::parse(report_json(r)));
    }
    write_file(out_path(c, "train_on_report.json"), reports.dump(2) + "\n");
    out << epoch_metrics_csv(result.metrics);
    return 0;
}

struct ScorerData {
    EmotionDataset emotion_train;
    EmotionDataset emotion_test;
    ImportanceDataset importance_train;
    ImportanceDataset importance_test;
};

ScorerData make_scorer_data(const RunConfig& c, const Services& s) {
    const auto& sc = c.scorers;
    Rng rng(mix_seed(c.seed, 0xda7a));
    ScorerData d;
    auto& writer = s.endpoints.get(c.roles.emotion_writer);
    d.emotion_train = gen_emotion_dataset(writer, sc.train_seed_sentence, sc.emotion_train, rng);
    d.emotion_test = gen_emotion_dataset(writer, sc.test_seed_sentence, sc.emotion_test, rng);
    auto& enricher = s.endpoints.get(c.roles.enricher);
    const auto seeds = make_chain_seeds(sc.chains_train + sc.chains_test, rng);
    const std::span<const ChainSeed> all(seeds);
    d.importance_train =
        gen_importance_dataset(enricher, all.first(sc.chains_train), sc.chain_length, sc.pairs_per_chain, rng);
    d.importance_test =
        gen_importance_dataset(enricher, all.subspan(sc.chains_train), sc.chain_length, sc.pairs_per_chain, rng);
    if (d.emotion_train.samples.empty() || d.emotion_test.samples.empty()) {
        throw Error("emotion dataset generation produced no samples");
    }
    if (d.importance_train.triples.empty() || d.importance_test.chains.empty()) {
        throw Error("importance dataset generation produced no chains");
    }
    return d;
}

std::pair<std::vector<Vector>, std::vector<Vector>> embed_samples(const EmbeddingProvider& e, const EmotionDataset& d) {
    std::pair<std::vector<Vector>, std::vector<Vector>> out;
    for (const auto& s : d.samples) {
        out.first.push_back(e.embed(s.sentence));
        out.second.push_back(s.label);
    }
    return out;
}

struct TrainedScorers {
    ScorerTrainingResult<EmotionScorer> emotion;
    ScorerTrainingResult<ImportanceScorer> importance;
    EmotionScorer emotion_init;
    ImportanceScorer importance_init;
};

TrainedScorers train_scorers(const RunConfig& c, const Services& s, const ScorerData& d) {
    const auto& sc = c.scorers;
    const auto dim = s.embedder->dim();
    Rng rng(mix_seed(c.seed, 0x1417));
    auto emotion_init = EmotionScorer::random(dim, c.memory.emotion_hidden, rng, sc.init_scale);
    auto importance_init = ImportanceScorer::random(dim, c.memory.importance_projection, rng, sc.init_scale);
    const auto [xs, ys] = embed_samples(*s.embedder, d.emotion_train);
    auto emotion = train_emotion_scorer(emotion_init, xs, ys, sc.emotion);
    const auto triples = embed_triples(*s.embedder, d.importance_train.triples);
    auto importance_result = train_importance_scorer(importance_init, triples, sc.importance);
    return {std::move(emotion), std::move(importance_result), std::move(emotion_init), std::move(importance_init)};
}

std::string emotion_jsonl(const EmotionDataset& d) {
    std::string out;
    for (const auto& s : d.samples) {
        out += Json{{"sentence", s.sentence}, {"label", vector_to_json(s.label)}}.dump() + "\n";
    }
    return out;
}

std::string chains_jsonl(const ImportanceDataset& d) {
    std::string out;
    for (const auto& c : d.chains) {
        out += Json{{"id", c.id}, {"query", c.query}, {"sentences", c.sentences}}.dump() + "\n";
    }
    return out;
}

double trained_ndcg(const EmbeddingProvider& e, const ImportanceScorer& scorer, const ImportanceDataset& d) {
    return chain_ndcg(d.chains, 5, [&](const EnrichmentChain& chain, std::size_t i) {
        return importance(scorer, e.embed(chain.query), e.embed(chain.sentences[i]));
    });
}

int cmd_pretrain(const RunConfig& c, std::ostream& out) {
    auto services = Services::build(c);
    const auto data = make_scorer_data(c, services);
    const auto trained = train_scorers(c, services, data);
    const auto& e = *services.embedder;
    const auto [xt, yt] = embed_samples(e, data.emotion_test);
    const auto test_triples = embed_triples(e, data.importance_test.triples);

    write_resolved(c);
    write_file(out_path(c, "emotion_scorer.json"), trained.emotion.scorer.to_json().dump() + "\n");
    write_file(out_path(c, "importance_scorer.json"), trained.importance.scorer.to_json().dump() + "\n");
    write_file(out_path(c, "emotion_train.jsonl"), emotion_jsonl(data.emotion_train));
    write_file(out_path(c, "emotion_test.jsonl"), emotion_jsonl(data.emotion_test));
    write_file(out_path(c, "importance_train.jsonl"), chains_jsonl(data.importance_train));
    write_file(out_path(c, "importance_test.jsonl"), chains_jsonl(data.importance_test));

    std::ostringstream losses;
    losses << "epoch,emotion_loss,importance_loss\n";
    const auto n = std::max(trained.emotion.losses.size(), trained.importance.losses.size());
    for (std::size_t i = 0; i < n; ++i) {
        losses << i << ",";
        if (i < trained.emotion.losses.size()) {
            losses << fmt(trained.emotion.losses[i]);
        }
        losses << ",";
        if (i < trained.importance.losses.size()) {
            losses << fmt(trained.importance.losses[i]);
        }
        losses << "\n";
    }
    write_file(out_path(c, "scorer_losses.csv"), losses.str());

    const Json summary{{"emotion_test_mse_untrained", emotion_loss(trained.emotion_init, xt, yt)},
                       {"emotion_test_mse", emotion_loss(trained.emotion.scorer, xt, yt)},
                       {"importance_pair_accuracy_untrained", pair_accuracy(trained.importance_init, test_triples)},
                       {"importance_pair_accuracy", pair_accuracy(trained.importance.scorer, test_triples)},
                       {"importance_ndcg5", trained_ndcg(e, trained.importance.scorer, data.importance_test)},
                       {"generation_failures",
                        data.emotion_train.failures + data.emotion_test.failures + data.importance_train.failures +
                            data.importance_test.failures}};
    write_file(out_path(c, "pretrain_summary.json"), summary.dump(2) + "\n");
    out << summary.dump(2) << "\n";
    return 0;
}

std::string importance_examples(const ImportanceDataset& d, std::size_t n) {
    std::string out;
    for (std::size_t k = 0; k < std::min(n, d.chains.size()); ++k) {
        const auto& chain = d.chains[k];
        const auto i = k % chain.sentences.size();
        out += "Example\nQuery: " + chain.query + "\nSentence: " + chain.sentences[i] +
               "\nRating: " + std::to_string(i) + "\n\n";
    }
    return out;
}

std::string emotion_examples(const EmotionDataset& d, std::size_t n) {
    std::string out;
    for (std::size_t k = 0; k < std::min(n, d.samples.size()); ++k) {
        const auto& s = d.samples[k];
        std::vector<std::string> flags;
        for (Eigen::Index i = 0; i < s.label.size(); ++i) {
            flags.push_back(s.label[i] > 0.5 ? "1" : "0");
        }
        out += "Example\nSentence: " + s.sentence + "\nAnswer: " + join(flags, ",") + "\n\n";
    }
    return out;
}

int cmd_eval_scorers(const RunConfig& c, std::ostream& out) {
    auto services = Services::build(c);
    const auto data = make_scorer_data(c, services);
    EvalInputs inputs{data.importance_test.chains, data.emotion_test.samples};
    auto& judge = services.endpoints.get(c.roles.judge);
    Rng rng(mix_seed(c.seed, 0xe7a1));
    std::vector<ScorerEvalRow> rows;
    rows.push_back(evaluate_random(inputs, rng));
    rows.push_back(evaluate_prompted(inputs, judge, {}, "zero-shot"));
    const PromptScorerOptions few{importance_examples(data.importance_train, c.scorers.few_shot_examples),
                                  emotion_examples(data.emotion_train, c.scorers.few_shot_examples)};
    rows.push_back(evaluate_prompted(inputs, judge, few, "few-shot"));
    if (!c.memory.emotion_scorer.empty() && !c.memory.importance_scorer.empty()) {
        rows.push_back(evaluate_trained(inputs, *services.embedder, *services.emotion, *services.importance));
    } else {
        const auto trained = train_scorers(c, services, data);
        rows.push_back(
            evaluate_trained(inputs, *services.embedder, trained.emotion.scorer, trained.importance.scorer));
    }
    const auto csv = eval_rows_csv(rows);
    write_resolved(c);
    write_file(out_path(c, "scorer_eval.csv"), csv);
    out << csv;
    return 0;
}

int cmd_export(const RunConfig& c, std::ostream& out) {
    auto services = Services::build(c);
    const auto log = load_log(c);
    const auto bundle = services.initial_bundle(c);
    const auto opt = c.optimization_config(false);
    auto sft = build_sft_dataset(log, services.endpoints.get(c.roles.expert));
    if (!services.endpoints.contains(bundle.utilization.model_ref)) {
        throw ConfigError("/endpoints/" + bundle.utilization.model_ref, "no endpoint for the utilization model_ref");
    }
    auto dpo = build_dpo_dataset(log, services.endpoints.get(bundle.utilization.model_ref), opt.dpo_beta);
    write_resolved(c);
    write_file(out_path(c, "sft.jsonl"), to_jsonl(sft.records));
    write_file(out_path(c, "dpo.jsonl"), to_jsonl(dpo.records));
    const Json summary{{"sft_records", sft.records.size()},
                       {"sft_skipped", sft.skipped},
                       {"dpo_records", dpo.records.size()},
                       {"dpo_skipped", dpo.skipped}};
    write_file(out_path(c, "export_summary.json"), summary.dump(2) + "\n");
    out << summary.dump() << "\n";
    return 0;
}

int cmd_report(const RunConfig& c, std::ostream& out) {
    const auto log = load_log(c);
    const auto csv = report_csv(log);
    write_file(out_path(c, "report.csv"), csv);
    out << csv;
    return 0;
}

void append_row(std::ostringstream& s, const std::string& name, std::span<const Trajectory* const> group) {
    std::size_t steps = 0;
    std::size_t calls = 0;
    std::size_t errors = 0;
    double reward = 0.0;
    double success = 0.0;
    std::vector<double> seconds;
    for (const auto* t : group) {
        reward += t->reward;
        success += t->success ? 1.0 : 0.0;
        errors += t->error.empty() ? 0 : 1;
        steps += t->steps.size();
        for (const auto& st : t->steps) {
            calls += static_cast<std::size_t>(st.llm_calls);
            if (st.seconds) {
                seconds.push_back(*st.seconds);
            }
        }
    }
    const auto n = static_cast<double>(group.size());
    s << name << "," << group.size() << "," << fmt(reward / n) << "," << fmt(success / n) << ","
      << fmt(static_cast<double>(steps) / n) << "," << fmt(static_cast<double>(calls) / n) << ","
      << (steps == 0 ? fmt(0.0) : fmt(static_cast<double>(calls) / static_cast<double>(steps))) << "," << errors;
    if (seconds.empty()) {
        s << ",,,\n";
        return;
    }
    std::sort(seconds.begin(), seconds.end());
    double total = 0.0;
    for (double v : seconds) {
        total += v;
    }
    s << "," << fmt(total / static_cast<double>(seconds.size())) << "," << fmt(seconds[seconds.size() / 2]) << ","
      << fmt(seconds.back()) << "\n";
}

}  // namespace

std::string report_csv(std::span<const Trajectory> trajectories) {
    std::ostringstream s;
    s << "policy,episodes,em,success_rate,mean_steps,mean_llm_calls,llm_calls_per_step,errors,"
         "step_seconds_mean,step_seconds_p50,step_seconds_max\n";
    if (trajectories.empty()) {
        return s.str();
    }
    std::vector<const Trajectory*> all;
    std::map<std::string, std::vector<const Trajectory*>> by_policy;
    for (const auto& t : trajectories) {
        all.push_back(&t);
        by_policy[t.policy].push_back(&t);
    }
    append_row(s, "all", all);
    for (const auto& [policy, group] : by_policy) {
        append_row(s, policy, group);
    }
    return s.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Trainable agent memory: storage, retrieval and utilization"};
    app.name("memcycle");
    app.require_subcommand(1);
    Overrides o;
    struct Sub {
        const char* name;
        const char* help;
    };
    const std::vector<Sub> subs{{"run", "Run episodes and write a trajectory log"},
                                {"train-off", "Off-policy optimization from a trajectory log"},
                                {"train-on", "On-policy optimization with fresh episodes each epoch"},
                                {"pretrain-scorers", "Generate scorer data and train the emotion/importance scorers"},
                                {"eval-scorers", "Compare random, prompted and trained scorers"},
                                {"export-datasets", "Write SFT and DPO datasets from a trajectory log"},
                                {"report", "Summarize a trajectory log as CSV"}};
    for (const auto& s : subs) {
        add_common_options(*app.add_subcommand(s.name, s.help), o);
    }

    std::vector<const char*> argv{"memcycle"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    const auto* chosen = app.get_subcommands().front();
    const auto name = chosen->get_name();
    try {
        const auto config = resolve_config(o);
        if (name == "run") {
            return cmd_run(config, o.timings, out);
        }
        if (name == "train-off") {
            return cmd_train_off(config, out, err);
        }
        if (name == "train-on") {
            return cmd_train_on(config, o.timings, out, err);
        }
        if (name == "pretrain-scorers") {
            return cmd_pretrain(config, out);
        }
        if (name == "eval-scorers") {
            return cmd_eval_scorers(config, out);
        }
        if (name == "export-datasets") {
            return cmd_export(config, out);
        }
        return cmd_report(config, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace memcycle
