// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/linalg.hpp"
#include "memcycle/memory_core.hpp"
#include "memcycle/text.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

inline constexpr std::string_view kDefaultMergeTemplate =
    "Observation: {observation}\n"
    "Existing Memory: {memory_context}\n"
    "New Memory: {new_memory}\n"
    "Please merge the above new memory into the existing memory, which is useful to response the observation.\n"
    "You should remove the duplicated information to make it concise, but do not lose any information.\n"
    "You should just output the final memory after merge, without any other information.";

/// c_i from word-count deltas (each floored at 0): 0/0 is 0, x/0 is 1 for x > 0.
double info_gain(long delta, long previous_delta);
/// Probability that the stop signal fires: 1 - max(c_i, c_{i-1}).
double stop_prob(double gain, double previous_gain);

std::string render_merge_prompt(std::string_view tmpl, std::string_view observation, std::string_view memory_context,
                                std::string_view new_memory);

struct AggregationOptions {
    std::size_t max_iters = 10;
    std::size_t word_cap = kContextWordCap;
    std::string merge_template{kDefaultMergeTemplate};
    /// Applied on top of whatever the endpoint does internally.
    RetryPolicy retry{0, std::chrono::milliseconds{0}};
};

struct AggregationTrace {
    std::vector<std::string> contexts;  // p_0 .. p_k, p_0 empty
    std::vector<long> word_deltas;      // delta_1 .. delta_k
    std::vector<double> gains;          // c_1 .. c_k
    std::vector<int> stop_draws;        // z_2 .. z_k
    std::size_t stop_step = 0;          // k
    std::size_t calls = 0;
};

struct AggregationResult {
    std::string context;
    AggregationTrace trace;
};

/// p_i = LLM(p_{i-1}, m_i, s) over the ranked memory texts. The first two
/// merges never stop (c_1 is 1 whenever the first merge adds words), after
/// which z_i ~ B(1 - max(c_i, c_{i-1})) ends the loop when it fires.
/// Throws Error when the endpoint keeps failing.
AggregationResult aggregate(ChatEndpoint& endpoint, std::span<const std::string> ranked_texts,
                            std::string_view observation, Rng& rng, const AggregationOptions& options = {});

struct SftRecord {
    std::string prompt;
    std::string target;

    Json to_json() const;
    static SftRecord from_json(const Json& j);
    friend bool operator==(const SftRecord&, const SftRecord&) = default;
};

struct DpoRecord {
    std::string prompt;
    std::string chosen;
    std::string rejected;
    double beta = 0.1;

    Json to_json() const;
    static DpoRecord from_json(const Json& j);
    friend bool operator==(const DpoRecord&, const DpoRecord&) = default;
};

template <typename Record>
struct DatasetBuild {
    std::vector<Record> records;
    std::size_t skipped = 0;
};

/// Final merge of the final step of a trajectory: the exact prompt that
/// produced p_k together with p_k. Empty when that step did no merge.
struct FinalMerge {
    std::string prompt;
    std::string output;
};
std::optional<FinalMerge> final_merge(const Trajectory& trajectory,
                                      std::string_view merge_template = kDefaultMergeTemplate);

DatasetBuild<SftRecord> build_sft_dataset(std::span<const Trajectory> trajectories, ChatEndpoint& expert,
                                          std::string_view merge_template = kDefaultMergeTemplate);
/// chosen = regeneration by `sft_model`, rejected = the original output.
DatasetBuild<DpoRecord> build_dpo_dataset(std::span<const Trajectory> trajectories, ChatEndpoint& sft_model,
                                          double beta, std::string_view merge_template = kDefaultMergeTemplate);

std::string to_jsonl(std::span<const SftRecord> records);
std::string to_jsonl(std::span<const DpoRecord> records);
std::vector<SftRecord> sft_from_jsonl(std::string_view text);
std::vector<DpoRecord> dpo_from_jsonl(std::string_view text);

/// Summed sequence log-probabilities reported by the policy and reference models.
struct PreferenceTrace {
    std::optional<double> policy_chosen;
    std::optional<double> policy_rejected;
    std::optional<double> reference_chosen;
    std::optional<double> reference_rejected;
};

struct LossSummary {
    double loss = 0.0;
    std::size_t used = 0;
    std::size_t skipped = 0;
};

double dpo_term(const PreferenceTrace& trace, double beta);
/// Mean DPO loss; traces with any missing value are skipped.
LossSummary dpo_loss(std::span<const PreferenceTrace> traces, double beta);
/// Mean over records of the mean per-token negative log-probability; empty
/// traces are skipped.
LossSummary sft_loss(std::span<const std::vector<double>> token_logprobs);

/// theta_u: which endpoint currently serves utilization.
struct UtilizationPolicy {
    std::string model_ref;
    std::string sft_dataset;
    std::string dpo_dataset;
    double beta = 0.1;

    Json to_json() const;
    static UtilizationPolicy from_json(const Json& j);
    friend bool operator==(const UtilizationPolicy&, const UtilizationPolicy&) = default;
};

struct FineTuneRequest {
    std::string stage;  // "sft" or "dpo"
    std::string dataset_path;
    std::string model_ref;
    double learning_rate = 1e-4;
    std::size_t batch_size = 16;
};

/// External training step: given a dataset it returns the model_ref that
/// should serve utilization afterwards.
class FineTuneHook {
public:
    virtual ~FineTuneHook() = default;
    virtual std::string run(const FineTuneRequest& request) = 0;
};

class NoOpFineTuneHook final : public FineTuneHook {
public:
    std::string run(const FineTuneRequest& request) override { return request.model_ref; }
};

/// Runs a shell command with {stage}, {dataset}, {model_ref}, {lr} and
/// {batch} substituted (shell-quoted). The last non-empty stdout line becomes
/// the new model_ref; no output keeps the old one. A nonzero exit status is
/// an Error.
class CommandFineTuneHook final : public FineTuneHook {
public:
    explicit CommandFineTuneHook(std::string command) : command_(std::move(command)) {}
    std::string run(const FineTuneRequest& request) override;

private:
    std::string command_;
};

}  // namespace memcycle
