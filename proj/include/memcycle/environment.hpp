// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/gate.hpp"
#include "memcycle/memory_core.hpp"
#include "memcycle/metrics.hpp"
#include "memcycle/storage.hpp"
#include "memcycle/utilization.hpp"

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace memcycle {

inline constexpr int kDefaultMaxSteps = 5;
inline constexpr std::string_view kNotFoundMessage = "No page found for the given entity.";
inline constexpr std::string_view kInvalidActionMessage =
    "Invalid action. Valid actions are Search[entity] and Finish[answer].";

struct QaTask {
    std::string id;
    std::string question;
    std::string answer;
    int max_steps = kDefaultMaxSteps;

    friend bool operator==(const QaTask&, const QaTask&) = default;
};

std::vector<QaTask> read_tasks_jsonl(std::string_view text);
std::string tasks_to_jsonl(std::span<const QaTask> tasks);

struct SearchAction {
    std::string entity;
    friend bool operator==(const SearchAction&, const SearchAction&) = default;
};
struct FinishAction {
    std::string answer;
    friend bool operator==(const FinishAction&, const FinishAction&) = default;
};
struct InvalidAction {
    std::string raw;
    friend bool operator==(const InvalidAction&, const InvalidAction&) = default;
};
using EnvAction = std::variant<SearchAction, FinishAction, InvalidAction>;

/// The earliest well-formed Search[...] or Finish[...] with a non-empty argument.
EnvAction parse_action(std::string_view text);
std::string format_action(const EnvAction& action);

/// Lowercase, drop punctuation, drop articles, collapse whitespace.
std::string normalize_answer(std::string_view s);
int exact_match(std::string_view predicted, std::string_view gold);

class Corpus {
public:
    virtual ~Corpus() = default;
    virtual std::optional<std::string> lookup(std::string_view title) const = 0;
    virtual std::size_t size() const = 0;
};

/// Titles are matched after lowercasing and collapsing whitespace.
class InMemoryCorpus final : public Corpus {
public:
    /// Throws ContractError on a duplicate title.
    void add(std::string title, std::string text);
    std::optional<std::string> lookup(std::string_view title) const override;
    std::size_t size() const override { return docs_.size(); }

    static InMemoryCorpus from_jsonl(std::string_view text);
    std::string to_jsonl() const;
    static std::string normalize_title(std::string_view title);

private:
    std::map<std::string, std::pair<std::string, std::string>> docs_;
    std::vector<std::string> order_;
};

struct EnvStep {
    std::string observation;
    double reward = 0.0;
    bool done = false;
};

class QaEnvironment {
public:
    QaEnvironment(std::shared_ptr<const Corpus> corpus, QaTask task);

    /// Starts the episode; the first observation is the question.
    std::string reset();
    EnvStep step(const EnvAction& action);

    bool done() const { return done_; }
    int steps_taken() const { return steps_; }
    const QaTask& task() const { return task_; }

private:
    std::shared_ptr<const Corpus> corpus_;
    QaTask task_;
    int steps_ = 0;
    bool done_ = false;
    bool started_ = false;
};

/// What one recall produced.
struct RecallRecord {
    std::string context;
    RankedMemories ranked;
    AggregationTrace trace;
    int llm_calls = 0;
};

class MemoryPolicy {
public:
    virtual ~MemoryPolicy() = default;
    virtual std::string name() const = 0;
    /// Fresh store and cache for a new episode.
    virtual void begin() = 0;
    /// Returns the number of model calls it made.
    virtual int observe(std::string_view text, int step) = 0;
    virtual RecallRecord recall(std::string_view state, int step, Rng& rng) = 0;
    virtual const MemoryStore& store() const = 0;
};

/// The learnable cycle: cached extraction, gated ranking, iterative aggregation.
struct AdaptiveMemoryConfig {
    std::size_t top_k = kDefaultTopK;
    std::size_t cache_capacity = kDefaultCacheCapacity;
    AggregationOptions aggregation;
};

class AdaptiveMemory final : public MemoryPolicy {
public:
    AdaptiveMemory(std::shared_ptr<ChatEndpoint> extractor, std::shared_ptr<ChatEndpoint> utilizer,
                   std::shared_ptr<const EmbeddingProvider> embedder, std::shared_ptr<const MetricSuite> suite,
                   GateParams gate, TaskPrompt prompt, AdaptiveMemoryConfig config = {});

    std::string name() const override { return "adaptive"; }
    void begin() override;
    int observe(std::string_view text, int step) override;
    RecallRecord recall(std::string_view state, int step, Rng& rng) override;
    const MemoryStore& store() const override { return store_; }

private:
    int flush(std::vector<PendingObservation> pending);

    std::shared_ptr<ChatEndpoint> extractor_;
    std::shared_ptr<ChatEndpoint> utilizer_;
    std::shared_ptr<const EmbeddingProvider> embedder_;
    std::shared_ptr<const MetricSuite> suite_;
    GateParams gate_;
    TaskPrompt prompt_;
    AdaptiveMemoryConfig config_;
    MemoryStore store_;
    ObservationCache cache_;
};

/// Shared plumbing of the non-learnable baselines: raw observations are
/// stored as units directly.
class RawMemoryBase : public MemoryPolicy {
public:
    explicit RawMemoryBase(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t word_cap = kContextWordCap);
    void begin() override;
    int observe(std::string_view text, int step) override;
    const MemoryStore& store() const override { return store_; }

protected:
    RecallRecord from_ids(std::vector<MemoryId> ids, RankedMemories ranked) const;

    std::shared_ptr<const EmbeddingProvider> embedder_;
    std::size_t word_cap_;
    MemoryStore store_;
};

/// Every observation, joined in storage order.
class FullMemory final : public RawMemoryBase {
public:
    using RawMemoryBase::RawMemoryBase;
    std::string name() const override { return "full"; }
    RecallRecord recall(std::string_view state, int step, Rng& rng) override;
};

/// Top-k by cosine relevance.
class LongTermMemory final : public RawMemoryBase {
public:
    LongTermMemory(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t top_k = kDefaultTopK,
                   std::size_t word_cap = kContextWordCap);
    std::string name() const override { return "long-term"; }
    RecallRecord recall(std::string_view state, int step, Rng& rng) override;

private:
    std::size_t top_k_;
};

/// The latest `window` observations.
class ShortTermMemory final : public RawMemoryBase {
public:
    ShortTermMemory(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t window = 3,
                    std::size_t word_cap = kContextWordCap);
    std::string name() const override { return "short-term"; }
    RecallRecord recall(std::string_view state, int step, Rng& rng) override;

private:
    std::size_t window_;
};

/// Fixed linear weights alpha over (rel, imp, rec_1).
class FixedWeightMemory final : public RawMemoryBase {
public:
    FixedWeightMemory(std::shared_ptr<const EmbeddingProvider> embedder,
                      std::shared_ptr<const ImportanceScorer> importance, Vector alpha,
                      std::size_t top_k = kDefaultTopK, std::size_t word_cap = kContextWordCap);
    std::string name() const override { return "fixed-weight"; }
    RecallRecord recall(std::string_view state, int step, Rng& rng) override;
    const MetricSuite& suite() const { return suite_; }

private:
    MetricSuite suite_;
    Vector alpha_;
    std::size_t top_k_;
};

inline constexpr std::string_view kDefaultThinkTemplate =
    "You are a knowledgeable expert, and you are answering a question. You are allowed to search in Wikipedia to "
    "get information.\n"
    "The question is: {question}.\n"
    "Now, you can choose to answer the question or search an entity on Wikipedia.\n"
    "Please think step by step to analyze how to choose the next action, and output it into one paragraph in "
    "concise.\n"
    "In previous steps, you have already accumulated some knowledge in your memory as follows:\n"
    "{memory_context}.";

inline constexpr std::string_view kDefaultActTemplate =
    "You are a knowledgeable expert, and you are answering a question. You are allowed to search in Wikipedia to "
    "get information.\n"
    "The question is: {question}.\n"
    "You have thought step by step to analyze how to choose the next action as follows:\n"
    "{thought}.\n"
    "Now, you can choose to answer the question or search an entry on Wikipedia:\n"
    "(1) Search[entity], which searches the entity on Wikipedia and returns the paragraphs if they exist.\n"
    "(2) Finish[answer], which returns the answer and finishes the task. Your answer should be in concise with "
    "several words, NOT a sentence.\n"
    "Please generate the next action accordingly.\n"
    "Your output must follow one of the following two formats:\n"
    "Search[entity]\n"
    "Finish[answer]\n"
    "Here are some examples:\n"
    "Search[Alan Turing]\n"
    "Finish[no]\n"
    "Finish[Shanghai]\n"
    "In previous steps, you have already accumulated some knowledge in your memory as follows:\n"
    "{memory_context}";

struct AgentConfig {
    std::string think_template{kDefaultThinkTemplate};
    std::string act_template{kDefaultActTemplate};
    /// Store "Thought: ... Action: ..." back into memory after acting.
    bool store_thoughts = true;
};

struct StepOutcome {
    EnvAction action;
    StepRecord record;
};

class Agent {
public:
    Agent(std::shared_ptr<ChatEndpoint> actor, MemoryPolicy& memory, AgentConfig config = {});

    void begin(const QaTask& task);
    /// storage, retrieval, utilization, think, act.
    StepOutcome react_step(std::string_view observation, int step, Rng& rng);

    MemoryPolicy& memory() { return memory_; }

private:
    std::shared_ptr<ChatEndpoint> actor_;
    MemoryPolicy& memory_;
    AgentConfig config_;
    QaTask task_;
};

/// Runs one episode to completion. Endpoint failures end the episode as a
/// failure with the diagnostic in Trajectory::error.
Trajectory run_trajectory(Agent& agent, QaEnvironment& env, Rng& rng, std::string id, int bundle_version = 0,
                          double success_threshold = 0.5, bool record_timings = false);

struct EpisodeStats {
    std::size_t episodes = 0;
    double mean_reward = 0.0;
    double mean_steps = 0.0;
    double success_rate = 0.0;
};
EpisodeStats summarize(std::span<const Trajectory> trajectories);

}  // namespace memcycle
