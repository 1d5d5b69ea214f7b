// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/chat.hpp"
#include "memcycle/memory_core.hpp"
#include "memcycle/metrics.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

inline constexpr std::string_view kDefaultStorageInstruction =
    "From the above observation and according to the hint, please extract critical informative points and "
    "summarize them into a concise paragraph. You should just output the result of summarization, without any "
    "other messages.";

inline constexpr std::size_t kDefaultHintCap = 20;
inline constexpr std::size_t kDefaultCacheCapacity = 5;

/// theta_s: fixed global instruction plus reflection-derived hint lines.
struct TaskPrompt {
    std::string global{kDefaultStorageInstruction};
    std::vector<std::string> hints;

    /// "Observation: ...", then "Hint: ..." when hints exist, then the global instruction.
    std::string render(std::string_view observation) const;

    Json to_json() const;
    static TaskPrompt from_json(const Json& j);
    friend bool operator==(const TaskPrompt&, const TaskPrompt&) = default;
};

/// Builds a unit from an observation. An endpoint failure or a blank reply
/// keeps the raw observation as the text and sets the fallback flag.
MemoryUnit extract(ChatEndpoint& endpoint, const TaskPrompt& prompt, const EmbeddingProvider& embedder,
                   std::string_view observation, int step);

struct PendingObservation {
    std::string text;
    int step = 0;

    friend bool operator==(const PendingObservation&, const PendingObservation&) = default;
};

class ObservationCache {
public:
    explicit ObservationCache(std::size_t capacity = kDefaultCacheCapacity);

    /// Appends; returns the whole pending list (and empties the cache) once full.
    std::vector<PendingObservation> put(std::string text, int step);
    std::vector<PendingObservation> drain();

    std::size_t size() const { return pending_.size(); }
    std::size_t capacity() const { return capacity_; }

private:
    std::size_t capacity_;
    std::vector<PendingObservation> pending_;
};

struct Partition {
    std::vector<Trajectory> positive;
    std::vector<Trajectory> negative;
};

/// reward >= threshold goes positive.
Partition partition_trajectories(std::span<const Trajectory> trajectories, double threshold);

enum class Polarity { positive, negative };

inline constexpr std::string_view kDefaultPositiveReflection =
    "Each block below is an episode that ended in success. Every step shows the observation the agent saw and "
    "the memory it stored from it.\n"
    "{experiences}\n"
    "Summarize what information, when stored, enabled success. Write at most {max_lines} short imperative hints "
    "for the memory extraction step, one per line, with no numbering and nothing else.";

inline constexpr std::string_view kDefaultNegativeReflection =
    "Each block below is an episode that ended in failure. Every step shows the observation the agent saw and "
    "the memory it stored from it.\n"
    "{experiences}\n"
    "Identify information that should have been stored but was lost. Write at most {max_lines} short imperative "
    "hints for the memory extraction step, one per line, with no numbering and nothing else.";

struct ReflectionOptions {
    std::size_t max_lines = 2;
    /// Episodes shown to one reflection call.
    std::size_t reflection_size = 40;
    std::string positive_template{kDefaultPositiveReflection};
    std::string negative_template{kDefaultNegativeReflection};
};

/// Question, then per step the observation and the units stored at that step.
std::string render_experiences(std::span<const Trajectory> group, std::size_t limit);

/// One endpoint call per non-empty group; failures yield no hints.
std::vector<std::string> reflect(ChatEndpoint& endpoint, std::span<const Trajectory> group, Polarity polarity,
                                 const ReflectionOptions& options = {});

/// Appends unseen hints, positive ones first, keeping the newest `cap`.
TaskPrompt update_task_prompt(const TaskPrompt& prompt, std::span<const std::string> positive,
                              std::span<const std::string> negative, std::size_t cap = kDefaultHintCap);

}  // namespace memcycle
