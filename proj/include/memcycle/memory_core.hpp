// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/linalg.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

using MemoryId = std::uint64_t;

inline constexpr std::size_t kDefaultEmbeddingDim = 768;

struct MemoryUnit {
    MemoryId id = 0;
    std::string text;
    std::string source;
    /// Interaction step at which the source observation was perceived.
    int step = 0;
    Vector embedding;
    /// Cached emotion vector h_e(text), length 8 once scored.
    std::optional<Vector> emotion;
    /// Cached memory-side importance projection once scored.
    std::optional<Vector> importance_feat;
    /// Extraction failed; `text` holds the raw observation.
    bool fallback = false;
};

bool operator==(const MemoryUnit& a, const MemoryUnit& b);

/// Append-only store M^t. Ids are assigned on insertion and increase by one.
class MemoryStore {
public:
    MemoryStore() : MemoryStore(kDefaultEmbeddingDim) {}
    explicit MemoryStore(std::size_t dim);

    /// Appends `unit` under a fresh id and returns that id. The unit's own id
    /// field is ignored. Throws DimensionMismatch when the embedding length is
    /// not dim().
    MemoryId insert(MemoryUnit unit);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return units_.size(); }
    bool empty() const noexcept { return units_.empty(); }
    MemoryId next_id() const noexcept { return next_id_; }
    const std::vector<MemoryUnit>& units() const noexcept { return units_; }

    const MemoryUnit* find(MemoryId id) const;
    const MemoryUnit& at(MemoryId id) const;

    /// Rebuilds a store from persisted parts, validating every invariant.
    static MemoryStore restore(std::size_t dim, MemoryId next_id, std::vector<MemoryUnit> units);

    friend bool operator==(const MemoryStore& a, const MemoryStore& b);

private:
    std::size_t dim_;
    MemoryId next_id_ = 1;
    std::vector<MemoryUnit> units_;
};

struct StepRecord {
    int step = 0;
    /// Observation perceived at this step.
    std::string observation;
    /// Text of the retrieval query s^t.
    std::string state_text;
    /// Number of units in the trajectory store when retrieval ran.
    std::size_t store_size = 0;
    /// Full ranking M^t_rank over the snapshot, best first.
    std::vector<MemoryId> ranked_ids;
    /// Aggregation contexts p_0 .. p_k; the i-th merge used ranked_ids[i-1].
    std::vector<std::string> contexts;
    std::vector<long> word_deltas;
    std::vector<double> gains;
    /// Stop draws z_2 .. z_k (the first merge is exempt).
    std::vector<int> stop_draws;
    /// Final memory context p^t placed in the prompts.
    std::string context;
    std::string thought;
    std::string action;
    int llm_calls = 0;
    /// Wall-clock seconds for the step; only recorded on request.
    std::optional<double> seconds;

    friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct Trajectory {
    std::string id;
    std::string question;
    std::string answer;
    std::string policy;
    int bundle_version = 0;
    std::vector<StepRecord> steps;
    double reward = 0.0;
    bool success = false;
    /// Non-empty when the trajectory was aborted.
    std::string error;
    MemoryStore store;

    friend bool operator==(const Trajectory& a, const Trajectory& b);
};

/// Checks step and ranking invariants; throws ContractError on violation.
void validate(const Trajectory& trajectory);

// Line-delimited JSON: a header line followed by one line per unit (and per
// step for trajectories).
std::string serialize(const MemoryStore& store);
std::string serialize(const Trajectory& trajectory);
std::string serialize_log(std::span<const Trajectory> trajectories);

MemoryStore deserialize_store(std::string_view bytes);
Trajectory deserialize_trajectory(std::string_view bytes);
std::vector<Trajectory> deserialize_log(std::string_view bytes);

std::vector<Trajectory> read_trajectory_log(const std::string& path);
void write_trajectory_log(const std::string& path, std::span<const Trajectory> trajectories);

Json unit_to_json(const MemoryUnit& unit);
MemoryUnit unit_from_json(const Json& j);

}  // namespace memcycle
