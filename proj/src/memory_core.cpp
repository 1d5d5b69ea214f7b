// SPDX-License-Identifier: Apache-2.0
#include "memcycle/memory_core.hpp"

#include "memcycle/error.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace memcycle {

namespace {

bool same_optional(const std::optional<Vector>& a, const std::optional<Vector>& b) {
    if (a.has_value() != b.has_value()) {
        return false;
    }
    return !a || same_values(*a, *b);
}

/// Splits bytes into lines and turns json parse failures into ParseErrors
/// carrying the source position.
class LineReader {
public:
    explicit LineReader(std::string_view bytes) : bytes_(bytes) {}

    bool at_end() {
        skip_blank();
        return pos_ >= bytes_.size();
    }

    std::size_t line() const { return line_; }

    Json next(std::string_view expected_kind) {
        skip_blank();
        if (pos_ >= bytes_.size()) {
            throw ParseError("unexpected end of input, expected a '" + std::string(expected_kind) +
                                 "' line",
                             line_ + 1, 1);
        }
        const auto nl = bytes_.find('\n', pos_);
        const auto end = nl == std::string_view::npos ? bytes_.size() : nl;
        const auto text = bytes_.substr(pos_, end - pos_);
        ++line_;
        pos_ = nl == std::string_view::npos ? bytes_.size() : nl + 1;
        Json j;
        try {
            j = Json::parse(text);
        } catch (const Json::parse_error& e) {
            throw ParseError(e.what(), line_, e.byte == 0 ? 1 : e.byte);
        }
        if (!j.is_object() || !j.contains("kind") || j["kind"] != expected_kind) {
            throw ParseError("expected a '" + std::string(expected_kind) + "' record", line_, 1);
        }
        return j;
    }

    template <typename F>
    auto guarded(F&& f) -> decltype(f()) {
        try {
            return f();
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(e.what(), line_, 1);
        }
    }

private:
    void skip_blank() {
        while (pos_ < bytes_.size()) {
            const auto nl = bytes_.find('\n', pos_);
            const auto end = nl == std::string_view::npos ? bytes_.size() : nl;
            const auto text = bytes_.substr(pos_, end - pos_);
            if (text.find_first_not_of(" \t\r") != std::string_view::npos) {
                return;
            }
            ++line_;
            pos_ = nl == std::string_view::npos ? bytes_.size() : nl + 1;
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::size_t line_ = 0;
};

Json step_to_json(const StepRecord& s) {
    Json j{{"kind", "step"},
           {"step", s.step},
           {"observation", s.observation},
           {"state_text", s.state_text},
           {"store_size", s.store_size},
           {"ranked_ids", s.ranked_ids},
           {"contexts", s.contexts},
           {"word_deltas", s.word_deltas},
           {"gains", s.gains},
           {"stop_draws", s.stop_draws},
           {"context", s.context},
           {"thought", s.thought},
           {"action", s.action},
           {"llm_calls", s.llm_calls}};
    if (s.seconds) {
        j["seconds"] = *s.seconds;
    }
    return j;
}

StepRecord step_from_json(const Json& j) {
    StepRecord s;
    s.step = j.at("step").get<int>();
    s.observation = j.at("observation").get<std::string>();
    s.state_text = j.at("state_text").get<std::string>();
    s.store_size = j.at("store_size").get<std::size_t>();
    s.ranked_ids = j.at("ranked_ids").get<std::vector<MemoryId>>();
    s.contexts = j.at("contexts").get<std::vector<std::string>>();
    s.word_deltas = j.at("word_deltas").get<std::vector<long>>();
    s.gains = j.at("gains").get<std::vector<double>>();
    s.stop_draws = j.at("stop_draws").get<std::vector<int>>();
    s.context = j.at("context").get<std::string>();
    s.thought = j.at("thought").get<std::string>();
    s.action = j.at("action").get<std::string>();
    s.llm_calls = j.at("llm_calls").get<int>();
    if (j.contains("seconds")) {
        s.seconds = j.at("seconds").get<double>();
    }
    return s;
}

void append_store_body(std::string& out, const MemoryStore& store) {
    for (const auto& unit : store.units()) {
        out += unit_to_json(unit).dump();
        out += '\n';
    }
}

std::vector<MemoryUnit> read_units(LineReader& reader, std::size_t count) {
    std::vector<MemoryUnit> units;
    units.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto j = reader.next("unit");
        units.push_back(reader.guarded([&] { return unit_from_json(j); }));
    }
    return units;
}

Trajectory read_trajectory(LineReader& reader) {
    auto header = reader.next("trajectory");
    Trajectory t;
    std::size_t dim = 0;
    MemoryId next_id = 1;
    std::size_t unit_count = 0;
    std::size_t step_count = 0;
    reader.guarded([&] {
        t.id = header.at("id").get<std::string>();
        t.question = header.at("question").get<std::string>();
        t.answer = header.at("answer").get<std::string>();
        t.policy = header.at("policy").get<std::string>();
        t.bundle_version = header.at("bundle_version").get<int>();
        t.reward = header.at("reward").get<double>();
        t.success = header.at("success").get<bool>();
        t.error = header.at("error").get<std::string>();
        dim = header.at("dim").get<std::size_t>();
        next_id = header.at("next_id").get<MemoryId>();
        unit_count = header.at("units").get<std::size_t>();
        step_count = header.at("steps").get<std::size_t>();
        return 0;
    });
    const auto header_line = reader.line();
    auto units = read_units(reader, unit_count);
    for (std::size_t i = 0; i < step_count; ++i) {
        auto j = reader.next("step");
        t.steps.push_back(reader.guarded([&] { return step_from_json(j); }));
    }
    try {
        t.store = MemoryStore::restore(dim, next_id, std::move(units));
    } catch (const ContractError& e) {
        throw ParseError(e.what(), header_line, 1);
    }
    return t;
}

}  // namespace

bool operator==(const MemoryUnit& a, const MemoryUnit& b) {
    return a.id == b.id && a.text == b.text && a.source == b.source && a.step == b.step &&
           same_values(a.embedding, b.embedding) && same_optional(a.emotion, b.emotion) &&
           same_optional(a.importance_feat, b.importance_feat) && a.fallback == b.fallback;
}

MemoryStore::MemoryStore(std::size_t dim) : dim_(dim) {
    if (dim == 0) {
        throw ContractError("embedding dimension must be positive");
    }
}

MemoryId MemoryStore::insert(MemoryUnit unit) {
    if (static_cast<std::size_t>(unit.embedding.size()) != dim_) {
        throw DimensionMismatch(dim_, static_cast<std::size_t>(unit.embedding.size()));
    }
    if (unit.step < 0) {
        throw ContractError("memory step must be non-negative");
    }
    unit.id = next_id_++;
    units_.push_back(std::move(unit));
    return units_.back().id;
}

const MemoryUnit* MemoryStore::find(MemoryId id) const {
    // Ids are dense and increasing, so a binary search over insertion order works.
    auto it = std::lower_bound(units_.begin(), units_.end(), id,
                               [](const MemoryUnit& u, MemoryId v) { return u.id < v; });
    return it != units_.end() && it->id == id ? &*it : nullptr;
}

const MemoryUnit& MemoryStore::at(MemoryId id) const {
    if (const auto* unit = find(id)) {
        return *unit;
    }
    throw ContractError("unknown memory id " + std::to_string(id));
}

MemoryStore MemoryStore::restore(std::size_t dim, MemoryId next_id, std::vector<MemoryUnit> units) {
    MemoryStore store(dim);
    MemoryId previous = 0;
    for (const auto& unit : units) {
        if (static_cast<std::size_t>(unit.embedding.size()) != dim) {
            throw DimensionMismatch(dim, static_cast<std::size_t>(unit.embedding.size()));
        }
        if (unit.id <= previous && previous != 0) {
            throw ContractError("memory ids must increase");
        }
        if (unit.id == 0 || unit.id >= next_id) {
            throw ContractError("memory id " + std::to_string(unit.id) + " outside [1, next_id)");
        }
        if (unit.step < 0) {
            throw ContractError("memory step must be non-negative");
        }
        previous = unit.id;
    }
    store.next_id_ = next_id;
    store.units_ = std::move(units);
    return store;
}

bool operator==(const MemoryStore& a, const MemoryStore& b) {
    return a.dim_ == b.dim_ && a.next_id_ == b.next_id_ && a.units_ == b.units_;
}

bool operator==(const Trajectory& a, const Trajectory& b) {
    return a.id == b.id && a.question == b.question && a.answer == b.answer &&
           a.policy == b.policy && a.bundle_version == b.bundle_version && a.steps == b.steps &&
           a.reward == b.reward && a.success == b.success && a.error == b.error &&
           a.store == b.store;
}

void validate(const Trajectory& trajectory) {
    std::size_t previous_size = 0;
    for (const auto& step : trajectory.steps) {
        if (step.store_size < previous_size || step.store_size > trajectory.store.size()) {
            throw ContractError("step " + std::to_string(step.step) + ": store snapshot out of order");
        }
        previous_size = step.store_size;
        std::unordered_set<MemoryId> seen;
        const auto& units = trajectory.store.units();
        for (auto id : step.ranked_ids) {
            if (!seen.insert(id).second) {
                throw ContractError("step " + std::to_string(step.step) + ": duplicate ranked id");
            }
            const bool in_snapshot =
                std::any_of(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(step.store_size),
                            [id](const MemoryUnit& u) { return u.id == id; });
            if (!in_snapshot) {
                throw ContractError("step " + std::to_string(step.step) + ": ranked id " +
                                    std::to_string(id) + " not in snapshot");
            }
        }
    }
}

Json unit_to_json(const MemoryUnit& unit) {
    Json j{{"kind", "unit"},
           {"id", unit.id},
           {"text", unit.text},
           {"source", unit.source},
           {"step", unit.step},
           {"embedding", vector_to_json(unit.embedding)},
           {"fallback", unit.fallback}};
    j["emotion"] = unit.emotion ? vector_to_json(*unit.emotion) : Json(nullptr);
    j["importance_feat"] = unit.importance_feat ? vector_to_json(*unit.importance_feat) : Json(nullptr);
    return j;
}

MemoryUnit unit_from_json(const Json& j) {
    MemoryUnit unit;
    unit.id = j.at("id").get<MemoryId>();
    unit.text = j.at("text").get<std::string>();
    unit.source = j.at("source").get<std::string>();
    unit.step = j.at("step").get<int>();
    unit.embedding = vector_from_json(j.at("embedding"));
    unit.fallback = j.at("fallback").get<bool>();
    if (!j.at("emotion").is_null()) {
        unit.emotion = vector_from_json(j.at("emotion"));
    }
    if (!j.at("importance_feat").is_null()) {
        unit.importance_feat = vector_from_json(j.at("importance_feat"));
    }
    return unit;
}

std::string serialize(const MemoryStore& store) {
    Json header{{"kind", "store"}, {"dim", store.dim()}, {"next_id", store.next_id()}, {"units", store.size()}};
    std::string out = header.dump();
    out += '\n';
    append_store_body(out, store);
    return out;
}

std::string serialize(const Trajectory& t) {
    Json header{{"kind", "trajectory"},
                {"id", t.id},
                {"question", t.question},
                {"answer", t.answer},
                {"policy", t.policy},
                {"bundle_version", t.bundle_version},
                {"reward", t.reward},
                {"success", t.success},
                {"error", t.error},
                {"dim", t.store.dim()},
                {"next_id", t.store.next_id()},
                {"units", t.store.size()},
                {"steps", t.steps.size()}};
    std::string out = header.dump();
    out += '\n';
    append_store_body(out, t.store);
    for (const auto& step : t.steps) {
        out += step_to_json(step).dump();
        out += '\n';
    }
    return out;
}

std::string serialize_log(std::span<const Trajectory> trajectories) {
    std::string out;
    for (const auto& t : trajectories) {
        out += serialize(t);
    }
    return out;
}

MemoryStore deserialize_store(std::string_view bytes) {
    LineReader reader(bytes);
    auto header = reader.next("store");
    std::size_t dim = 0;
    MemoryId next_id = 1;
    std::size_t count = 0;
    reader.guarded([&] {
        dim = header.at("dim").get<std::size_t>();
        next_id = header.at("next_id").get<MemoryId>();
        count = header.at("units").get<std::size_t>();
        return 0;
    });
    auto units = read_units(reader, count);
    if (!reader.at_end()) {
        throw ParseError("trailing data after store", reader.line() + 1, 1);
    }
    try {
        return MemoryStore::restore(dim, next_id, std::move(units));
    } catch (const ContractError& e) {
        throw ParseError(e.what(), 1, 1);
    }
}

Trajectory deserialize_trajectory(std::string_view bytes) {
    LineReader reader(bytes);
    auto t = read_trajectory(reader);
    if (!reader.at_end()) {
        throw ParseError("trailing data after trajectory", reader.line() + 1, 1);
    }
    return t;
}

std::vector<Trajectory> deserialize_log(std::string_view bytes) {
    LineReader reader(bytes);
    std::vector<Trajectory> out;
    while (!reader.at_end()) {
        out.push_back(read_trajectory(reader));
    }
    return out;
}

std::vector<Trajectory> read_trajectory_log(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open trajectory log " + path);
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return deserialize_log(buffer.str());
}

void write_trajectory_log(const std::string& path, std::span<const Trajectory> trajectories) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write trajectory log " + path);
    }
    out << serialize_log(trajectories);
}

}  // namespace memcycle
