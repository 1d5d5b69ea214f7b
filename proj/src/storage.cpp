// SPDX-License-Identifier: Apache-2.0
#include "memcycle/storage.hpp"

#include "memcycle/error.hpp"
#include "memcycle/text.hpp"

#include <algorithm>
#include <cctype>

namespace memcycle {

std::string TaskPrompt::render(std::string_view observation) const {
    std::string out = "Observation: ";
    out += observation;
    out += '\n';
    if (!hints.empty()) {
        out += "Hint: ";
        out += join(hints, " ");
        out += '\n';
    }
    out += global;
    return out;
}

Json TaskPrompt::to_json() const { return Json{{"global", global}, {"hints", hints}}; }

TaskPrompt TaskPrompt::from_json(const Json& j) {
    TaskPrompt p;
    p.global = j.value("global", p.global);
    p.hints = j.value("hints", std::vector<std::string>{});
    return p;
}

MemoryUnit extract(ChatEndpoint& endpoint, const TaskPrompt& prompt, const EmbeddingProvider& embedder,
                   std::string_view observation, int step) {
    if (trim(observation).empty()) {
        throw ContractError("cannot extract from an empty observation");
    }
    MemoryUnit unit;
    unit.source = std::string(observation);
    unit.step = step;
    try {
        unit.text = trim(endpoint.complete(prompt.render(observation)));
    } catch (const Error&) {
        unit.text.clear();
    }
    if (unit.text.empty()) {
        unit.text = unit.source;
        unit.fallback = true;
    }
    unit.embedding = embedder.embed(unit.text);
    return unit;
}

ObservationCache::ObservationCache(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) {
        throw ContractError("cache capacity must be positive");
    }
}

std::vector<PendingObservation> ObservationCache::put(std::string text, int step) {
    pending_.push_back(PendingObservation{std::move(text), step});
    if (pending_.size() >= capacity_) {
        return drain();
    }
    return {};
}

std::vector<PendingObservation> ObservationCache::drain() {
    std::vector<PendingObservation> out;
    out.swap(pending_);
    return out;
}

Partition partition_trajectories(std::span<const Trajectory> trajectories, double threshold) {
    if (threshold < 0.0 || threshold > 1.0) {
        throw ContractError("partition threshold must lie in [0, 1]");
    }
    Partition p;
    for (const auto& t : trajectories) {
        (t.reward >= threshold ? p.positive : p.negative).push_back(t);
    }
    return p;
}

std::string render_experiences(std::span<const Trajectory> group, std::size_t limit) {
    std::string out;
    const std::size_t n = std::min(limit, group.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& t = group[i];
        out += "Question: " + t.question + "\n";
        for (const auto& step : t.steps) {
            out += "Observation: " + step.observation + "\n";
            for (const auto& u : t.store.units()) {
                if (u.step == step.step && u.source == step.observation) {
                    out += "Memory: " + u.text + "\n";
                }
            }
        }
        out += "\n";
    }
    return out;
}

namespace {

std::string strip_bullet(std::string line) {
    std::size_t i = 0;
    while (i < line.size() && (line[i] == '-' || line[i] == '*' || line[i] == ' ' || line[i] == '\t')) {
        ++i;
    }
    // "1." or "2)" numbering
    std::size_t j = i;
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) {
        ++j;
    }
    if (j > i && j < line.size() && (line[j] == '.' || line[j] == ')')) {
        i = j + 1;
    }
    return trim(std::string_view(line).substr(i));
}

}  // namespace

std::vector<std::string> reflect(ChatEndpoint& endpoint, std::span<const Trajectory> group, Polarity polarity,
                                 const ReflectionOptions& options) {
    if (group.empty() || options.max_lines == 0) {
        return {};
    }
    const auto& tmpl = polarity == Polarity::positive ? options.positive_template : options.negative_template;
    const auto prompt = render_template(tmpl, {{"experiences", render_experiences(group, options.reflection_size)},
                                               {"max_lines", std::to_string(options.max_lines)}});
    std::string reply;
    try {
        reply = endpoint.complete(prompt);
    } catch (const Error&) {
        return {};
    }
    std::vector<std::string> hints;
    for (const auto& line : split_lines(reply)) {
        auto hint = strip_bullet(line);
        if (hint.empty()) {
            continue;
        }
        hints.push_back(std::move(hint));
        if (hints.size() == options.max_lines) {
            break;
        }
    }
    return hints;
}

TaskPrompt update_task_prompt(const TaskPrompt& prompt, std::span<const std::string> positive,
                              std::span<const std::string> negative, std::size_t cap) {
    TaskPrompt out = prompt;
    auto add = [&](const std::string& hint) {
        if (hint.empty() || std::find(out.hints.begin(), out.hints.end(), hint) != out.hints.end()) {
            return;
        }
        out.hints.push_back(hint);
    };
    for (const auto& h : positive) {
        add(h);
    }
    for (const auto& h : negative) {
        add(h);
    }
    if (out.hints.size() > cap) {
        out.hints.erase(out.hints.begin(), out.hints.end() - static_cast<std::ptrdiff_t>(cap));
    }
    return out;
}

}  // namespace memcycle
