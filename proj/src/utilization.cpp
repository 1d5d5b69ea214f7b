// SPDX-License-Identifier: Apache-2.0
#include "memcycle/utilization.hpp"

#include "memcycle/error.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <sstream>

namespace memcycle {

double info_gain(long delta, long previous_delta) {
    const long cur = std::max(delta, 0L);
    const long prev = std::max(previous_delta, 0L);
    if (prev == 0) {
        return cur > 0 ? 1.0 : 0.0;
    }
    return std::clamp(static_cast<double>(cur) / static_cast<double>(prev), 0.0, 1.0);
}

double stop_prob(double gain, double previous_gain) { return 1.0 - std::max(gain, previous_gain); }

std::string render_merge_prompt(std::string_view tmpl, std::string_view observation, std::string_view memory_context,
                                std::string_view new_memory) {
    return render_template(tmpl, {{"observation", std::string(observation)},
                                  {"memory_context", std::string(memory_context)},
                                  {"new_memory", std::string(new_memory)}});
}

AggregationResult aggregate(ChatEndpoint& endpoint, std::span<const std::string> ranked_texts,
                            std::string_view observation, Rng& rng, const AggregationOptions& options) {
    if (ranked_texts.empty()) {
        throw ContractError("aggregation needs at least one ranked memory");
    }
    if (options.max_iters == 0) {
        throw ContractError("aggregation needs max_iters >= 1");
    }
    AggregationResult out;
    auto& tr = out.trace;
    tr.contexts.emplace_back();
    const std::size_t limit = std::min(options.max_iters, ranked_texts.size());
    long prev_delta = 0;
    double prev_gain = 0.0;
    for (std::size_t i = 1; i <= limit; ++i) {
        const auto& previous = tr.contexts.back();
        const auto prompt = render_merge_prompt(options.merge_template, observation, previous, ranked_texts[i - 1]);
        std::size_t retries = 0;
        std::string merged;
        try {
            merged = with_retries(options.retry, retries, [&] {
                ++tr.calls;
                return endpoint.complete(prompt);
            });
        } catch (const Error& e) {
            throw Error("aggregation failed at iteration " + std::to_string(i) + ": " + e.what());
        }
        merged = truncate_words(trim(merged), options.word_cap);
        const long delta = static_cast<long>(word_count(merged)) - static_cast<long>(word_count(previous));
        const double gain = info_gain(delta, prev_delta);
        tr.contexts.push_back(std::move(merged));
        tr.word_deltas.push_back(delta);
        tr.gains.push_back(gain);
        tr.stop_step = i;
        if (i >= 2) {
            const int z = rng.bernoulli(stop_prob(gain, prev_gain)) ? 1 : 0;
            tr.stop_draws.push_back(z);
            if (z == 1) {
                break;
            }
        }
        prev_delta = delta;
        prev_gain = gain;
    }
    out.context = tr.contexts.back();
    return out;
}

Json SftRecord::to_json() const { return Json{{"prompt", prompt}, {"target", target}}; }

SftRecord SftRecord::from_json(const Json& j) {
    SftRecord r{j.at("prompt").get<std::string>(), j.at("target").get<std::string>()};
    if (r.target.empty()) {
        throw ContractError("SFT record target must be non-empty");
    }
    return r;
}

Json DpoRecord::to_json() const {
    return Json{{"prompt", prompt}, {"chosen", chosen}, {"rejected", rejected}, {"beta", beta}};
}

DpoRecord DpoRecord::from_json(const Json& j) {
    DpoRecord r{j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(),
                j.at("rejected").get<std::string>(), j.value("beta", 0.1)};
    if (r.chosen == r.rejected) {
        throw ContractError("DPO record has chosen == rejected");
    }
    if (!(r.beta > 0.0)) {
        throw ContractError("DPO beta must be positive");
    }
    return r;
}

std::optional<FinalMerge> final_merge(const Trajectory& trajectory, std::string_view merge_template) {
    if (trajectory.steps.empty()) {
        return std::nullopt;
    }
    const auto& last = trajectory.steps.back();
    const std::size_t k = last.contexts.empty() ? 0 : last.contexts.size() - 1;
    if (k == 0 || last.ranked_ids.size() < k) {
        return std::nullopt;
    }
    const auto& memory = trajectory.store.at(last.ranked_ids[k - 1]);
    return FinalMerge{render_merge_prompt(merge_template, last.state_text, last.contexts[k - 1], memory.text),
                      last.contexts[k]};
}

DatasetBuild<SftRecord> build_sft_dataset(std::span<const Trajectory> trajectories, ChatEndpoint& expert,
                                          std::string_view merge_template) {
    DatasetBuild<SftRecord> out;
    for (const auto& t : trajectories) {
        const auto merge = final_merge(t, merge_template);
        if (!merge) {
            continue;
        }
        try {
            auto target = trim(expert.complete(merge->prompt));
            if (target.empty()) {
                ++out.skipped;
                continue;
            }
            out.records.push_back(SftRecord{merge->prompt, std::move(target)});
        } catch (const Error&) {
            ++out.skipped;
        }
    }
    return out;
}

DatasetBuild<DpoRecord> build_dpo_dataset(std::span<const Trajectory> trajectories, ChatEndpoint& sft_model,
                                          double beta, std::string_view merge_template) {
    if (!(beta > 0.0)) {
        throw ContractError("DPO beta must be positive");
    }
    DatasetBuild<DpoRecord> out;
    for (const auto& t : trajectories) {
        const auto merge = final_merge(t, merge_template);
        if (!merge) {
            continue;
        }
        try {
            auto chosen = trim(sft_model.complete(merge->prompt));
            if (chosen.empty() || chosen == merge->output) {
                ++out.skipped;
                continue;
            }
            out.records.push_back(DpoRecord{merge->prompt, std::move(chosen), merge->output, beta});
        } catch (const Error&) {
            ++out.skipped;
        }
    }
    return out;
}

namespace {

template <typename Record>
std::string records_to_jsonl(std::span<const Record> records) {
    std::string out;
    for (const auto& r : records) {
        out += r.to_json().dump();
        out += '\n';
    }
    return out;
}

template <typename Record>
std::vector<Record> records_from_jsonl(std::string_view text) {
    std::vector<Record> out;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::parse_error& e) {
            throw ParseError(e.what(), line_no, e.byte);
        }
        try {
            out.push_back(Record::from_json(j));
        } catch (const Json::exception& e) {
            throw ParseError(e.what(), line_no, 1);
        }
    }
    return out;
}

}  // namespace

std::string to_jsonl(std::span<const SftRecord> records) { return records_to_jsonl(records); }
std::string to_jsonl(std::span<const DpoRecord> records) { return records_to_jsonl(records); }
std::vector<SftRecord> sft_from_jsonl(std::string_view text) { return records_from_jsonl<SftRecord>(text); }
std::vector<DpoRecord> dpo_from_jsonl(std::string_view text) { return records_from_jsonl<DpoRecord>(text); }

double dpo_term(const PreferenceTrace& t, double beta) {
    const double margin =
        (*t.policy_chosen - *t.reference_chosen) - (*t.policy_rejected - *t.reference_rejected);
    return neg_log_sigmoid(beta * margin);
}

LossSummary dpo_loss(std::span<const PreferenceTrace> traces, double beta) {
    if (!(beta > 0.0)) {
        throw ContractError("DPO beta must be positive");
    }
    LossSummary s;
    for (const auto& t : traces) {
        if (!t.policy_chosen || !t.policy_rejected || !t.reference_chosen || !t.reference_rejected) {
            ++s.skipped;
            continue;
        }
        s.loss += dpo_term(t, beta);
        ++s.used;
    }
    if (s.used > 0) {
        s.loss /= static_cast<double>(s.used);
    }
    return s;
}

LossSummary sft_loss(std::span<const std::vector<double>> token_logprobs) {
    LossSummary s;
    for (const auto& trace : token_logprobs) {
        if (trace.empty()) {
            ++s.skipped;
            continue;
        }
        double sum = 0.0;
        for (double lp : trace) {
            sum -= lp;
        }
        s.loss += sum / static_cast<double>(trace.size());
        ++s.used;
    }
    if (s.used > 0) {
        s.loss /= static_cast<double>(s.used);
    }
    return s;
}

Json UtilizationPolicy::to_json() const {
    return Json{{"model_ref", model_ref}, {"sft_dataset", sft_dataset}, {"dpo_dataset", dpo_dataset}, {"beta", beta}};
}

UtilizationPolicy UtilizationPolicy::from_json(const Json& j) {
    return UtilizationPolicy{j.at("model_ref").get<std::string>(), j.value("sft_dataset", std::string()),
                             j.value("dpo_dataset", std::string()), j.value("beta", 0.1)};
}

namespace {

std::string shell_quote(std::string_view s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    out += '\'';
    return out;
}

}  // namespace

std::string CommandFineTuneHook::run(const FineTuneRequest& request) {
    std::ostringstream lr;
    lr << request.learning_rate;
    const auto cmd = render_template(command_, {{"stage", shell_quote(request.stage)},
                                                {"dataset", shell_quote(request.dataset_path)},
                                                {"model_ref", shell_quote(request.model_ref)},
                                                {"lr", shell_quote(lr.str())},
                                                {"batch", shell_quote(std::to_string(request.batch_size))}});
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        throw Error("cannot launch fine-tune hook");
    }
    std::string output;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
        output.append(buf.data(), n);
    }
    const int status = ::pclose(pipe);
    if (status != 0) {
        throw Error("fine-tune hook exited with status " + std::to_string(status));
    }
    const auto lines = split_lines(output);
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        auto ref = trim(*it);
        if (!ref.empty()) {
            return ref;
        }
    }
    return request.model_ref;
}

}  // namespace memcycle
