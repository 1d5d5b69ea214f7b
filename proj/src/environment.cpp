// SPDX-License-Identifier: Apache-2.0
#include "memcycle/environment.hpp"

#include "memcycle/error.hpp"
#include "memcycle/text.hpp"

#include <algorithm>
#include <chrono>
#include <cctype>

namespace memcycle {

std::vector<QaTask> read_tasks_jsonl(std::string_view text) {
    std::vector<QaTask> out;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            const auto j = Json::parse(line);
            QaTask t;
            t.id = j.value("id", "task-" + std::to_string(out.size()));
            t.question = j.at("question").get<std::string>();
            t.answer = j.at("answer").get<std::string>();
            t.max_steps = j.value("max_steps", kDefaultMaxSteps);
            if (t.max_steps < 1) {
                throw ContractError("max_steps must be at least 1");
            }
            out.push_back(std::move(t));
        } catch (const Json::parse_error& e) {
            throw ParseError(e.what(), line_no, e.byte);
        } catch (const Json::exception& e) {
            throw ParseError(e.what(), line_no, 1);
        }
    }
    return out;
}

std::string tasks_to_jsonl(std::span<const QaTask> tasks) {
    std::string out;
    for (const auto& t : tasks) {
        out += Json{{"id", t.id}, {"question", t.question}, {"answer", t.answer}, {"max_steps", t.max_steps}}.dump();
        out += '\n';
    }
    return out;
}

EnvAction parse_action(std::string_view text) {
    static constexpr std::string_view kSearch = "Search[";
    static constexpr std::string_view kFinish = "Finish[";
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto s = text.find(kSearch, pos);
        const auto f = text.find(kFinish, pos);
        const auto start = std::min(s, f);
        if (start == std::string_view::npos) {
            break;
        }
        const bool is_search = start == s;
        const auto open = start + kSearch.size();
        const auto close = text.find(']', open);
        if (close == std::string_view::npos) {
            break;
        }
        auto arg = trim(text.substr(open, close - open));
        if (!arg.empty() && arg.find('[') == std::string::npos) {
            if (is_search) {
                return SearchAction{std::move(arg)};
            }
            return FinishAction{std::move(arg)};
        }
        pos = start + 1;
    }
    return InvalidAction{std::string(text)};
}

std::string format_action(const EnvAction& action) {
    if (const auto* s = std::get_if<SearchAction>(&action)) {
        return "Search[" + s->entity + "]";
    }
    if (const auto* f = std::get_if<FinishAction>(&action)) {
        return "Finish[" + f->answer + "]";
    }
    return trim(std::get<InvalidAction>(action).raw);
}

std::string normalize_answer(std::string_view s) {
    std::string lowered;
    for (char c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (!std::ispunct(u)) {
            lowered += static_cast<char>(std::tolower(u));
        }
    }
    std::vector<std::string> kept;
    for (auto& w : split_words(lowered)) {
        if (w != "a" && w != "an" && w != "the") {
            kept.push_back(std::move(w));
        }
    }
    return join(kept, " ");
}

int exact_match(std::string_view predicted, std::string_view gold) {
    return normalize_answer(predicted) == normalize_answer(gold) ? 1 : 0;
}

std::string InMemoryCorpus::normalize_title(std::string_view title) { return to_lower(join(split_words(title), " ")); }

void InMemoryCorpus::add(std::string title, std::string text) {
    auto key = normalize_title(title);
    if (key.empty()) {
        throw ContractError("corpus titles must be non-empty");
    }
    if (docs_.contains(key)) {
        throw ContractError("duplicate corpus title: " + title);
    }
    order_.push_back(key);
    docs_.emplace(std::move(key), std::make_pair(std::move(title), std::move(text)));
}

std::optional<std::string> InMemoryCorpus::lookup(std::string_view title) const {
    const auto it = docs_.find(normalize_title(title));
    if (it == docs_.end()) {
        return std::nullopt;
    }
    return it->second.second;
}

InMemoryCorpus InMemoryCorpus::from_jsonl(std::string_view text) {
    InMemoryCorpus corpus;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            const auto j = Json::parse(line);
            corpus.add(j.at("title").get<std::string>(), j.at("text").get<std::string>());
        } catch (const Json::parse_error& e) {
            throw ParseError(e.what(), line_no, e.byte);
        } catch (const Json::exception& e) {
            throw ParseError(e.what(), line_no, 1);
        }
    }
    return corpus;
}

std::string InMemoryCorpus::to_jsonl() const {
    std::string out;
    for (const auto& key : order_) {
        const auto& [title, text] = docs_.at(key);
        out += Json{{"title", title}, {"text", text}}.dump();
        out += '\n';
    }
    return out;
}

QaEnvironment::QaEnvironment(std::shared_ptr<const Corpus> corpus, QaTask task)
    : corpus_(std::move(corpus)), task_(std::move(task)) {
    if (!corpus_) {
        throw ContractError("environment needs a corpus");
    }
    if (task_.max_steps < 1) {
        throw ContractError("max_steps must be at least 1");
    }
}

std::string QaEnvironment::reset() {
    steps_ = 0;
    done_ = false;
    started_ = true;
    return task_.question;
}

EnvStep QaEnvironment::step(const EnvAction& action) {
    if (!started_) {
        throw ContractError("environment stepped before reset");
    }
    if (done_) {
        throw ContractError("environment stepped after the episode ended");
    }
    ++steps_;
    EnvStep out;
    if (const auto* s = std::get_if<SearchAction>(&action)) {
        const auto doc = corpus_->lookup(s->entity);
        out.observation = doc ? *doc : std::string(kNotFoundMessage);
    } else if (const auto* f = std::get_if<FinishAction>(&action)) {
        out.reward = exact_match(f->answer, task_.answer);
        out.done = true;
        out.observation = out.reward > 0 ? "Answer is correct." : "Answer is incorrect.";
    } else {
        out.observation = std::string(kInvalidActionMessage);
    }
    if (!out.done && steps_ >= task_.max_steps) {
        out.done = true;
        out.reward = 0.0;
    }
    done_ = out.done;
    return out;
}

AdaptiveMemory::AdaptiveMemory(std::shared_ptr<ChatEndpoint> extractor, std::shared_ptr<ChatEndpoint> utilizer,
                               std::shared_ptr<const EmbeddingProvider> embedder,
                               std::shared_ptr<const MetricSuite> suite, GateParams gate, TaskPrompt prompt,
                               AdaptiveMemoryConfig config)
    : extractor_(std::move(extractor)), utilizer_(std::move(utilizer)), embedder_(std::move(embedder)),
      suite_(std::move(suite)), gate_(std::move(gate)), prompt_(std::move(prompt)), config_(std::move(config)),
      store_(embedder_ ? embedder_->dim() : kDefaultEmbeddingDim), cache_(config_.cache_capacity) {
    if (!extractor_ || !utilizer_ || !embedder_ || !suite_) {
        throw ContractError("adaptive memory needs extractor, utilizer, embedder and metric suite");
    }
    gate_.check_shapes();
    if (gate_.dim() != embedder_->dim() || gate_.metrics() != suite_->size()) {
        throw DimensionMismatch(embedder_->dim(), gate_.dim());
    }
}

void AdaptiveMemory::begin() {
    store_ = MemoryStore(embedder_->dim());
    cache_ = ObservationCache(config_.cache_capacity);
}

int AdaptiveMemory::flush(std::vector<PendingObservation> pending) {
    int calls = 0;
    for (auto& p : pending) {
        auto unit = extract(*extractor_, prompt_, *embedder_, p.text, p.step);
        ++calls;
        suite_->annotate(unit);
        store_.insert(std::move(unit));
    }
    return calls;
}

int AdaptiveMemory::observe(std::string_view text, int step) { return flush(cache_.put(std::string(text), step)); }

RecallRecord AdaptiveMemory::recall(std::string_view state, int step, Rng& rng) {
    RecallRecord rec;
    rec.llm_calls = flush(cache_.drain());
    if (store_.empty()) {
        rec.ranked.query_step = step;
        return rec;
    }
    const QueryState query{embedder_->embed(state), step};
    rec.ranked = rank(gate_, *suite_, query, store_);
    std::vector<std::string> texts;
    for (auto id : rec.ranked.top(config_.top_k)) {
        texts.push_back(store_.at(id).text);
    }
    auto result = aggregate(*utilizer_, texts, state, rng, config_.aggregation);
    rec.context = std::move(result.context);
    rec.llm_calls += static_cast<int>(result.trace.calls);
    rec.trace = std::move(result.trace);
    return rec;
}

RawMemoryBase::RawMemoryBase(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t word_cap)
    : embedder_(std::move(embedder)), word_cap_(word_cap), store_(embedder_ ? embedder_->dim() : kDefaultEmbeddingDim) {
    if (!embedder_) {
        throw ContractError("baseline memory needs an embedder");
    }
}

void RawMemoryBase::begin() { store_ = MemoryStore(embedder_->dim()); }

int RawMemoryBase::observe(std::string_view text, int step) {
    MemoryUnit unit;
    unit.text = std::string(text);
    unit.source = unit.text;
    unit.step = step;
    unit.embedding = embedder_->embed(text);
    store_.insert(std::move(unit));
    return 0;
}

RecallRecord RawMemoryBase::from_ids(std::vector<MemoryId> ids, RankedMemories ranked) const {
    RecallRecord rec;
    std::vector<std::string> texts;
    for (auto id : ids) {
        texts.push_back(store_.at(id).text);
    }
    rec.context = truncate_words(join(texts, "\n"), word_cap_);
    rec.ranked = std::move(ranked);
    return rec;
}

namespace {

RankedMemories in_order(const MemoryStore& store, std::size_t first, int step) {
    RankedMemories r;
    r.query_step = step;
    for (std::size_t i = first; i < store.size(); ++i) {
        const auto& u = store.units()[i];
        r.entries.push_back(RankedEntry{u.id, 0.0, u.step});
    }
    return r;
}

}  // namespace

RecallRecord FullMemory::recall(std::string_view, int step, Rng&) {
    auto ranked = in_order(store_, 0, step);
    return from_ids(ranked.ids(), ranked);
}

LongTermMemory::LongTermMemory(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t top_k,
                               std::size_t word_cap)
    : RawMemoryBase(std::move(embedder), word_cap), top_k_(top_k) {}

RecallRecord LongTermMemory::recall(std::string_view state, int step, Rng&) {
    if (store_.empty()) {
        return from_ids({}, in_order(store_, 0, step));
    }
    const Vector q = embedder_->embed(state);
    std::vector<double> scores;
    for (const auto& u : store_.units()) {
        scores.push_back(cosine_or_zero(q, u.embedding));
    }
    auto ranked = rank_by_scores(store_, scores, step);
    return from_ids(ranked.top(top_k_), ranked);
}

ShortTermMemory::ShortTermMemory(std::shared_ptr<const EmbeddingProvider> embedder, std::size_t window,
                                 std::size_t word_cap)
    : RawMemoryBase(std::move(embedder), word_cap), window_(window) {
    if (window == 0) {
        throw ContractError("short-term window must be positive");
    }
}

RecallRecord ShortTermMemory::recall(std::string_view, int step, Rng&) {
    const std::size_t first = store_.size() > window_ ? store_.size() - window_ : 0;
    auto ranked = in_order(store_, first, step);
    return from_ids(ranked.ids(), ranked);
}

namespace {

MetricConfig fixed_weight_config() {
    MetricConfig c;
    c.relevance = true;
    c.emotion = false;
    c.importance = true;
    c.recency_powers = {1.0};
    return c;
}

}  // namespace

FixedWeightMemory::FixedWeightMemory(std::shared_ptr<const EmbeddingProvider> embedder,
                                     std::shared_ptr<const ImportanceScorer> importance, Vector alpha,
                                     std::size_t top_k, std::size_t word_cap)
    : RawMemoryBase(std::move(embedder), word_cap),
      suite_(fixed_weight_config(), nullptr, std::move(importance)), alpha_(std::move(alpha)), top_k_(top_k) {
    if (alpha_.size() != 3) {
        throw DimensionMismatch(3, static_cast<std::size_t>(alpha_.size()));
    }
}

RecallRecord FixedWeightMemory::recall(std::string_view state, int step, Rng&) {
    if (store_.empty()) {
        return from_ids({}, in_order(store_, 0, step));
    }
    const QueryState q{embedder_->embed(state), step};
    auto ranked = rank_with_weights(alpha_, suite_, q, store_);
    return from_ids(ranked.top(top_k_), ranked);
}

Agent::Agent(std::shared_ptr<ChatEndpoint> actor, MemoryPolicy& memory, AgentConfig config)
    : actor_(std::move(actor)), memory_(memory), config_(std::move(config)) {
    if (!actor_) {
        throw ContractError("agent needs an actor endpoint");
    }
}

void Agent::begin(const QaTask& task) {
    task_ = task;
    memory_.begin();
}

StepOutcome Agent::react_step(std::string_view observation, int step, Rng& rng) {
    StepOutcome out{InvalidAction{}, StepRecord{}};
    auto& r = out.record;
    r.step = step;
    r.observation = std::string(observation);
    r.state_text = r.observation;
    r.llm_calls = memory_.observe(observation, step);
    auto recall = memory_.recall(observation, step, rng);
    r.llm_calls += recall.llm_calls;
    r.store_size = memory_.store().size();
    r.ranked_ids = recall.ranked.ids();
    r.contexts = recall.trace.contexts;
    r.word_deltas = recall.trace.word_deltas;
    r.gains = recall.trace.gains;
    r.stop_draws = recall.trace.stop_draws;
    r.context = truncate_words(recall.context, kContextWordCap);

    r.thought = trim(actor_->complete(
        render_template(config_.think_template, {{"question", task_.question}, {"memory_context", r.context}})));
    const auto act = actor_->complete(render_template(
        config_.act_template, {{"question", task_.question}, {"thought", r.thought}, {"memory_context", r.context}}));
    r.llm_calls += 2;
    out.action = parse_action(act);
    r.action = format_action(out.action);
    if (config_.store_thoughts) {
        r.llm_calls += memory_.observe("Thought: " + r.thought + "\nAction: " + r.action, step);
    }
    return out;
}

Trajectory run_trajectory(Agent& agent, QaEnvironment& env, Rng& rng, std::string id, int bundle_version,
                          double success_threshold, bool record_timings) {
    Trajectory t;
    t.id = std::move(id);
    t.question = env.task().question;
    t.answer = env.task().answer;
    t.policy = agent.memory().name();
    t.bundle_version = bundle_version;
    agent.begin(env.task());
    std::string observation = env.reset();
    for (int step = 1; !env.done(); ++step) {
        StepOutcome outcome;
        const auto started = std::chrono::steady_clock::now();
        try {
            outcome = agent.react_step(observation, step, rng);
        } catch (const Error& e) {
            t.error = e.what();
            t.reward = 0.0;
            break;
        }
        const auto result = env.step(outcome.action);
        if (record_timings) {
            outcome.record.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        }
        t.steps.push_back(std::move(outcome.record));
        if (result.done) {
            t.reward = result.reward;
        }
        observation = result.observation;
    }
    t.success = t.reward >= success_threshold;
    t.store = agent.memory().store();
    return t;
}

EpisodeStats summarize(std::span<const Trajectory> trajectories) {
    EpisodeStats s;
    s.episodes = trajectories.size();
    if (trajectories.empty()) {
        return s;
    }
    for (const auto& t : trajectories) {
        s.mean_reward += t.reward;
        s.mean_steps += static_cast<double>(t.steps.size());
        s.success_rate += t.success ? 1.0 : 0.0;
    }
    const auto n = static_cast<double>(s.episodes);
    s.mean_reward /= n;
    s.mean_steps /= n;
    s.success_rate /= n;
    return s;
}

}  // namespace memcycle
