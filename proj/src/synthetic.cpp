// SPDX-License-Identifier: Apache-2.0
#include "memcycle/synthetic.hpp"

#include "memcycle/error.hpp"
#include "memcycle/text.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <set>

namespace memcycle {

namespace {

constexpr std::string_view kSyllables[] = {"ka", "lo", "mer", "vin", "sa", "tol", "ra", "ne", "quil", "po",
                                           "zan", "fe", "lu", "gar", "mi", "ost", "ve", "ril", "da", "hon"};
constexpr std::string_view kAdjectives[] = {"Silver", "Quiet",  "Burning", "Hidden", "Northern", "Velvet",
                                            "Broken", "Golden", "Distant", "Hollow", "Crimson",  "Frozen"};
constexpr std::string_view kNouns[] = {"Harbor", "Garden",  "Signal", "Mirror", "Orchard", "Lantern",
                                       "Canyon", "Voyage", "Letter",  "Summit", "Island",  "Engine"};
constexpr std::string_view kGenres[] = {"drama", "comedy", "thriller", "western", "musical", "mystery"};

std::string capitalize(std::string s) {
    if (!s.empty()) {
        s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    }
    return s;
}

std::string word(Rng& rng, std::size_t syllables) {
    std::string w;
    for (std::size_t i = 0; i < syllables; ++i) {
        w += kSyllables[rng.index(std::size(kSyllables))];
    }
    return capitalize(w);
}

// Fresh name not yet in `used`.
template <typename Gen>
std::string unique(std::set<std::string>& used, Gen&& gen) {
    for (;;) {
        auto name = gen();
        if (used.insert(to_lower(name)).second) {
            return name;
        }
    }
}

std::string shuffled_doc(std::vector<std::string> sentences, Rng& rng) {
    rng.shuffle(sentences.begin(), sentences.end());
    return join(sentences, " ");
}

}  // namespace

SyntheticWorld make_multihop_world(const SyntheticWorldOptions& options) {
    Rng rng(options.seed);
    std::set<std::string> used;
    auto person = [&] { return unique(used, [&] { return word(rng, 2) + " " + word(rng, 2); }); };
    auto city = [&] { return unique(used, [&] { return word(rng, 2); }); };
    auto film = [&] {
        return unique(used, [&] {
            return std::string(kAdjectives[rng.index(std::size(kAdjectives))]) + " " +
                   std::string(kNouns[rng.index(std::size(kNouns))]) + " " + word(rng, 1);
        });
    };

    SyntheticWorld world{std::make_shared<InMemoryCorpus>(), {}};
    for (std::size_t i = 0; i < options.films; ++i) {
        const auto f = film();
        const auto p = person();
        const auto c = city();
        const auto year = std::to_string(1950 + rng.index(70));

        std::vector<std::string> film_pool{
            f + " is a " + year + " " + std::string(kGenres[rng.index(std::size(kGenres))]) + " film.",
            f + " stars " + person() + " and " + person() + ".",
            "The soundtrack of " + f + " was composed by " + person() + ".",
            "Filming of " + f + " took place in " + city() + ".",
            f + " premiered at the " + city() + " festival.",
            "A sequel to " + f + " was announced in " + std::to_string(1970 + rng.index(50)) + ".",
            f + " was produced by " + person() + ".",
        };
        std::vector<std::string> person_pool{
            p + " studied at the academy of " + city() + ".",
            p + " later moved to " + city() + ".",
            p + " won a lifetime award in " + std::to_string(1980 + rng.index(40)) + ".",
            p + " has a sibling named " + person() + ".",
            p + " worked as a painter before entering film.",
            p + " speaks four languages.",
            p + " often collaborates with " + person() + ".",
        };
        rng.shuffle(film_pool.begin(), film_pool.end());
        rng.shuffle(person_pool.begin(), person_pool.end());
        const auto n = std::min(options.distractors, film_pool.size());
        std::vector<std::string> film_doc(film_pool.begin(), film_pool.begin() + static_cast<std::ptrdiff_t>(n));
        film_doc.push_back(f + " was directed by " + p + ".");
        std::vector<std::string> person_doc(person_pool.begin(), person_pool.begin() + static_cast<std::ptrdiff_t>(n));
        person_doc.push_back(p + " was born in " + c + ".");

        world.corpus->add(f, shuffled_doc(std::move(film_doc), rng));
        world.corpus->add(p, shuffled_doc(std::move(person_doc), rng));
        world.tasks.push_back(QaTask{"film-" + std::to_string(i), "In which city was the director of " + f + " born?",
                                     c, kDefaultMaxSteps});
    }
    return world;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        current += (ch == '\n' || ch == '\t') ? ' ' : ch;
        const bool terminal = ch == '.' || ch == '?' || ch == '!';
        if (terminal && (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
            auto s = trim(current);
            if (!s.empty()) {
                out.push_back(join(split_words(s), " "));
            }
            current.clear();
        }
    }
    auto s = trim(current);
    if (!s.empty()) {
        out.push_back(join(split_words(s), " "));
    }
    return out;
}

namespace {

// Text between `begin` (first occurrence at or after `from`) and `end`; whole remainder when `end` is empty or absent.
std::string between(std::string_view text, std::string_view begin, std::string_view end, std::size_t from = 0) {
    const auto b = text.find(begin, from);
    if (b == std::string_view::npos) {
        return {};
    }
    const auto start = b + begin.size();
    const auto e = end.empty() ? std::string_view::npos : text.find(end, start);
    return std::string(text.substr(start, e == std::string_view::npos ? std::string_view::npos : e - start));
}

std::string upto_period(std::string_view s) {
    const auto e = s.find('.');
    return trim(s.substr(0, e));
}

std::vector<std::string> quoted_phrases(std::string_view text) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = text.find('"', pos)) != std::string_view::npos) {
        const auto end = text.find('"', pos + 1);
        if (end == std::string_view::npos) {
            break;
        }
        auto phrase = to_lower(trim(text.substr(pos + 1, end - pos - 1)));
        if (!phrase.empty()) {
            out.push_back(std::move(phrase));
        }
        pos = end + 1;
    }
    return out;
}

std::string actor_reply(const std::string& prompt) {
    const auto question = between(prompt, "The question is: ", "\n");
    const auto film = between(question, "director of ", " born?");
    const bool acting = contains(prompt, "Your output must follow");
    if (acting) {
        const auto thought = between(prompt, "as follows:\n", ".\nNow, you can choose");
        const auto answer = between(thought, "I can answer ", ".");
        if (!answer.empty()) {
            return "Finish[" + trim(answer) + "]";
        }
        const auto target = between(thought, "I should search ", ".");
        if (!target.empty()) {
            return "Search[" + trim(target) + "]";
        }
        return "Search[" + film + "]";
    }
    const auto memory = between(prompt, "in your memory as follows:\n", "");
    if (film.empty()) {
        return "I do not understand the question. I should search " + question + ".";
    }
    const auto director = upto_period(between(memory, film + " was directed by ", ""));
    if (director.empty()) {
        return "The memory does not say who directed " + film + ". I should search " + film + ".";
    }
    const auto birthplace = upto_period(between(memory, director + " was born in ", ""));
    if (birthplace.empty()) {
        return "The memory shows " + film + " was directed by " + director + ". I should search " + director + ".";
    }
    return "The memory shows " + film + " was directed by " + director + ". " + director + " was born in " +
           birthplace + ". I can answer " + birthplace + ".";
}

std::string extractor_reply(const std::string& prompt) {
    const auto body_start = prompt.find("Observation: ");
    if (body_start == std::string::npos) {
        return {};
    }
    std::string_view body(prompt);
    body.remove_prefix(body_start + 13);
    std::string observation;
    std::vector<std::string> keys;
    const auto hint = body.rfind("\nHint: ");
    if (hint != std::string_view::npos) {
        observation = std::string(body.substr(0, hint));
        const auto line_end = body.find('\n', hint + 1);
        keys = quoted_phrases(body.substr(hint, line_end == std::string_view::npos ? line_end : line_end - hint));
    } else {
        observation = std::string(body.substr(0, body.rfind('\n')));
    }
    const auto sentences = split_sentences(observation);
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        const auto lower = to_lower(sentences[i]);
        const bool keyed = std::any_of(keys.begin(), keys.end(), [&](const auto& k) { return contains(lower, k); });
        if (i < 2 || keyed) {
            kept.push_back(sentences[i]);
        }
    }
    return join(kept, " ");
}

std::string merge_reply(const std::string& prompt, bool drop_bookkeeping) {
    const auto existing = between(prompt, "\nExisting Memory: ", "\nNew Memory: ");
    const auto fresh = between(prompt, "\nNew Memory: ", "\nPlease merge");
    std::vector<std::string> out;
    std::set<std::string> seen;
    auto add = [&](const std::string& s) {
        if (drop_bookkeeping && (s.starts_with("Thought:") || s.starts_with("Action:"))) {
            return;
        }
        if (seen.insert(s).second) {
            out.push_back(s);
        }
    };
    for (const auto& s : split_sentences(existing)) {
        add(s);
    }
    for (const auto& s : split_sentences(fresh)) {
        add(s);
    }
    return join(out, " ");
}

bool is_stopword(std::string_view w) {
    static const std::set<std::string, std::less<>> stop{"in",  "which", "city", "was", "the",  "of",   "a",
                                                         "an",  "what",  "who",  "is",  "did",  "does", "where",
                                                         "how", "when",  "for",  "to",  "and", "by"};
    return stop.contains(w);
}

std::string reflector_reply(const std::string& prompt) {
    std::size_t max_lines = 2;
    const auto limit = between(prompt, "at most ", " ");
    if (!limit.empty() && std::isdigit(static_cast<unsigned char>(limit[0]))) {
        max_lines = static_cast<std::size_t>(std::stoul(limit));
    }
    std::vector<std::string> stems;
    std::string observations;
    for (const auto& line : split_lines(prompt)) {
        if (line.starts_with("Observation: ")) {
            observations += to_lower(line) + "\n";
        }
    }
    for (const auto& line : split_lines(prompt)) {
        if (!line.starts_with("Question: ")) {
            continue;
        }
        const auto words = split_words(std::string_view(line).substr(10));
        for (std::size_t i = 0; i < words.size(); ++i) {
            const auto token = MockEmbeddingProvider::normalize_token(words[i]);
            const bool capitalized = std::isupper(static_cast<unsigned char>(words[i][0])) != 0;
            if (token.empty() || is_stopword(token) || (capitalized && i > 0)) {
                continue;
            }
            const auto stem = token.substr(0, std::min<std::size_t>(5, token.size()));
            if (std::find(stems.begin(), stems.end(), stem) == stems.end() &&
                contains(observations, stem)) {
                stems.push_back(stem);
            }
        }
    }
    std::vector<std::string> lines;
    for (const auto& stem : stems) {
        if (lines.size() == max_lines) {
            break;
        }
        lines.push_back("Keep every sentence that mentions \"" + stem + "\".");
    }
    if (lines.empty()) {
        lines.emplace_back("Keep the names of people and places.");
    }
    return join(lines, "\n");
}

std::string emotion_writer_reply(const std::string& prompt, std::size_t call) {
    const auto seed = trim(between(prompt, "Seed sentence: ", "\n"));
    const auto list = between(prompt, "these emotions: ", ".\n");
    std::vector<std::string> words;
    std::size_t k = 0;
    for (const auto& raw : split_words(list)) {
        const auto name = MockEmbeddingProvider::normalize_token(raw);
        for (std::size_t e = 0; e < kEmotionDims; ++e) {
            if (name == kEmotionNames[e]) {
                const auto& syn = emotion_lexicon()[e];
                words.push_back(syn[(call + k++) % syn.size()]);
            }
        }
    }
    std::string base = seed;
    while (!base.empty() && (base.back() == '.' || base.back() == ' ')) {
        base.pop_back();
    }
    return base + " and everyone felt " + join(words, " and ") + ".";
}

std::uint64_t fnv(std::string_view s) { return MockEmbeddingProvider::token_hash(0, s); }

std::string enricher_reply(const std::string& prompt) {
    const auto query = trim(between(prompt, "Query: ", "\n"));
    auto sentence = trim(between(prompt, "Sentence: ", "\n"));
    const auto& vocab = enrichment_vocabulary();
    const auto present = split_words(to_lower(sentence));
    const auto offset = static_cast<std::size_t>(fnv(query) % vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const auto& token = vocab[(offset + i * 7) % vocab.size()];
        if (std::find(present.begin(), present.end(), token) == present.end()) {
            return sentence + " " + token;
        }
    }
    return sentence;
}

std::string judge_reply(const std::string& prompt, std::size_t call) {
    const bool few_shot = contains(prompt, "Example");
    if (!few_shot && call % 4 == 3) {
        return "It is hard to say.";
    }
    const auto sentence = to_lower(between(prompt, "Sentence: ", "\n", prompt.rfind("Sentence: ")));
    const auto words = split_words(sentence);
    if (contains(prompt, "Rate how important")) {
        std::size_t n = 0;
        for (const auto& w : words) {
            const auto& v = enrichment_vocabulary();
            n += std::find(v.begin(), v.end(), MockEmbeddingProvider::normalize_token(w)) != v.end() ? 1 : 0;
        }
        return std::to_string(std::min<std::size_t>(n, 10));
    }
    std::vector<std::string> flags;
    for (std::size_t e = 0; e < kEmotionDims; ++e) {
        bool hit = false;
        for (const auto& w : words) {
            const auto& syn = emotion_lexicon()[e];
            hit = hit || std::find(syn.begin(), syn.end(), MockEmbeddingProvider::normalize_token(w)) != syn.end();
        }
        flags.emplace_back(hit ? "1" : "0");
    }
    return join(flags, ",");
}

}  // namespace

std::vector<std::string> synthetic_roles() {
    return {"actor", "extractor", "merger", "expert", "reflector", "emotion-writer", "enricher", "judge"};
}

std::shared_ptr<ChatEndpoint> make_synthetic_endpoint(std::string_view role) {
    const std::string name(role);
    auto prompt_of = [](std::span<const ChatMessage> messages) { return messages.back().content; };
    FunctionChatEndpoint::Responder responder;
    if (role == "actor") {
        responder = [=](auto m, std::size_t) { return ChatReply{actor_reply(prompt_of(m)), std::nullopt}; };
    } else if (role == "extractor") {
        responder = [=](auto m, std::size_t) { return ChatReply{extractor_reply(prompt_of(m)), std::nullopt}; };
    } else if (role == "merger") {
        responder = [=](auto m, std::size_t) { return ChatReply{merge_reply(prompt_of(m), false), std::nullopt}; };
    } else if (role == "expert") {
        responder = [=](auto m, std::size_t) { return ChatReply{merge_reply(prompt_of(m), true), std::nullopt}; };
    } else if (role == "reflector") {
        responder = [=](auto m, std::size_t) { return ChatReply{reflector_reply(prompt_of(m)), std::nullopt}; };
    } else if (role == "emotion-writer") {
        responder = [=](auto m, std::size_t i) { return ChatReply{emotion_writer_reply(prompt_of(m), i), std::nullopt}; };
    } else if (role == "enricher") {
        responder = [=](auto m, std::size_t) { return ChatReply{enricher_reply(prompt_of(m)), std::nullopt}; };
    } else if (role == "judge") {
        responder = [=](auto m, std::size_t i) { return ChatReply{judge_reply(prompt_of(m), i), std::nullopt}; };
    } else {
        throw ContractError("unknown synthetic role: " + name);
    }
    return std::make_shared<FunctionChatEndpoint>(std::move(responder), "synthetic-" + name);
}

const std::vector<std::vector<std::string>>& emotion_lexicon() {
    static const std::vector<std::vector<std::string>> lexicon{
        {"joyful", "delighted", "cheerful"},    {"accepting", "content", "trusting"},
        {"afraid", "terrified", "anxious"},     {"surprised", "astonished", "startled"},
        {"sad", "sorrowful", "heartbroken"},    {"disgusted", "revolted", "repulsed"},
        {"angry", "furious", "enraged"},        {"eager", "expectant", "hopeful"},
    };
    return lexicon;
}

const std::vector<std::string>& enrichment_vocabulary() {
    static const std::vector<std::string> vocab{
        "deadline", "budget",   "location", "schedule", "contact",  "priority", "agenda",  "invoice",
        "approval", "contract", "address",  "password", "warranty", "dosage",   "ticket",  "itinerary",
        "receipt",  "policy",   "account",  "estimate", "timeline", "quota",    "capacity", "forecast"};
    return vocab;
}

std::vector<ChainSeed> make_chain_seeds(std::size_t n, Rng& rng) {
    std::vector<ChainSeed> out;
    std::set<std::string> used;
    for (std::size_t i = 0; i < n; ++i) {
        const auto name = unique(used, [&] { return word(rng, 2); });
        const auto topic = std::string(kNouns[rng.index(std::size(kNouns))]);
        out.push_back(ChainSeed{"what does " + name + " need for the " + to_lower(topic) + " project",
                                name + " mentioned the " + to_lower(topic) + " project"});
    }
    return out;
}

std::string_view to_string(DesignatedMetric m) {
    switch (m) {
        case DesignatedMetric::relevance:
            return "relevance";
        case DesignatedMetric::importance:
            return "importance";
        case DesignatedMetric::recency:
            return "recency";
    }
    return "unknown";
}

namespace {

// Unit vector in R^n orthogonal to `a` (a unit).
Vector orthogonal_unit(const Vector& a, Rng& rng) {
    for (;;) {
        Vector r = rng.normal_vector(a.size());
        r -= r.dot(a) * a;
        const double n = r.norm();
        if (n > 1e-6) {
            return r / n;
        }
    }
}

constexpr int kRecoveryHorizon = 1000;

RecoveryQuery make_recovery_query(DesignatedMetric designated, const GateRecoveryOptions& o, Rng& rng) {
    const auto half = static_cast<Eigen::Index>(o.dim / 2);
    Vector a = rng.normal_vector(half);
    a.normalize();
    RecoveryQuery rq;
    rq.query.step = kRecoveryHorizon;
    rq.query.embedding = Vector::Zero(2 * half);
    rq.query.embedding.head(half) = a;
    rq.store = MemoryStore(static_cast<std::size_t>(2 * half));

    const int d = static_cast<int>(designated);
    const int anti = (d + 1) % 3;
    for (std::size_t i = 0; i < o.memories; ++i) {
        // latent levels in [0, 1] for (rel, imp, rec)
        std::array<double, 3> level{};
        const double u = rng.uniform();
        level[static_cast<std::size_t>(d)] = u;
        level[static_cast<std::size_t>(anti)] = std::clamp(1.0 - u + o.noise * rng.normal(), 0.0, 1.0);
        level[static_cast<std::size_t>(3 - d - anti)] = rng.uniform();

        const double cos_rel = level[0];
        const double cos_imp = level[1] / std::sqrt(2.0);
        MemoryUnit unit;
        unit.embedding = Vector::Zero(2 * half);
        unit.embedding.head(half) = cos_rel * a + std::sqrt(1.0 - cos_rel * cos_rel) * orthogonal_unit(a, rng);
        unit.embedding.tail(half) = cos_imp * a + std::sqrt(1.0 - cos_imp * cos_imp) * orthogonal_unit(a, rng);
        unit.step = static_cast<int>(std::lround(level[2] / std::sqrt(2.0) * kRecoveryHorizon));
        unit.text = "unit " + std::to_string(i);
        unit.source = unit.text;
        rq.store.insert(std::move(unit));
    }
    return rq;
}

}  // namespace

GateRecoveryData make_gate_recovery_data(DesignatedMetric designated, const GateRecoveryOptions& options) {
    if (options.dim < 4 || options.dim % 2 != 0) {
        throw ContractError("gate recovery needs an even dimension >= 4");
    }
    if (options.memories < 2) {
        throw ContractError("gate recovery needs at least two memories per query");
    }
    const auto half = static_cast<Eigen::Index>(options.dim / 2);
    const auto d = static_cast<Eigen::Index>(options.dim);
    // Query side reads the first half, memory side the second half.
    ImportanceScorer imp{Matrix::Zero(half, d), Vector::Zero(half), Matrix::Zero(half, d), Vector::Zero(half)};
    imp.query_w.leftCols(half).setIdentity();
    imp.memory_w.rightCols(half).setIdentity();
    MetricConfig config;
    config.emotion = false;
    config.recency_powers = {1.0};
    auto suite = std::make_shared<const MetricSuite>(config, nullptr, std::make_shared<const ImportanceScorer>(imp));

    GateRecoveryData data;
    data.suite = suite;
    Rng rng(options.seed);
    const auto column = static_cast<Eigen::Index>(designated);
    auto fill_truth = [&](RecoveryQuery& rq) {
        for (const auto& u : rq.store.units()) {
            rq.truth.push_back(suite->values(rq.query, u)[column]);
        }
    };
    for (std::size_t q = 0; q < options.train_queries; ++q) {
        auto rq = make_recovery_query(designated, options, rng);
        fill_truth(rq);
        const auto ranked = rank_by_scores(rq.store, rq.truth, rq.query.step);
        RankingSample sample;
        sample.query = rq.query.embedding;
        sample.memories.resize(static_cast<Eigen::Index>(ranked.size()), d);
        sample.metrics.resize(static_cast<Eigen::Index>(ranked.size()), static_cast<Eigen::Index>(suite->size()));
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            const auto& u = rq.store.at(ranked.entries[i].id);
            sample.memories.row(static_cast<Eigen::Index>(i)) = u.embedding.transpose();
            sample.metrics.row(static_cast<Eigen::Index>(i)) = suite->values(rq.query, u).transpose();
        }
        data.train.push_back(RankingGroup{{std::move(sample)}});
    }
    for (std::size_t q = 0; q < options.test_queries; ++q) {
        auto rq = make_recovery_query(designated, options, rng);
        fill_truth(rq);
        data.test.push_back(std::move(rq));
    }
    return data;
}

double recovery_tau(const GateParams& gate, const GateRecoveryData& data) {
    if (data.test.empty()) {
        throw ContractError("no held-out queries");
    }
    double total = 0.0;
    for (const auto& rq : data.test) {
        std::vector<double> scores;
        for (const auto& u : rq.store.units()) {
            scores.push_back(match_score(gate, rq.query.embedding, u.embedding, data.suite->values(rq.query, u)));
        }
        total += kendall_tau(scores, rq.truth);
    }
    return total / static_cast<double>(data.test.size());
}

}  // namespace memcycle
