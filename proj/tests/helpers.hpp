// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/linalg.hpp"
#include "memcycle/memory_core.hpp"

#include <filesystem>
#include <string>

namespace memcycle::testing {

inline Vector unit_vector(Rng& rng, std::size_t dim) {
    Vector v = rng.normal_vector(static_cast<Eigen::Index>(dim));
    return v / v.norm();
}

inline std::string random_text(Rng& rng, std::size_t max_words = 8) {
    static const char* words[] = {"alpha", "beta", "gamma", "delta", "film", "born", "city", "the", "\"quoted\"",
                                  "line\nbreak", "tab\there", "caf\xc3\xa9", "{brace}", "[x]"};
    std::string out;
    const auto n = 1 + rng.index(max_words);
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += words[rng.index(std::size(words))];
    }
    return out;
}

inline MemoryUnit random_unit(Rng& rng, std::size_t dim, int step) {
    MemoryUnit u;
    u.text = random_text(rng);
    u.source = random_text(rng);
    u.step = step;
    u.embedding = unit_vector(rng, dim);
    if (rng.bernoulli(0.5)) {
        u.emotion = rng.normal_vector(8);
    }
    if (rng.bernoulli(0.5)) {
        u.importance_feat = rng.normal_vector(4);
    }
    u.fallback = rng.bernoulli(0.2);
    return u;
}

inline MemoryStore random_store(Rng& rng, std::size_t dim, std::size_t n) {
    MemoryStore store(dim);
    int step = 1;
    for (std::size_t i = 0; i < n; ++i) {
        step += static_cast<int>(rng.index(2));
        store.insert(random_unit(rng, dim, step));
    }
    return store;
}

inline Trajectory random_trajectory(Rng& rng, std::size_t dim) {
    Trajectory t;
    t.id = "t" + std::to_string(rng.index(1000));
    t.question = random_text(rng);
    t.answer = random_text(rng, 2);
    t.policy = rng.bernoulli(0.5) ? "adaptive" : "full";
    t.bundle_version = static_cast<int>(rng.index(5));
    t.store = random_store(rng, dim, rng.index(6));
    const auto steps = 1 + rng.index(4);
    std::size_t size = 0;
    for (std::size_t s = 0; s < steps; ++s) {
        StepRecord r;
        r.step = static_cast<int>(s + 1);
        r.observation = random_text(rng);
        r.state_text = random_text(rng);
        size = std::min(t.store.size(), size + rng.index(3));
        r.store_size = size;
        for (std::size_t i = 0; i < size; ++i) {
            if (rng.bernoulli(0.7)) {
                r.ranked_ids.push_back(t.store.units()[i].id);
            }
        }
        rng.shuffle(r.ranked_ids.begin(), r.ranked_ids.end());
        r.contexts.push_back("");
        for (std::size_t i = 0; i < r.ranked_ids.size(); ++i) {
            r.contexts.push_back(random_text(rng));
            r.word_deltas.push_back(static_cast<long>(rng.index(9)) - 2);
            r.gains.push_back(rng.uniform());
            if (i > 0) {
                r.stop_draws.push_back(static_cast<int>(rng.index(2)));
            }
        }
        r.context = r.contexts.back();
        r.thought = random_text(rng);
        r.action = "Search[" + random_text(rng, 2) + "]";
        r.llm_calls = static_cast<int>(rng.index(10));
        if (rng.bernoulli(0.3)) {
            r.seconds = rng.uniform();
        }
        t.steps.push_back(std::move(r));
    }
    t.reward = rng.bernoulli(0.5) ? 1.0 : 0.0;
    t.success = t.reward >= 0.5;
    if (rng.bernoulli(0.1)) {
        t.error = "endpoint failed";
    }
    return t;
}

/// Fresh empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("memcycle-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

}  // namespace memcycle::testing
