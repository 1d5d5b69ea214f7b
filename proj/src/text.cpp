// SPDX-License-Identifier: Apache-2.0
#include "memcycle/text.hpp"

#include <algorithm>
#include <cctype>

namespace memcycle {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) {
        ++b;
    }
    while (e > b && is_space(s[e - 1])) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool contains(std::string_view haystack, std::string_view needle) {
    return haystack.find(needle) != std::string_view::npos;
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
    return s.size() >= prefix.size() && to_lower(s.substr(0, prefix.size())) == to_lower(prefix);
}

std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_space(s[i])) {
            ++i;
        }
        const std::size_t start = i;
        while (i < s.size() && !is_space(s[i])) {
            ++i;
        }
        if (i > start) {
            words.emplace_back(s.substr(start, i - start));
        }
    }
    return words;
}

std::size_t word_count(std::string_view s) {
    std::size_t n = 0;
    bool in_word = false;
    for (char c : s) {
        if (is_space(c)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++n;
        }
    }
    return n;
}

std::string truncate_words(std::string_view s, std::size_t cap) {
    if (word_count(s) <= cap) {
        return std::string(s);
    }
    auto words = split_words(s);
    words.resize(cap == 0 ? 0 : cap - 1);
    if (cap > 0) {
        words.emplace_back(kTruncationMarker);
    }
    return join(words, " ");
}

std::vector<std::string> split_lines(std::string_view s) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto nl = s.find('\n', start);
        if (nl == std::string_view::npos) {
            lines.emplace_back(s.substr(start));
            break;
        }
        lines.emplace_back(s.substr(start, nl - start));
        start = nl + 1;
    }
    for (auto& line : lines) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
    }
    return lines;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) {
            out += sep;
        }
        out += parts[i];
    }
    return out;
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                const std::string key(tmpl.substr(i + 1, close - i - 1));
                if (auto it = vars.find(key); it != vars.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += tmpl[i];
        ++i;
    }
    return out;
}

std::string field_after(std::string_view text, std::string_view prefix) {
    const auto pos = text.find(prefix);
    if (pos == std::string_view::npos) {
        return {};
    }
    const auto start = pos + prefix.size();
    const auto nl = text.find('\n', start);
    return trim(text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
}

std::string section_between(std::string_view text, std::string_view begin, std::string_view end) {
    const auto pos = text.find(begin);
    if (pos == std::string_view::npos) {
        return {};
    }
    const auto start = pos + begin.size();
    const auto stop = text.find(end, start);
    return std::string(text.substr(start, stop == std::string_view::npos ? std::string_view::npos : stop - start));
}

}  // namespace memcycle
