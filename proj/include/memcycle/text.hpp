// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace memcycle {

/// Upper bound on the words of any memory context handed to a prompt.
inline constexpr std::size_t kContextWordCap = 8096;
inline constexpr std::string_view kTruncationMarker = "[truncated]";

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
bool contains(std::string_view haystack, std::string_view needle);
bool starts_with_ci(std::string_view s, std::string_view prefix);

/// Whitespace tokenization; words are maximal runs of non-space bytes.
std::vector<std::string> split_words(std::string_view s);
std::size_t word_count(std::string_view s);

/// Text unchanged when it has at most `cap` words; otherwise the first
/// cap - 1 words joined by single spaces followed by the truncation marker.
std::string truncate_words(std::string_view s, std::size_t cap = kContextWordCap);

std::vector<std::string> split_lines(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Replaces every `{name}` with vars[name]. Unknown placeholders are left as is.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars);

/// Text between `prefix` (first occurrence) and the next newline, trimmed.
/// Empty when the prefix is absent.
std::string field_after(std::string_view text, std::string_view prefix);

/// Text between `begin` and the first `end` that follows it.
std::string section_between(std::string_view text, std::string_view begin, std::string_view end);

}  // namespace memcycle
