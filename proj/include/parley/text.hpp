// Copyright 2026 The Parley Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cctype>
#include <compare>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace parley {

// Half-open byte range [begin, end) into some surface text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return begin == end; }
  bool overlaps(const CharSpan& other) const noexcept {
    return begin < other.end && other.begin < end;
  }

  friend bool operator==(const CharSpan&, const CharSpan&) = default;
  friend auto operator<=>(const CharSpan&, const CharSpan&) = default;
};

inline std::string_view slice(std::string_view text, CharSpan span) {
  return text.substr(span.begin, span.size());
}

namespace detail {

inline bool is_space(unsigned char c) { return std::isspace(c) != 0; }

// Bytes >= 0x80 are kept inside words so UTF-8 sequences never split.
inline bool is_word_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c == '_' || c == '\'' || c == '-' || c >= 0x80;
}

}  // namespace detail

// Word-level segmentation shared by every in-tree model, classifier and the
// attribution code: maximal runs of word bytes, and every other non-space
// byte as a token of its own.
inline std::vector<CharSpan> split_words(std::string_view text) {
  std::vector<CharSpan> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (detail::is_space(c)) {
      ++i;
    } else if (detail::is_word_byte(c)) {
      std::size_t j = i + 1;
      while (j < text.size() &&
             detail::is_word_byte(static_cast<unsigned char>(text[j]))) {
        ++j;
      }
      spans.push_back({i, j});
      i = j;
    } else {
      spans.push_back({i, i + 1});
      ++i;
    }
  }
  return spans;
}

inline std::string to_lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

// Trim and collapse internal whitespace runs to a single space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    if (detail::is_space(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(ch);
    }
  }
  return out;
}

// Deletes every span from `text` and re-normalizes whitespace. Spans may be
// given in any order but must not overlap.
inline std::string remove_spans(std::string_view text,
                                std::vector<CharSpan> spans) {
  std::sort(spans.begin(), spans.end());
  std::string out;
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin < cursor) continue;
    out.append(text.substr(cursor, s.begin - cursor));
    out.push_back(' ');
    cursor = s.end;
  }
  out.append(text.substr(std::min(cursor, text.size())));
  return normalize_text(out);
}

// Replaces every span with `placeholder`, keeping the rest verbatim apart
// from whitespace normalization.
inline std::string replace_spans(std::string_view text,
                                 std::vector<CharSpan> spans,
                                 std::string_view placeholder) {
  std::sort(spans.begin(), spans.end());
  std::string out;
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin < cursor) continue;
    out.append(text.substr(cursor, s.begin - cursor));
    out.append(placeholder);
    cursor = s.end;
  }
  out.append(text.substr(std::min(cursor, text.size())));
  return normalize_text(out);
}

inline std::string join(const std::vector<std::string>& parts,
                        std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

}  // namespace parley
