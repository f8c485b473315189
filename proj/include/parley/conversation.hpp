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

#include <string>
#include <string_view>
#include <vector>

#include "parley/errors.hpp"
#include "parley/modeling.hpp"

namespace parley {

enum class Speaker { kContext, kAdversary, kDefender };

inline std::string_view to_string(Speaker s) {
  switch (s) {
    case Speaker::kContext: return "context";
    case Speaker::kAdversary: return "adversary";
    case Speaker::kDefender: return "defender";
  }
  return "unknown";
}

inline Speaker speaker_from_string(std::string_view s) {
  if (s == "context") return Speaker::kContext;
  if (s == "adversary") return Speaker::kAdversary;
  if (s == "defender") return Speaker::kDefender;
  throw ValidationError("unknown speaker '" + std::string(s) + "'");
}

struct Utterance {
  Speaker speaker = Speaker::kContext;
  std::string text;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct Conversation {
  std::vector<Utterance> turns;

  bool empty() const noexcept { return turns.empty(); }
  std::size_t size() const noexcept { return turns.size(); }
  const Utterance& back() const { return turns.back(); }
  void add(Speaker speaker, std::string text) {
    turns.push_back({speaker, std::move(text)});
  }

  // Everything except the final turn.
  Conversation without_last() const {
    Conversation out;
    if (!turns.empty()) out.turns.assign(turns.begin(), turns.end() - 1);
    return out;
  }

  friend bool operator==(const Conversation&, const Conversation&) = default;
};

// Surface form fed to a generator: one turn per line, oldest first.
inline std::string render_history(const Conversation& history,
                                  std::string_view extra = {}) {
  std::string out;
  for (const auto& u : history.turns) {
    if (!out.empty()) out.push_back('\n');
    out.append(u.text);
  }
  if (!extra.empty()) {
    if (!out.empty()) out.push_back('\n');
    out.append(extra);
  }
  return out;
}

inline TokenSequence history_context(const LanguageModel& model,
                                     const Conversation& history,
                                     std::string_view extra = {}) {
  return model.tokenize(render_history(history, extra));
}

}  // namespace parley
