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

#include <cmath>
#include <json.hpp>
#include <string>

#include "parley/attack_utsc.hpp"
#include "parley/conversation.hpp"
#include "parley/defense.hpp"
#include "parley/toxicity.hpp"

namespace parley {

// JSON has no infinities; they travel as the strings "inf" / "-inf".
inline nlohmann::json json_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

inline double number_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return kPosInf;
    if (s == "-inf") return kNegInf;
    if (s == "nan") return std::nan("");
    throw ValidationError("expected a number, got '" + s + "'");
  }
  return j.get<double>();
}

inline void to_json(nlohmann::json& j, const CharSpan& s) {
  j = nlohmann::json::array({s.begin, s.end});
}

inline void to_json(nlohmann::json& j, const ToxicityVerdict& v) {
  j = {{"classifier", v.classifier_id},
       {"score", json_number(v.score)},
       {"threshold", v.threshold},
       {"toxic", v.toxic}};
}

inline void to_json(nlohmann::json& j, const SpanWeight& s) {
  j = {{"span", s.span}, {"text", s.text}, {"weight", json_number(s.weight)}};
}

inline void to_json(nlohmann::json& j, const Utterance& u) {
  j = {{"speaker", to_string(u.speaker)}, {"text", u.text}};
}

inline void to_json(nlohmann::json& j, const CandidateAttack& c) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [id, s] : c.per_classifier_scores) scores[id] = json_number(s);
  j = {{"trigger", c.trigger_token},
       {"utterance", c.utterance},
       {"toxicity", json_number(c.toxicity_score)},
       {"scores", scores}};
}

inline void to_json(nlohmann::json& j, const AttackRecord& r) {
  j = {{"method", r.method},
       {"turn", r.turn_index},
       {"chosen", r.chosen_index},
       {"candidates", r.all_candidates},
       {"perplexity", json_number(r.attack_perplexity)}};
}

inline void to_json(nlohmann::json& j, const DefenseIteration& s) {
  j = {{"attributed_response", s.attributed_response},
       {"l1", s.l1},
       {"l2", s.l2},
       {"masked_input", s.masked_input},
       {"response", s.response},
       {"verdict", s.verdict}};
}

inline void to_json(nlohmann::json& j, const DefenseRecord& r) {
  j = {{"method", r.method},
       {"adversary_utterance", r.adversary_utterance},
       {"draft_response", r.draft_response},
       {"draft_verdict", r.draft_verdict},
       {"steps", r.steps},
       {"masked_spans", r.masked_spans},
       {"final_response", r.final_response},
       {"iterations", r.iterations},
       {"fallback_used", r.fallback_used},
       {"fallback", r.fallback.empty() ? nlohmann::json(nullptr)
                                       : nlohmann::json(r.fallback)},
       // Seeds are 64-bit; as strings they survive JSON readers that
       // parse every number as a double.
       {"seed", std::to_string(r.seed)}};
}

}  // namespace parley
