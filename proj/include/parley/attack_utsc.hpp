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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "parley/attack_uat.hpp"
#include "parley/conversation.hpp"
#include "parley/errors.hpp"
#include "parley/log.hpp"
#include "parley/modeling.hpp"
#include "parley/random.hpp"
#include "parley/toxicity.hpp"

namespace parley {

enum class SelectionCriterion { kUtsc1, kUtsc2, kUtsc3 };

inline std::string_view to_string(SelectionCriterion c) {
  switch (c) {
    case SelectionCriterion::kUtsc1: return "UTSC-1";
    case SelectionCriterion::kUtsc2: return "UTSC-2";
    case SelectionCriterion::kUtsc3: return "UTSC-3";
  }
  return "UTSC-?";
}

enum class TriggerPlacement { kResponsePrefix, kAppendedToHistory };

struct UtscConfig {
  std::size_t n_candidates = 10;
  SelectionCriterion criterion = SelectionCriterion::kUtsc1;
  double threshold = kDefaultThreshold;
  TriggerPlacement placement = TriggerPlacement::kResponsePrefix;
  DecodeParams decode;

  void validate() const {
    if (n_candidates == 0) throw ValidationError("n_candidates must be positive");
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
      throw ValidationError("selection threshold must lie in [0, 1]");
    }
    decode.validate();
  }
};

struct CandidateAttack {
  std::string trigger_token;
  std::string utterance;
  double toxicity_score = 0.0;
  std::map<std::string, double> per_classifier_scores;

  friend bool operator==(const CandidateAttack&, const CandidateAttack&) = default;
};

struct AttackRecord {
  std::string conversation_id;
  std::size_t turn_index = 0;
  std::string method;  // UAT | UAT-LM | UTSC-1 | UTSC-2 | UTSC-3
  std::size_t chosen_index = 0;
  std::vector<CandidateAttack> all_candidates;
  double attack_perplexity = kPosInf;

  const CandidateAttack& chosen() const { return all_candidates.at(chosen_index); }

  friend bool operator==(const AttackRecord&, const AttackRecord&) = default;
};

// One candidate per trigger. In response-prefix mode the trigger is forced
// as the first token of the adversary's utterance; otherwise it is appended
// to the history. Failed generations are logged and dropped.
inline std::vector<CandidateAttack> generate_candidates(
    const LanguageModel& model, const Conversation& history,
    const std::vector<std::string>& triggers, const UtscConfig& config) {
  if (triggers.empty()) throw ValidationError("no triggers supplied");
  config.decode.validate();
  std::vector<CandidateAttack> out;
  for (std::size_t i = 0; i < triggers.size(); ++i) {
    DecodeParams params = config.decode;
    params.seed = derive_seed(config.decode.seed, i);
    try {
      TokenSequence context;
      if (config.placement == TriggerPlacement::kResponsePrefix) {
        params.forced_prefix = triggers[i];
        context = history_context(model, history);
      } else {
        context = history_context(model, history, triggers[i]);
      }
      auto generated = generate(model, context, params);
      out.push_back({triggers[i], generated.text.surface_text, 0.0, {}});
    } catch (const std::exception& e) {
      log(LogLevel::kWarning, "candidate for trigger '" + triggers[i] +
                                  "' failed: " + e.what());
    }
  }
  if (out.empty()) throw AttackError("every candidate generation failed");
  return out;
}

// UTSC-1: argmax. UTSC-2: least toxic among scores >= threshold, falling
// back to argmax when none reach it. UTSC-3: argmin. Ties go to the lowest
// index.
inline std::size_t select_attack(std::span<const double> scores,
                                 SelectionCriterion criterion,
                                 double threshold) {
  if (scores.empty()) throw ContractViolation("no candidates to select from");
  auto argmax = [&] {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] > scores[best]) best = i;
    }
    return best;
  };
  switch (criterion) {
    case SelectionCriterion::kUtsc1:
      return argmax();
    case SelectionCriterion::kUtsc2: {
      std::optional<std::size_t> best;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        if (is_toxic(scores[i], threshold) && (!best || scores[i] < scores[*best])) {
          best = i;
        }
      }
      return best ? *best : argmax();
    }
    case SelectionCriterion::kUtsc3: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] < scores[best]) best = i;
      }
      return best;
    }
  }
  throw ContractViolation("unknown selection criterion");
}

inline std::size_t select_attack(const std::vector<CandidateAttack>& candidates,
                                 SelectionCriterion criterion, double threshold) {
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (const auto& c : candidates) scores.push_back(c.toxicity_score);
  return select_attack(scores, criterion, threshold);
}

inline void score_candidates(std::vector<CandidateAttack>& candidates,
                             const Ensemble& ensemble) {
  for (auto& c : candidates) {
    c.per_classifier_scores = ensemble.member_scores(c.utterance);
    c.toxicity_score = ensemble.combine(c.per_classifier_scores);
  }
}

// Perplexity of an utterance under `scorer`; +inf for text without tokens.
inline double utterance_perplexity(const LanguageModel& scorer,
                                   const std::string& text) {
  const auto seq = scorer.tokenize(text);
  if (seq.empty()) return kPosInf;
  return perplexity(scorer, seq);
}

// Full UTSC step: top-n pool triggers -> candidates -> ensemble scores ->
// selection, with the chosen utterance's perplexity under `scorer`.
inline AttackRecord run_utsc(const LanguageModel& model, const Ensemble& ensemble,
                             const Conversation& history,
                             const std::vector<PoolEntry>& pool,
                             const UtscConfig& config,
                             const LanguageModel& scorer) {
  config.validate();
  if (pool.size() < config.n_candidates) {
    throw ValidationError("unigram pool of " + std::to_string(pool.size()) +
                          " is smaller than n_candidates " +
                          std::to_string(config.n_candidates));
  }
  std::vector<std::string> triggers;
  for (std::size_t i = 0; i < config.n_candidates; ++i) {
    triggers.push_back(pool[i].text);
  }
  AttackRecord record;
  record.method = std::string(to_string(config.criterion));
  record.all_candidates = generate_candidates(model, history, triggers, config);
  score_candidates(record.all_candidates, ensemble);
  record.chosen_index =
      select_attack(record.all_candidates, config.criterion, config.threshold);
  record.attack_perplexity =
      utterance_perplexity(scorer, record.chosen().utterance);
  return record;
}

// A fixed trigger used verbatim as the attack utterance (UAT / UAT-LM).
inline AttackRecord trigger_attack(const std::string& method,
                                   const std::string& trigger_text,
                                   const Ensemble& ensemble,
                                   const LanguageModel& scorer) {
  AttackRecord record;
  record.method = method;
  CandidateAttack c{trigger_text, trigger_text, 0.0, {}};
  c.per_classifier_scores = ensemble.member_scores(c.utterance);
  c.toxicity_score = ensemble.combine(c.per_classifier_scores);
  record.all_candidates.push_back(std::move(c));
  record.attack_perplexity = utterance_perplexity(scorer, trigger_text);
  return record;
}

}  // namespace parley
