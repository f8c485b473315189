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
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "parley/errors.hpp"
#include "parley/modeling.hpp"

namespace parley {

enum class UatObjective { kUat, kUatLm };

struct TriggerSequence {
  std::vector<TokenId> tokens;
  std::string text;
  double objective_value = kNegInf;
};

struct UatConfig {
  UatObjective objective = UatObjective::kUat;
  double lm_weight = 1.0;
  std::size_t trigger_length = 6;
  // Candidates re-evaluated exactly after linearized ranking. Clamped to the
  // number of ordinary tokens.
  std::size_t candidate_k = 32;
  std::size_t max_sweeps = 10;
  // Filler token of the initial trigger. Unset: "the" when the vocabulary
  // has it, otherwise the lowest ordinary token id.
  std::optional<std::string> initial_token;
  ReplacementMode scoring = ReplacementMode::kExact;
  std::size_t exact_vocab_cap = 4096;

  void validate() const {
    if (!(lm_weight >= 0.0) || !std::isfinite(lm_weight)) {
      throw ValidationError("lm_weight must be finite and non-negative");
    }
    if (trigger_length == 0) throw ValidationError("trigger_length must be positive");
    if (candidate_k == 0) throw ValidationError("candidate_k must be positive");
    if (max_sweeps == 0) throw ValidationError("max_sweeps must be positive");
  }
};

struct TraceStep {
  std::size_t sweep = 0;
  std::size_t position = 0;
  TokenId old_token = 0;
  TokenId new_token = 0;
  std::string old_text;
  std::string new_text;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

struct SearchTrace {
  std::vector<TraceStep> steps;
  std::size_t sweeps = 0;
  bool truncated = false;  // max_sweeps hit before a sweep without changes
};

struct SearchResult {
  TriggerSequence trigger;
  SearchTrace trace;
};

inline ToxicTargetCorpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open target corpus " + path);
  ToxicTargetCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!normalize_text(line).empty()) corpus.targets.push_back(line);
  }
  if (corpus.targets.empty()) throw ConfigError("target corpus " + path + " is empty");
  return corpus;
}

// f_UAT: Σ_{y∈𝒴} Σ_i log P(y_i | y_{1:i-1}; t).
inline double uat_objective(const LanguageModel& model,
                            std::span<const TokenId> trigger,
                            const std::vector<TokenSequence>& targets) {
  return corpus_logprob(model, trigger, targets);
}

inline double uat_objective(const LanguageModel& model,
                            std::span<const TokenId> trigger,
                            const ToxicTargetCorpus& corpus) {
  if (corpus.targets.empty()) {
    throw ContractViolation("objective evaluated on an empty target corpus");
  }
  return uat_objective(model, trigger, tokenize_corpus(model, corpus));
}

// Σ_j log P(t_j | t_{1:j-1}) of the trigger text under `lm`, which may use a
// different vocabulary than the attacked model.
inline double trigger_logprob(const LanguageModel& lm,
                              const std::string& trigger_text) {
  return continuation_logprob(lm, TokenSequence{}, lm.tokenize(trigger_text)).total;
}

// f_UAT-LM = f_UAT + λ·|𝒴|·Σ_j log P(t_j | t_{1:j-1}); the |𝒴| factor is
// the literal double sum over targets and trigger positions.
inline double uat_lm_objective(const LanguageModel& model,
                               const LanguageModel& lm,
                               std::span<const TokenId> trigger,
                               const std::vector<TokenSequence>& targets,
                               double lm_weight) {
  const double base = uat_objective(model, trigger, targets);
  if (lm_weight == 0.0) return base;
  const std::string text = render_tokens(model.vocabulary(), trigger).surface_text;
  return base + lm_weight * static_cast<double>(targets.size()) *
                    trigger_logprob(lm, text);
}

inline double uat_lm_objective(const LanguageModel& model,
                               const LanguageModel& lm,
                               std::span<const TokenId> trigger,
                               const ToxicTargetCorpus& corpus,
                               double lm_weight) {
  if (corpus.targets.empty()) {
    throw ContractViolation("objective evaluated on an empty target corpus");
  }
  return uat_lm_objective(model, lm, trigger, tokenize_corpus(model, corpus),
                          lm_weight);
}

namespace detail {

inline bool improves(double candidate, double current) {
  if (std::isnan(candidate)) return false;
  if (current == kNegInf) return candidate > kNegInf;
  return candidate > current + 1e-12 * std::max(1.0, std::abs(current));
}

inline TokenId initial_trigger_token(const Vocabulary& vocab,
                                     const UatConfig& config) {
  if (config.initial_token) {
    auto id = vocab.find(*config.initial_token);
    if (!id || vocab.is_special(*id)) {
      throw ValidationError("initial token '" + *config.initial_token +
                            "' is not an ordinary vocabulary token");
    }
    return *id;
  }
  if (auto the = vocab.find("the"); the && !vocab.is_special(*the)) return *the;
  const auto ordinary = vocab.ordinary_ids();
  if (ordinary.empty()) throw ValidationError("vocabulary has no ordinary tokens");
  return ordinary.front();
}

}  // namespace detail

// Coordinate search over trigger positions. Each sweep visits positions
// left to right; at each position the best-scoring substitution is accepted
// at once if it strictly improves the objective. Stops after the first
// sweep without an accepted replacement, or after max_sweeps (truncated).
inline SearchResult search_trigger(const LanguageModel& model,
                                   const ToxicTargetCorpus& corpus,
                                   const UatConfig& config,
                                   const LanguageModel* lm = nullptr) {
  config.validate();
  if (corpus.targets.empty()) throw ValidationError("target corpus is empty");
  const LanguageModel& scorer = lm ? *lm : model;
  const Vocabulary& vocab = model.vocabulary();
  const auto targets = tokenize_corpus(model, corpus);
  const auto candidates = vocab.ordinary_ids();
  if (config.scoring == ReplacementMode::kExact &&
      candidates.size() > config.exact_vocab_cap) {
    throw CapacityError("exact trigger search over " +
                        std::to_string(candidates.size()) +
                        " tokens exceeds cap " +
                        std::to_string(config.exact_vocab_cap));
  }
  const bool with_lm = config.objective == UatObjective::kUatLm;
  auto objective = [&](std::span<const TokenId> ids) {
    return with_lm ? uat_lm_objective(model, scorer, ids, targets, config.lm_weight)
                   : uat_objective(model, ids, targets);
  };
  auto lm_term = [&](std::span<const TokenId> ids) {
    if (!with_lm || config.lm_weight == 0.0) return 0.0;
    return config.lm_weight * static_cast<double>(targets.size()) *
           trigger_logprob(scorer, render_tokens(vocab, ids).surface_text);
  };

  std::vector<TokenId> ids(config.trigger_length,
                           detail::initial_trigger_token(vocab, config));
  double current = objective(ids);
  SearchResult result;
  bool changed = true;
  for (std::size_t sweep = 1; sweep <= config.max_sweeps && changed; ++sweep) {
    changed = false;
    result.trace.sweeps = sweep;
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      const TokenId old_token = ids[pos];
      std::vector<TokenId> shortlist;
      if (config.scoring == ReplacementMode::kExact) {
        shortlist = candidates;
      } else {
        const auto estimates = replacement_scores(
            model, render_tokens(vocab, ids), targets, pos,
            ReplacementMode::kLinearized);
        std::vector<std::pair<double, TokenId>> ranked;
        std::vector<TokenId> probe = ids;
        for (const auto& [v, est] : estimates) {
          probe[pos] = v;
          ranked.emplace_back(est + lm_term(probe), v);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) {
          return a.first > b.first;
        });
        const std::size_t k = std::min(config.candidate_k, ranked.size());
        for (std::size_t i = 0; i < k; ++i) shortlist.push_back(ranked[i].second);
      }

      TokenId best = old_token;
      double best_value = current;
      std::vector<TokenId> probe = ids;
      for (TokenId v : shortlist) {
        if (v == old_token) continue;
        probe[pos] = v;
        const double value = objective(probe);
        if (detail::improves(value, best_value) ||
            (best != old_token && value == best_value && v < best)) {
          best = v;
          best_value = value;
        }
      }
      if (best != old_token && detail::improves(best_value, current)) {
        result.trace.steps.push_back({sweep, pos, old_token, best,
                                      vocab.token(old_token), vocab.token(best),
                                      current, best_value});
        ids[pos] = best;
        current = best_value;
        changed = true;
      }
    }
  }
  result.trace.truncated = changed;
  result.trigger = {ids, render_tokens(vocab, ids).surface_text, current};
  return result;
}

struct PoolEntry {
  TokenId token = 0;
  std::string text;
  double objective = 0.0;
};

// Top-m single-token triggers by f_UAT, descending; ties by ascending id.
inline std::vector<PoolEntry> unigram_pool(const LanguageModel& model,
                                           const ToxicTargetCorpus& corpus,
                                           std::size_t m) {
  if (m == 0) throw ValidationError("unigram pool size must be at least 1");
  const auto targets = tokenize_corpus(model, corpus);
  if (targets.empty()) throw ValidationError("target corpus is empty");
  const Vocabulary& vocab = model.vocabulary();
  std::vector<PoolEntry> pool;
  for (TokenId v : vocab.ordinary_ids()) {
    const TokenId one[] = {v};
    pool.push_back({v, vocab.token(v), uat_objective(model, one, targets)});
  }
  std::stable_sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
    return a.objective > b.objective;
  });
  pool.resize(std::min(m, pool.size()));
  return pool;
}

inline nlohmann::json to_json(const TraceStep& s) {
  return {{"sweep", s.sweep},
          {"position", s.position},
          {"old_token", s.old_text},
          {"new_token", s.new_text},
          {"objective_before", s.objective_before},
          {"objective_after", s.objective_after}};
}

// One JSON object per accepted replacement.
inline void write_trace_jsonl(const SearchTrace& trace, std::ostream& out) {
  for (const auto& s : trace.steps) out << to_json(s).dump() << '\n';
}

}  // namespace parley
