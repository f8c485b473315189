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
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "parley/conversation.hpp"
#include "parley/errors.hpp"
#include "parley/modeling.hpp"
#include "parley/random.hpp"
#include "parley/text.hpp"
#include "parley/toxicity.hpp"

namespace parley {

enum class L1Method { kOcclusion, kGradientInput };
enum class L2Method { kLeaveOneOut };
enum class MaskMode { kRemove, kPlaceholder };
enum class FallbackPolicy { kNonSequitur, kPassThroughFlagged };

struct SpanWeight {
  CharSpan span;
  std::string text;
  double weight = 0.0;

  friend bool operator==(const SpanWeight&, const SpanWeight&) = default;
};

// Importance of disjoint character spans of one text, sorted by weight
// descending with ties in text order, so front() is the argmax.
struct AttributionMap {
  std::vector<SpanWeight> spans;
  std::string method_id;
  std::string target;

  const SpanWeight* argmax() const {
    return spans.empty() ? nullptr : &spans.front();
  }

  void sort() {
    std::stable_sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.span.begin < b.span.begin;
    });
  }
};

// Classifiers that can attribute their own score to input spans, e.g.
// gradient-times-input over a neural encoder.
class SaliencyClassifier {
 public:
  virtual ~SaliencyClassifier() = default;
  virtual std::vector<SpanWeight> gradient_input(const std::string& text) const = 0;
};

struct SafeTopicList {
  std::vector<std::string> topics;

  static SafeTopicList load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open topic list " + path);
    SafeTopicList list;
    std::string line;
    while (std::getline(in, line)) {
      auto topic = normalize_text(line);
      if (!topic.empty()) list.topics.push_back(std::move(topic));
    }
    if (list.topics.empty()) throw ConfigError("topic list " + path + " is empty");
    return list;
  }
};

inline std::string non_sequitur(const SafeTopicList& topics, std::uint64_t seed) {
  if (topics.topics.empty()) throw ConfigError("safe topic list is empty");
  Rng rng(seed);
  const auto& topic = topics.topics[rng.below(topics.topics.size())];
  return "Hey do you want to talk about something else? How about we talk about " +
         topic + "?";
}

struct DefenseConfig {
  std::shared_ptr<const ToxicityClassifier> gate;
  std::optional<double> threshold;  // unset: the gate's default threshold
  L1Method l1_method = L1Method::kOcclusion;
  L2Method l2_method = L2Method::kLeaveOneOut;
  std::size_t max_masked_tokens = 3;
  MaskMode mask_mode = MaskMode::kRemove;
  std::string placeholder = "[MASK]";
  FallbackPolicy fallback = FallbackPolicy::kNonSequitur;
  SafeTopicList topics;
  DecodeParams decode;

  double gate_threshold() const {
    return threshold ? *threshold : gate->default_threshold();
  }

  void validate() const {
    if (!gate) throw ConfigError("defense needs a gate classifier");
    if (max_masked_tokens == 0) {
      throw ValidationError("max_masked_tokens must be at least 1");
    }
    if (fallback == FallbackPolicy::kNonSequitur && topics.topics.empty()) {
      throw ConfigError("non-sequitur fallback needs a safe topic list");
    }
    decode.validate();
  }
};

struct DefenseIteration {
  std::string attributed_response;
  SpanWeight l1;  // span of attributed_response
  SpanWeight l2;  // span of the original adversary utterance
  std::string masked_input;
  std::string response;
  ToxicityVerdict verdict;

  friend bool operator==(const DefenseIteration&, const DefenseIteration&) = default;
};

struct DefenseRecord {
  std::string method = "two-stage";
  std::string adversary_utterance;
  std::string draft_response;
  ToxicityVerdict draft_verdict;
  std::vector<DefenseIteration> steps;
  std::vector<CharSpan> masked_spans;  // cumulative, adversary coordinates
  std::string final_response;
  std::size_t iterations = 0;
  bool fallback_used = false;
  std::string fallback;  // which fallback produced final_response
  std::uint64_t seed = 0;

  friend bool operator==(const DefenseRecord&, const DefenseRecord&) = default;
};

// A component failed mid-defense; partial() holds everything recorded up to
// the failure.
class DefenseError : public Error {
 public:
  DefenseError(DefenseRecord partial, const std::string& message)
      : Error("defense", message), partial_(std::move(partial)) {}
  const DefenseRecord& partial() const noexcept { return partial_; }

 private:
  DefenseRecord partial_;
};

// Occlusion: weight(s) = score(text) - score(text without s), over every
// token span of the text.
inline AttributionMap l1_attribution(const ToxicityClassifier& classifier,
                                     const std::string& text,
                                     L1Method method = L1Method::kOcclusion) {
  if (normalize_text(text).empty()) {
    throw ValidationError("cannot attribute an empty response");
  }
  AttributionMap map;
  map.target = "score:" + classifier.id();
  if (method == L1Method::kGradientInput) {
    const auto* saliency = dynamic_cast<const SaliencyClassifier*>(&classifier);
    if (saliency == nullptr) {
      throw UnsupportedError("classifier " + classifier.id() +
                             " has no gradient-input attribution");
    }
    map.method_id = "gradient-input";
    map.spans = saliency->gradient_input(text);
    map.sort();
    return map;
  }
  map.method_id = "occlusion";
  const double full = classifier.score(text);
  for (const auto& span : split_words(text)) {
    double occluded = 0.0;
    try {
      occluded = classifier.score(remove_spans(text, {span}));
    } catch (const std::exception& e) {
      throw Error("attribution", "classifier " + classifier.id() +
                                     " failed while occluding '" +
                                     std::string(slice(text, span)) + "' at [" +
                                     std::to_string(span.begin) + "," +
                                     std::to_string(span.end) + "): " + e.what());
    }
    map.spans.push_back({span, std::string(slice(text, span)), full - occluded});
  }
  map.sort();
  return map;
}

struct MaskState {
  std::vector<CharSpan> masked;
  MaskMode mode = MaskMode::kRemove;
  std::string placeholder = "[MASK]";
};

inline std::string apply_mask(const std::string& utterance,
                              const std::vector<CharSpan>& spans, MaskMode mode,
                              const std::string& placeholder) {
  if (spans.empty()) return utterance;
  return mode == MaskMode::kRemove ? remove_spans(utterance, spans)
                                   : replace_spans(utterance, spans, placeholder);
}

// Log-probabilities are floored before differencing so zero-probability
// events keep attribution weights finite.
inline constexpr double kLogProbFloor = -745.0;

// Leave-one-out over the adversary's latest utterance:
//   weight(s) = log P(L1 | input, prefix) - log P(L1 | input with s masked, prefix)
// Already masked spans stay masked in both terms and are not candidates.
inline AttributionMap l2_attribution(const LanguageModel& model,
                                     const Conversation& history,
                                     const std::string& adversary_utterance,
                                     const std::string& l1_token,
                                     const std::string& response_prefix,
                                     const MaskState& state = {}) {
  const auto l1 = model.tokenize(l1_token);
  const auto unk = model.vocabulary().unk();
  if (l1.empty()) throw AlignmentError("empty L1 token");
  for (const auto& t : l1.tokens) {
    if (unk && t.id == *unk) {
      throw AlignmentError("L1 token '" + l1_token +
                           "' is not in the vocabulary of " + model.kind());
    }
  }
  const auto target = l1.ids();
  const auto prefix = model.tokenize(response_prefix).ids();

  auto logp = [&](const std::vector<CharSpan>& masked) {
    const auto input =
        apply_mask(adversary_utterance, masked, state.mode, state.placeholder);
    const auto context = history_context(model, history, input);
    detail::check_window(model, context);
    return std::max(kLogProbFloor,
                    continuation_logprob(model, context, target, prefix).total);
  };

  AttributionMap map;
  map.method_id = "leave-one-out";
  map.target = "logprob:" + l1_token;
  const double base = logp(state.masked);
  for (const auto& span : split_words(adversary_utterance)) {
    if (std::find(state.masked.begin(), state.masked.end(), span) !=
        state.masked.end()) {
      continue;
    }
    auto masked = state.masked;
    masked.push_back(span);
    map.spans.push_back(
        {span, std::string(slice(adversary_utterance, span)), base - logp(masked)});
  }
  map.sort();
  return map;
}

// Convenience form: the L1 token is `l1_span` of `response` and the prefix
// is everything before it.
inline AttributionMap l2_attribution(const LanguageModel& model,
                                     const Conversation& history,
                                     const std::string& adversary_utterance,
                                     const std::string& response,
                                     CharSpan l1_span,
                                     const MaskState& state = {}) {
  if (l1_span.end > response.size() || l1_span.empty()) {
    throw AlignmentError("L1 span outside the response");
  }
  return l2_attribution(model, history, adversary_utterance,
                        response.substr(l1_span.begin, l1_span.size()),
                        normalize_text(response.substr(0, l1_span.begin)), state);
}

// Gate, then up to max_masked_tokens rounds of L1 -> L2 -> mask ->
// regenerate. The last turn of `history` is the adversary utterance being
// masked; `draft_response` is the defender's reply to it.
inline DefenseRecord defend(const LanguageModel& model, const DefenseConfig& config,
                            const Conversation& history,
                            const std::string& draft_response) {
  config.validate();
  if (history.empty()) throw ValidationError("defense needs a non-empty history");
  const double threshold = config.gate_threshold();
  const Conversation before = history.without_last();

  DefenseRecord record;
  record.adversary_utterance = history.back().text;
  record.draft_response = draft_response;
  record.seed = config.decode.seed;
  record.draft_verdict = verdict(*config.gate, draft_response, threshold);
  if (!record.draft_verdict.toxic) {
    record.final_response = draft_response;
    return record;
  }

  MaskState state{{}, config.mask_mode, config.placeholder};
  std::string current = draft_response;
  try {
    while (record.iterations < config.max_masked_tokens) {
      if (normalize_text(current).empty()) break;
      const auto l1_map = l1_attribution(*config.gate, current, config.l1_method);
      const SpanWeight* l1 = l1_map.argmax();
      if (l1 == nullptr) break;
      const auto l2_map = l2_attribution(model, before, record.adversary_utterance,
                                         current, l1->span, state);
      const SpanWeight* l2 = l2_map.argmax();
      if (l2 == nullptr) break;

      state.masked.push_back(l2->span);
      DefenseIteration step;
      step.attributed_response = current;
      step.l1 = *l1;
      step.l2 = *l2;
      step.masked_input = apply_mask(record.adversary_utterance, state.masked,
                                     state.mode, state.placeholder);
      const auto context = history_context(model, before, step.masked_input);
      step.response = generate(model, context, config.decode).text.surface_text;
      step.verdict = verdict(*config.gate, step.response, threshold);
      current = step.response;
      record.masked_spans = state.masked;
      record.steps.push_back(step);
      ++record.iterations;
      if (!step.verdict.toxic) {
        record.final_response = current;
        return record;
      }
    }

    record.fallback_used = true;
    if (config.fallback == FallbackPolicy::kNonSequitur) {
      record.fallback = "non-sequitur";
      record.final_response =
          non_sequitur(config.topics, derive_seed(config.decode.seed, 0xfa11));
    } else {
      record.fallback = "pass-through-flagged";
      record.final_response = current;
    }
  } catch (const std::exception& e) {
    throw DefenseError(record, std::string("defense failed after ") +
                                   std::to_string(record.iterations) +
                                   " iteration(s): " + e.what());
  }
  return record;
}

// Baseline: gate the draft and replace toxic drafts with a topic change.
inline DefenseRecord non_sequitur_defense(const DefenseConfig& config,
                                          const std::string& adversary_utterance,
                                          const std::string& draft_response) {
  if (!config.gate) throw ConfigError("defense needs a gate classifier");
  DefenseRecord record;
  record.method = "non-sequitur";
  record.adversary_utterance = adversary_utterance;
  record.draft_response = draft_response;
  record.seed = config.decode.seed;
  record.draft_verdict = verdict(*config.gate, draft_response, config.gate_threshold());
  if (!record.draft_verdict.toxic) {
    record.final_response = draft_response;
    return record;
  }
  record.fallback_used = true;
  record.fallback = "non-sequitur";
  record.final_response =
      non_sequitur(config.topics, derive_seed(config.decode.seed, 0xfa11));
  return record;
}

struct TriggerMaskingResult {
  std::string masked_utterance;
  std::string response;
  std::vector<CharSpan> removed;
};

// Oracle baseline: drop every whole-word occurrence of the known trigger
// tokens from the adversary's latest utterance, then regenerate.
inline TriggerMaskingResult trigger_masking(const LanguageModel& model,
                                            const Conversation& history,
                                            const std::vector<std::string>& trigger_tokens,
                                            const DecodeParams& decode) {
  if (history.empty()) throw ValidationError("trigger masking needs a history");
  std::set<std::string> triggers;
  for (const auto& t : trigger_tokens) {
    for (const auto& s : split_words(t)) triggers.insert(to_lower(slice(t, s)));
  }
  const std::string& utterance = history.back().text;
  TriggerMaskingResult result;
  for (const auto& span : split_words(utterance)) {
    if (triggers.count(to_lower(slice(utterance, span)))) result.removed.push_back(span);
  }
  result.masked_utterance =
      result.removed.empty() ? utterance : remove_spans(utterance, result.removed);
  const auto context =
      history_context(model, history.without_last(), result.masked_utterance);
  result.response = generate(model, context, decode).text.surface_text;
  return result;
}

// Trigger masking behind the same gate as the other defenses, recorded in
// the common DefenseRecord shape.
inline DefenseRecord trigger_masking_defense(const LanguageModel& model,
                                             const DefenseConfig& config,
                                             const Conversation& history,
                                             const std::string& draft_response,
                                             const std::vector<std::string>& trigger_tokens) {
  if (!config.gate) throw ConfigError("defense needs a gate classifier");
  if (history.empty()) throw ValidationError("defense needs a non-empty history");
  DefenseRecord record;
  record.method = "trigger-masking";
  record.adversary_utterance = history.back().text;
  record.draft_response = draft_response;
  record.seed = config.decode.seed;
  record.draft_verdict = verdict(*config.gate, draft_response, config.gate_threshold());
  if (!record.draft_verdict.toxic) {
    record.final_response = draft_response;
    return record;
  }
  auto masked = trigger_masking(model, history, trigger_tokens, config.decode);
  record.masked_spans = std::move(masked.removed);
  record.iterations = record.masked_spans.empty() ? 0 : 1;
  record.final_response = std::move(masked.response);
  return record;
}

}  // namespace parley
