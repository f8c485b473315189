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
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "parley/errors.hpp"
#include "parley/random.hpp"
#include "parley/text.hpp"

namespace parley {

using TokenId = std::int32_t;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) add(t);
  }

  TokenId add(std::string_view token) {
    if (auto found = find(token)) return *found;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.emplace_back(token);
    index_.emplace(tokens_.back(), id);
    return id;
  }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (!contains(id)) {
      throw VocabularyError("token id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool contains(TokenId id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < tokens_.size();
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  void set_eos(std::string_view token) { eos_ = add(token); }
  void set_unk(std::string_view token) { unk_ = add(token); }
  std::optional<TokenId> eos() const noexcept { return eos_; }
  std::optional<TokenId> unk() const noexcept { return unk_; }

  bool is_special(TokenId id) const noexcept {
    return (eos_ && *eos_ == id) || (unk_ && *unk_ == id);
  }

  // Ids of every ordinary (non-special) token, ascending.
  std::vector<TokenId> ordinary_ids() const {
    std::vector<TokenId> out;
    for (TokenId id = 0; static_cast<std::size_t>(id) < tokens_.size(); ++id) {
      if (!is_special(id)) out.push_back(id);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::optional<TokenId> eos_;
  std::optional<TokenId> unk_;
};

struct Token {
  TokenId id = 0;
  CharSpan span;

  friend bool operator==(const Token&, const Token&) = default;
};

// Surface text plus its segmentation into vocabulary tokens.
// Invariant: spans are ordered, disjoint and inside surface_text.
struct TokenSequence {
  std::string surface_text;
  std::vector<Token> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(t.id);
    return out;
  }

  std::string_view token_text(std::size_t i) const {
    return slice(surface_text, tokens.at(i).span);
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Maps each word of `text` onto the vocabulary. Unknown words become the
// unknown token when the vocabulary declares one, otherwise this throws.
inline TokenSequence tokenize(const Vocabulary& vocab, std::string_view text) {
  TokenSequence seq;
  seq.surface_text = std::string(text);
  for (const auto& span : split_words(text)) {
    auto id = vocab.find(slice(text, span));
    if (!id) {
      if (!vocab.unk()) {
        throw VocabularyError("token '" + std::string(slice(text, span)) +
                              "' not in vocabulary");
      }
      id = vocab.unk();
    }
    seq.tokens.push_back({*id, span});
  }
  return seq;
}

inline void append_token(TokenSequence& seq, const Vocabulary& vocab,
                         TokenId id) {
  if (!seq.surface_text.empty()) seq.surface_text.push_back(' ');
  const std::size_t begin = seq.surface_text.size();
  seq.surface_text.append(vocab.token(id));
  seq.tokens.push_back({id, {begin, seq.surface_text.size()}});
}

// Renders ids as space-separated token strings.
inline TokenSequence render_tokens(const Vocabulary& vocab,
                                   std::span<const TokenId> ids) {
  TokenSequence seq;
  for (TokenId id : ids) append_token(seq, vocab, id);
  return seq;
}

// Rebuilds surface text from token ids and the inter-token gaps.
inline std::string detokenize(const Vocabulary& vocab,
                              const TokenSequence& seq) {
  std::string out;
  std::size_t cursor = 0;
  for (const auto& t : seq.tokens) {
    out.append(seq.surface_text, cursor, t.span.begin - cursor);
    out.append(vocab.token(t.id));
    cursor = t.span.end;
  }
  out.append(seq.surface_text, std::min(cursor, seq.surface_text.size()));
  return out;
}

// Conditional next-token model P(y_i | y_{1:i-1}, context). Every backend
// (scripted, toy tables, neural adapters) implements this one contract; the
// generation and scoring operations below are written against it.
//
// Instances are not thread-safe: one in-flight call per instance. Use
// clone() to give each worker its own copy.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::string kind() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;

  // Log-probabilities over the whole vocabulary for the next continuation
  // token. Entries may be -inf; finite entries are <= 0.
  virtual std::vector<double> next_token_logprobs(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const = 0;

  virtual double token_logprob(const TokenSequence& context,
                               std::span<const TokenId> continuation,
                               TokenId next) const {
    return next_token_logprobs(context, continuation)
        .at(static_cast<std::size_t>(next));
  }

  virtual std::optional<std::size_t> context_window() const {
    return std::nullopt;
  }
  virtual bool permits_empty_context() const { return true; }

  virtual std::unique_ptr<LanguageModel> clone() const = 0;

  TokenSequence tokenize(std::string_view text) const {
    return parley::tokenize(vocabulary(), text);
  }
};

// Optional capability of models that expose token embeddings and the
// gradient of a continuation's log-likelihood with respect to the embedding
// of one context position. Enables linearized replacement scoring.
class EmbeddingGradientModel {
 public:
  virtual ~EmbeddingGradientModel() = default;

  virtual std::vector<double> embedding(TokenId id) const = 0;

  virtual std::vector<double> context_embedding_gradient(
      const TokenSequence& context, std::size_t position,
      std::span<const TokenId> continuation) const = 0;
};

struct DecodeParams {
  std::size_t max_new_tokens = 32;
  double temperature = 0.7;
  std::size_t top_k = 40;  // 0 means unlimited
  std::uint64_t seed = 0;
  std::optional<std::string> forced_prefix;

  void validate() const {
    if (max_new_tokens == 0) {
      throw ValidationError("max_new_tokens must be positive");
    }
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
      throw ValidationError("temperature must be finite and non-negative");
    }
  }

  friend bool operator==(const DecodeParams&, const DecodeParams&) = default;
};

struct GenerationOutput {
  TokenSequence text;
  std::vector<double> token_logprobs;  // one per generated token
};

namespace detail {

inline void check_window(const LanguageModel& model,
                         const TokenSequence& context) {
  if (auto window = model.context_window();
      window && context.size() > *window) {
    throw ContextOverflowError(context.size(), *window);
  }
}

inline TokenId greedy_pick(const std::vector<double>& logprobs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logprobs.size(); ++i) {
    if (logprobs[i] > logprobs[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

inline TokenId sample_pick(const std::vector<double>& logprobs,
                           double temperature, std::size_t top_k, Rng& rng) {
  std::vector<std::size_t> order(logprobs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return logprobs[a] > logprobs[b];
  });
  if (top_k > 0 && top_k < order.size()) order.resize(top_k);
  const double top = logprobs[order.front()];
  if (!std::isfinite(top)) return static_cast<TokenId>(order.front());
  std::vector<double> weights;
  weights.reserve(order.size());
  double total = 0.0;
  for (auto i : order) {
    const double w = std::exp((logprobs[i] - top) / temperature);
    weights.push_back(w);
    total += w;
  }
  double u = rng.uniform01() * total;
  for (std::size_t j = 0; j < order.size(); ++j) {
    u -= weights[j];
    if (u < 0.0) return static_cast<TokenId>(order[j]);
  }
  return static_cast<TokenId>(order.back());
}

}  // namespace detail

// Decodes a continuation of `context`. A forced prefix is emitted verbatim
// (its tokens are scored, not sampled) before free decoding starts;
// max_new_tokens bounds the freely decoded part.
inline GenerationOutput generate(const LanguageModel& model,
                                 const TokenSequence& context,
                                 const DecodeParams& params) {
  params.validate();
  if (context.empty() && !model.permits_empty_context()) {
    throw ValidationError(model.kind() + " does not accept an empty context");
  }
  detail::check_window(model, context);

  const Vocabulary& vocab = model.vocabulary();
  GenerationOutput out;
  std::vector<TokenId> ids;
  if (params.forced_prefix) {
    // The forced prefix keeps its own surface form even for unknown words.
    out.text = model.tokenize(normalize_text(*params.forced_prefix));
    for (const auto& tok : out.text.tokens) {
      out.token_logprobs.push_back(model.token_logprob(context, ids, tok.id));
      ids.push_back(tok.id);
    }
  }

  Rng rng(params.seed);
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    const auto dist = model.next_token_logprobs(context, ids);
    const TokenId next =
        params.temperature == 0.0
            ? detail::greedy_pick(dist)
            : detail::sample_pick(dist, params.temperature, params.top_k, rng);
    if (vocab.eos() && next == *vocab.eos()) break;
    out.token_logprobs.push_back(dist[static_cast<std::size_t>(next)]);
    ids.push_back(next);
    append_token(out.text, vocab, next);
  }
  return out;
}

struct ContinuationScore {
  double total = 0.0;
  std::vector<double> per_token;
};

// log P(continuation | context) and its per-token terms, optionally after
// an already-fixed continuation prefix.
inline ContinuationScore continuation_logprob(
    const LanguageModel& model, const TokenSequence& context,
    std::span<const TokenId> continuation,
    std::span<const TokenId> prefix = {}) {
  const Vocabulary& vocab = model.vocabulary();
  std::vector<TokenId> so_far(prefix.begin(), prefix.end());
  ContinuationScore out;
  out.per_token.reserve(continuation.size());
  for (TokenId id : continuation) {
    if (!vocab.contains(id)) {
      throw VocabularyError("token id " + std::to_string(id) +
                            " outside vocabulary of " + model.kind());
    }
    const double lp = model.token_logprob(context, so_far, id);
    out.per_token.push_back(lp);
    out.total += lp;
    so_far.push_back(id);
  }
  return out;
}

inline ContinuationScore continuation_logprob(
    const LanguageModel& model, const TokenSequence& context,
    const TokenSequence& continuation) {
  const auto ids = continuation.ids();
  return continuation_logprob(model, context, ids);
}

// Reported perplexity carries 15 significant digits; the log/exp round trip
// cannot support more (exp(log(50)) is 49.99999999999999 in binary64).
inline double round_significant(double value, int digits = 15) {
  if (!std::isfinite(value) || value == 0.0) return value;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, value);
  return std::strtod(buf, nullptr);
}

// exp(-mean per-token log-prob) with an empty conditioning context.
// Zero-probability tokens give +inf rather than an exception.
inline double perplexity(const LanguageModel& model, const TokenSequence& text) {
  if (text.empty()) throw ValidationError("perplexity needs at least one token");
  const auto score = continuation_logprob(model, TokenSequence{}, text);
  if (!std::isfinite(score.total)) return kPosInf;
  return round_significant(
      std::exp(-score.total / static_cast<double>(text.size())));
}

// Set 𝒴 of target outputs the trigger search tries to make likely.
struct ToxicTargetCorpus {
  std::vector<std::string> targets;

  std::size_t size() const noexcept { return targets.size(); }
};

// Every target must map onto known (non-unknown) tokens of the model.
inline std::vector<TokenSequence> tokenize_corpus(
    const LanguageModel& model, const ToxicTargetCorpus& corpus) {
  std::vector<TokenSequence> out;
  out.reserve(corpus.targets.size());
  const auto unk = model.vocabulary().unk();
  for (const auto& target : corpus.targets) {
    auto seq = model.tokenize(target);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (unk && seq.tokens[i].id == *unk) {
        throw VocabularyError("target '" + target + "' has unknown token '" +
                              std::string(seq.token_text(i)) + "'");
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// Σ_{y∈𝒴} log P(y | trigger): the trigger is the whole conditioning context
// and each target is scored as its continuation.
inline double corpus_logprob(const LanguageModel& model,
                             std::span<const TokenId> trigger,
                             const std::vector<TokenSequence>& targets) {
  if (targets.empty()) {
    throw ContractViolation("objective evaluated on an empty target corpus");
  }
  const TokenSequence context = render_tokens(model.vocabulary(), trigger);
  double total = 0.0;
  for (const auto& target : targets) {
    total += continuation_logprob(model, context, target).total;
  }
  return total;
}

enum class ReplacementMode { kExact, kLinearized };

struct ReplacementOptions {
  std::size_t exact_vocab_cap = 4096;
};

// Score of substituting each ordinary vocabulary token at `position` of the
// trigger. Exact mode returns the true objective of every substitution;
// linearized mode returns the first-order estimate
//   f(t) + Σ_y ∇_{e(t_p)} log P(y | t) · (e(v) − e(t_p)),
// which is only meaningful for ranking.
inline std::map<TokenId, double> replacement_scores(
    const LanguageModel& model, const TokenSequence& trigger,
    const std::vector<TokenSequence>& targets, std::size_t position,
    ReplacementMode mode, const ReplacementOptions& options = {}) {
  if (position >= trigger.size()) {
    throw ValidationError("replacement position " + std::to_string(position) +
                          " outside trigger of length " +
                          std::to_string(trigger.size()));
  }
  const Vocabulary& vocab = model.vocabulary();
  const auto candidates = vocab.ordinary_ids();
  std::vector<TokenId> ids = trigger.ids();
  std::map<TokenId, double> scores;

  if (mode == ReplacementMode::kExact) {
    if (candidates.size() > options.exact_vocab_cap) {
      throw CapacityError("exact replacement scoring over " +
                          std::to_string(candidates.size()) +
                          " tokens exceeds cap " +
                          std::to_string(options.exact_vocab_cap));
    }
    for (TokenId v : candidates) {
      ids[position] = v;
      scores[v] = corpus_logprob(model, ids, targets);
    }
    return scores;
  }

  const auto* grad_model = dynamic_cast<const EmbeddingGradientModel*>(&model);
  if (grad_model == nullptr) {
    throw UnsupportedError(model.kind() +
                           " exposes no embedding gradients for linearized "
                           "replacement scoring");
  }
  const TokenSequence context = render_tokens(vocab, ids);
  const double current = corpus_logprob(model, ids, targets);
  std::vector<double> grad;
  for (const auto& target : targets) {
    const auto g = grad_model->context_embedding_gradient(context, position,
                                                          target.ids());
    if (grad.empty()) grad.assign(g.size(), 0.0);
    for (std::size_t d = 0; d < g.size(); ++d) grad[d] += g[d];
  }
  const auto base = grad_model->embedding(ids[position]);
  for (TokenId v : candidates) {
    const auto e = grad_model->embedding(v);
    double delta = 0.0;
    for (std::size_t d = 0; d < grad.size(); ++d) {
      delta += grad[d] * (e[d] - base[d]);
    }
    scores[v] = current + delta;
  }
  return scores;
}

}  // namespace parley
