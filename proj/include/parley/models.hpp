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
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "parley/errors.hpp"
#include "parley/modeling.hpp"
#include "parley/text.hpp"

namespace parley {

// Uniform next-token distribution; ignores context entirely.
class UniformModel final : public LanguageModel {
 public:
  explicit UniformModel(Vocabulary vocab) : vocab_(std::move(vocab)) {
    if (vocab_.size() == 0) throw ValidationError("uniform model needs tokens");
    logp_ = -std::log(static_cast<double>(vocab_.size()));
  }

  // Tokens named w0 .. w{n-1}.
  static UniformModel with_size(std::size_t n) {
    Vocabulary v;
    for (std::size_t i = 0; i < n; ++i) v.add("w" + std::to_string(i));
    return UniformModel(std::move(v));
  }

  std::string kind() const override { return "uniform"; }
  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<double> next_token_logprobs(
      const TokenSequence&, std::span<const TokenId>) const override {
    return std::vector<double>(vocab_.size(), logp_);
  }
  double token_logprob(const TokenSequence&, std::span<const TokenId>,
                       TokenId) const override {
    return logp_;
  }

  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<UniformModel>(*this);
  }

 private:
  Vocabulary vocab_;
  double logp_ = 0.0;
};

// First-order Markov table. The conditioning token is the last token of the
// continuation so far, else the last context token, else the start row.
class BigramModel final : public LanguageModel {
 public:
  BigramModel(Vocabulary vocab, std::vector<double> start,
              std::vector<std::vector<double>> transitions)
      : vocab_(std::move(vocab)),
        start_(std::move(start)),
        transitions_(std::move(transitions)) {
    const std::size_t n = vocab_.size();
    if (start_.size() != n || transitions_.size() != n) {
      throw ValidationError("bigram table does not match vocabulary size");
    }
    check_row(start_, "<s>");
    for (std::size_t i = 0; i < n; ++i) {
      check_row(transitions_[i], vocab_.token(static_cast<TokenId>(i)));
    }
  }

  // TSV lines "prev<TAB>next<TAB>prob"; prev "<s>" is the start row. Rows
  // that never appear are uniform.
  static BigramModel from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open bigram table " + path);
    struct Entry { std::string prev, next; double p; };
    std::vector<Entry> entries;
    Vocabulary vocab;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream fields(line);
      Entry e;
      std::string p;
      if (!std::getline(fields, e.prev, '\t') ||
          !std::getline(fields, e.next, '\t') || !std::getline(fields, p)) {
        throw ConfigError("malformed bigram line: " + line);
      }
      e.p = std::stod(p);
      if (e.prev != "<s>") vocab.add(e.prev);
      vocab.add(e.next);
      entries.push_back(std::move(e));
    }
    const std::size_t n = vocab.size();
    std::vector<double> start(n, 0.0);
    std::vector<std::vector<double>> table(n, std::vector<double>(n, 0.0));
    std::vector<bool> seen(n, false);
    bool start_seen = false;
    for (const auto& e : entries) {
      const auto next = static_cast<std::size_t>(*vocab.find(e.next));
      if (e.prev == "<s>") {
        start[next] = e.p;
        start_seen = true;
      } else {
        const auto prev = static_cast<std::size_t>(*vocab.find(e.prev));
        table[prev][next] = e.p;
        seen[prev] = true;
      }
    }
    const double u = 1.0 / static_cast<double>(n);
    if (!start_seen) start.assign(n, u);
    for (std::size_t i = 0; i < n; ++i) {
      if (!seen[i]) table[i].assign(n, u);
    }
    return BigramModel(std::move(vocab), std::move(start), std::move(table));
  }

  std::string kind() const override { return "bigram"; }
  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<double> next_token_logprobs(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const override {
    const auto& row = row_for(context, continuation);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::log(row[i]);
    return out;
  }

  double token_logprob(const TokenSequence& context,
                       std::span<const TokenId> continuation,
                       TokenId next) const override {
    return std::log(row_for(context, continuation).at(
        static_cast<std::size_t>(next)));
  }

  double probability(std::optional<TokenId> prev, TokenId next) const {
    const auto& row =
        prev ? transitions_.at(static_cast<std::size_t>(*prev)) : start_;
    return row.at(static_cast<std::size_t>(next));
  }

  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<BigramModel>(*this);
  }

 private:
  static void check_row(const std::vector<double>& row,
                        const std::string& name) {
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) {
        throw ValidationError("negative probability in bigram row " + name);
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ValidationError("bigram row " + name + " does not sum to 1");
    }
  }

  const std::vector<double>& row_for(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const {
    TokenId prev;
    if (!continuation.empty()) {
      prev = continuation.back();
    } else if (!context.empty()) {
      prev = context.tokens.back().id;
    } else {
      return start_;
    }
    if (!vocab_.contains(prev)) {
      throw VocabularyError("bigram conditioning token outside vocabulary");
    }
    return transitions_[static_cast<std::size_t>(prev)];
  }

  Vocabulary vocab_;
  std::vector<double> start_;
  std::vector<std::vector<double>> transitions_;
};

// Multiplicative-factor model used as a differentiable toy. For every
// non-sink token y,
//   P(y | c_1..c_n) = base[y] · exp(Σ_k e(c_k) · u_y),
// where c ranges over context plus continuation so far; the sink token
// takes the remaining mass. e(c)·u_y must be <= 0 so the mass never
// exceeds one. log P(y) is therefore linear in every conditioning
// embedding and additive across positions.
class FactorModel final : public LanguageModel, public EmbeddingGradientModel {
 public:
  FactorModel(Vocabulary vocab, TokenId sink, std::vector<double> base,
              std::vector<std::vector<double>> embeddings,
              std::vector<std::vector<double>> outputs)
      : vocab_(std::move(vocab)),
        sink_(sink),
        base_(std::move(base)),
        embeddings_(std::move(embeddings)),
        outputs_(std::move(outputs)) {
    const std::size_t n = vocab_.size();
    if (!vocab_.contains(sink_) || base_.size() != n ||
        embeddings_.size() != n || outputs_.size() != n) {
      throw ValidationError("factor model tables do not match vocabulary");
    }
    double mass = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
      if (static_cast<TokenId>(y) == sink_) continue;
      if (!(base_[y] >= 0.0)) throw ValidationError("negative base mass");
      mass += base_[y];
    }
    if (mass > 1.0 + 1e-12) throw ValidationError("base mass exceeds one");
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t y = 0; y < n; ++y) {
        if (static_cast<TokenId>(y) != sink_ && log_factor(c, y) > 1e-12) {
          throw ValidationError("factor model needs e(c)·u_y <= 0");
        }
      }
    }
  }

  // One-hot embeddings: e(c)·u_y is the table entry log_factors[c][y].
  static FactorModel from_table(Vocabulary vocab, TokenId sink,
                                std::vector<double> base,
                                const std::vector<std::vector<double>>& log_factors) {
    const std::size_t n = vocab.size();
    std::vector<std::vector<double>> emb(n, std::vector<double>(n, 0.0));
    std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
    for (std::size_t c = 0; c < n; ++c) {
      emb[c][c] = 1.0;
      for (std::size_t y = 0; y < n; ++y) out[y][c] = log_factors.at(c).at(y);
    }
    return FactorModel(std::move(vocab), sink, std::move(base), std::move(emb),
                       std::move(out));
  }

  std::string kind() const override { return "factor"; }
  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<double> next_token_logprobs(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const override {
    const auto probs = distribution(context, continuation);
    std::vector<double> out(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) out[i] = std::log(probs[i]);
    return out;
  }

  std::vector<double> embedding(TokenId id) const override {
    return embeddings_.at(static_cast<std::size_t>(id));
  }

  std::vector<double> context_embedding_gradient(
      const TokenSequence& context, std::size_t position,
      std::span<const TokenId> continuation) const override {
    if (position >= context.size()) {
      throw ValidationError("gradient position outside context");
    }
    const std::size_t dim = embeddings_.front().size();
    std::vector<double> grad(dim, 0.0);
    std::vector<TokenId> so_far;
    for (TokenId y : continuation) {
      if (y != sink_) {
        const auto& u = outputs_[static_cast<std::size_t>(y)];
        for (std::size_t d = 0; d < dim; ++d) grad[d] += u[d];
      } else {
        // d log(1 - Σ P(y)) = -Σ P(y) u_y / P(sink)
        const auto probs = distribution(context, so_far);
        const double p_sink = probs[static_cast<std::size_t>(sink_)];
        for (std::size_t k = 0; k < probs.size(); ++k) {
          if (static_cast<TokenId>(k) == sink_) continue;
          for (std::size_t d = 0; d < dim; ++d) {
            grad[d] -= probs[k] * outputs_[k][d] / p_sink;
          }
        }
      }
      so_far.push_back(y);
    }
    return grad;
  }

  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<FactorModel>(*this);
  }

 private:
  double log_factor(std::size_t c, std::size_t y) const {
    double dot = 0.0;
    for (std::size_t d = 0; d < embeddings_[c].size(); ++d) {
      dot += embeddings_[c][d] * outputs_[y][d];
    }
    return dot;
  }

  std::vector<double> distribution(const TokenSequence& context,
                                   std::span<const TokenId> continuation) const {
    const std::size_t n = vocab_.size();
    std::vector<double> exponent(n, 0.0);
    auto accumulate = [&](TokenId c) {
      if (!vocab_.contains(c)) {
        throw VocabularyError("factor model conditioning token out of range");
      }
      for (std::size_t y = 0; y < n; ++y) {
        exponent[y] += log_factor(static_cast<std::size_t>(c), y);
      }
    };
    for (const auto& t : context.tokens) accumulate(t.id);
    for (TokenId c : continuation) accumulate(c);
    std::vector<double> probs(n, 0.0);
    double mass = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
      if (static_cast<TokenId>(y) == sink_) continue;
      probs[y] = base_[y] * std::exp(exponent[y]);
      mass += probs[y];
    }
    probs[static_cast<std::size_t>(sink_)] = std::max(0.0, 1.0 - mass);
    return probs;
  }

  Vocabulary vocab_;
  TokenId sink_;
  std::vector<double> base_;
  std::vector<std::vector<double>> embeddings_;
  std::vector<std::vector<double>> outputs_;
};

// Rule-driven test double for a dialogue generator.
//
// The first rule whose pattern occurs (case-insensitively) in the context
// surface text selects a weighted set of continuations; with no match the
// default continuations apply. Given a continuation prefix, the next-token
// distribution mixes the selected continuations that agree with the prefix.
// When a forced prefix leaves the script, the shortest suffix of the prefix
// that re-enters a continuation is used, so the script resumes after forced
// tokens. A uniform smoothing mass `smoothing` keeps every token possible.
class ScriptedModel final : public LanguageModel {
 public:
  struct Continuation {
    std::string text;
    double weight = 1.0;
  };
  struct Rule {
    std::string pattern;
    std::vector<Continuation> responses;
  };
  struct Options {
    double smoothing = 1e-4;
    std::optional<std::size_t> context_window;
    std::vector<std::string> extra_words;
  };

  ScriptedModel(std::vector<Rule> rules,
                std::vector<Continuation> default_responses)
      : ScriptedModel(std::move(rules), std::move(default_responses),
                      Options{}) {}

  ScriptedModel(std::vector<Rule> rules,
                std::vector<Continuation> default_responses, Options options)
      : rules_(std::move(rules)),
        default_(std::move(default_responses)),
        options_(std::move(options)) {
    if (!(options_.smoothing > 0.0 && options_.smoothing < 1.0)) {
      throw ValidationError("scripted model smoothing must be in (0, 1)");
    }
    if (default_.empty()) default_.push_back({"", 1.0});
    vocab_.set_eos("</s>");
    vocab_.set_unk("<unk>");
    auto add_words = [&](const std::string& text) {
      for (const auto& s : split_words(text)) vocab_.add(slice(text, s));
    };
    for (auto& rule : rules_) {
      rule.pattern = to_lower(rule.pattern);
      add_words(rule.pattern);
      check_responses(rule.responses);
      for (const auto& r : rule.responses) add_words(r.text);
    }
    check_responses(default_);
    for (const auto& r : default_) add_words(r.text);
    for (const auto& w : options_.extra_words) add_words(w);
    compiled_rules_.reserve(rules_.size());
    for (const auto& rule : rules_) compiled_rules_.push_back(compile(rule.responses));
    compiled_default_ = compile(default_);
  }

  // One rule per line: pattern<TAB>continuation<TAB>weight. Lines sharing a
  // pattern form one rule; pattern "*" declares the default continuation.
  static ScriptedModel from_file(const std::string& path) {
    return from_file(path, Options{});
  }

  static ScriptedModel from_file(const std::string& path, Options options) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open rules file " + path);
    std::vector<Rule> rules;
    std::vector<Continuation> defaults;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::istringstream fields(line);
      std::string pattern, response, weight;
      if (!std::getline(fields, pattern, '\t') ||
          !std::getline(fields, response, '\t')) {
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": expected pattern<TAB>continuation<TAB>weight");
      }
      std::getline(fields, weight);
      Continuation c{response, weight.empty() ? 1.0 : std::stod(weight)};
      if (pattern == "*") {
        defaults.push_back(std::move(c));
        continue;
      }
      auto it = std::find_if(rules.begin(), rules.end(), [&](const Rule& r) {
        return r.pattern == pattern;
      });
      if (it == rules.end()) {
        rules.push_back({pattern, {std::move(c)}});
      } else {
        it->responses.push_back(std::move(c));
      }
    }
    return ScriptedModel(std::move(rules), std::move(defaults),
                         std::move(options));
  }

  std::string kind() const override { return "scripted"; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::optional<std::size_t> context_window() const override {
    return options_.context_window;
  }

  // Index of the rule selected for `context`, or nullopt for the default.
  std::optional<std::size_t> matching_rule(std::string_view context) const {
    const std::string lowered = to_lower(context);
    for (std::size_t i = 0; i < rules_.size(); ++i) {
      if (lowered.find(rules_[i].pattern) != std::string::npos) return i;
    }
    return std::nullopt;
  }

  std::vector<double> next_token_logprobs(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const override {
    const auto script = scripted_distribution(context, continuation);
    const double floor =
        options_.smoothing / static_cast<double>(vocab_.size());
    std::vector<double> out(vocab_.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = std::log((1.0 - options_.smoothing) * script[i] + floor);
    }
    return out;
  }

  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<ScriptedModel>(*this);
  }

 private:
  struct Compiled {
    std::vector<std::vector<TokenId>> sequences;  // each ends with eos
    std::vector<double> weights;
  };

  static void check_responses(const std::vector<Continuation>& responses) {
    for (const auto& r : responses) {
      if (!(r.weight > 0.0) || !std::isfinite(r.weight)) {
        throw ValidationError("continuation weight must be positive: " + r.text);
      }
    }
  }

  Compiled compile(const std::vector<Continuation>& responses) const {
    Compiled out;
    for (const auto& r : responses) {
      auto ids = parley::tokenize(vocab_, r.text).ids();
      ids.push_back(*vocab_.eos());
      out.sequences.push_back(std::move(ids));
      out.weights.push_back(r.weight);
    }
    return out;
  }

  std::vector<double> scripted_distribution(
      const TokenSequence& context,
      std::span<const TokenId> continuation) const {
    const auto rule = matching_rule(context.surface_text);
    const Compiled& compiled = rule ? compiled_rules_[*rule] : compiled_default_;
    std::vector<double> probs(vocab_.size(), 0.0);
    for (std::size_t skip = 0; skip <= continuation.size(); ++skip) {
      const auto tail = continuation.subspan(skip);
      double total = 0.0;
      for (std::size_t k = 0; k < compiled.sequences.size(); ++k) {
        const auto& seq = compiled.sequences[k];
        if (tail.size() >= seq.size() ||
            !std::equal(tail.begin(), tail.end(), seq.begin())) {
          continue;
        }
        probs[static_cast<std::size_t>(seq[tail.size()])] += compiled.weights[k];
        total += compiled.weights[k];
      }
      if (total > 0.0) {
        for (double& p : probs) p /= total;
        return probs;
      }
    }
    // The empty tail matches every continuation, so the loop always returns.
    return probs;
  }

  std::vector<Rule> rules_;
  std::vector<Continuation> default_;
  Options options_;
  Vocabulary vocab_;
  std::vector<Compiled> compiled_rules_;
  Compiled compiled_default_;
};

}  // namespace parley
