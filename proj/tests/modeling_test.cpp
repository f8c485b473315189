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

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "parley/models.hpp"
#include "parley/modeling.hpp"

namespace parley {
namespace {

DecodeParams Greedy(std::size_t max_new = 16) {
  DecodeParams p;
  p.temperature = 0.0;
  p.max_new_tokens = max_new;
  return p;
}

// Three-state chain with a hand-set table; the oracle values below are
// products read straight off these rows.
BigramModel ToyBigram() {
  Vocabulary v({"a", "b", "c"});
  return BigramModel(v, {0.5, 0.3, 0.2},
                     {{0.1, 0.6, 0.3}, {0.4, 0.4, 0.2}, {0.7, 0.2, 0.1}});
}

ScriptedModel HelloModel() {
  return ScriptedModel({{"hi", {{"hello", 1.0}}}}, {{"tell me more", 1.0}});
}

TEST(TokenizeTest, SpansAreOrderedAndInsideText) {
  Vocabulary v;
  v.set_unk("<unk>");
  const std::string text = "  well, hello there!  ";
  const auto seq = tokenize(v, text);
  ASSERT_EQ(seq.size(), 5u);
  EXPECT_EQ(seq.token_text(0), "well");
  EXPECT_EQ(seq.token_text(1), ",");
  EXPECT_EQ(seq.token_text(4), "!");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_LE(seq.tokens[i].span.end, text.size());
    if (i > 0) {
      EXPECT_LE(seq.tokens[i - 1].span.end, seq.tokens[i].span.begin);
    }
  }
}

TEST(TokenizeTest, UnknownWordWithoutUnkThrows) {
  Vocabulary v({"a"});
  EXPECT_THROW(tokenize(v, "a b"), VocabularyError);
}

TEST(TokenizeTest, RoundTripProperty) {
  const std::vector<std::string> words = {"the", "cat", "sat", ",", "on", "mat",
                                          "!", "don't", "x-ray"};
  Vocabulary v(words);
  std::mt19937 rng(7);
  const std::vector<std::string> gaps = {" ", "  ", "\n", "\t ", ""};
  for (int trial = 0; trial < 300; ++trial) {
    std::string text = gaps[rng() % 4];
    const int n = static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      text += words[rng() % words.size()];
      text += gaps[rng() % 4];  // never empty: adjacent words would merge
    }
    const auto seq = tokenize(v, text);
    EXPECT_EQ(detokenize(v, seq), text);
    EXPECT_EQ(seq.surface_text, text);
  }
}

TEST(GenerateTest, ScriptedRuleResponds) {
  const auto model = HelloModel();
  const auto out = generate(model, model.tokenize("hi"), Greedy());
  EXPECT_EQ(out.text.surface_text, "hello");
  EXPECT_EQ(out.token_logprobs.size(), out.text.size());
}

TEST(GenerateTest, ForcedPrefixLeadsOutput) {
  const auto model = HelloModel();
  auto params = Greedy();
  params.forced_prefix = "garbage";
  const auto out = generate(model, model.tokenize("hi"), params);
  EXPECT_EQ(out.text.surface_text.rfind("garbage", 0), 0u);
  EXPECT_EQ(out.text.surface_text, "garbage hello");
  EXPECT_EQ(out.token_logprobs.size(), out.text.size());
  for (double lp : out.token_logprobs) EXPECT_LE(lp, 0.0);
}

TEST(GenerateTest, FixedSeedIsReproducible) {
  const auto model = ScriptedModel::from_file(PARLEY_TEST_DATA_DIR "/smalltalk.rules");
  DecodeParams p;
  p.temperature = 1.5;
  p.top_k = 0;
  p.seed = 1234;
  const auto ctx = model.tokenize("how is the weather");
  const auto a = generate(model, ctx, p);
  const auto b = generate(model, ctx, p);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.token_logprobs, b.token_logprobs);
}

TEST(GenerateTest, SeedsExploreWeightedContinuations) {
  const auto model = ScriptedModel::from_file(PARLEY_TEST_DATA_DIR "/smalltalk.rules");
  DecodeParams p;
  p.temperature = 1.0;
  p.top_k = 3;
  const auto ctx = model.tokenize("the weather");
  int sunny = 0;
  int rain = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    p.seed = seed;
    const auto text = generate(model, ctx, p).text.surface_text;
    if (text == "it is sunny today") ++sunny;
    if (text == "it might rain") ++rain;
  }
  EXPECT_EQ(sunny + rain, 200);
  EXPECT_GT(sunny, rain);  // weights 3 : 1
}

TEST(GenerateTest, ContextOverflow) {
  ScriptedModel::Options opts;
  opts.context_window = 2;
  ScriptedModel model({}, {{"ok", 1.0}}, opts);
  EXPECT_THROW(generate(model, model.tokenize("one two three"), Greedy()),
               ContextOverflowError);
}

TEST(GenerateTest, InvalidParams) {
  const auto model = HelloModel();
  auto p = Greedy();
  p.max_new_tokens = 0;
  EXPECT_THROW(generate(model, model.tokenize("hi"), p), ValidationError);
  p = Greedy();
  p.temperature = -1.0;
  EXPECT_THROW(generate(model, model.tokenize("hi"), p), ValidationError);
}

TEST(ScriptedModelTest, FirstMatchingRuleWins) {
  ScriptedModel model({{"cat", {{"meow", 1.0}}}, {"cat food", {{"yum", 1.0}}}},
                      {{"hm", 1.0}});
  EXPECT_EQ(generate(model, model.tokenize("cat food please"), Greedy())
                .text.surface_text,
            "meow");
  EXPECT_EQ(generate(model, model.tokenize("dog"), Greedy()).text.surface_text, "hm");
}

TEST(ScriptedModelTest, RulesFileGroupsPatterns) {
  const auto model = ScriptedModel::from_file(PARLEY_TEST_DATA_DIR "/smalltalk.rules");
  EXPECT_EQ(model.matching_rule("Hi!"), std::optional<std::size_t>(0));
  EXPECT_EQ(model.matching_rule("WEATHER?"), std::optional<std::size_t>(1));
  EXPECT_EQ(model.matching_rule("no match"), std::nullopt);
  EXPECT_THROW(ScriptedModel::from_file("/nonexistent.rules"), ConfigError);
}

TEST(ContinuationLogprobTest, UniformTwoTokens) {
  const auto model = UniformModel::with_size(4);
  const auto cont = model.tokenize("w1 w3");
  const auto s = continuation_logprob(model, TokenSequence{}, cont);
  EXPECT_NEAR(s.total, -2.772588722239781, 1e-12);
  ASSERT_EQ(s.per_token.size(), 2u);
}

TEST(ContinuationLogprobTest, EmptyContinuation) {
  const auto model = UniformModel::with_size(4);
  const auto s = continuation_logprob(model, model.tokenize("w0"), TokenSequence{});
  EXPECT_EQ(s.total, 0.0);
  EXPECT_TRUE(s.per_token.empty());
}

TEST(ContinuationLogprobTest, BigramMatchesHandProduct) {
  const auto model = ToyBigram();
  // P(b|a) P(c|b) P(a|c) = 0.6 * 0.2 * 0.7 = 0.084
  const auto s = continuation_logprob(model, model.tokenize("a"), model.tokenize("b c a"));
  EXPECT_NEAR(s.total, -2.4769384801388235, 1e-12);
  EXPECT_NEAR(s.per_token[0], std::log(0.6), 1e-15);
  EXPECT_NEAR(s.per_token[1], std::log(0.2), 1e-15);
  EXPECT_NEAR(s.per_token[2], std::log(0.7), 1e-15);
}

TEST(ContinuationLogprobTest, OutOfVocabularyId) {
  const auto model = UniformModel::with_size(4);
  const std::vector<TokenId> bad = {7};
  EXPECT_THROW(continuation_logprob(model, TokenSequence{}, bad), VocabularyError);
}

TEST(ContinuationLogprobTest, MatchesGreedyGenerationLogprobs) {
  const auto model = ScriptedModel::from_file(PARLEY_TEST_DATA_DIR "/smalltalk.rules");
  for (const std::string ctx_text : {"hi", "the weather", "anything else"}) {
    const auto ctx = model.tokenize(ctx_text);
    const auto out = generate(model, ctx, Greedy());
    double sum = 0.0;
    for (double lp : out.token_logprobs) sum += lp;
    EXPECT_NEAR(continuation_logprob(model, ctx, out.text).total, sum, 1e-12);
  }
}

TEST(PerplexityTest, UniformFiftyIsExactlyFifty) {
  const auto model = UniformModel::with_size(50);
  for (const std::string text : {"w0", "w3 w9 w49 w0", "w1 w2 w3 w4 w5 w6 w7"}) {
    EXPECT_EQ(perplexity(model, model.tokenize(text)), 50.0) << text;
  }
}

TEST(PerplexityTest, CertainModelIsOne) {
  Vocabulary v({"a", "b"});
  BigramModel model(v, {1.0, 0.0}, {{0.0, 1.0}, {1.0, 0.0}});
  EXPECT_EQ(perplexity(model, model.tokenize("a b a b")), 1.0);
}

TEST(PerplexityTest, BigramMatchesHandFormula) {
  const auto model = ToyBigram();
  // start(a) P(b|a) P(b|b) P(c|b) = 0.5 * 0.6 * 0.4 * 0.2 = 0.024
  EXPECT_NEAR(perplexity(model, model.tokenize("a b b c")), 2.540663740773074, 1e-9);
}

TEST(PerplexityTest, ZeroProbabilityIsInfinite) {
  Vocabulary v({"a", "b"});
  BigramModel model(v, {1.0, 0.0}, {{0.0, 1.0}, {1.0, 0.0}});
  EXPECT_TRUE(std::isinf(perplexity(model, model.tokenize("b a"))));
}

TEST(PerplexityTest, EmptyTextRejected) {
  const auto model = UniformModel::with_size(3);
  EXPECT_THROW(perplexity(model, TokenSequence{}), ValidationError);
}

TEST(PerplexityTest, IdentityWithContinuationLogprob) {
  const auto model = ToyBigram();
  std::mt19937 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    const int n = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < n; ++i) text += std::string(1, "abc"[rng() % 3]) + " ";
    const auto seq = model.tokenize(text);
    const double expected = std::exp(
        -continuation_logprob(model, TokenSequence{}, seq).total / seq.size());
    EXPECT_NEAR(perplexity(model, seq), expected, 1e-9 * expected);
  }
}

TEST(ReplacementScoresTest, SingletonVocabulary) {
  const auto model = UniformModel::with_size(1);
  const auto trigger = model.tokenize("w0 w0");
  const auto targets = std::vector<TokenSequence>{model.tokenize("w0")};
  const auto scores =
      replacement_scores(model, trigger, targets, 1, ReplacementMode::kExact);
  ASSERT_EQ(scores.size(), 1u);
  EXPECT_EQ(scores.at(0), corpus_logprob(model, trigger.ids(), targets));
}

TEST(ReplacementScoresTest, ExactMatchesBruteForceOnBigram) {
  // Six tokens; the substituted position is the last trigger token, which
  // is what the first target token conditions on.
  Vocabulary v({"t0", "t1", "t2", "t3", "t4", "t5"});
  std::vector<std::vector<double>> rows(6, std::vector<double>(6));
  for (int i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 6; ++j) sum += rows[i][j] = 1.0 + ((i * 7 + j * 3) % 5);
    for (int j = 0; j < 6; ++j) rows[i][j] /= sum;
  }
  const std::vector<double> start(6, 1.0 / 6.0);
  BigramModel model(v, start, rows);
  const auto trigger = model.tokenize("t2 t4");
  const std::vector<TokenSequence> targets = {model.tokenize("t1 t5"),
                                              model.tokenize("t3")};
  const auto scores =
      replacement_scores(model, trigger, targets, 1, ReplacementMode::kExact);
  ASSERT_EQ(scores.size(), 6u);
  for (int cand = 0; cand < 6; ++cand) {
    const double oracle = std::log(rows[cand][1]) + std::log(rows[1][5]) +
                          std::log(rows[cand][3]);
    EXPECT_NEAR(scores.at(cand), oracle, 1e-12) << cand;
  }
}

// Factor model with random non-positive log factors over 5 tokens, token 4
// acting as sink.
struct ToyTables {
  std::vector<std::vector<double>> emb;
  std::vector<std::vector<double>> out;
};

ToyTables LinearToyTables(unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> neg(-2.0, 0.0);
  ToyTables t{std::vector<std::vector<double>>(5, std::vector<double>(3)),
              std::vector<std::vector<double>>(5, std::vector<double>(3))};
  for (auto& e : t.emb) for (auto& x : e) x = -neg(rng);  // positive
  for (auto& u : t.out) for (auto& x : u) x = neg(rng);   // negative
  return t;
}

FactorModel FactorFrom(const ToyTables& t) {
  return FactorModel(Vocabulary({"p0", "p1", "p2", "p3", "p4"}), 4,
                     {0.2, 0.2, 0.2, 0.2, 0.0}, t.emb, t.out);
}

FactorModel LinearToy(unsigned seed) { return FactorFrom(LinearToyTables(seed)); }

TEST(ReplacementScoresTest, LinearizedTopOneMatchesExact) {
  for (unsigned seed = 1; seed <= 20; ++seed) {
    const auto model = LinearToy(seed);
    const auto trigger = model.tokenize("p0 p1 p2");
    const std::vector<TokenSequence> targets = {model.tokenize("p3"),
                                                model.tokenize("p1 p2")};
    for (std::size_t pos = 0; pos < 3; ++pos) {
      const auto exact =
          replacement_scores(model, trigger, targets, pos, ReplacementMode::kExact);
      const auto lin = replacement_scores(model, trigger, targets, pos,
                                          ReplacementMode::kLinearized);
      auto top = [](const std::map<TokenId, double>& m) {
        return std::max_element(m.begin(), m.end(), [](auto& a, auto& b) {
                 return a.second < b.second;
               })->first;
      };
      EXPECT_EQ(top(lin), top(exact)) << "seed " << seed << " pos " << pos;
      // Targets avoid the sink, so the objective is linear and the estimate
      // is exact.
      for (const auto& [tok, value] : exact) EXPECT_NEAR(lin.at(tok), value, 1e-9);
    }
  }
}

TEST(ReplacementScoresTest, CapacityAndCapability) {
  const auto model = UniformModel::with_size(10);
  const auto trigger = model.tokenize("w0");
  const std::vector<TokenSequence> targets = {model.tokenize("w1")};
  ReplacementOptions small;
  small.exact_vocab_cap = 5;
  EXPECT_THROW(replacement_scores(model, trigger, targets, 0,
                                  ReplacementMode::kExact, small),
               CapacityError);
  EXPECT_THROW(replacement_scores(model, trigger, targets, 0,
                                  ReplacementMode::kLinearized),
               UnsupportedError);
  EXPECT_THROW(replacement_scores(model, trigger, targets, 3,
                                  ReplacementMode::kExact),
               ValidationError);
}

TEST(FactorModelTest, GradientMatchesFiniteDifferences) {
  // Dense embeddings so the sink target's gradient is exercised too.
  const auto model = LinearToy(42);
  const auto ctx = model.tokenize("p0 p2");
  const std::vector<TokenId> cont = {4, 1};  // sink first
  const auto grad = model.context_embedding_gradient(ctx, 1, cont);

  const auto f = [&](const std::vector<double>& e2) {
    auto tables = LinearToyTables(42);
    tables.emb[2] = e2;
    return continuation_logprob(FactorFrom(tables), ctx, cont).total;
  };
  const auto e2 = model.embedding(2);
  for (std::size_t d = 0; d < e2.size(); ++d) {
    const double h = 1e-6;
    auto up = e2, down = e2;
    up[d] += h;
    down[d] -= h;
    EXPECT_NEAR(grad[d], (f(up) - f(down)) / (2 * h), 1e-5) << d;
  }
}

}  // namespace
}  // namespace parley
