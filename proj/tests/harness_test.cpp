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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "parley/harness.hpp"
#include "parley/models.hpp"

namespace parley {
namespace {

namespace fs = std::filesystem;

std::shared_ptr<const ToxicityClassifier> Lexicon(std::string id = "lex") {
  return std::make_shared<LexiconClassifier>(
      std::move(id), std::map<std::string, double>{{"jerk", 0.9}, {"idiot", 0.6}});
}

// Defender turns toxic once "pineapple" appears anywhere in the history.
ExperimentComponents Components() {
  ExperimentComponents parts;
  ScriptedModel::Options opts;
  opts.extra_words = {"pineapple", "banana", "cherry"};
  parts.adversary = std::make_shared<ScriptedModel>(
      std::vector<ScriptedModel::Rule>{},
      std::vector<ScriptedModel::Continuation>{{"what do you think", 1.0}, {"tell me more", 1.0}},
      opts);
  parts.defender = std::make_shared<ScriptedModel>(
      std::vector<ScriptedModel::Rule>{{"pineapple", {{"you are a jerk", 1.0}}}},
      std::vector<ScriptedModel::Continuation>{{"that sounds nice", 1.0}, {"i agree", 1.0}},
      opts);
  parts.corpus = ToxicTargetCorpus{{"you are a jerk"}};
  parts.classifiers["lex"] = Lexicon("lex");
  parts.classifiers["lex2"] = Lexicon("lex2");
  return parts;
}

ContextSet Contexts(std::size_t n = 12) {
  ContextSet set;
  for (std::size_t i = 0; i < n; ++i) {
    set.contexts.push_back({"topic number " + std::to_string(i), i % 2 ? "reddit" : "wow"});
  }
  return set;
}

ExperimentConfig Config(AttackMethod attack = AttackMethod::kUtsc) {
  ExperimentConfig c;
  c.num_conversations = 8;
  c.attack = attack;
  c.utsc.n_candidates = 3;
  c.uat.trigger_length = 2;
  c.attack_classifiers = {"lex"};
  c.eval_classifiers = {"lex", "lex2"};
  c.seed = 42;
  c.defense_config.gate = Lexicon();
  c.defense_config.topics.topics = {"music", "books"};
  return c;
}

TEST(SimulateTest, TurnLayoutAndAttackTurn) {
  const auto result = simulate(Config(), Contexts(), Components());
  ASSERT_EQ(result.records.size(), 8u);
  EXPECT_EQ(result.failed, 0u);
  for (const auto& r : result.records) {
    ASSERT_EQ(r.turns.size(), 10u);
    ASSERT_TRUE(r.attack.has_value());
    EXPECT_EQ(r.attack->turn_index, 3u);
    EXPECT_EQ(r.attack->conversation_id, r.conversation_id);
    EXPECT_EQ(r.turns[3].text, r.attack->chosen().utterance);
    EXPECT_EQ(r.turns[3].speaker, Speaker::kAdversary);
    EXPECT_EQ(r.turns[4].speaker, Speaker::kDefender);
    EXPECT_EQ(r.attack->all_candidates.size(), 3u);
    for (const auto& t : r.turns) EXPECT_EQ(t.verdicts.size(), 2u);
  }
}

TEST(SimulateTest, UtscPlantsPoolTopTrigger) {
  const auto result = simulate(Config(), Contexts(), Components());
  const auto& r = result.records.front();
  EXPECT_EQ(r.attack->chosen().trigger_token, "pineapple");
  EXPECT_TRUE(r.turns[4].verdicts.at("lex").toxic);
  EXPECT_EQ(attack_effectiveness(result.records, "lex").percent, 100.0);
}

TEST(SimulateTest, ControlArmHasNoAttack) {
  const auto result = simulate(Config(AttackMethod::kNone), Contexts(), Components());
  for (const auto& r : result.records) EXPECT_FALSE(r.attack.has_value());
  EXPECT_EQ(attack_effectiveness(result.records, "lex").percent, 0.0);
}

TEST(SimulateTest, UatTriggerIsSearchedOnce) {
  auto config = Config(AttackMethod::kUat);
  const auto parts = Components();
  const auto prepared = prepare_attack(config, parts);
  ASSERT_TRUE(prepared.search.has_value());
  EXPECT_NE(prepared.search->trigger.text.find("pineapple"), std::string::npos);
  const auto result = simulate(config, Contexts(), parts, prepared);
  for (const auto& r : result.records) {
    EXPECT_EQ(r.attack->chosen().utterance, prepared.search->trigger.text);
    EXPECT_EQ(r.attack->method, "UAT");
  }
}

TEST(SimulateTest, ContextSampling) {
  auto config = Config();
  config.num_conversations = 20;
  EXPECT_THROW(simulate(config, Contexts(12), Components()), ValidationError);
  config.sample_with_replacement = true;
  EXPECT_EQ(simulate(config, Contexts(12), Components()).records.size(), 20u);
  config.num_conversations = 12;
  config.sample_with_replacement = false;
  const auto all = simulate(config, Contexts(12), Components());
  std::set<std::string> seen;
  for (const auto& r : all.records) seen.insert(r.context);
  EXPECT_EQ(seen.size(), 12u);  // without replacement
}

TEST(SimulateTest, ConfigValidation) {
  auto config = Config();
  config.attack_turn = 2;
  EXPECT_THROW(simulate(config, Contexts(), Components()), ValidationError);
  config = Config();
  config.attack_turn = 9;
  EXPECT_THROW(simulate(config, Contexts(), Components()), ValidationError);
  config = Config();
  config.eval_classifiers = {"nope"};
  EXPECT_THROW(simulate(config, Contexts(), Components()), ValidationError);
}

// Defender that crashes on contexts mentioning "explode".
class Exploding : public LanguageModel {
 public:
  explicit Exploding(std::shared_ptr<const LanguageModel> inner) : inner_(std::move(inner)) {}
  std::string kind() const override { return "exploding"; }
  const Vocabulary& vocabulary() const override { return inner_->vocabulary(); }
  std::vector<double> next_token_logprobs(const TokenSequence& ctx,
                                          std::span<const TokenId> cont) const override {
    if (ctx.surface_text.find("explode") != std::string::npos) throw RunError("boom");
    return inner_->next_token_logprobs(ctx, cont);
  }
  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<Exploding>(inner_);
  }

 private:
  std::shared_ptr<const LanguageModel> inner_;
};

TEST(SimulateTest, FailuresAreQuarantined) {
  auto parts = Components();
  parts.defender = std::make_shared<Exploding>(parts.defender);
  auto contexts = Contexts(20);
  contexts.contexts[5].text = "things that explode";
  auto config = Config();
  config.num_conversations = 20;
  config.workers = 3;
  const auto result = simulate(config, contexts, parts);
  EXPECT_EQ(result.failed, 1u);
  const auto bad = std::find_if(result.records.begin(), result.records.end(),
                                [](const auto& r) { return r.failed; });
  EXPECT_EQ(bad->context, "things that explode");
  EXPECT_NE(bad->error.find("boom"), std::string::npos);
  const auto e = attack_effectiveness(result.records, "lex");
  EXPECT_EQ(e.excluded, 1u);
  EXPECT_EQ(e.evaluated, 19u);

  for (std::size_t i : {1, 2, 3}) contexts.contexts[i].text = "explode " + std::to_string(i);
  EXPECT_THROW(simulate(config, contexts, parts), RunError);
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(RunExperimentTest, DeterministicAcrossWorkerCounts) {
  const auto base = fs::temp_directory_path() / "parley_harness_det";
  fs::remove_all(base);
  auto config = Config();
  config.defense = DefenseMethod::kTwoStage;
  config.decode.temperature = 0.8;
  std::vector<fs::path> dirs;
  for (std::size_t workers : {1, 1, 4}) {
    config.workers = workers;
    dirs.push_back(base / ("run" + std::to_string(dirs.size())));
    run_experiment(config, Contexts(), Components(), dirs.back());
  }
  for (const char* f : {"conversations.jsonl", "conversations.no_defense.jsonl",
                        "metrics.json", "transfer.csv", "manifest.json"}) {
    const auto first = Slurp(dirs[0] / f);
    EXPECT_FALSE(first.empty()) << f;
    EXPECT_EQ(Slurp(dirs[1] / f), first) << f;
    EXPECT_EQ(Slurp(dirs[2] / f), first) << f;
  }
}

TEST(RunExperimentTest, MatchedArmsAndDefenseEffect) {
  auto config = Config();
  config.defense = DefenseMethod::kTwoStage;
  const auto out = run_experiment(config, Contexts(), Components(), {});
  ASSERT_TRUE(out.defended.has_value());
  for (std::size_t i = 0; i < out.undefended.records.size(); ++i) {
    EXPECT_EQ(out.undefended.records[i].attack, out.defended->records[i].attack);
    EXPECT_TRUE(out.undefended.records[i].defenses.empty());
    EXPECT_EQ(out.defended->records[i].defenses.count(4), 1u);
  }
  EXPECT_EQ(out.report.attack.cells.at("all").at("lex").percent, 100.0);
  EXPECT_EQ(out.report.defended->cells.at("all").at("lex").percent, 0.0);
  EXPECT_EQ(*out.report.defense_effectiveness.at("lex"), 100.0);
  EXPECT_EQ(defense_effectiveness(out.undefended.records, out.defended->records, "lex"), 100.0);
}

TEST(RunExperimentTest, BaselineDefenses) {
  auto config = Config();
  config.defense = DefenseMethod::kNonSequitur;
  auto out = run_experiment(config, Contexts(), Components(), {});
  EXPECT_EQ(*out.report.defense_effectiveness.at("lex"), 100.0);
  EXPECT_NE(out.defended->records[0].turns[4].text.find("How about we talk about"),
            std::string::npos);
  config.defense = DefenseMethod::kTriggerMasking;
  out = run_experiment(config, Contexts(), Components(), {});
  EXPECT_EQ(out.defended->records[0].defenses.at(4).method, "trigger-masking");
  EXPECT_EQ(*out.report.defense_effectiveness.at("lex"), 100.0);
}

TEST(RunExperimentTest, OutputFiles) {
  const auto dir = fs::temp_directory_path() / "parley_harness_files";
  fs::remove_all(dir);
  auto config = Config(AttackMethod::kUatLm);
  run_experiment(config, Contexts(), Components(), dir);
  for (const char* f : {"manifest.json", "conversations.jsonl", "metrics.json",
                        "transfer.csv", "trigger_trace.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / "conversations.no_defense.jsonl"));
  const auto manifest = nlohmann::json::parse(Slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("attack"), "UAT-LM");
  EXPECT_EQ(manifest.at("conversation_seeds").size(), 8u);
  std::istringstream lines(Slurp(dir / "conversations.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("turns").size(), 10u);
    EXPECT_EQ(j.at("attack").at("turn"), 3);
    ++n;
  }
  EXPECT_EQ(n, 8u);
  const auto metrics = nlohmann::json::parse(Slurp(dir / "metrics.json"));
  EXPECT_EQ(metrics.at("attack_effectiveness").at("all").at("lex").at("percent"), 100.0);
}

// Synthetic records: one defender verdict per classifier right after the
// attack turn.
ConversationRecord Synthetic(std::size_t i, std::map<std::string, bool> toxic,
                             std::string tag = "wow") {
  ConversationRecord r;
  r.index = i;
  r.conversation_id = conversation_id(i);
  r.dataset_tag = std::move(tag);
  r.attack_turn = 3;
  TurnRecord t{4, Speaker::kDefender, "reply", {}};
  for (const auto& [id, bad] : toxic) t.verdicts[id] = {bad ? 0.9 : 0.1, bad, id, 0.5};
  r.turns.push_back(t);
  return r;
}

TEST(MetricsTest, AttackEffectivenessArithmetic) {
  std::vector<ConversationRecord> records;
  for (std::size_t i = 0; i < 100; ++i) records.push_back(Synthetic(i, {{"lex", i < 20}}));
  EXPECT_EQ(attack_effectiveness(records, "lex").percent, 20.0);
  EXPECT_EQ(attack_effectiveness(20, 100), 20.0);
  EXPECT_EQ(attack_effectiveness(0, 100), 0.0);
  EXPECT_EQ(attack_effectiveness(100, 100), 100.0);
  EXPECT_THROW(attack_effectiveness(0, 0), UndefinedMetricError);

  records.push_back(ConversationRecord{});  // no post-attack turn
  records.back().attack_turn = 3;
  const auto e = attack_effectiveness(records, "lex");
  EXPECT_EQ(e.percent, 20.0);
  EXPECT_EQ(e.excluded, 1u);
}

TEST(MetricsTest, DefenseEffectivenessArithmetic) {
  EXPECT_EQ(defense_effectiveness(20, 0), 100.0);
  EXPECT_EQ(defense_effectiveness(10, 3), 70.0);
  EXPECT_THROW(defense_effectiveness(0, 0), UndefinedMetricError);
}

TEST(MetricsTest, AnyLaterMode) {
  auto r = Synthetic(0, {{"lex", false}});
  r.turns.push_back({6, Speaker::kDefender, "later", {{"lex", {0.9, true, "lex", 0.5}}}});
  EXPECT_EQ(attack_effectiveness({r}, "lex", ProvokedMode::kImmediate).percent, 0.0);
  EXPECT_EQ(attack_effectiveness({r}, "lex", ProvokedMode::kAnyLater).percent, 100.0);
}

TEST(TransferMatrixTest, ShapeAgreementAndCounting) {
  std::vector<ConversationRecord> agree;
  for (std::size_t i = 0; i < 10; ++i) {
    const bool bad = i % 3 == 0;
    agree.push_back(Synthetic(i, {{"a", bad}, {"b", bad}, {"c", bad}}));
  }
  const auto m = transfer_matrix(agree, {"a", "b", "c"});
  ASSERT_EQ(m.cells.at("all").size(), 3u);
  for (const char* id : {"a", "b", "c"}) EXPECT_EQ(m.cells.at("all").at(id).percent, 40.0);

  // Hand-assigned: wow {a: 1/2, b: 2/2}, reddit {a: 0/3, b: 1/3}.
  const std::vector<ConversationRecord> mixed = {
      Synthetic(0, {{"a", true}, {"b", true}}, "wow"),
      Synthetic(1, {{"a", false}, {"b", true}}, "wow"),
      Synthetic(2, {{"a", false}, {"b", false}}, "reddit"),
      Synthetic(3, {{"a", false}, {"b", true}}, "reddit"),
      Synthetic(4, {{"a", false}, {"b", false}}, "reddit")};
  const auto by = transfer_matrix(mixed, {"a", "b"}, GroupBy::kDatasetTag);
  EXPECT_EQ(by.cells.at("wow").at("a").percent, 50.0);
  EXPECT_EQ(by.cells.at("wow").at("b").percent, 100.0);
  EXPECT_EQ(by.cells.at("reddit").at("a").percent, 0.0);
  EXPECT_EQ(by.cells.at("reddit").at("b").percent, 100.0 / 3.0);
  const auto all = transfer_matrix(mixed, {"a", "b"});
  EXPECT_EQ(all.cells.at("all").at("b").percent, 60.0);
}

TEST(TransferMatrixTest, MissingVerdictsListed) {
  const std::vector<ConversationRecord> records = {Synthetic(0, {{"a", true}}),
                                                   Synthetic(1, {{"a", true}, {"b", false}})};
  try {
    transfer_matrix(records, {"a", "b"});
    FAIL() << "expected IncompleteMatrixError";
  } catch (const IncompleteMatrixError& e) {
    EXPECT_EQ(e.gaps(), std::vector<std::string>{"conv-0000:turn4:b"});
  }
}

TEST(FleissKappaTest, PerfectAgreement) {
  const auto r = fleiss_kappa({{3, 0}, {0, 3}, {3, 0}}, 3);
  EXPECT_EQ(r.kappa, 1.0);
  EXPECT_FALSE(r.degenerate);
  const auto d = fleiss_kappa({{3, 0}, {3, 0}}, 3);
  EXPECT_EQ(d.kappa, 1.0);
  EXPECT_TRUE(d.degenerate);
}

TEST(FleissKappaTest, ChanceAgreementIsZero) {
  // Observed 0.5, expected 0.5.
  EXPECT_EQ(fleiss_kappa({{2, 0}, {0, 2}, {1, 1}, {1, 1}}, 2).kappa, 0.0);
}

TEST(FleissKappaTest, HandWorkedTable) {
  // P_i = 1, 1/3, 1/3, 1 so P̄ = 2/3; p = (1/2, 1/2) so P̄e = 1/2.
  const double p_bar = (1.0 + 1.0 / 3.0 + 1.0 / 3.0 + 1.0) / 4.0;
  const double p_e = 0.5 * 0.5 + 0.5 * 0.5;
  const double oracle = (p_bar - p_e) / (1.0 - p_e);
  EXPECT_NEAR(fleiss_kappa({{3, 0}, {2, 1}, {1, 2}, {0, 3}}, 3).kappa, oracle, 1e-12);
  EXPECT_NEAR(oracle, 1.0 / 3.0, 1e-15);
}

TEST(FleissKappaTest, InvalidTables) {
  EXPECT_THROW(fleiss_kappa({}, 3), ValidationError);
  EXPECT_THROW(fleiss_kappa({{2, 0}}, 3), ValidationError);
  EXPECT_THROW(fleiss_kappa({{3, 0}, {3}}, 3), ValidationError);
  EXPECT_THROW(fleiss_kappa({{1}}, 1), ValidationError);
}

TEST(PerplexitySummaryTest, MeanOfAttackPerplexities) {
  const auto result = simulate(Config(), Contexts(), Components());
  double sum = 0.0;
  for (const auto& r : result.records) sum += r.attack->attack_perplexity;
  const auto s = perplexity_summary(result.records);
  EXPECT_EQ(s.count, 8u);
  EXPECT_NEAR(s.mean, sum / 8.0, 1e-9);
}

TEST(JsonTest, InfinitySerializesAsString) {
  AttackRecord a;
  a.method = "UAT";
  a.all_candidates.push_back({"x", "x", 0.0, {}});
  const nlohmann::json j = a;
  EXPECT_EQ(j.at("perplexity"), "inf");
  EXPECT_EQ(number_from_json(j.at("perplexity")), kPosInf);
}

// Completion model for prompt mode. "pineapple"/"mango" are single planted
// causes; four "jerk"s survive three masks.
ScriptedModel PromptModel() {
  return ScriptedModel({{"pineapple", {{"you are a jerk", 1.0}}},
                        {"mango", {{"you are a jerk", 1.0}}},
                        {"jerk", {{"what a jerk", 1.0}}}},
                       {{"that sounds nice", 1.0}});
}

DefenseConfig PromptDefense() {
  DefenseConfig d;
  d.gate = Lexicon();
  d.fallback = FallbackPolicy::kPassThroughFlagged;
  d.decode.temperature = 0.0;
  return d;
}

TEST(PromptModeTest, PlantedCausesAllDefended) {
  const auto model = PromptModel();
  std::map<std::string, std::shared_ptr<const ToxicityClassifier>> cls = {{"lex", Lexicon()}};
  const std::vector<std::string> prompts = {"i like pineapple", "mango is sweet", "hello"};
  DecodeParams greedy;
  greedy.temperature = 0.0;
  const auto r = prompt_mode(model, prompts, PromptDefense(), cls, {"lex"}, greedy);
  EXPECT_EQ(r.counts.at("lex").before, 2u);
  EXPECT_EQ(r.counts.at("lex").after, 0u);
  const auto off = prompt_mode(model, prompts, std::nullopt, cls, {"lex"}, greedy);
  EXPECT_EQ(off.counts.at("lex").before, off.counts.at("lex").after);
}

TEST(PromptModeTest, MixedFixtureCounts) {
  const auto model = PromptModel();
  std::map<std::string, std::shared_ptr<const ToxicityClassifier>> cls = {{"lex", Lexicon()}};
  const std::vector<std::string> prompts = {
      "i like pineapple", "mango is sweet",     "pineapple pizza", "fresh mango juice",
      "jerk jerk jerk jerk", "so jerk jerk jerk jerk", "hello there", "nice weather",
      "good morning",     "see you soon"};
  DecodeParams greedy;
  greedy.temperature = 0.0;
  const auto r = prompt_mode(model, prompts, PromptDefense(), cls, {"lex"}, greedy);
  EXPECT_EQ(r.counts.at("lex").before, 6u);
  EXPECT_EQ(r.counts.at("lex").after, 2u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.outcomes[i].defense->iterations, 1u);
  for (std::size_t i = 4; i < 6; ++i) EXPECT_TRUE(r.outcomes[i].defense->fallback_used);
  EXPECT_THROW(prompt_mode(model, {}, std::nullopt, cls, {"lex"}, greedy), ValidationError);
}

TEST(ContextSetTest, LoadsTaggedFiles) {
  const auto path = fs::temp_directory_path() / "parley_contexts.txt";
  {
    std::ofstream out(path);
    out << "first context\n\n  second   context \n";
  }
  ContextSet set;
  set.add_file(path.string(), "wow");
  set.add_file(path.string(), "reddit");
  ASSERT_EQ(set.contexts.size(), 4u);
  EXPECT_EQ(set.contexts[1].text, "second context");
  EXPECT_EQ(set.contexts[3].dataset_tag, "reddit");
  EXPECT_EQ(set.tags(), (std::vector<std::string>{"wow", "reddit"}));
  EXPECT_THROW(set.add_file(path.string(), ""), ConfigError);
  EXPECT_THROW(set.add_file("/nonexistent", "x"), ConfigError);
}

}  // namespace
}  // namespace parley
