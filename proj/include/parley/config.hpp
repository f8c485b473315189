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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "parley/attack_uat.hpp"
#include "parley/attack_utsc.hpp"
#include "parley/defense.hpp"
#include "parley/errors.hpp"
#include "parley/harness.hpp"
#include "parley/models.hpp"
#include "parley/remote_scorer.hpp"
#include "parley/toxicity.hpp"

namespace parley {

using nlohmann::json;

// The configuration document. Relative paths resolve against the
// directory of the file it was loaded from.
struct AppConfig {
  json document = json::object();
  std::filesystem::path base_dir = ".";

  static AppConfig from_json(json document, std::filesystem::path base_dir) {
    if (!document.is_object()) throw ConfigError("configuration must be a JSON object");
    static const std::set<std::string> sections = {"models",  "classifiers", "attack",
                                                   "defense", "harness",     "service"};
    for (const auto& [key, value] : document.items()) {
      if (!sections.count(key)) throw ConfigError("unknown configuration section '" + key + "'");
      if (!value.is_object()) throw ConfigError("section '" + key + "' must be an object");
    }
    return {std::move(document), std::move(base_dir)};
  }

  static AppConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration " + path.string());
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("configuration " + path.string() + ": " + e.what());
    }
    return from_json(std::move(doc), path.parent_path().empty() ? "." : path.parent_path());
  }

  const json& section(const std::string& name) const {
    static const json empty = json::object();
    auto it = document.find(name);
    return it == document.end() ? empty : *it;
  }

  std::string resolve(const std::string& path) const {
    const std::filesystem::path p(path);
    return p.is_absolute() ? p.string() : (base_dir / p).lexically_normal().string();
  }
};

namespace detail {

inline void check_keys(const json& obj, const std::string& where,
                       const std::set<std::string>& allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + key + "' in " + where);
  }
}

inline std::string required_string(const json& obj, const std::string& key,
                                   const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw ConfigError(where + " needs a string '" + key + "'");
  }
  return it->get<std::string>();
}

}  // namespace detail

inline DecodeParams decode_from_json(const json& j, DecodeParams base = {}) {
  if (j.is_null()) return base;
  detail::check_keys(j, "decode", {"max_new_tokens", "temperature", "top_k", "seed"});
  base.max_new_tokens = detail::get_or<std::size_t>(j, "max_new_tokens", base.max_new_tokens, "decode");
  base.temperature = detail::get_or<double>(j, "temperature", base.temperature, "decode");
  base.top_k = detail::get_or<std::size_t>(j, "top_k", base.top_k, "decode");
  base.seed = detail::get_or<std::uint64_t>(j, "seed", base.seed, "decode");
  base.validate();
  return base;
}

// Models and classifiers by id, built once from the configuration.
class Registry {
 public:
  static Registry build(const AppConfig& config) {
    Registry r;
    for (const auto& [id, spec] : config.section("models").items()) {
      r.models_[id] = make_model(config, id, spec);
    }
    const auto& harness = config.section("harness");
    std::string cache_path = detail::get_or<std::string>(harness, "score_cache", "", "harness");
    if (const char* env = std::getenv("PARLEY_SCORE_CACHE")) cache_path = env;
    r.cache_ = cache_path.empty() ? std::make_shared<ScoreCache>()
                                  : std::make_shared<ScoreCache>(config.resolve(cache_path));
    for (const auto& [id, spec] : config.section("classifiers").items()) {
      r.classifiers_[id] = r.make_classifier(config, id, spec);
    }
    return r;
  }

  // Embedding programs can register components the config cannot describe.
  void add_model(const std::string& id, std::shared_ptr<const LanguageModel> model) {
    models_[id] = std::move(model);
  }
  void add_classifier(const std::string& id, std::shared_ptr<const ToxicityClassifier> c) {
    classifiers_[id] = std::move(c);
  }

  std::shared_ptr<const LanguageModel> model(const std::string& id) const {
    auto it = models_.find(id);
    if (it == models_.end()) throw ValidationError("unknown model '" + id + "'");
    return it->second;
  }

  std::shared_ptr<const ToxicityClassifier> classifier(const std::string& id) const {
    auto it = classifiers_.find(id);
    if (it == classifiers_.end()) throw ValidationError("unknown classifier '" + id + "'");
    return it->second;
  }

  const std::map<std::string, std::shared_ptr<const ToxicityClassifier>>& classifiers() const {
    return classifiers_;
  }

  std::vector<std::string> model_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : models_) out.push_back(id);
    return out;
  }

  std::vector<std::string> classifier_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : classifiers_) out.push_back(id);
    return out;
  }

 private:
  static std::shared_ptr<const LanguageModel> make_model(const AppConfig& config,
                                                         const std::string& id,
                                                         const json& spec) {
    const std::string where = "model '" + id + "'";
    const auto type = detail::required_string(spec, "type", where);
    if (type == "scripted") {
      detail::check_keys(spec, where, {"type", "rules", "smoothing", "context_window", "extra_words"});
      ScriptedModel::Options opts;
      opts.smoothing = detail::get_or<double>(spec, "smoothing", opts.smoothing, where);
      if (spec.contains("context_window")) {
        opts.context_window = detail::get_or<std::size_t>(spec, "context_window", 0, where);
      }
      opts.extra_words =
          detail::get_or<std::vector<std::string>>(spec, "extra_words", {}, where);
      return std::make_shared<ScriptedModel>(
          ScriptedModel::from_file(config.resolve(detail::required_string(spec, "rules", where)), opts));
    }
    if (type == "bigram") {
      detail::check_keys(spec, where, {"type", "table"});
      return std::make_shared<BigramModel>(
          BigramModel::from_file(config.resolve(detail::required_string(spec, "table", where))));
    }
    if (type == "uniform") {
      detail::check_keys(spec, where, {"type", "size", "words"});
      if (spec.contains("words")) {
        return std::make_shared<UniformModel>(
            Vocabulary(detail::get_or<std::vector<std::string>>(spec, "words", {}, where)));
      }
      return std::make_shared<UniformModel>(
          UniformModel::with_size(detail::get_or<std::size_t>(spec, "size", 0, where)));
    }
    throw ConfigError(where + " has unknown type '" + type + "'");
  }

  std::shared_ptr<const ToxicityClassifier> make_classifier(const AppConfig& config,
                                                            const std::string& id,
                                                            const json& spec) const {
    const std::string where = "classifier '" + id + "'";
    const auto type = detail::required_string(spec, "type", where);
    if (type == "lexicon") {
      detail::check_keys(spec, where, {"type", "path", "threshold"});
      auto lex = LexiconClassifier::from_file(
          id, config.resolve(detail::required_string(spec, "path", where)),
          detail::get_or<double>(spec, "threshold", kDefaultThreshold, where));
      return std::make_shared<LexiconClassifier>(std::move(lex));
    }
    if (type == "remote") {
      detail::check_keys(spec, where, {"type", "endpoint", "api_key_env", "requests_per_second",
                                       "max_retries", "timeout_ms", "backoff_ms", "threshold"});
      RemoteScorerConfig rc;
      rc.classifier_id = id;
      rc.endpoint = detail::get_or<std::string>(spec, "endpoint", "", where);
      if (spec.contains("api_key_env")) {
        const char* key = std::getenv(detail::required_string(spec, "api_key_env", where).c_str());
        if (key) rc.api_key = key;
      }
      rc.requests_per_second =
          detail::get_or<double>(spec, "requests_per_second", rc.requests_per_second, where);
      rc.max_retries = detail::get_or<int>(spec, "max_retries", rc.max_retries, where);
      rc.timeout = std::chrono::milliseconds(
          detail::get_or<long>(spec, "timeout_ms", static_cast<long>(rc.timeout.count()), where));
      rc.initial_backoff = std::chrono::milliseconds(detail::get_or<long>(
          spec, "backoff_ms", static_cast<long>(rc.initial_backoff.count()), where));
      rc.threshold = detail::get_or<double>(spec, "threshold", rc.threshold, where);
      auto remote = std::make_shared<RemoteClassifier>(rc.with_environment());
      return std::make_shared<CachedClassifier>(std::move(remote), cache_);
    }
    throw ConfigError(where + " has unknown type '" + type + "'");
  }

  std::map<std::string, std::shared_ptr<const LanguageModel>> models_;
  std::map<std::string, std::shared_ptr<const ToxicityClassifier>> classifiers_;
  std::shared_ptr<ScoreCache> cache_;
};

inline DefenseMethod defense_method_from_string(const std::string& s) {
  if (s == "none") return DefenseMethod::kNone;
  if (s == "two-stage") return DefenseMethod::kTwoStage;
  if (s == "non-sequitur") return DefenseMethod::kNonSequitur;
  if (s == "trigger-masking") return DefenseMethod::kTriggerMasking;
  throw ConfigError("unknown defense method '" + s + "'");
}

inline void set_attack_method(ExperimentConfig& c, const std::string& s) {
  if (s == "none") {
    c.attack = AttackMethod::kNone;
  } else if (s == "UAT") {
    c.attack = AttackMethod::kUat;
  } else if (s == "UAT-LM") {
    c.attack = AttackMethod::kUatLm;
  } else if (s == "UTSC-1" || s == "UTSC-2" || s == "UTSC-3") {
    c.attack = AttackMethod::kUtsc;
    c.utsc.criterion = s == "UTSC-1"   ? SelectionCriterion::kUtsc1
                       : s == "UTSC-2" ? SelectionCriterion::kUtsc2
                                       : SelectionCriterion::kUtsc3;
  } else {
    throw ConfigError("unknown attack method '" + s + "'");
  }
}

// Defense section -> DefenseConfig. The method itself is read separately.
inline DefenseConfig defense_from_config(const AppConfig& config, const Registry& registry) {
  const auto& d = config.section("defense");
  const std::string where = "defense";
  detail::check_keys(d, where, {"method", "gate", "threshold", "l1_method", "max_masked_tokens",
                                "mask_mode", "placeholder", "fallback", "topics", "decode"});
  DefenseConfig out;
  if (d.contains("gate")) out.gate = registry.classifier(detail::required_string(d, "gate", where));
  if (d.contains("threshold")) out.threshold = detail::get_or<double>(d, "threshold", 0.5, where);
  const auto l1 = detail::get_or<std::string>(d, "l1_method", "occlusion", where);
  if (l1 == "occlusion") {
    out.l1_method = L1Method::kOcclusion;
  } else if (l1 == "gradient-input") {
    out.l1_method = L1Method::kGradientInput;
  } else {
    throw ConfigError("unknown l1_method '" + l1 + "'");
  }
  out.max_masked_tokens = detail::get_or<std::size_t>(d, "max_masked_tokens", 3, where);
  const auto mode = detail::get_or<std::string>(d, "mask_mode", "remove", where);
  if (mode != "remove" && mode != "placeholder") throw ConfigError("unknown mask_mode '" + mode + "'");
  out.mask_mode = mode == "remove" ? MaskMode::kRemove : MaskMode::kPlaceholder;
  out.placeholder = detail::get_or<std::string>(d, "placeholder", out.placeholder, where);
  const auto fb = detail::get_or<std::string>(d, "fallback", "non-sequitur", where);
  if (fb != "non-sequitur" && fb != "pass-through-flagged") {
    throw ConfigError("unknown fallback '" + fb + "'");
  }
  out.fallback = fb == "non-sequitur" ? FallbackPolicy::kNonSequitur
                                      : FallbackPolicy::kPassThroughFlagged;
  if (d.contains("topics")) {
    out.topics = SafeTopicList::load(config.resolve(detail::required_string(d, "topics", where)));
  }
  out.decode = decode_from_json(d.value("decode", json()), out.decode);
  return out;
}

struct ExperimentSetup {
  ExperimentConfig config;
  ContextSet contexts;
  ExperimentComponents parts;
  std::filesystem::path output_dir;
};

// attack + defense + harness sections -> a runnable experiment.
inline ExperimentSetup experiment_from_config(const AppConfig& config, const Registry& registry) {
  ExperimentSetup s;
  auto& c = s.config;
  const auto& h = config.section("harness");
  detail::check_keys(h, "harness",
                     {"adversary", "defender", "contexts", "num_conversations", "turns",
                      "attack_turn", "eval_classifiers", "seed", "workers",
                      "sample_with_replacement", "max_failure_rate", "provoked", "decode",
                      "output_dir", "prompts", "prompt_model", "score_cache"});
  s.parts.adversary = registry.model(detail::get_or<std::string>(h, "adversary", "adversary", "harness"));
  s.parts.defender = registry.model(detail::get_or<std::string>(h, "defender", "defender", "harness"));
  for (const auto& entry : h.value("contexts", json::array())) {
    s.contexts.add_file(config.resolve(detail::required_string(entry, "path", "harness.contexts")),
                        detail::required_string(entry, "tag", "harness.contexts"));
  }
  c.num_conversations = detail::get_or<std::size_t>(h, "num_conversations", c.num_conversations, "harness");
  c.turns_per_conversation = detail::get_or<std::size_t>(h, "turns", c.turns_per_conversation, "harness");
  c.attack_turn = detail::get_or<std::size_t>(h, "attack_turn", c.attack_turn, "harness");
  c.eval_classifiers = detail::get_or<std::vector<std::string>>(h, "eval_classifiers", registry.classifier_ids(), "harness");
  for (const auto& id : c.eval_classifiers) s.parts.classifiers[id] = registry.classifier(id);
  c.seed = detail::get_or<std::uint64_t>(h, "seed", c.seed, "harness");
  c.workers = detail::get_or<std::size_t>(h, "workers", c.workers, "harness");
  c.sample_with_replacement = detail::get_or<bool>(h, "sample_with_replacement", false, "harness");
  c.max_failure_rate = detail::get_or<double>(h, "max_failure_rate", c.max_failure_rate, "harness");
  const auto provoked = detail::get_or<std::string>(h, "provoked", "immediate", "harness");
  if (provoked != "immediate" && provoked != "any-later") {
    throw ConfigError("unknown provoked mode '" + provoked + "'");
  }
  c.provoked = provoked == "immediate" ? ProvokedMode::kImmediate : ProvokedMode::kAnyLater;
  c.decode = decode_from_json(h.value("decode", json()), c.decode);
  s.output_dir = config.resolve(detail::get_or<std::string>(h, "output_dir", "parley-run", "harness"));

  const auto& a = config.section("attack");
  const std::string aw = "attack";
  detail::check_keys(a, aw, {"method", "target_model", "lm_scorer", "perplexity_scorer", "corpus",
                             "classifiers", "threshold", "n_candidates", "pool_size", "placement",
                             "trigger_length", "lm_weight", "candidate_k", "max_sweeps",
                             "initial_token", "scoring", "exact_vocab_cap", "decode"});
  set_attack_method(c, detail::get_or<std::string>(a, "method", "none", aw));
  if (a.contains("target_model")) s.parts.trigger_target = registry.model(a["target_model"].get<std::string>());
  if (a.contains("lm_scorer")) s.parts.trigger_lm = registry.model(a["lm_scorer"].get<std::string>());
  if (a.contains("perplexity_scorer")) {
    s.parts.perplexity_scorer = registry.model(a["perplexity_scorer"].get<std::string>());
  }
  if (a.contains("corpus")) {
    s.parts.corpus = load_corpus(config.resolve(detail::required_string(a, "corpus", aw)));
  }
  c.attack_classifiers = detail::get_or<std::vector<std::string>>(a, "classifiers", {}, aw);
  for (const auto& id : c.attack_classifiers) s.parts.classifiers[id] = registry.classifier(id);
  c.utsc.threshold = detail::get_or<double>(a, "threshold", c.utsc.threshold, aw);
  c.utsc.n_candidates = detail::get_or<std::size_t>(a, "n_candidates", c.utsc.n_candidates, aw);
  c.pool_size = detail::get_or<std::size_t>(a, "pool_size", 0, aw);
  const auto placement = detail::get_or<std::string>(a, "placement", "response-prefix", aw);
  if (placement != "response-prefix" && placement != "appended-to-history") {
    throw ConfigError("unknown placement '" + placement + "'");
  }
  c.utsc.placement = placement == "response-prefix" ? TriggerPlacement::kResponsePrefix
                                                    : TriggerPlacement::kAppendedToHistory;
  c.uat.trigger_length = detail::get_or<std::size_t>(a, "trigger_length", c.uat.trigger_length, aw);
  c.uat.lm_weight = detail::get_or<double>(a, "lm_weight", c.uat.lm_weight, aw);
  c.uat.candidate_k = detail::get_or<std::size_t>(a, "candidate_k", c.uat.candidate_k, aw);
  c.uat.max_sweeps = detail::get_or<std::size_t>(a, "max_sweeps", c.uat.max_sweeps, aw);
  if (a.contains("initial_token")) c.uat.initial_token = detail::required_string(a, "initial_token", aw);
  const auto scoring = detail::get_or<std::string>(a, "scoring", "exact", aw);
  if (scoring != "exact" && scoring != "linearized") throw ConfigError("unknown scoring '" + scoring + "'");
  c.uat.scoring = scoring == "exact" ? ReplacementMode::kExact : ReplacementMode::kLinearized;
  c.uat.exact_vocab_cap = detail::get_or<std::size_t>(a, "exact_vocab_cap", c.uat.exact_vocab_cap, aw);
  c.utsc.decode = decode_from_json(a.value("decode", json()), c.decode);

  const auto& d = config.section("defense");
  c.defense = defense_method_from_string(detail::get_or<std::string>(d, "method", "none", "defense"));
  c.defense_config = defense_from_config(config, registry);
  return s;
}

// One code path for configured runs, shared by the CLI and the service so
// identical configs give identical outputs.
inline ExperimentOutput run_configured(const AppConfig& config,
                                       const std::filesystem::path& out_dir) {
  const auto registry = Registry::build(config);
  auto setup = experiment_from_config(config, registry);
  return run_experiment(setup.config, setup.contexts, setup.parts, out_dir);
}

// RFC 7386 merge patch over the document, revalidated.
inline AppConfig patched(const AppConfig& config, const json& patch) {
  if (!patch.is_object()) throw ValidationError("config patch must be a JSON object");
  json doc = config.document;
  doc.merge_patch(patch);
  return AppConfig::from_json(std::move(doc), config.base_dir);
}

}  // namespace parley
