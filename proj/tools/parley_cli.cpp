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

// parley: trigger search, simulated attacks, defense evaluation and the
// session service, all driven by one JSON configuration file.

#include <CLI11.hpp>
#include <httplib.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "parley/config.hpp"
#include "parley/harness.hpp"
#include "parley/service.hpp"

namespace fs = std::filesystem;
using parley::json;

namespace {

// Flags shared by every verb. Each override becomes a merge patch on the
// loaded document, so the CLI and POST /v1/experiments agree.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> conversations;
  std::optional<std::string> attack;
  std::optional<std::string> defense;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "configuration file")->required()->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "master seed");
    app->add_option("--out", out, "output directory");
    app->add_option("--workers", workers, "worker threads");
    app->add_option("--conversations", conversations, "number of conversations");
    app->add_option("--attack", attack, "none, UAT, UAT-LM, UTSC-1, UTSC-2 or UTSC-3");
    app->add_option("--defense", defense, "none, two-stage, non-sequitur or trigger-masking");
    app->add_option("--set", sets, "section.key=value, value parsed as JSON when possible");
  }

  json patch() const {
    json p = json::object();
    if (seed) p["harness"]["seed"] = *seed;
    if (out) p["harness"]["output_dir"] = fs::absolute(*out).string();
    if (workers) p["harness"]["workers"] = *workers;
    if (conversations) p["harness"]["num_conversations"] = *conversations;
    if (attack) p["attack"]["method"] = *attack;
    if (defense) p["defense"]["method"] = *defense;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      const auto dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw parley::ValidationError("--set expects section.key=value, got '" + s + "'");
      }
      const auto raw = s.substr(eq + 1);
      json value = json::parse(raw, nullptr, false);
      if (value.is_discarded()) value = raw;
      p[s.substr(0, dot)][s.substr(dot + 1, eq - dot - 1)] = value;
    }
    return p;
  }

  parley::AppConfig load() const {
    return parley::patched(parley::AppConfig::load(config_path), patch());
  }
};

void print_matrix(const std::string& title, const parley::TransferMatrix& m) {
  std::cout << title << '\n';
  for (const auto& [group, row] : m.cells) {
    for (const auto& [id, e] : row) {
      std::cout << "  " << std::left << std::setw(10) << group << std::setw(14) << id
                << std::right << std::fixed << std::setprecision(1) << std::setw(6) << e.percent
                << "%  (" << e.provoked << '/' << e.evaluated << ")\n";
    }
  }
}

void print_report(const parley::MetricsReport& r) {
  std::cout << "attack " << r.attack_method << ", defense " << r.defense_method << ", "
            << r.conversations << " conversations, " << r.failed << " failed\n";
  print_matrix("attack effectiveness (no defense):", r.attack);
  if (r.defended) {
    print_matrix("attack effectiveness (defended):", *r.defended);
    std::cout << "defense effectiveness:\n";
    for (const auto& [id, v] : r.defense_effectiveness) {
      std::cout << "  " << std::left << std::setw(24) << id << std::right;
      if (v) {
        std::cout << std::fixed << std::setprecision(1) << *v << "%\n";
      } else {
        std::cout << "undefined (nothing toxic without defense)\n";
      }
    }
  }
  if (r.perplexity.count > 0) {
    std::cout << "attack perplexity: mean " << std::setprecision(3) << r.perplexity.mean << " over "
              << r.perplexity.count << " attacks\n";
  }
}

fs::path output_dir(const parley::AppConfig& config) {
  return config.resolve(config.section("harness").value("output_dir", std::string("parley-run")));
}

int attack_search(const Common& c, const std::optional<std::string>& trace_path) {
  const auto config = c.load();
  const auto registry = parley::Registry::build(config);
  auto setup = parley::experiment_from_config(config, registry);
  if (setup.config.attack != parley::AttackMethod::kUat &&
      setup.config.attack != parley::AttackMethod::kUatLm) {
    throw parley::ConfigError("attack search needs method UAT or UAT-LM, not " +
                              setup.config.attack_tag());
  }
  const auto prepared = parley::prepare_attack(setup.config, setup.parts);
  const auto& result = *prepared.search;
  json out = {{"method", setup.config.attack_tag()},
              {"trigger", result.trigger.text},
              {"objective", parley::json_number(result.trigger.objective_value)},
              {"sweeps", result.trace.sweeps},
              {"truncated", result.trace.truncated}};
  std::cout << out.dump(2) << '\n';
  if (trace_path) {
    std::ofstream trace(*trace_path, std::ios::binary);
    if (!trace) throw parley::ConfigError("cannot write " + *trace_path);
    parley::write_trace_jsonl(result.trace, trace);
  }
  return 0;
}

int run_and_print(const parley::AppConfig& config) {
  const auto dir = output_dir(config);
  const auto out = parley::run_configured(config, dir);
  print_report(out.report);
  std::cout << "wrote " << dir.string() << '\n';
  return 0;
}

int defend_eval(const Common& c, const std::optional<std::string>& message) {
  auto config = c.load();
  if (!message) {
    if (config.section("defense").value("method", std::string("none")) == "none") {
      throw parley::ConfigError("defend eval needs a defense method");
    }
    return run_and_print(config);
  }
  // One utterance against the defender, printing the full defense trace.
  const auto registry = parley::Registry::build(config);
  auto dc = parley::defense_from_config(config, registry);
  const auto& h = config.section("harness");
  const auto model = registry.model(h.value("defender", std::string("defender")));
  auto decode = parley::decode_from_json(h.value("decode", json()));
  decode.seed = h.value("seed", std::uint64_t{0});
  dc.decode.seed = decode.seed;
  parley::Conversation history;
  history.add(parley::Speaker::kAdversary, *message);
  const auto draft =
      parley::generate(*model, parley::history_context(*model, history), decode).text.surface_text;
  const auto record = parley::defend(*model, dc, history, draft);
  std::cout << json(record).dump(2) << '\n';
  return 0;
}

int prompts_eval(const Common& c, std::optional<std::string> prompts_path, bool no_defense) {
  const auto config = c.load();
  const auto registry = parley::Registry::build(config);
  const auto& h = config.section("harness");
  if (!prompts_path) {
    if (!h.contains("prompts")) throw parley::ConfigError("no prompts file given");
    prompts_path = config.resolve(h["prompts"].get<std::string>());
  }
  const auto prompts = parley::read_lines(*prompts_path, "prompts");
  const auto model = registry.model(h.value("prompt_model", h.value("defender", std::string("defender"))));
  std::optional<parley::DefenseConfig> defense;
  if (!no_defense) defense = parley::defense_from_config(config, registry);
  auto decode = parley::decode_from_json(h.value("decode", json()));
  decode.seed = h.value("seed", std::uint64_t{0});
  const auto ids = h.value("eval_classifiers", registry.classifier_ids());
  const auto result = parley::prompt_mode(*model, prompts, defense, registry.classifiers(), ids, decode);

  json out = {{"prompts", prompts.size()}, {"counts", json::object()}};
  for (const auto& [id, counts] : result.counts) {
    json row = {{"before", counts.before}, {"after", counts.after}};
    row["reduction"] = counts.before == 0
                           ? json(nullptr)
                           : parley::json_number(parley::defense_effectiveness(counts.before, counts.after));
    out["counts"][id] = row;
  }
  json outcomes = json::array();
  for (const auto& o : result.outcomes) {
    json j = {{"prompt", o.prompt}, {"completion", o.completion}, {"final", o.final_response}};
    if (o.defense) j["defense"] = *o.defense;
    outcomes.push_back(j);
  }
  out["outcomes"] = outcomes;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int report(const std::string& run_dir, const std::string& format) {
  const fs::path dir(run_dir);
  const fs::path file = dir / (format == "csv" ? "transfer.csv" : "metrics.json");
  std::ifstream in(file, std::ios::binary);
  if (!in) throw parley::NotFoundError("no " + file.filename().string() + " in " + run_dir);
  std::ostringstream text;
  text << in.rdbuf();
  if (format == "json" || format == "csv") {
    std::cout << text.str();
    return 0;
  }
  const auto m = json::parse(text.str());
  std::cout << "attack " << m["attack_method"].get<std::string>() << ", defense "
            << m["defense_method"].get<std::string>() << ", " << m["conversations"] << " conversations\n";
  for (const auto& [id, e] : m["attack_effectiveness"]["all"].items()) {
    std::cout << "  attack  " << std::left << std::setw(14) << id << std::right << e["percent"]
              << "%  (" << e["provoked"] << '/' << e["evaluated"] << ")\n";
  }
  if (m.contains("defense_effectiveness")) {
    for (const auto& [id, v] : m["defense_effectiveness"].items()) {
      std::cout << "  defense " << std::left << std::setw(14) << id << std::right << v << "%\n";
    }
  }
  return 0;
}

httplib::Server* g_server = nullptr;

int serve(const Common& c, std::optional<std::string> host, std::optional<int> port) {
  json extra = json::object();
  if (host) extra["service"]["host"] = *host;
  if (port) extra["service"]["port"] = *port;
  parley::Service service(parley::patched(c.load(), extra));
  httplib::Server server;
  service.mount(server);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cerr << "parley serving on http://" << service.options().host << ':'
            << service.options().port << '\n';
  if (!service.listen(server)) {
    std::cerr << "parley: cannot listen on " << service.options().host << ':'
              << service.options().port << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parley: dialogue attack and defense experiments"};
  app.set_version_flag("--version", std::string(parley::kVersion));
  app.require_subcommand(1);

  auto* attack = app.add_subcommand("attack", "trigger search and attack-only runs");
  attack->require_subcommand(1);
  Common search_opts, attack_run_opts, defend_opts, simulate_opts, prompt_opts, serve_opts;
  std::optional<std::string> trace_path, message, prompts_path, host;
  std::optional<int> port;
  bool no_defense = false;
  std::string run_dir, format = "text";

  auto* search = attack->add_subcommand("search", "UAT / UAT-LM trigger search");
  search_opts.attach(search);
  search->add_option("--trace", trace_path, "write the search trace as JSONL");

  auto* attack_run = attack->add_subcommand("run", "simulate the attack with no defense");
  attack_run_opts.attach(attack_run);

  auto* defend = app.add_subcommand("defend", "defense evaluation");
  defend->require_subcommand(1);
  auto* defend_eval_cmd = defend->add_subcommand("eval", "matched no-defense / defended runs");
  defend_opts.attach(defend_eval_cmd);
  defend_eval_cmd->add_option("--message", message, "defend one adversary utterance and print the trace");

  auto* simulate = app.add_subcommand("simulate", "run the configured experiment");
  simulate_opts.attach(simulate);

  auto* prompts = app.add_subcommand("prompts", "single-turn prompt completion");
  prompts->require_subcommand(1);
  auto* prompts_eval_cmd = prompts->add_subcommand("eval", "complete prompts with and without defense");
  prompt_opts.attach(prompts_eval_cmd);
  prompts_eval_cmd->add_option("--prompts", prompts_path, "one prompt per line");
  prompts_eval_cmd->add_flag("--no-defense", no_defense, "skip the defense");

  auto* report_cmd = app.add_subcommand("report", "print a finished run's metrics");
  report_cmd->add_option("run_dir", run_dir, "output directory of a run")->required();
  report_cmd->add_option("--format", format, "text, json or csv")
      ->check(CLI::IsMember({"text", "json", "csv"}));

  auto* serve_cmd = app.add_subcommand("serve", "HTTP session and experiment service");
  serve_opts.attach(serve_cmd);
  serve_cmd->add_option("--host", host, "bind address");
  serve_cmd->add_option("--port", port, "port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (search->parsed()) return attack_search(search_opts, trace_path);
    if (attack_run->parsed()) {
      return run_and_print(parley::patched(attack_run_opts.load(), {{"defense", {{"method", "none"}}}}));
    }
    if (defend_eval_cmd->parsed()) return defend_eval(defend_opts, message);
    if (simulate->parsed()) return run_and_print(simulate_opts.load());
    if (prompts_eval_cmd->parsed()) return prompts_eval(prompt_opts, prompts_path, no_defense);
    if (report_cmd->parsed()) return report(run_dir, format);
    if (serve_cmd->parsed()) return serve(serve_opts, host, port);
  } catch (const parley::Error& e) {
    std::cerr << "parley: " << e.code() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "parley: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
