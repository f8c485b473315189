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

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "parley/config.hpp"
#include "parley/conversation.hpp"
#include "parley/defense.hpp"
#include "parley/errors.hpp"
#include "parley/harness.hpp"
#include "parley/json_io.hpp"
#include "parley/log.hpp"

namespace parley {

enum class BusyPolicy { kWait, kReject };

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  BusyPolicy busy_policy = BusyPolicy::kWait;
  std::string defender = "defender";
  std::vector<std::string> classifiers;  // empty: every registered classifier
  std::filesystem::path experiments_dir = "parley-experiments";
  std::filesystem::path sessions_dir;  // empty: sessions are not persisted

  static ServiceOptions from_config(const AppConfig& config) {
    const auto& s = config.section("service");
    const std::string where = "service";
    detail::check_keys(s, where, {"host", "port", "busy_policy", "defender", "classifiers",
                                  "experiments_dir", "sessions_dir"});
    ServiceOptions o;
    o.host = detail::get_or<std::string>(s, "host", o.host, where);
    o.port = detail::get_or<int>(s, "port", o.port, where);
    const auto busy = detail::get_or<std::string>(s, "busy_policy", "wait", where);
    if (busy != "wait" && busy != "reject") throw ConfigError("unknown busy_policy '" + busy + "'");
    o.busy_policy = busy == "wait" ? BusyPolicy::kWait : BusyPolicy::kReject;
    o.defender = detail::get_or<std::string>(s, "defender", o.defender, where);
    o.classifiers = detail::get_or<std::vector<std::string>>(s, "classifiers", {}, where);
    o.experiments_dir =
        config.resolve(detail::get_or<std::string>(s, "experiments_dir", "parley-experiments", where));
    if (s.contains("sessions_dir")) {
      o.sessions_dir = config.resolve(detail::required_string(s, "sessions_dir", where));
    }
    return o;
  }
};

namespace detail {

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

inline std::uint64_t seed_from_json(const json& j) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return j.get<std::uint64_t>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    std::size_t used = 0;
    try {
      const auto v = std::stoull(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw ValidationError("seed must be a non-negative integer or a decimal string");
}

}  // namespace detail

// Frozen at creation.
struct SessionSettings {
  std::string defender;
  std::string gate;
  std::vector<std::string> classifiers;
  DefenseMethod defense = DefenseMethod::kTwoStage;
  std::uint64_t seed = 0;
};

inline json to_json(const SessionSettings& s) {
  return {{"defender", s.defender},
          {"gate", s.gate},
          {"classifiers", s.classifiers},
          {"defense", std::string(to_string(s.defense))},
          {"seed", std::to_string(s.seed)}};
}

struct Session {
  std::string id;
  SessionSettings settings;
  DefenseConfig defense;
  std::unique_ptr<LanguageModel> defender;  // private clone
  std::vector<TurnRecord> transcript;       // adversary, defender, adversary, ...
  std::map<std::size_t, DefenseRecord> defenses;
  std::chrono::system_clock::time_point created;
  std::chrono::system_clock::time_point last_active;
  std::mutex post_mutex;  // one message in flight
  mutable std::mutex state_mutex;
};

// In-memory sessions for the human-adversary console.
class SessionManager {
 public:
  SessionManager(std::shared_ptr<const Registry> registry, DefenseConfig defense_base,
                 DecodeParams decode, ServiceOptions options)
      : registry_(std::move(registry)),
        defense_base_(std::move(defense_base)),
        decode_(decode),
        options_(std::move(options)) {}

  // body keys: defender, gate, classifiers, defense, seed. All optional.
  std::string create(const json& body) {
    if (!body.is_object()) throw ValidationError("session config must be a JSON object");
    detail::check_keys(body, "session config", {"defender", "gate", "classifiers", "defense", "seed"});
    auto session = std::make_shared<Session>();
    auto& s = session->settings;
    s.defender = detail::get_or<std::string>(body, "defender", options_.defender, "session config");
    s.classifiers = detail::get_or<std::vector<std::string>>(
        body, "classifiers",
        options_.classifiers.empty() ? registry_->classifier_ids() : options_.classifiers,
        "session config");
    if (s.classifiers.empty()) throw ValidationError("session needs at least one classifier");
    const std::string default_gate =
        defense_base_.gate ? defense_base_.gate->id() : s.classifiers.front();
    s.gate = detail::get_or<std::string>(body, "gate", default_gate, "session config");
    s.defense = body.contains("defense")
                    ? defense_method_from_string(body["defense"].get<std::string>())
                    : DefenseMethod::kTwoStage;
    if (s.defense == DefenseMethod::kTriggerMasking) {
      throw ValidationError("trigger-masking needs known triggers and is not offered for sessions");
    }
    if (body.contains("seed")) s.seed = detail::seed_from_json(body["seed"]);

    session->defender = registry_->model(s.defender)->clone();
    for (const auto& id : s.classifiers) registry_->classifier(id);
    session->defense = defense_base_;
    session->defense.gate = registry_->classifier(s.gate);
    if (s.defense != DefenseMethod::kNone) session->defense.validate();
    session->created = session->last_active = std::chrono::system_clock::now();

    std::lock_guard<std::mutex> lock(mutex_);
    session->id = "sess-" + std::to_string(++next_id_);
    sessions_[session->id] = session;
    return session->id;
  }

  // Generates, defends, then appends both turns. Nothing is appended when
  // any step throws.
  json post(const std::string& id, const std::string& text) {
    if (normalize_text(text).empty()) throw ValidationError("message text must be non-empty");
    auto session = find(id);
    std::unique_lock<std::mutex> post_lock(session->post_mutex, std::defer_lock);
    if (options_.busy_policy == BusyPolicy::kReject) {
      if (!post_lock.try_lock()) throw BusyError("session " + id + " is handling another message");
    } else {
      post_lock.lock();
    }

    Conversation history;
    std::size_t next_index = 0;
    {
      std::lock_guard<std::mutex> lock(session->state_mutex);
      for (const auto& t : session->transcript) history.add(t.speaker, t.text);
      next_index = session->transcript.size();
    }
    history.add(Speaker::kAdversary, text);
    const std::size_t reply_index = next_index + 1;

    DecodeParams decode = decode_;
    decode.seed = derive_seed(session->settings.seed, reply_index);
    const LanguageModel& model = *session->defender;
    const std::string draft =
        generate(model, history_context(model, history), decode).text.surface_text;

    DefenseConfig dc = session->defense;
    dc.decode.seed = decode.seed;
    DefenseRecord record;
    switch (session->settings.defense) {
      case DefenseMethod::kTwoStage:
        record = defend(model, dc, history, draft);
        break;
      case DefenseMethod::kNonSequitur:
        record = non_sequitur_defense(dc, text, draft);
        break;
      default:
        record.method = "none";
        record.adversary_utterance = text;
        record.draft_response = draft;
        record.draft_verdict = verdict(*dc.gate, draft, dc.gate_threshold());
        record.final_response = draft;
        record.seed = decode.seed;
        break;
    }

    TurnRecord adversary{next_index, Speaker::kAdversary, text, {}};
    TurnRecord defender{reply_index, Speaker::kDefender, record.final_response, {}};
    for (const auto& cid : session->settings.classifiers) {
      const auto& c = *registry_->classifier(cid);
      adversary.verdicts[cid] = verdict(c, adversary.text);
      defender.verdicts[cid] = verdict(c, defender.text);
    }

    json reply = {{"session_id", id},
                  {"turn", reply_index},
                  {"reply", record.final_response},
                  {"defense", record},
                  {"verdicts", {{"adversary", to_json(adversary)["verdicts"]},
                                {"defender", to_json(defender)["verdicts"]}}}};
    std::lock_guard<std::mutex> lock(session->state_mutex);
    session->transcript.push_back(std::move(adversary));
    session->transcript.push_back(std::move(defender));
    session->defenses.emplace(reply_index, std::move(record));
    session->last_active = std::chrono::system_clock::now();
    return reply;
  }

  json get(const std::string& id) const { return snapshot(*find(id)); }

  // Forgets the session, appending its final state to sessions.jsonl when
  // persistence is configured.
  void remove(const std::string& id) {
    std::shared_ptr<Session> session;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = sessions_.find(id);
      if (it == sessions_.end()) throw NotFoundError("no session " + id);
      session = it->second;
      sessions_.erase(it);
    }
    if (options_.sessions_dir.empty()) return;
    std::filesystem::create_directories(options_.sessions_dir);
    std::lock_guard<std::mutex> lock(persist_mutex_);
    std::ofstream out(options_.sessions_dir / "sessions.jsonl", std::ios::app | std::ios::binary);
    if (!out) throw ConfigError("cannot write " + (options_.sessions_dir / "sessions.jsonl").string());
    out << snapshot(*session).dump() << '\n';
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return sessions_.size();
  }

 private:
  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("no session " + id);
    return it->second;
  }

  static json snapshot(const Session& s) {
    std::lock_guard<std::mutex> lock(s.state_mutex);
    json turns = json::array();
    for (const auto& t : s.transcript) turns.push_back(to_json(t));
    json defenses = json::object();
    for (const auto& [turn, d] : s.defenses) defenses[std::to_string(turn)] = d;
    return {{"session_id", s.id},
            {"config", to_json(s.settings)},
            {"transcript", turns},
            {"defenses", defenses},
            {"created_at", detail::utc_timestamp(s.created)},
            {"last_active", detail::utc_timestamp(s.last_active)}};
  }

  std::shared_ptr<const Registry> registry_;
  DefenseConfig defense_base_;
  DecodeParams decode_;
  ServiceOptions options_;
  mutable std::mutex mutex_;
  mutable std::mutex persist_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 0;
};

enum class ExperimentStatus { kQueued, kRunning, kDone, kFailed };

inline std::string_view to_string(ExperimentStatus s) {
  switch (s) {
    case ExperimentStatus::kQueued: return "queued";
    case ExperimentStatus::kRunning: return "running";
    case ExperimentStatus::kDone: return "done";
    case ExperimentStatus::kFailed: return "failed";
  }
  return "unknown";
}

// Background experiments, run one at a time on a single thread. Each run
// still uses the harness worker pool.
class ExperimentRunner {
 public:
  // A runner built with start = false holds its queue until start().
  ExperimentRunner(AppConfig base, std::filesystem::path root, bool start = true)
      : base_(std::move(base)), root_(std::move(root)), started_(start),
        thread_([this] { loop(); }) {}

  ExperimentRunner(const ExperimentRunner&) = delete;
  ExperimentRunner& operator=(const ExperimentRunner&) = delete;

  ~ExperimentRunner() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

  // The patch is merged over the server configuration and validated before
  // anything is queued.
  std::string submit(const json& patch) {
    AppConfig config = patched(base_, patch.is_null() ? json::object() : patch);
    {
      const auto registry = Registry::build(config);
      experiment_from_config(config, registry).config.validate();
    }
    std::lock_guard<std::mutex> lock(mutex_);
    const std::string id = "exp-" + std::to_string(++next_id_);
    jobs_[id] = Job{ExperimentStatus::kQueued, root_ / id, {}, std::move(config)};
    queue_.push_back(id);
    cv_.notify_all();
    return id;
  }

  void start() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      started_ = true;
    }
    cv_.notify_all();
  }

  json status(const std::string& id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto& job = find(id);
    json out = {{"experiment_id", id},
                {"status", std::string(to_string(job.status))},
                {"output_dir", job.output_dir.string()}};
    if (!job.error.empty()) out["error"] = job.error;
    return out;
  }

  ExperimentStatus state(const std::string& id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return find(id).status;
  }

  // Path of the exported report. Export only reads files, so it is
  // idempotent.
  std::filesystem::path report(const std::string& id, const std::string& format) const {
    std::filesystem::path dir;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      const auto& job = find(id);
      if (job.status != ExperimentStatus::kDone) {
        throw StateError("experiment " + id + " is " + std::string(to_string(job.status)) +
                         ", not done");
      }
      dir = job.output_dir;
    }
    if (format == "json") return dir / "metrics.json";
    if (format == "csv") return dir / "transfer.csv";
    throw ValidationError("unknown report format '" + format + "'");
  }

  // Blocks until the experiment leaves queued/running. Test helper.
  ExperimentStatus wait(const std::string& id) const {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] {
      const auto s = find(id).status;
      return s == ExperimentStatus::kDone || s == ExperimentStatus::kFailed;
    });
    return find(id).status;
  }

 private:
  struct Job {
    ExperimentStatus status = ExperimentStatus::kQueued;
    std::filesystem::path output_dir;
    std::string error;
    AppConfig config;
  };

  const Job& find(const std::string& id) const {
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFoundError("no experiment " + id);
    return it->second;
  }

  void loop() {
    for (;;) {
      std::string id;
      AppConfig config;
      std::filesystem::path dir;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [&] { return stopping_ || (started_ && !queue_.empty()); });
        if (stopping_) return;
        id = queue_.front();
        queue_.pop_front();
        auto& job = jobs_.at(id);
        job.status = ExperimentStatus::kRunning;
        config = job.config;
        dir = job.output_dir;
      }
      cv_.notify_all();
      std::string error;
      try {
        run_configured(config, dir);
      } catch (const std::exception& e) {
        error = e.what();
        log(LogLevel::kWarning, "experiment " + id + " failed: " + error);
      }
      {
        std::lock_guard<std::mutex> lock(mutex_);
        auto& job = jobs_.at(id);
        job.status = error.empty() ? ExperimentStatus::kDone : ExperimentStatus::kFailed;
        job.error = error;
      }
      cv_.notify_all();
    }
  }

  AppConfig base_;
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  std::uint64_t next_id_ = 0;
  bool started_ = true;
  bool stopping_ = false;
  std::thread thread_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(const std::string& code) {
  if (code == "validation" || code == "config") return 400;
  if (code == "not_found") return 404;
  if (code == "state" || code == "busy") return 409;
  return 500;
}

// {"error": {code, message, detail}}. Anything outside the client-facing
// codes is reported as "internal" with the library code in detail.
inline std::pair<int, json> api_error(const std::exception& e) {
  std::string code = "internal";
  json detail = nullptr;
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    const int status = http_status(err->code());
    if (status != 500) {
      return {status, {{"error", {{"code", err->code()}, {"message", e.what()}, {"detail", nullptr}}}}};
    }
    detail = {{"cause", err->code()}};
    if (const auto* d = dynamic_cast<const DefenseError*>(err)) detail["partial"] = d->partial();
  }
  return {500, {{"error", {{"code", code}, {"message", e.what()}, {"detail", detail}}}}};
}

class Service {
 public:
  explicit Service(AppConfig config)
      : config_(std::move(config)),
        options_(ServiceOptions::from_config(config_)),
        registry_(std::make_shared<Registry>(Registry::build(config_))),
        sessions_(registry_, defense_from_config(config_, *registry_),
                  decode_from_json(config_.section("harness").value("decode", json())), options_),
        experiments_(config_, options_.experiments_dir) {}

  const ServiceOptions& options() const { return options_; }
  SessionManager& sessions() { return sessions_; }
  ExperimentRunner& experiments() { return experiments_; }

  void mount(httplib::Server& server) {
    server.Post("/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        const auto id = sessions_.create(parse_body(req, true));
        return std::pair{201, sessions_.get(id)};
      });
    });
    server.Post(R"(/v1/sessions/([^/]+)/messages)",
                [this](const httplib::Request& req, httplib::Response& res) {
                  handle(res, [&] {
                    const auto body = parse_body(req, false);
                    if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
                      throw ValidationError("message body needs a string 'text'");
                    }
                    return std::pair{200, sessions_.post(req.matches[1], body["text"].get<std::string>())};
                  });
                });
    server.Get(R"(/v1/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return std::pair{200, sessions_.get(req.matches[1])}; });
    });
    server.Delete(R"(/v1/sessions/([^/]+))",
                  [this](const httplib::Request& req, httplib::Response& res) {
                    handle(res, [&] {
                      const std::string id = req.matches[1];
                      sessions_.remove(id);
                      return std::pair{200, json{{"session_id", id}, {"deleted", true}}};
                    });
                  });
    server.Post("/v1/experiments", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        const auto id = experiments_.submit(parse_body(req, true));
        return std::pair{202, experiments_.status(id)};
      });
    });
    server.Get(R"(/v1/experiments/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return std::pair{200, experiments_.status(req.matches[1])}; });
    });
    server.Get(R"(/v1/experiments/([^/]+)/report)",
               [this](const httplib::Request& req, httplib::Response& res) {
                 try {
                   const std::string format =
                       req.has_param("format") ? req.get_param_value("format") : "json";
                   const auto path = experiments_.report(req.matches[1], format);
                   std::ifstream in(path, std::ios::binary);
                   if (!in) throw StateError("report file " + path.string() + " is missing");
                   std::ostringstream body;
                   body << in.rdbuf();
                   res.status = 200;
                   res.set_header("X-Report-Path", path.string());
                   res.set_content(body.str(), format == "json" ? "application/json" : "text/csv");
                 } catch (const std::exception& e) {
                   send_error(res, e);
                 }
               });
  }

  // Blocks until stop() is called from another thread.
  bool listen(httplib::Server& server) {
    log(LogLevel::kInfo, "listening on " + options_.host + ":" + std::to_string(options_.port));
    return server.listen(options_.host, options_.port);
  }

 private:
  static json parse_body(const httplib::Request& req, bool allow_empty) {
    if (req.body.empty()) {
      if (allow_empty) return json::object();
      throw ValidationError("request body is empty");
    }
    try {
      return json::parse(req.body);
    } catch (const json::parse_error& e) {
      throw ValidationError(std::string("request body is not JSON: ") + e.what());
    }
  }

  static void send_error(httplib::Response& res, const std::exception& e) {
    auto [status, body] = api_error(e);
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  static void handle(httplib::Response& res, F&& f) {
    try {
      auto [status, body] = f();
      res.status = status;
      res.set_content(body.dump(), "application/json");
    } catch (const json::exception& e) {
      send_error(res, ValidationError(e.what()));
    } catch (const std::exception& e) {
      send_error(res, e);
    }
  }

  AppConfig config_;
  ServiceOptions options_;
  std::shared_ptr<const Registry> registry_;
  SessionManager sessions_;
  ExperimentRunner experiments_;
};

}  // namespace parley
