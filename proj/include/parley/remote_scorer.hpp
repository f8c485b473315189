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

#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <json.hpp>
#include <string>
#include <thread>

#include "parley/errors.hpp"
#include "parley/toxicity.hpp"

namespace parley {

struct RemoteScorerConfig {
  std::string classifier_id = "remote";
  std::string endpoint;  // e.g. http://127.0.0.1:8500/v1/score
  std::string api_key;
  double requests_per_second = 1.0;  // <= 0 disables the limiter
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::milliseconds timeout{10000};
  double threshold = kDefaultThreshold;

  // PARLEY_SCORER_URL, PARLEY_SCORER_API_KEY and PARLEY_SCORER_RPS override
  // the given values when set.
  RemoteScorerConfig with_environment() const {
    RemoteScorerConfig out = *this;
    if (const char* v = std::getenv("PARLEY_SCORER_URL")) out.endpoint = v;
    if (const char* v = std::getenv("PARLEY_SCORER_API_KEY")) out.api_key = v;
    if (const char* v = std::getenv("PARLEY_SCORER_RPS")) {
      out.requests_per_second = std::stod(v);
    }
    return out;
  }
};

// Spaces calls at least 1/rate seconds apart.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second) {
    if (per_second > 0.0) {
      interval_ = std::chrono::duration_cast<Clock::duration>(
          std::chrono::duration<double>(1.0 / per_second));
    }
  }

  void acquire() {
    std::unique_lock lock(mutex_);
    const auto now = Clock::now();
    const auto slot = std::max(now, next_);
    next_ = slot + interval_;
    lock.unlock();
    std::this_thread::sleep_until(slot);
  }

 private:
  using Clock = std::chrono::steady_clock;
  std::mutex mutex_;
  Clock::duration interval_{0};
  Clock::time_point next_{};
};

// Client for an HTTP scoring service: POST {"text": ...} -> {"score": x}.
// Connection failures, 429 and 5xx are retried with exponential backoff;
// other statuses fail immediately. Calls are serialized.
class RemoteClassifier final : public ToxicityClassifier {
 public:
  explicit RemoteClassifier(RemoteScorerConfig config)
      : config_(std::move(config)), limiter_(config_.requests_per_second) {
    const auto scheme_end = config_.endpoint.find("://");
    if (config_.endpoint.empty() || scheme_end == std::string::npos) {
      throw ConfigError("remote scorer endpoint must be an absolute URL: '" +
                        config_.endpoint + "'");
    }
    const auto path_begin = config_.endpoint.find('/', scheme_end + 3);
    base_ = config_.endpoint.substr(0, path_begin);
    path_ = path_begin == std::string::npos ? "/"
                                            : config_.endpoint.substr(path_begin);
  }

  const std::string& id() const override { return config_.classifier_id; }
  double default_threshold() const override { return config_.threshold; }

  double score(const std::string& text) const override {
    const std::string normalized = normalize_text(text);
    if (normalized.empty()) return 0.0;
    std::lock_guard lock(call_mutex_);
    const std::string body = nlohmann::json{{"text", normalized}}.dump();
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
      headers.emplace("Authorization", "Bearer " + config_.api_key);
    }
    auto backoff = config_.initial_backoff;
    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      limiter_.acquire();
      ++calls_;
      httplib::Client client(base_);
      client.set_connection_timeout(config_.timeout);
      client.set_read_timeout(config_.timeout);
      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        last_error = "connection failed: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw TransportError(id(), "HTTP " + std::to_string(res->status) +
                                       ": " + res->body);
      }
      return parse_score(res->body);
    }
    throw TransportError(id(), "gave up after " +
                                   std::to_string(config_.max_retries + 1) +
                                   " attempts: " + last_error);
  }

  // Number of HTTP requests issued so far, retries included.
  std::size_t calls() const {
    std::lock_guard lock(call_mutex_);
    return calls_;
  }

 private:
  double parse_score(const std::string& body) const {
    try {
      const auto j = nlohmann::json::parse(body);
      const double s = j.at("score").get<double>();
      if (!(s >= 0.0 && s <= 1.0)) {
        throw TransportError(id(), "score outside [0, 1]: " + body);
      }
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(id(), std::string("malformed response: ") + e.what());
    }
  }

  RemoteScorerConfig config_;
  std::string base_;
  std::string path_;
  mutable RateLimiter limiter_;
  mutable std::mutex call_mutex_;
  mutable std::size_t calls_ = 0;
};

}  // namespace parley
