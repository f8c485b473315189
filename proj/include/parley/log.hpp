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
#include <iostream>
#include <mutex>
#include <string_view>

namespace parley {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3, kOff = 4 };

// PARLEY_LOG=debug|info|warning|error|off; default warning.
inline LogLevel log_threshold() {
  static const LogLevel level = [] {
    const char* v = std::getenv("PARLEY_LOG");
    if (v == nullptr) return LogLevel::kWarning;
    const std::string_view s(v);
    if (s == "debug") return LogLevel::kDebug;
    if (s == "info") return LogLevel::kInfo;
    if (s == "error") return LogLevel::kError;
    if (s == "off") return LogLevel::kOff;
    return LogLevel::kWarning;
  }();
  return level;
}

inline void log(LogLevel level, std::string_view message) {
  if (level < log_threshold()) return;
  static std::mutex mutex;
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
  std::lock_guard lock(mutex);
  std::clog << "[parley " << kNames[static_cast<int>(level)] << "] " << message
            << '\n';
}

}  // namespace parley
