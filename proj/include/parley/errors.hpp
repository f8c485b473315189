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

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace parley {

// Root of every error raised by the library. `code()` is a stable machine
// readable tag that the HTTP service forwards as ApiError.code.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message)
      : Error("validation", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message)
      : Error("config", message) {}
};

class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& message)
      : Error("contract_violation", message) {}
};

class ContextOverflowError : public Error {
 public:
  ContextOverflowError(std::size_t tokens, std::size_t window)
      : Error("context_overflow",
              "context of " + std::to_string(tokens) +
                  " tokens exceeds model window of " + std::to_string(window)),
        tokens_(tokens),
        window_(window) {}

  std::size_t tokens() const noexcept { return tokens_; }
  std::size_t window() const noexcept { return window_; }

 private:
  std::size_t tokens_;
  std::size_t window_;
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(const std::string& message)
      : Error("vocabulary", message) {}
};

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& message)
      : Error("capacity", message) {}
};

class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& message)
      : Error("unsupported", message) {}
};

class TransportError : public Error {
 public:
  TransportError(std::string classifier_id, const std::string& message)
      : Error("transport", classifier_id + ": " + message),
        classifier_id_(std::move(classifier_id)) {}

  const std::string& classifier_id() const noexcept { return classifier_id_; }

 private:
  std::string classifier_id_;
};

class EnsembleError : public Error {
 public:
  EnsembleError(std::vector<std::string> failed, const std::string& message)
      : Error("ensemble", message), failed_(std::move(failed)) {}

  const std::vector<std::string>& failed_members() const noexcept {
    return failed_;
  }

 private:
  std::vector<std::string> failed_;
};

class AttackError : public Error {
 public:
  explicit AttackError(const std::string& message) : Error("attack", message) {}
};

class AlignmentError : public Error {
 public:
  explicit AlignmentError(const std::string& message)
      : Error("alignment", message) {}
};

class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& message)
      : Error("undefined_metric", message) {}
};

class IncompleteMatrixError : public Error {
 public:
  explicit IncompleteMatrixError(std::vector<std::string> gaps)
      : Error("incomplete_matrix", describe(gaps)), gaps_(std::move(gaps)) {}

  const std::vector<std::string>& gaps() const noexcept { return gaps_; }

 private:
  static std::string describe(const std::vector<std::string>& gaps) {
    std::string out = "missing verdicts:";
    for (const auto& g : gaps) out += " " + g;
    return out;
  }

  std::vector<std::string> gaps_;
};

class RunError : public Error {
 public:
  explicit RunError(const std::string& message) : Error("run", message) {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& message)
      : Error("not_found", message) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& message) : Error("state", message) {}
};

class BusyError : public Error {
 public:
  explicit BusyError(const std::string& message) : Error("busy", message) {}
};

}  // namespace parley
