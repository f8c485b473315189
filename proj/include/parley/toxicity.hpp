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

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "parley/errors.hpp"
#include "parley/text.hpp"

namespace parley {

inline constexpr double kDefaultThreshold = 0.5;

class ToxicityClassifier {
 public:
  virtual ~ToxicityClassifier() = default;

  virtual const std::string& id() const = 0;

  // Probability-like toxicity score in [0, 1]. Empty text scores 0.
  virtual double score(const std::string& text) const = 0;

  // Threshold the classifier's authors ship with it.
  virtual double default_threshold() const { return kDefaultThreshold; }
};

struct ToxicityVerdict {
  double score = 0.0;
  bool toxic = false;
  std::string classifier_id;
  double threshold = kDefaultThreshold;

  friend bool operator==(const ToxicityVerdict&, const ToxicityVerdict&) = default;
};

// Inclusive rule: score >= threshold is toxic.
inline bool is_toxic(double score, double threshold) {
  return score >= threshold;
}

inline ToxicityVerdict verdict(const ToxicityClassifier& classifier,
                               const std::string& text, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ValidationError("threshold must lie in [0, 1]");
  }
  const double s = classifier.score(text);
  return {s, is_toxic(s, threshold), classifier.id(), threshold};
}

inline ToxicityVerdict verdict(const ToxicityClassifier& classifier,
                               const std::string& text) {
  return verdict(classifier, text, classifier.default_threshold());
}

// Case-insensitive whole-word lexicon. Score is the largest weight among
// matched words.
class LexiconClassifier final : public ToxicityClassifier {
 public:
  LexiconClassifier(std::string id, std::map<std::string, double> entries,
                    double threshold = kDefaultThreshold)
      : id_(std::move(id)), threshold_(threshold) {
    for (auto& [word, weight] : entries) {
      if (!(weight >= 0.0 && weight <= 1.0)) {
        throw ValidationError("lexicon weight for '" + word +
                              "' outside [0, 1]");
      }
      entries_[to_lower(word)] = weight;
    }
  }

  // "word<TAB>weight" per line.
  static LexiconClassifier from_file(std::string id, const std::string& path,
                                     double threshold = kDefaultThreshold) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open lexicon " + path);
    std::map<std::string, double> entries;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw ConfigError("malformed lexicon line: " + line);
      }
      entries[line.substr(0, tab)] = std::stod(line.substr(tab + 1));
    }
    return LexiconClassifier(std::move(id), std::move(entries), threshold);
  }

  const std::string& id() const override { return id_; }
  double default_threshold() const override { return threshold_; }

  double score(const std::string& text) const override {
    double best = 0.0;
    for (const auto& span : split_words(text)) {
      auto it = entries_.find(to_lower(slice(text, span)));
      if (it != entries_.end()) best = std::max(best, it->second);
    }
    return best;
  }

  const std::map<std::string, double>& entries() const { return entries_; }

 private:
  std::string id_;
  double threshold_;
  std::map<std::string, double> entries_;
};

struct EnsembleMember {
  std::shared_ptr<const ToxicityClassifier> classifier;
  double weight = 1.0;
};

// Weighted average of member scores; weights are non-negative and sum to 1.
class Ensemble {
 public:
  explicit Ensemble(std::vector<EnsembleMember> members)
      : members_(std::move(members)) {
    if (members_.empty()) throw ValidationError("ensemble has no members");
    double sum = 0.0;
    for (const auto& m : members_) {
      if (!m.classifier) throw ValidationError("ensemble member is null");
      if (!(m.weight >= 0.0)) throw ValidationError("negative ensemble weight");
      sum += m.weight;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ValidationError("ensemble weights must sum to 1");
    }
  }

  static Ensemble equal_weights(
      std::vector<std::shared_ptr<const ToxicityClassifier>> classifiers) {
    std::vector<EnsembleMember> members;
    const double w = 1.0 / static_cast<double>(std::max<std::size_t>(1, classifiers.size()));
    for (auto& c : classifiers) members.push_back({std::move(c), w});
    if (members.size() == 1) members.front().weight = 1.0;
    return Ensemble(std::move(members));
  }

  const std::vector<EnsembleMember>& members() const { return members_; }

  // Per-member scores in member order; any failure raises an EnsembleError
  // naming every failed member.
  std::map<std::string, double> member_scores(const std::string& text) const {
    std::map<std::string, double> out;
    std::vector<std::string> failed;
    std::string detail;
    for (const auto& m : members_) {
      try {
        out[m.classifier->id()] = m.classifier->score(text);
      } catch (const std::exception& e) {
        failed.push_back(m.classifier->id());
        detail += std::string(" [") + m.classifier->id() + ": " + e.what() + "]";
      }
    }
    if (!failed.empty()) {
      throw EnsembleError(failed, "ensemble members failed:" + detail);
    }
    return out;
  }

  // Combines already computed per-member scores.
  double combine(const std::map<std::string, double>& scores) const {
    if (members_.size() == 1) return scores.at(members_.front().classifier->id());
    double total = 0.0;
    double lo = 1.0;
    double hi = 0.0;
    for (const auto& m : members_) {
      const double s = scores.at(m.classifier->id());
      total += m.weight * s;
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    // Rounding in the weighted sum must not leave the member range.
    return std::clamp(total, lo, hi);
  }

  double score(const std::string& text) const {
    return combine(member_scores(text));
  }

 private:
  std::vector<EnsembleMember> members_;
};

inline double ensemble_score(const Ensemble& ensemble, const std::string& text) {
  return ensemble.score(text);
}

// Lowercase hex SHA-256 of normalized text.
inline std::string text_digest(const std::string& text) {
  const std::string normalized = normalize_text(text);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(normalized.data(), normalized.size(), md, &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error("digest", "SHA-256 digest failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  static constexpr char kHex[] = "0123456789abcdef";
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[md[i] >> 4]);
    hex.push_back(kHex[md[i] & 0xf]);
  }
  return hex;
}

struct ScoreCacheKey {
  std::string classifier_id;
  std::string text_digest;

  static ScoreCacheKey of(const std::string& classifier_id,
                          const std::string& text) {
    return {classifier_id, parley::text_digest(text)};
  }

  std::string flat() const { return classifier_id + '\t' + text_digest; }

  friend bool operator==(const ScoreCacheKey&, const ScoreCacheKey&) = default;
};

// Score cache with an optional append-only backing file of
// "classifier_id<TAB>digest<TAB>score" records. Later records win on load.
class ScoreCache {
 public:
  ScoreCache() = default;

  explicit ScoreCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream fields(line);
      std::string id, digest, value;
      if (!std::getline(fields, id, '\t') ||
          !std::getline(fields, digest, '\t') || !std::getline(fields, value)) {
        continue;  // torn trailing record
      }
      try {
        entries_[id + '\t' + digest] = std::stod(value);
      } catch (const std::exception&) {
        continue;
      }
    }
  }

  std::optional<double> get(const ScoreCacheKey& key) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key.flat());
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const ScoreCacheKey& key, double score) {
    std::unique_lock lock(mutex_);
    entries_[key.flat()] = score;
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", score);
      out << key.flat() << '\t' << buf << '\n';
      out.flush();
      if (!out) throw Error("cache", "cannot append to score cache " + path_);
    }
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, double> entries_;
};

// Wraps a classifier with a shared score cache. Misses are computed under a
// lock so a (classifier, text) pair is never sent to the backend twice.
class CachedClassifier final : public ToxicityClassifier {
 public:
  CachedClassifier(std::shared_ptr<const ToxicityClassifier> inner,
                   std::shared_ptr<ScoreCache> cache)
      : inner_(std::move(inner)), cache_(std::move(cache)) {}

  const std::string& id() const override { return inner_->id(); }
  double default_threshold() const override {
    return inner_->default_threshold();
  }

  double score(const std::string& text) const override {
    const auto key = ScoreCacheKey::of(inner_->id(), text);
    if (auto hit = cache_->get(key)) return *hit;
    std::lock_guard lock(miss_mutex_);
    if (auto hit = cache_->get(key)) return *hit;
    const double s = inner_->score(text);
    cache_->put(key, s);
    return s;
  }

 private:
  std::shared_ptr<const ToxicityClassifier> inner_;
  std::shared_ptr<ScoreCache> cache_;
  mutable std::mutex miss_mutex_;
};

}  // namespace parley
