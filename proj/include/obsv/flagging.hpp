/*
 * Copyright 2026 The obsv Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef OBSV_FLAGGING_HPP_
#define OBSV_FLAGGING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "obsv/error.hpp"

namespace obsv {

enum class RankOrder { kDescending, kAscending };

struct FlagSet {
  std::string ranker;
  double rate = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> ids;  // ascending

  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(n, 0);
    for (auto i : ids) m[i] = 1;
    return m;
  }
};

inline void to_json(nlohmann::json& j, const FlagSet& f) {
  j = {{"ranker", f.ranker}, {"rate", f.rate}, {"n", f.n}, {"ids", f.ids}};
}

// Flags floor(f*n) items. Descending order flags the highest scores (the
// observer); ascending flags the lowest (max-softmax confidence). Ties at the
// boundary go to the lower id.
inline FlagSet flag_at_rate(std::span<const double> scores, double f,
                            RankOrder order = RankOrder::kDescending, std::string ranker = "observer") {
  if (scores.empty()) throw DataError("cannot flag an empty input");
  if (!(f > 0.0 && f < 1.0)) throw ConfigError("flag rate must lie in (0, 1)");
  const std::size_t n = scores.size();
  const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (order == RankOrder::kDescending) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  }
  FlagSet out;
  out.ranker = std::move(ranker);
  out.rate = f;
  out.n = n;
  out.ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.ids.begin(), out.ids.end());
  return out;
}

inline FlagSet flag_at_rate(const Eigen::VectorXd& scores, double f, RankOrder order = RankOrder::kDescending,
                            std::string ranker = "observer") {
  return flag_at_rate(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), f, order,
                      std::move(ranker));
}

namespace detail {

inline std::size_t count_errors(std::span<const std::uint8_t> errors) {
  std::size_t e = 0;
  for (auto x : errors) e += x != 0;
  if (e == 0) throw UndefinedError("error set is empty");
  return e;
}

}  // namespace detail

// |observer & !confidence & errors| / |errors|
inline double exclusive_catch_rate(const FlagSet& observer, const FlagSet& confidence,
                                   std::span<const std::uint8_t> errors) {
  if (observer.n != errors.size() || confidence.n != errors.size()) {
    throw SchemaError("flag sets and error set cover different universes");
  }
  const std::size_t e = detail::count_errors(errors);
  const auto conf = confidence.mask();
  std::size_t hit = 0;
  for (auto i : observer.ids) {
    if (errors[i] && !conf[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(e);
}

// Expected exclusive catch of a ranker independent of confidence at rate f:
// f * (1 - q), q = share of errors already flagged by confidence.
inline double random_ranker_baseline(double f, const FlagSet& confidence, std::span<const std::uint8_t> errors) {
  if (confidence.n != errors.size()) throw SchemaError("flag set and error set cover different universes");
  const std::size_t e = detail::count_errors(errors);
  std::size_t caught = 0;
  for (auto i : confidence.ids) caught += errors[i] != 0;
  const double q = static_cast<double>(caught) / static_cast<double>(e);
  return f * (1.0 - q);
}

// Errors are tokens whose loss exceeds the median of the given split.
inline std::vector<std::uint8_t> loss_above_median(std::span<const double> loss) {
  if (loss.empty()) throw DataError("median of empty loss vector");
  std::vector<double> s(loss.begin(), loss.end());
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  const double med = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = loss[i] > med ? 1 : 0;
  return out;
}

inline std::vector<std::uint8_t> loss_above_median(const Eigen::VectorXd& loss) {
  return loss_above_median(std::span<const double>(loss.data(), static_cast<std::size_t>(loss.size())));
}

// ---- question-level records -------------------------------------------------

struct QuestionRecord {
  std::string id;
  std::string task;
  bool correct = false;
  std::vector<double> observer_scores;  // generated tokens only
  std::vector<double> confidences;
};

inline void to_json(nlohmann::json& j, const QuestionRecord& q) {
  j = {{"id", q.id},
       {"task", q.task},
       {"correct", q.correct},
       {"observer_scores", q.observer_scores},
       {"confidences", q.confidences}};
}

inline QuestionRecord question_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("question record must be an object");
  for (const char* key : {"id", "correct", "observer_scores", "confidences"}) {
    if (!j.contains(key)) throw SchemaError(std::string("question record missing '") + key + "'");
  }
  QuestionRecord q;
  try {
    q.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    q.task = j.value("task", std::string{});
    q.correct = j["correct"].get<bool>();
    q.observer_scores = j["observer_scores"].get<std::vector<double>>();
    q.confidences = j["confidences"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("question record: ") + e.what());
  }
  if (q.observer_scores.size() != q.confidences.size()) {
    throw SchemaError("question " + q.id + ": score and confidence arrays differ in length");
  }
  return q;
}

// One JSON object per line; blank lines are skipped.
inline std::vector<QuestionRecord> read_question_records(std::istream& in) {
  std::vector<QuestionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("question records line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      out.push_back(question_from_json(j));
    } catch (const SchemaError& e) {
      throw SchemaError("question records line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<QuestionRecord> load_question_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_question_records(in);
}

inline void write_question_records(std::ostream& out, const std::vector<QuestionRecord>& records) {
  for (const auto& q : records) out << nlohmann::json(q).dump() << '\n';
}

struct QuestionSummary {
  std::string id;
  std::string task;
  bool correct = false;
  double observer_score = 0.0;
  double confidence = 0.0;
};

// Mean observer score and mean confidence over each question's generated tokens.
inline std::vector<QuestionSummary> aggregate_questions(const std::vector<QuestionRecord>& records) {
  std::vector<QuestionSummary> out;
  out.reserve(records.size());
  for (const auto& q : records) {
    if (q.observer_scores.empty()) throw DataError("question " + q.id + " has no generated tokens");
    const double n = static_cast<double>(q.observer_scores.size());
    out.push_back({q.id, q.task, q.correct,
                   std::accumulate(q.observer_scores.begin(), q.observer_scores.end(), 0.0) / n,
                   std::accumulate(q.confidences.begin(), q.confidences.end(), 0.0) / n});
  }
  return out;
}

struct DownstreamCatch {
  double rate = 0.0;
  double exclusive_catch = 0.0;
  double random_baseline = 0.0;
  std::size_t n_questions = 0;
  std::size_t n_wrong = 0;
};

inline void to_json(nlohmann::json& j, const DownstreamCatch& d) {
  j = {{"rate", d.rate},
       {"exclusive_catch", d.exclusive_catch},
       {"random_baseline", d.random_baseline},
       {"n_questions", d.n_questions},
       {"n_wrong", d.n_wrong}};
}

// Question-level exclusive catch: wrong answers are the errors.
inline DownstreamCatch downstream_catch(const std::vector<QuestionSummary>& qs, double f) {
  std::vector<double> obs, conf;
  std::vector<std::uint8_t> wrong;
  for (const auto& q : qs) {
    obs.push_back(q.observer_score);
    conf.push_back(q.confidence);
    wrong.push_back(q.correct ? 0 : 1);
  }
  const FlagSet fo = flag_at_rate(obs, f, RankOrder::kDescending, "observer");
  const FlagSet fc = flag_at_rate(conf, f, RankOrder::kAscending, "confidence");
  DownstreamCatch d;
  d.rate = f;
  d.n_questions = qs.size();
  d.n_wrong = static_cast<std::size_t>(std::count(wrong.begin(), wrong.end(), 1));
  d.exclusive_catch = exclusive_catch_rate(fo, fc, wrong);
  d.random_baseline = random_ranker_baseline(f, fc, wrong);
  return d;
}

// Default: the high-confidence stratum starts at the median confidence of
// wrong answers.
inline constexpr double kConfidentWrongQuantile = 0.5;

// AUC of the observer separating wrong from right answers among questions
// whose confidence is at or above the quantile threshold.
inline double confident_wrong_auc(const std::vector<QuestionSummary>& qs,
                                  double confidence_quantile = kConfidentWrongQuantile) {
  if (!(confidence_quantile >= 0.0 && confidence_quantile < 1.0)) {
    throw ConfigError("confidence quantile must lie in [0, 1)");
  }
  std::vector<double> wrong_conf;
  for (const auto& q : qs) {
    if (!q.correct) wrong_conf.push_back(q.confidence);
  }
  if (wrong_conf.empty()) throw UndefinedError("no wrong answers");
  std::sort(wrong_conf.begin(), wrong_conf.end());
  const double pos = confidence_quantile * static_cast<double>(wrong_conf.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, wrong_conf.size() - 1);
  const double threshold = wrong_conf[lo] + (pos - static_cast<double>(lo)) * (wrong_conf[hi] - wrong_conf[lo]);
  std::vector<double> pos_scores, neg_scores;
  for (const auto& q : qs) {
    if (q.confidence < threshold) continue;
    (q.correct ? neg_scores : pos_scores).push_back(q.observer_score);
  }
  if (pos_scores.empty() || neg_scores.empty()) {
    throw UndefinedError("confidently-wrong AUC needs both classes in the high-confidence stratum");
  }
  double wins = 0.0;
  for (double p : pos_scores) {
    for (double n : neg_scores) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(pos_scores.size()) * static_cast<double>(neg_scores.size()));
}

}  // namespace obsv

#endif  // OBSV_FLAGGING_HPP_
