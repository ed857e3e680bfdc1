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

#ifndef OBSV_CONTROLS_HPP_
#define OBSV_CONTROLS_HPP_

// Control covariates, the OLS residual target, and hand-designed
// activation statistics used as baseline observers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "obsv/error.hpp"
#include "obsv/linalg.hpp"
#include "obsv/record_store.hpp"

namespace obsv {

inline constexpr const char* kMaxSoftmax = "max_softmax";
inline constexpr const char* kActNorm = "act_norm";
inline constexpr const char* kLogitEntropy = "logit_entropy";
inline constexpr const char* kMahalanobis = "mahalanobis";
inline constexpr const char* kTokenFreq = "token_freq";

inline std::vector<std::string> standard_controls() { return {kMaxSoftmax, kActNorm}; }

// n x k covariate matrix; column 0 is the intercept. Entries are raw
// covariate values; rank-based consumers transform them themselves.
struct ControlMatrix {
  Eigen::MatrixXd columns;
  std::vector<std::string> names;
  std::string fitted_on;

  Eigen::Index n() const { return columns.rows(); }
  Eigen::Index k() const { return columns.cols(); }

  // Returns a copy with one extra named column (e.g. a learned loss predictor).
  ControlMatrix with_column(std::string name, const Eigen::VectorXd& values) const {
    if (values.size() != n()) throw SchemaError("control column length mismatch");
    ControlMatrix out;
    out.columns.resize(n(), k() + 1);
    out.columns.leftCols(k()) = columns;
    out.columns.col(k()) = values;
    out.names = names;
    out.names.push_back(std::move(name));
    out.fitted_on = fitted_on;
    return out;
  }
};

inline ControlMatrix intercept_only(Eigen::Index n) {
  ControlMatrix c;
  c.columns = Eigen::MatrixXd::Ones(n, 1);
  c.names = {"intercept"};
  return c;
}

// Training-split activation mean and regularized covariance.
class TypicalityStats {
 public:
  TypicalityStats() = default;

  // cov is regularized by lambda I with lambda = 1e-6 * trace / d.
  TypicalityStats(Eigen::VectorXd mean, Eigen::MatrixXd cov) : mean_(std::move(mean)) {
    if (cov.rows() != mean_.size() || cov.cols() != mean_.size()) {
      throw SchemaError("typicality covariance shape does not match mean");
    }
    const double d = static_cast<double>(mean_.size());
    const double lambda = 1e-6 * cov.trace() / d;
    cov.diagonal().array() += lambda > 0.0 ? lambda : 1e-12;
    llt_.compute(cov);
    if (llt_.info() != Eigen::Success) {
      throw NumericalError("typicality covariance is not positive definite");
    }
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Eigen::VectorXd& mean() const { return mean_; }

  double distance(std::span<const float> x) const {
    Eigen::VectorXd diff(mean_.size());
    for (Eigen::Index j = 0; j < mean_.size(); ++j) diff[j] = x[j] - mean_[j];
    const Eigen::VectorXd z = llt_.matrixL().solve(diff);
    return z.norm();
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

inline TypicalityStats fit_typicality(const RecordSet& train) {
  if (train.size() < 2) throw DataError("typicality fit needs at least 2 tokens");
  const Eigen::MatrixXd x = train.activation_matrix();
  const Eigen::VectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  return TypicalityStats(mean, cov);
}

// Mahalanobis distance of each activation from the training mean.
inline Eigen::VectorXd mahalanobis_typicality(const RecordSet& records,
                                              const TypicalityStats& stats) {
  if (static_cast<Eigen::Index>(records.dim()) != stats.dim()) {
    throw SchemaError("typicality stats fitted on d=" + std::to_string(stats.dim()) +
                      " but records have d=" + std::to_string(records.dim()));
  }
  Eigen::VectorXd out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) out[i] = stats.distance(records.row(i));
  return out;
}

struct CorpusCounts {
  std::unordered_map<std::uint32_t, std::uint64_t> counts;
  std::uint64_t total = 0;
  std::uint64_t vocab_size = 0;
};

inline CorpusCounts build_corpus_counts(const RecordSet& train, std::uint64_t vocab_size) {
  CorpusCounts c;
  c.vocab_size = vocab_size;
  for (auto id : train.token_ids()) {
    ++c.counts[id];
    ++c.total;
  }
  return c;
}

// Add-one smoothed log unigram frequency: log((count + 1) / (total + V)).
inline Eigen::VectorXd token_log_frequency(const RecordSet& records, const CorpusCounts& corpus) {
  const double denom = static_cast<double>(corpus.total + corpus.vocab_size);
  if (!(denom > 0.0)) throw ConfigError("corpus counts have zero total and vocabulary");
  Eigen::VectorXd out(records.size());
  const auto ids = records.token_ids();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = corpus.counts.find(ids[i]);
    const double count = it == corpus.counts.end() ? 0.0 : static_cast<double>(it->second);
    out[i] = std::log((count + 1.0) / denom);
  }
  return out;
}

// Fitted state needed by the controls that are not pure per-token functions.
struct ControlContext {
  const TypicalityStats* typicality = nullptr;
  const CorpusCounts* corpus = nullptr;
};

inline Eigen::VectorXd control_column(const RecordSet& records, const std::string& name,
                                      const ControlContext& ctx) {
  if (name == kMaxSoftmax) return records.max_softmax_vector();
  if (name == kActNorm) return compute_norms(records);
  if (name == kLogitEntropy) return records.logit_entropy_vector();
  if (name == kMahalanobis) {
    if (ctx.typicality == nullptr) {
      throw ConfigError("control 'mahalanobis' needs typicality stats from the training split");
    }
    return mahalanobis_typicality(records, *ctx.typicality);
  }
  if (name == kTokenFreq) {
    if (ctx.corpus == nullptr) {
      throw ConfigError("control 'token_freq' needs corpus counts from the training split");
    }
    return token_log_frequency(records, *ctx.corpus);
  }
  throw ConfigError("unknown control '" + name + "'");
}

inline ControlMatrix build_control_matrix(const RecordSet& records,
                                          std::span<const std::string> control_set,
                                          const ControlContext& ctx = {},
                                          std::string fitted_on = {}) {
  ControlMatrix c;
  const auto n = static_cast<Eigen::Index>(records.size());
  c.columns.resize(n, static_cast<Eigen::Index>(control_set.size()) + 1);
  c.columns.col(0).setOnes();
  c.names.push_back("intercept");
  for (std::size_t j = 0; j < control_set.size(); ++j) {
    c.columns.col(static_cast<Eigen::Index>(j) + 1) =
        control_column(records, control_set[j], ctx);
    c.names.push_back(control_set[j]);
  }
  if (!c.columns.allFinite()) throw SchemaError("control matrix has non-finite entries");
  c.fitted_on = std::move(fitted_on);
  return c;
}

inline ControlMatrix build_control_matrix(const RecordSet& records,
                                          const std::vector<std::string>& control_set,
                                          const ControlContext& ctx = {},
                                          std::string fitted_on = {}) {
  return build_control_matrix(records, std::span<const std::string>(control_set), ctx,
                              std::move(fitted_on));
}

struct ResidualTarget {
  Eigen::VectorXd ols_coef;
  Eigen::VectorXd residuals;
  std::vector<std::uint8_t> binary;

  std::size_t size() const { return binary.size(); }
  double positive_rate() const {
    if (binary.empty()) return 0.0;
    std::size_t pos = 0;
    for (auto b : binary) pos += b;
    return static_cast<double>(pos) / static_cast<double>(binary.size());
  }
};

// Applies already-fitted OLS coefficients. Residuals within a relative
// 1e-12 of zero count as exact ties and map to label 0.
inline ResidualTarget apply_residual_target(const Eigen::VectorXd& loss,
                                            const ControlMatrix& controls,
                                            const Eigen::VectorXd& coef) {
  if (loss.size() != controls.n()) throw SchemaError("loss and control lengths differ");
  if (coef.size() != controls.k()) throw SchemaError("coefficient count does not match controls");
  ResidualTarget t;
  t.ols_coef = coef;
  t.residuals = loss - controls.columns * coef;
  const double scale = std::max(1.0, loss.cwiseAbs().maxCoeff());
  const double tie = 1e-12 * scale;
  t.binary.resize(static_cast<std::size_t>(loss.size()));
  for (Eigen::Index i = 0; i < loss.size(); ++i) {
    if (std::abs(t.residuals[i]) <= tie) t.residuals[i] = 0.0;
    t.binary[static_cast<std::size_t>(i)] = t.residuals[i] > 0.0 ? 1 : 0;
  }
  return t;
}

// Fits loss ~ controls by OLS on the probe training split and thresholds the
// residual at zero. Reuse `ols_coef` with apply_residual_target on other splits.
inline ResidualTarget fit_residual_target(const Eigen::VectorXd& loss,
                                          const ControlMatrix& controls) {
  if (loss.size() != controls.n()) throw SchemaError("loss and control lengths differ");
  if (loss.size() == 0) throw DataError("cannot fit residual target on zero tokens");
  const Eigen::VectorXd coef = ols_coefficients(controls.columns, loss);
  return apply_residual_target(loss, controls, coef);
}

struct HandcraftedStats {
  Eigen::VectorXd ff_goodness;
  Eigen::VectorXd active_ratio;
  Eigen::VectorXd activation_entropy;
  Eigen::VectorXd act_norm;
};

// Sum of squares, fraction of strictly positive coordinates, entropy of the
// |h|-normalized distribution, and L2 norm. All-zero rows give 0 entropy.
inline HandcraftedStats handcrafted_stats(const RecordSet& records) {
  const auto n = static_cast<Eigen::Index>(records.size());
  HandcraftedStats s;
  s.ff_goodness.resize(n);
  s.active_ratio.resize(n);
  s.activation_entropy.resize(n);
  s.act_norm.resize(n);
  const double d = records.dim();
  for (Eigen::Index i = 0; i < n; ++i) {
    double ss = 0.0, abs_sum = 0.0;
    std::size_t active = 0;
    const auto row = records.row(static_cast<std::size_t>(i));
    for (float a : row) {
      ss += static_cast<double>(a) * a;
      abs_sum += std::abs(static_cast<double>(a));
      if (a > 0.0f) ++active;
    }
    double entropy = 0.0;
    if (abs_sum > 0.0) {
      for (float a : row) {
        const double p = std::abs(static_cast<double>(a)) / abs_sum;
        if (p > 0.0) entropy -= p * std::log(p);
      }
    }
    s.ff_goodness[i] = ss;
    s.active_ratio[i] = d > 0 ? static_cast<double>(active) / d : 0.0;
    s.activation_entropy[i] = entropy;
    s.act_norm[i] = std::sqrt(ss);
  }
  return s;
}

}  // namespace obsv

#endif  // OBSV_CONTROLS_HPP_
