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

#ifndef OBSV_RANK_METRICS_HPP_
#define OBSV_RANK_METRICS_HPP_

// Rank statistics: Spearman, partial Spearman under controls, the
// output-controlled residual, seed agreement, absorption, signal geometry.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "json.hpp"
#include "obsv/controls.hpp"
#include "obsv/error.hpp"
#include "obsv/linalg.hpp"
#include "obsv/observer.hpp"
#include "obsv/record_store.hpp"

namespace obsv {

// Average (mid) ranks starting at 1; ties share the mean of their positions.
inline Eigen::VectorXd rank_transform(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  Eigen::VectorXd ranks(static_cast<Eigen::Index>(n));
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && x[order[j]] == x[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[static_cast<Eigen::Index>(order[t])] = mid;
    i = j;
  }
  return ranks;
}

inline Eigen::VectorXd rank_transform(const Eigen::VectorXd& x) { return rank_transform(as_span(x)); }

inline double spearman(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size()) throw SchemaError("spearman: length mismatch");
  if (x.size() < 3) throw DataError("spearman: need at least 3 observations");
  return pearson(rank_transform(x), rank_transform(y));
}

namespace detail {

// Residuals this small relative to the centered input mean the controls
// explain the variable completely.
inline constexpr double kExplainedTolerance = 1e-9;

inline Eigen::MatrixXd ranked_design(const ControlMatrix& controls) {
  if (controls.k() < 1 || controls.names.empty() || controls.names.front() != "intercept") {
    throw SchemaError("control matrix must lead with an intercept column");
  }
  Eigen::MatrixXd design(controls.n(), controls.k());
  design.col(0).setOnes();
  for (Eigen::Index j = 1; j < controls.k(); ++j) {
    design.col(j) = rank_transform(Eigen::VectorXd(controls.columns.col(j)));
  }
  return design;
}

}  // namespace detail

// Partial Spearman correlation with one fixed control set. The ranked design
// and its factorization are built once, so many scores can be evaluated
// against the same (loss, controls) pair cheaply.
class PartialCorrelator {
 public:
  PartialCorrelator(const Eigen::VectorXd& loss, const ControlMatrix& controls)
      : projector_(detail::ranked_design(controls)) {
    if (loss.size() != controls.n()) throw SchemaError("loss and controls lengths differ");
    if (loss.size() < 3) throw DataError("partial correlation needs at least 3 tokens");
    const Eigen::VectorXd loss_rank = rank_transform(loss);
    loss_resid_ = projector_.residualize(loss_rank);
    loss_explained_ = explained(loss_rank, loss_resid_);
  }

  double operator()(const Eigen::VectorXd& score) const {
    if (score.size() != projector_.rows()) throw SchemaError("score length does not match controls");
    const Eigen::VectorXd score_rank = rank_transform(score);
    const Eigen::VectorXd score_resid = projector_.residualize(score_rank);
    if (loss_explained_ || explained(score_rank, score_resid)) return 0.0;
    return pearson(score_resid, loss_resid_);
  }

 private:
  static bool explained(const Eigen::VectorXd& ranks, const Eigen::VectorXd& resid) {
    const double spread = (ranks.array() - ranks.mean()).matrix().norm();
    if (spread == 0.0) throw UndefinedError("correlation undefined for constant input");
    return resid.norm() <= detail::kExplainedTolerance * spread;
  }

  Projector projector_;
  Eigen::VectorXd loss_resid_;
  bool loss_explained_ = false;
};

// rho_partial: rank all variables, project score and loss ranks onto the
// ranked control space (intercept included), correlate the residuals.
inline double partial_spearman(const Eigen::VectorXd& score, const Eigen::VectorXd& loss,
                               const ControlMatrix& controls) {
  return PartialCorrelator(loss, controls)(score);
}

// r_OC: partial Spearman with the output-side loss prediction as an extra control.
inline double oc_residual(const Eigen::VectorXd& score, const Eigen::VectorXd& loss,
                          const ControlMatrix& controls, const Eigen::VectorXd& output_pred) {
  return partial_spearman(score, loss, controls.with_column("output_pred", output_pred));
}

// Mean pairwise Spearman over k >= 2 score vectors.
inline double seed_agreement(std::span<const Eigen::VectorXd> score_sets) {
  if (score_sets.size() < 2) throw DataError("seed agreement needs at least 2 score sets");
  std::vector<Eigen::VectorXd> ranks;
  ranks.reserve(score_sets.size());
  for (const auto& s : score_sets) {
    if (s.size() != score_sets.front().size()) throw SchemaError("score sets differ in length");
    ranks.push_back(rank_transform(s));
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    for (std::size_t j = i + 1; j < ranks.size(); ++j) {
      total += pearson(ranks[i], ranks[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

inline double seed_agreement(const std::vector<Eigen::VectorXd>& score_sets) {
  return seed_agreement(std::span<const Eigen::VectorXd>(score_sets));
}

// Share of the raw correlation removed by the controls: 1 - controlled/raw.
inline double absorbed_fraction(double raw, double controlled) {
  if (raw == 0.0) throw UndefinedError("absorbed fraction undefined for zero raw correlation");
  return 1.0 - controlled / raw;
}

struct SignalGeometry {
  double pc1_cosine = 0.0;       // |cos(w, PC1)|; PC signs are arbitrary
  double top10_var_share = 0.0;  // variance fraction in the top min(10, d) PCs
};

inline SignalGeometry signal_geometry(const Eigen::VectorXd& direction, const RecordSet& records) {
  if (records.size() < 2) throw DataError("signal geometry needs at least 2 tokens");
  if (direction.size() != static_cast<Eigen::Index>(records.dim())) {
    throw SchemaError("direction dimension does not match records");
  }
  const Eigen::MatrixXd x = records.activation_matrix();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
  // Eigenvalues ascend; the last column is PC1.
  const Eigen::VectorXd values = eig.eigenvalues().cwiseMax(0.0);
  const Eigen::Index d = values.size();
  const Eigen::VectorXd pc1 = eig.eigenvectors().col(d - 1);
  SignalGeometry g;
  const double wn = direction.norm();
  g.pc1_cosine = wn > 0.0 ? std::abs(direction.dot(pc1)) / wn : 0.0;
  const double total = values.sum();
  const Eigen::Index top = std::min<Eigen::Index>(10, d);
  g.top10_var_share = total > 0.0 ? values.tail(top).sum() / total : 0.0;
  return g;
}

inline SignalGeometry signal_geometry(const LinearObserver& obs, const RecordSet& records) {
  return signal_geometry(obs.w, records);
}

struct MetricReport {
  std::string model;
  int layer = -1;
  std::size_t n_tokens = 0;
  std::vector<std::string> control_set;
  double raw_spearman = 0.0;
  double pcorr = 0.0;
  double pcorr_std = 0.0;
  std::optional<double> oc_resid;
  std::optional<double> seed_agreement;
  std::optional<double> absorbed_fraction;
  std::vector<double> per_seed_pcorr;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j = {{"model", r.model},
       {"layer", r.layer},
       {"n_tokens", r.n_tokens},
       {"control_set", r.control_set},
       {"raw_spearman", r.raw_spearman},
       {"pcorr", r.pcorr},
       {"pcorr_std", r.pcorr_std},
       {"oc_resid", opt(r.oc_resid)},
       {"seed_agreement", opt(r.seed_agreement)},
       {"absorbed_fraction", opt(r.absorbed_fraction)},
       {"per_seed_pcorr", r.per_seed_pcorr}};
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
  };
  r.model = j.value("model", std::string{});
  r.layer = j.value("layer", -1);
  r.n_tokens = j.value("n_tokens", std::size_t{0});
  r.control_set = j.value("control_set", std::vector<std::string>{});
  r.raw_spearman = j.value("raw_spearman", 0.0);
  r.pcorr = j.at("pcorr").get<double>();
  r.pcorr_std = j.value("pcorr_std", 0.0);
  r.oc_resid = opt("oc_resid");
  r.seed_agreement = opt("seed_agreement");
  r.absorbed_fraction = opt("absorbed_fraction");
  r.per_seed_pcorr = j.value("per_seed_pcorr", std::vector<double>{});
}

}  // namespace obsv

#endif  // OBSV_RANK_METRICS_HPP_
