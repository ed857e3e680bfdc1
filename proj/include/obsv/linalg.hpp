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

#ifndef OBSV_LINALG_HPP_
#define OBSV_LINALG_HPP_

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include "obsv/error.hpp"

namespace obsv {

inline Eigen::VectorXd to_vector(std::span<const double> x) {
  return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
}

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

namespace detail {

inline double ridge_lambda(const Eigen::MatrixXd& gram) {
  const double k = static_cast<double>(gram.rows());
  const double trace = gram.trace();
  return 1e-8 * (trace > 0.0 ? trace : 1.0) / (k > 0.0 ? k : 1.0);
}

// Solves (G + lambda I) b = rhs; throws if the regularized system is still
// not positive definite.
inline Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& gram, const Eigen::MatrixXd& rhs) {
  Eigen::MatrixXd reg = gram;
  reg.diagonal().array() += ridge_lambda(gram);
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-15)) {
    throw NumericalError("normal matrix singular after ridge fallback");
  }
  Eigen::MatrixXd sol = llt.solve(rhs);
  if (!sol.allFinite()) throw NumericalError("ridge solve produced non-finite coefficients");
  return sol;
}

}  // namespace detail

// OLS coefficients via the normal equations; falls back to ridge with
// lambda = 1e-8 * trace / k when the normal matrix is ill-conditioned.
inline Eigen::VectorXd ols_coefficients(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (x.rows() != y.size()) throw SchemaError("design and response lengths differ");
  const Eigen::MatrixXd gram = x.transpose() * x;
  const Eigen::VectorXd rhs = x.transpose() * y;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-12) {
    Eigen::VectorXd b = llt.solve(rhs);
    if (b.allFinite()) return b;
  }
  return detail::ridge_solve(gram, rhs);
}

// Orthogonal projection onto the column space of a design matrix.
// Full-rank designs use a column-pivoted Householder QR; rank-deficient
// designs fall back to ridge-regularized normal equations.
class Projector {
 public:
  explicit Projector(const Eigen::MatrixXd& design) : design_(design) {
    if (design.cols() == 0) {
      full_rank_ = true;
      return;
    }
    qr_.compute(design);
    full_rank_ = qr_.rank() == design.cols();
    if (!full_rank_) {
      gram_ = design.transpose() * design;
      // Validate the fallback eagerly so callers see the error up front.
      detail::ridge_solve(gram_, Eigen::VectorXd::Zero(design.cols()));
    }
  }

  Eigen::Index rows() const { return design_.rows(); }

  Eigen::VectorXd fitted(const Eigen::VectorXd& y) const {
    if (y.size() != design_.rows()) throw SchemaError("projector length mismatch");
    if (design_.cols() == 0) return Eigen::VectorXd::Zero(y.size());
    if (full_rank_) {
      const Eigen::VectorXd b = qr_.solve(y);
      return design_ * b;
    }
    const Eigen::VectorXd b = detail::ridge_solve(gram_, design_.transpose() * y);
    return design_ * b;
  }

  Eigen::VectorXd residualize(const Eigen::VectorXd& y) const { return y - fitted(y); }

  bool full_rank() const { return full_rank_; }

 private:
  Eigen::MatrixXd design_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
  Eigen::MatrixXd gram_;
  bool full_rank_ = false;
};

// Pearson correlation; throws UndefinedError when either input is constant.
inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw SchemaError("pearson: length mismatch");
  if (a.size() < 2) throw DataError("pearson: need at least 2 observations");
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double na = ca.norm();
  const double nb = cb.norm();
  if (na == 0.0 || nb == 0.0) throw UndefinedError("correlation undefined for constant input");
  const double r = ca.dot(cb) / (na * nb);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace obsv

#endif  // OBSV_LINALG_HPP_
