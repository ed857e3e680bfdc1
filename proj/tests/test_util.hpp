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

#ifndef OBSV_TESTS_TEST_UTIL_HPP_
#define OBSV_TESTS_TEST_UTIL_HPP_

// Fixture builders and textbook oracles that share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "obsv.hpp"

namespace obsv_test {

// Random records with valid column ranges. Documents hold `per_doc` tokens.
inline obsv::RecordSet random_records(std::size_t n, std::uint32_t d, std::uint64_t seed,
                                      std::size_t per_doc = 16) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.01, 1.0);
  obsv::RecordSet rs(d);
  std::vector<float> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : row) x = static_cast<float>(normal(gen));
    rs.push_back(static_cast<std::uint32_t>(i / per_doc), static_cast<std::uint32_t>(i % per_doc),
                 static_cast<std::uint32_t>(gen() % 50), static_cast<float>(std::abs(normal(gen)) * 3.0),
                 static_cast<float>(unit(gen)), static_cast<float>(unit(gen) * 5.0), row);
  }
  return rs;
}

inline std::vector<double> draw_normal(std::size_t n, std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (auto& x : v) x = normal(gen);
  return v;
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Midranks by counting: rank_i = #{x_j < x_i} + (#{x_j == x_i} + 1) / 2.
inline std::vector<double> count_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : x) {
      if (y < x[i]) less += 1;
      else if (y == x[i]) equal += 1;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double textbook_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sa += a[i], sb += b[i];
  const double ma = sa / n, mb = sb / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(da * db);
}

// Solves A x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> gauss_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t k = b.size();
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < k; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < k; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t t = c; t < k; ++t) a[r][t] -= f * a[c][t];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(k);
  for (std::size_t c = k; c-- > 0;) {
    double s = b[c];
    for (std::size_t t = c + 1; t < k; ++t) s -= a[c][t] * x[t];
    x[c] = s / a[c][c];
  }
  return x;
}

// OLS residuals of y on the columns of X (X already holds the intercept).
inline std::vector<double> ols_residuals(const std::vector<std::vector<double>>& cols, const std::vector<double>& y) {
  const std::size_t k = cols.size(), n = y.size();
  std::vector<std::vector<double>> xtx(k, std::vector<double>(k, 0.0));
  std::vector<double> xty(k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      for (std::size_t i = 0; i < n; ++i) xtx[a][b] += cols[a][i] * cols[b][i];
    }
    for (std::size_t i = 0; i < n; ++i) xty[a] += cols[a][i] * y[i];
  }
  const auto beta = gauss_solve(xtx, xty);
  std::vector<double> r(y);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) r[i] -= beta[a] * cols[a][i];
  }
  return r;
}

// rank -> explicit OLS residuals -> Pearson.
inline double oracle_partial_spearman(const std::vector<double>& score, const std::vector<double>& loss,
                                      const std::vector<std::vector<double>>& controls) {
  std::vector<std::vector<double>> cols = {std::vector<double>(score.size(), 1.0)};
  for (const auto& c : controls) cols.push_back(count_ranks(c));
  return textbook_pearson(ols_residuals(cols, count_ranks(score)), ols_residuals(cols, count_ranks(loss)));
}

inline obsv::ControlMatrix control_matrix(const std::vector<std::vector<double>>& controls) {
  obsv::ControlMatrix c = obsv::intercept_only(static_cast<Eigen::Index>(controls.empty() ? 0 : controls[0].size()));
  for (std::size_t j = 0; j < controls.size(); ++j) c = c.with_column("c" + std::to_string(j), to_eigen(controls[j]));
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("obsv_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Desk-scale optimizer settings: the default lr and batch take too few steps
// at a few thousand tokens.
inline obsv::TrainConfig desk_config(std::uint64_t seed = 42) {
  obsv::TrainConfig c;
  c.lr = 1e-2;
  c.batch_size = 256;
  c.epochs = 50;
  c.seed = seed;
  return c;
}

}  // namespace obsv_test

#endif  // OBSV_TESTS_TEST_UTIL_HPP_
