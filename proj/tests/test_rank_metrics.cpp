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

#include <random>

#include <gtest/gtest.h>

#include "obsv/rank_metrics.hpp"
#include "test_util.hpp"

namespace {

using obsv_test::to_eigen;

Eigen::VectorXd vec(std::initializer_list<double> v) { return to_eigen(std::vector<double>(v)); }

struct Fixture {
  std::vector<double> score, loss;
  std::vector<std::vector<double>> controls;
};

Fixture make_fixture(std::mt19937_64& gen, std::size_t n, std::size_t k) {
  std::normal_distribution<double> z;
  Fixture f;
  f.controls.assign(k, std::vector<double>(n));
  f.score.resize(n);
  f.loss.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double shared = 0.0;
    for (auto& c : f.controls) {
      c[i] = z(gen);
      shared += c[i];
    }
    const double sig = z(gen);
    f.score[i] = 0.5 * shared + sig + 0.5 * z(gen);
    f.loss[i] = shared + 0.6 * sig + z(gen);
  }
  return f;
}

TEST(RankTransform, Examples) {
  EXPECT_EQ(obsv::rank_transform(vec({3, 1, 2})), vec({3, 1, 2}));
  EXPECT_EQ(obsv::rank_transform(vec({5, 5, 1})), vec({2.5, 2.5, 1}));
  EXPECT_EQ(obsv::rank_transform(Eigen::VectorXd(0)).size(), 0);
}

TEST(RankTransform, MatchesCountingOracle) {
  std::mt19937_64 gen(1);
  std::uniform_int_distribution<int> small(0, 9);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(40);
    for (auto& v : x) v = small(gen);
    const auto oracle = obsv_test::count_ranks(x);
    const auto r = obsv::rank_transform(to_eigen(x));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(r[static_cast<Eigen::Index>(i)], oracle[i]);
  }
}

TEST(Spearman, Examples) {
  const Eigen::VectorXd x = vec({0.3, -1.0, 2.0, 5.0, 0.1});
  EXPECT_DOUBLE_EQ(obsv::spearman(x, x), 1.0);
  EXPECT_DOUBLE_EQ(obsv::spearman(x, -x), -1.0);
  EXPECT_THROW(obsv::spearman(x, Eigen::VectorXd::Ones(5)), obsv::UndefinedError);
  EXPECT_THROW(obsv::spearman(vec({1, 2}), vec({1, 2})), obsv::DataError);
  EXPECT_THROW(obsv::spearman(x, vec({1, 2, 3})), obsv::SchemaError);
}

TEST(PartialSpearman, InterceptOnlyEqualsSpearman) {
  std::mt19937_64 gen(2);
  const auto f = make_fixture(gen, 80, 0);
  const auto s = to_eigen(f.score), l = to_eigen(f.loss);
  EXPECT_NEAR(obsv::partial_spearman(s, l, obsv::intercept_only(80)), obsv::spearman(s, l), 1e-12);
}

TEST(PartialSpearman, ScoreEqualToControlIsZero) {
  std::mt19937_64 gen(3);
  const auto f = make_fixture(gen, 100, 2);
  const auto c = obsv_test::control_matrix(f.controls);
  EXPECT_NEAR(obsv::partial_spearman(to_eigen(f.controls[1]), to_eigen(f.loss), c), 0.0, 1e-10);
}

TEST(PartialSpearman, MatchesIndependentOracle) {
  std::mt19937_64 gen(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 10 + gen() % 190;
    const std::size_t k = gen() % 5;
    const auto f = make_fixture(gen, n, k);
    obsv::ControlMatrix c = k == 0 ? obsv::intercept_only(static_cast<Eigen::Index>(n)) : obsv_test::control_matrix(f.controls);
    const double got = obsv::partial_spearman(to_eigen(f.score), to_eigen(f.loss), c);
    EXPECT_NEAR(got, obsv_test::oracle_partial_spearman(f.score, f.loss, f.controls), 1e-10) << "n=" << n << " k=" << k;
  }
}

TEST(PartialSpearman, MonotoneInvarianceExact) {
  std::mt19937_64 gen(5);
  for (int t = 0; t < 30; ++t) {
    const auto f = make_fixture(gen, 150, 2);
    const auto c = obsv_test::control_matrix(f.controls);
    const Eigen::VectorXd s = to_eigen(f.score), l = to_eigen(f.loss);
    const double base = obsv::partial_spearman(s, l, c);
    EXPECT_EQ(obsv::partial_spearman(s.array().exp().matrix(), l, c), base);
    EXPECT_EQ(obsv::partial_spearman((3.0 * s.array() + 7.0).matrix(), l, c), base);
    EXPECT_EQ(obsv::partial_spearman(s.array().cube().matrix(), l, c), base);
  }
}

TEST(PartialSpearman, Symmetry) {
  std::mt19937_64 gen(6);
  const auto f = make_fixture(gen, 120, 3);
  const auto c = obsv_test::control_matrix(f.controls);
  EXPECT_NEAR(obsv::partial_spearman(to_eigen(f.score), to_eigen(f.loss), c),
              obsv::partial_spearman(to_eigen(f.loss), to_eigen(f.score), c), 1e-12);
}

TEST(PartialSpearman, BoundedAndControlOrderFree) {
  std::mt19937_64 gen(7);
  for (int t = 0; t < 20; ++t) {
    auto f = make_fixture(gen, 60, 3);
    const double a = obsv::partial_spearman(to_eigen(f.score), to_eigen(f.loss), obsv_test::control_matrix(f.controls));
    std::reverse(f.controls.begin(), f.controls.end());
    const double b = obsv::partial_spearman(to_eigen(f.score), to_eigen(f.loss), obsv_test::control_matrix(f.controls));
    EXPECT_LE(std::abs(a), 1.0);
    EXPECT_NEAR(a, b, 1e-10);
  }
}

TEST(PartialSpearman, RequiresLeadingIntercept) {
  obsv::ControlMatrix c;
  c.columns = Eigen::MatrixXd::Random(10, 2);
  c.names = {"a", "b"};
  EXPECT_THROW(obsv::partial_spearman(Eigen::VectorXd::Random(10), Eigen::VectorXd::Random(10), c), obsv::SchemaError);
}

TEST(OcResidual, PredictorEqualToScoreGivesZero) {
  std::mt19937_64 gen(8);
  const auto f = make_fixture(gen, 200, 2);
  const auto c = obsv_test::control_matrix(f.controls);
  EXPECT_NEAR(obsv::oc_residual(to_eigen(f.score), to_eigen(f.loss), c, to_eigen(f.score)), 0.0, 1e-10);
}

TEST(OcResidual, IndependentPredictorLeavesPcorr) {
  std::mt19937_64 gen(9);
  const auto f = make_fixture(gen, 20000, 2);
  const auto c = obsv_test::control_matrix(f.controls);
  const auto noise = to_eigen(obsv_test::draw_normal(20000, gen));
  const double pc = obsv::partial_spearman(to_eigen(f.score), to_eigen(f.loss), c);
  // One spare regressor moves the estimate by O(1/n).
  EXPECT_NEAR(obsv::oc_residual(to_eigen(f.score), to_eigen(f.loss), c, noise), pc, 0.01);
}

TEST(SeedAgreement, Examples) {
  const Eigen::VectorXd a = vec({1, 4, 2, 8, 5});
  EXPECT_DOUBLE_EQ(obsv::seed_agreement(std::vector<Eigen::VectorXd>{a, a}), 1.0);
  EXPECT_NEAR(obsv::seed_agreement(std::vector<Eigen::VectorXd>{a, a, -a}), -1.0 / 3.0, 1e-15);
  EXPECT_THROW(obsv::seed_agreement(std::vector<Eigen::VectorXd>{a}), obsv::DataError);
  EXPECT_THROW(obsv::seed_agreement(std::vector<Eigen::VectorXd>{a, Eigen::VectorXd::Ones(5)}), obsv::UndefinedError);
}

TEST(AbsorbedFraction, Examples) {
  EXPECT_NEAR(obsv::absorbed_fraction(0.549, 0.282), 0.486, 5e-4);
  EXPECT_DOUBLE_EQ(obsv::absorbed_fraction(0.4, 0.4), 0.0);
  EXPECT_DOUBLE_EQ(obsv::absorbed_fraction(0.4, 0.0), 1.0);
  EXPECT_THROW(obsv::absorbed_fraction(0.0, 0.1), obsv::UndefinedError);
}

obsv::RecordSet gaussian_records(std::size_t n, const Eigen::VectorXd& scale, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  obsv::RecordSet rs(static_cast<std::uint32_t>(scale.size()));
  std::vector<float> row(static_cast<std::size_t>(scale.size()));
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < scale.size(); ++j) row[static_cast<std::size_t>(j)] = static_cast<float>(scale[j] * z(gen));
    rs.push_back(static_cast<std::uint32_t>(i / 16), static_cast<std::uint32_t>(i % 16), 0, 1.0f, 0.5f, 0.1f, row);
  }
  return rs;
}

TEST(SignalGeometry, PcOneDirection) {
  Eigen::VectorXd scale = Eigen::VectorXd::Ones(6);
  scale[2] = 5.0;
  const auto rs = gaussian_records(2000, scale, 10);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(6);
  w[2] = -3.0;
  EXPECT_NEAR(obsv::signal_geometry(w, rs).pc1_cosine, 1.0, 0.01);
  w.setZero();
  w[4] = 1.0;
  EXPECT_LT(obsv::signal_geometry(w, rs).pc1_cosine, 0.1);
}

TEST(SignalGeometry, IsotropicTopTenShare) {
  const auto rs = gaussian_records(20000, Eigen::VectorXd::Ones(20), 11);
  EXPECT_NEAR(obsv::signal_geometry(Eigen::VectorXd::Ones(20), rs).top10_var_share, 0.5, 0.05);
}

TEST(SignalGeometry, Errors) {
  const auto rs = gaussian_records(1, Eigen::VectorXd::Ones(3), 12);
  EXPECT_THROW(obsv::signal_geometry(Eigen::VectorXd::Ones(3), rs), obsv::DataError);
  const auto rs2 = gaussian_records(5, Eigen::VectorXd::Ones(3), 12);
  EXPECT_THROW(obsv::signal_geometry(Eigen::VectorXd::Ones(4), rs2), obsv::SchemaError);
}

TEST(MetricReport, JsonRoundTrip) {
  obsv::MetricReport r;
  r.model = "m";
  r.layer = 5;
  r.n_tokens = 100;
  r.control_set = obsv::standard_controls();
  r.raw_spearman = 0.5;
  r.pcorr = 0.3;
  r.pcorr_std = 0.01;
  r.oc_resid = 0.2;
  r.per_seed_pcorr = {0.29, 0.31};
  const nlohmann::json j = r;
  const auto back = j.get<obsv::MetricReport>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_TRUE(j["seed_agreement"].is_null());
}

}  // namespace
