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

#include "obsv/probes.hpp"
#include "obsv/synth_oracle.hpp"
#include "test_util.hpp"

namespace {

// Records whose activations are i.i.d. N(0, 1) and a target given by `label`.
struct Labelled {
  obsv::RecordSet records{1};
  obsv::ResidualTarget target;
};

template <typename Label>
Labelled labelled(std::size_t n, std::uint32_t d, std::uint64_t seed, Label label) {
  Labelled out;
  out.records = obsv_test::random_records(n, d, seed);
  out.target.binary.resize(n);
  out.target.residuals.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    out.target.binary[i] = label(out.records.row(i)) ? 1 : 0;
    out.target.residuals[static_cast<Eigen::Index>(i)] = out.target.binary[i] ? 1.0 : -1.0;
  }
  return out;
}

template <typename Scores>
double accuracy(const Scores& s, const obsv::ResidualTarget& t) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < t.size(); ++i) hit += (s[static_cast<Eigen::Index>(i)] > 0.0) == (t.binary[i] == 1);
  return static_cast<double>(hit) / static_cast<double>(t.size());
}

struct Planted {
  obsv::RecordSet train{1}, eval{1};
  obsv::ControlMatrix train_c, eval_c;
  obsv::ResidualTarget target;
};

Planted planted(double beta, std::uint32_t d, std::uint64_t n_train, std::uint64_t n_eval) {
  obsv::PlantSpec s;
  s.d = d;
  s.beta = beta;
  s.n = n_train;
  Planted p;
  p.train = obsv::generate_planted(s);
  s.n = n_eval;
  s.seed = 99;
  s.doc_offset = 1000;
  p.eval = obsv::generate_planted(s);
  p.train_c = obsv::build_control_matrix(p.train, obsv::standard_controls());
  p.eval_c = obsv::build_control_matrix(p.eval, obsv::standard_controls());
  p.target = obsv::fit_residual_target(p.train.loss_vector(), p.train_c);
  return p;
}

TEST(TrainConfig, DefaultsAndValidation) {
  const auto c = obsv::TrainConfig::observer_defaults();
  EXPECT_DOUBLE_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.batch_size, 4096u);
  EXPECT_EQ(c.epochs, 20u);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(obsv::TrainConfig::output_predictor_defaults().batch_size, 1024u);
  EXPECT_EQ(obsv::TrainConfig::matched_mlp_defaults().epochs, 50u);
  obsv::TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), obsv::ConfigError);
  bad = {};
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), obsv::ConfigError);
  bad = {};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), obsv::ConfigError);
  EXPECT_EQ(nlohmann::json(c).get<obsv::TrainConfig>(), c);
}

TEST(LinearObserver, SeparableTargetTrainsAboveNinetyFive) {
  const auto data = labelled(2000, 8, 1, [](std::span<const float> h) { return h[0] - 0.5 * h[3] > 0.0f; });
  const auto obs = obsv::train_linear_observer(data.records, data.target, obsv_test::desk_config());
  EXPECT_GT(accuracy(obsv::score_observer(obs, data.records), data.target), 0.95);
}

TEST(LinearObserver, ZeroEpochsRejected) {
  const auto data = labelled(50, 4, 2, [](auto h) { return h[0] > 0.0f; });
  auto cfg = obsv_test::desk_config();
  cfg.epochs = 0;
  EXPECT_THROW(obsv::train_linear_observer(data.records, data.target, cfg), obsv::ConfigError);
}

TEST(LinearObserver, SameSeedBitIdentical) {
  const auto data = labelled(500, 6, 3, [](auto h) { return h[1] > 0.2f; });
  const auto a = obsv::train_linear_observer(data.records, data.target, obsv_test::desk_config(7));
  const auto b = obsv::train_linear_observer(data.records, data.target, obsv_test::desk_config(7));
  const auto c = obsv::train_linear_observer(data.records, data.target, obsv_test::desk_config(8));
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.b, b.b);
  EXPECT_NE(a.w, c.w);
  EXPECT_EQ(a.train_seed, 7u);
}

TEST(LinearObserver, MismatchedTargetRejected) {
  const auto data = labelled(50, 4, 2, [](auto h) { return h[0] > 0.0f; });
  obsv::ResidualTarget t = data.target;
  t.binary.pop_back();
  EXPECT_THROW(obsv::train_linear_observer(data.records, t, obsv_test::desk_config()), obsv::SchemaError);
}

TEST(Training, NonFiniteLossReportsEpoch) {
  obsv::TrainConfig cfg = obsv_test::desk_config();
  cfg.epochs = 5;
  cfg.batch_size = 10;
  obsv::Rng rng(1);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
  int calls = 0;
  try {
    obsv::detail::run_minibatch(theta, 30, cfg, rng, [&](const Eigen::VectorXd&, const auto&, Eigen::VectorXd& g) {
      g.setZero();
      return ++calls > 7 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    });
    FAIL() << "expected divergence";
  } catch (const obsv::DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 2);  // 3 batches per epoch; the 8th call is in epoch 2
  }
}

TEST(ScoreObserver, Examples) {
  const auto rs = obsv_test::random_records(20, 5, 4);
  obsv::LinearObserver obs;
  obs.w = Eigen::VectorXd::Zero(5);
  EXPECT_TRUE((obsv::score_observer(obs, rs).array() == 0.0).all());
  obs.w[0] = 1.0;
  const auto s = obsv::score_observer(obs, rs);
  for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_DOUBLE_EQ(s[static_cast<Eigen::Index>(i)], rs.row(i)[0]);
  obs.w = Eigen::VectorXd::Zero(4);
  EXPECT_THROW(obsv::score_observer(obs, rs), obsv::SchemaError);
}

TEST(RandomObserver, SeededAndNullOnNullData) {
  EXPECT_EQ(obsv::random_observer(16, 5).w, obsv::random_observer(16, 5).w);
  EXPECT_NE(obsv::random_observer(16, 5).w, obsv::random_observer(16, 6).w);
  EXPECT_EQ(obsv::random_observer(16, 5).kind, "random");
  const auto p = planted(0.0, 16, 100, 20000);
  const double rho = obsv::partial_spearman(obsv::score_observer(obsv::random_observer(16, 5), p.eval),
                                            p.eval.loss_vector(), p.eval_c);
  EXPECT_LT(std::abs(rho), 0.05);
}

TEST(OutputPredictor, ConstantLossGivesConstantPrediction) {
  const auto rs = obsv_test::random_records(4000, 6, 5);
  const Eigen::VectorXd loss = Eigen::VectorXd::Constant(4000, 2.5);
  const auto head = obsv::train_output_predictor(rs, loss, 64, obsv_test::desk_config());
  const Eigen::VectorXd pred = obsv::predict(head, rs);
  const double sd = std::sqrt((pred.array() - pred.mean()).square().mean());
  EXPECT_NEAR(pred.mean(), 2.5, 0.02);
  EXPECT_LT(sd, 0.02);
  EXPECT_EQ(head.objective, obsv::Objective::kMse);
}

TEST(OutputPredictor, ConstantLossPredictorLeavesPcorr) {
  const auto p = planted(1.0, 8, 2000, 2000);
  const auto head = obsv::train_output_predictor(p.train, Eigen::VectorXd::Constant(2000, 1.0), 64, obsv_test::desk_config());
  obsv::PlantSpec s;
  s.d = 8;
  const Eigen::VectorXd sc = obsv::score_observer(obsv::planted_observer(s, 1.0, 0.0), p.eval);
  const double pc = obsv::partial_spearman(sc, p.eval.loss_vector(), p.eval_c);
  const double oc = obsv::oc_residual(sc, p.eval.loss_vector(), p.eval_c, obsv::predict(head, p.eval));
  EXPECT_NEAR(oc, pc, 0.03);
}

TEST(OutputPredictor, LinearLossHeldOutR2) {
  const auto tr = obsv_test::random_records(4000, 8, 6);
  const auto te = obsv_test::random_records(2000, 8, 7);
  Eigen::VectorXd w(8);
  w << 1.0, -0.5, 0.25, 0, 0, 0.8, 0, -1.2;
  const Eigen::VectorXd ytr = (tr.activation_matrix() * w).array() + 3.0;
  const Eigen::VectorXd yte = (te.activation_matrix() * w).array() + 3.0;
  const auto head = obsv::train_output_predictor(tr, ytr, 64, obsv_test::desk_config());
  const Eigen::VectorXd pred = obsv::predict(head, te);
  const double ss_res = (pred - yte).squaredNorm();
  const double ss_tot = (yte.array() - yte.mean()).matrix().squaredNorm();
  EXPECT_GT(1.0 - ss_res / ss_tot, 0.9);
}

TEST(OutputPredictor, WidthSweepTrainable) {
  const auto rs = obsv_test::random_records(200, 6, 8);
  auto cfg = obsv_test::desk_config();
  cfg.epochs = 2;
  for (Eigen::Index w : {64, 128, 256, 512}) {
    const auto head = obsv::train_output_predictor(rs, w, cfg);
    EXPECT_EQ(head.width(), w);
    EXPECT_TRUE(obsv::predict(head, rs).allFinite());
  }
}

TEST(MlpProbe, MatchedModeShape) {
  const auto data = labelled(200, 6, 9, [](auto h) { return h[0] > 0.0f; });
  auto cfg = obsv_test::desk_config();
  const auto head = obsv::train_mlp_probe(data.records, data.target, obsv::MlpMode::kMatched, cfg, 7);
  EXPECT_EQ(head.width(), 64);
  EXPECT_EQ(head.train_meta.epochs, 50u);
  EXPECT_EQ(head.objective, obsv::Objective::kBce);
}

TEST(MlpProbe, WidthOneStillTrains) {
  const auto data = labelled(1000, 4, 10, [](auto h) { return h[0] > 0.0f; });
  const auto head = obsv::train_mlp_probe(data.records, data.target, obsv::MlpMode::kCustom, obsv_test::desk_config(), 1);
  EXPECT_EQ(head.width(), 1);
  EXPECT_GT(accuracy(obsv::predict(head, data.records), data.target), 0.7);
}

TEST(MlpProbe, XorBeatsLinear) {
  const auto data = labelled(4000, 4, 11, [](auto h) { return (h[0] > 0.0f) != (h[1] > 0.0f); });
  const auto test = labelled(2000, 4, 12, [](auto h) { return (h[0] > 0.0f) != (h[1] > 0.0f); });
  const auto cfg = obsv_test::desk_config();
  const auto lin = obsv::train_linear_observer(data.records, data.target, cfg);
  const auto mlp = obsv::train_mlp_probe(data.records, data.target, obsv::MlpMode::kCustom, cfg, 32);
  const double a_lin = accuracy(obsv::score_observer(lin, test.records), test.target);
  const double a_mlp = accuracy(obsv::predict(mlp, test.records), test.target);
  EXPECT_GT(a_mlp - a_lin, 0.2) << "linear " << a_lin << " mlp " << a_mlp;
}

class SweepTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    obsv::PlantSpec s;
    s.d = 8;
    s.beta = 0.0;
    s.n = 800;
    train = new obsv::RecordSet(obsv::generate_planted(s));
    s.seed = 5;
    s.n = 4000;
    val = new obsv::RecordSet(obsv::generate_planted(s));
    s.seed = 6;
    test = new obsv::RecordSet(obsv::generate_planted(s));
    tc = new obsv::ControlMatrix(obsv::build_control_matrix(*train, obsv::standard_controls()));
    vc = new obsv::ControlMatrix(obsv::build_control_matrix(*val, obsv::standard_controls()));
    ec = new obsv::ControlMatrix(obsv::build_control_matrix(*test, obsv::standard_controls()));
    target = new obsv::ResidualTarget(obsv::fit_residual_target(train->loss_vector(), *tc));
  }
  static void TearDownTestSuite() {
    delete train;
    delete val;
    delete test;
    delete tc;
    delete vc;
    delete ec;
    delete target;
  }
  static obsv::TrainConfig base() {
    obsv::TrainConfig c = obsv_test::desk_config();
    c.batch_size = 128;
    return c;
  }
  static inline obsv::RecordSet *train, *val, *test;
  static inline obsv::ControlMatrix *tc, *vc, *ec;
  static inline obsv::ResidualTarget* target;
};

TEST_F(SweepTest, FullGridOnNullDataStaysCollapsed) {
  const auto grid = obsv::default_mlp_grid();
  ASSERT_EQ(grid.size(), 12u);
  const auto r = obsv::sweep_mlp_probe(*train, *target, {val, vc}, {test, ec}, grid, base(), 2);
  EXPECT_EQ(r.val_scores.size(), 12u);
  EXPECT_EQ(r.val_scores[r.best_index], *std::max_element(r.val_scores.begin(), r.val_scores.end()));
  EXPECT_EQ(r.best, grid[r.best_index]);
  EXPECT_LT(r.test_score, 0.15);
}

TEST_F(SweepTest, SingletonGridEqualsDirectTraining) {
  const std::vector<obsv::MlpGridPoint> grid{{16, 1e-2, 5}};
  const auto r = obsv::sweep_mlp_probe(*train, *target, {val, vc}, {test, ec}, grid, base());
  auto c = base();
  c.epochs = 5;
  const auto head = obsv::train_mlp_probe(*train, *target, obsv::MlpMode::kCustom, c, 16);
  EXPECT_EQ(r.test_score, obsv::evaluate_head(head, {test, ec}));
  EXPECT_EQ(r.val_scores[0], obsv::evaluate_head(head, {val, vc}));
}

TEST_F(SweepTest, ThreadCountDoesNotChangeResults) {
  const std::vector<obsv::MlpGridPoint> grid{{8, 1e-2, 3}, {16, 1e-3, 3}, {8, 1e-4, 3}};
  const auto a = obsv::sweep_mlp_probe(*train, *target, {val, vc}, {test, ec}, grid, base(), 1);
  const auto b = obsv::sweep_mlp_probe(*train, *target, {val, vc}, {test, ec}, grid, base(), 3);
  EXPECT_EQ(a.val_scores, b.val_scores);
  EXPECT_EQ(a.test_score, b.test_score);
}

TEST_F(SweepTest, MissingSplitsRejected) {
  const std::vector<obsv::MlpGridPoint> grid{{8, 1e-2, 1}};
  EXPECT_THROW(obsv::sweep_mlp_probe(*train, *target, {}, {test, ec}, grid, base()), obsv::ConfigError);
  EXPECT_THROW(obsv::sweep_mlp_probe(*train, *target, {val, vc}, {}, grid, base()), obsv::ConfigError);
  EXPECT_THROW(obsv::sweep_mlp_probe(*train, *target, {val, vc}, {test, ec}, {}, base()), obsv::ConfigError);
}

TEST(SeedAgreement, StrongPlantedSignalAboveNinety) {
  const auto p = planted(1.0, 16, 3200, 5000);
  std::vector<Eigen::VectorXd> scores;
  for (std::uint64_t seed = 43; seed <= 49; ++seed) {
    scores.push_back(obsv::score_observer(obsv::train_linear_observer(p.train, p.target, obsv_test::desk_config(seed)), p.eval));
  }
  EXPECT_GT(obsv::seed_agreement(scores), 0.9);
}

TEST(Sidecar, ObserverRoundTripIsExact) {
  const auto data = labelled(300, 5, 13, [](auto h) { return h[2] > 0.0f; });
  auto obs = obsv::train_linear_observer(data.records, data.target, obsv_test::desk_config());
  obs.layer = 3;
  const auto dir = obsv_test::temp_dir("sidecar");
  obsv::write_sidecar(obs, dir / "o.json");
  const auto back = obsv::load_observer_sidecar(dir / "o.json");
  EXPECT_EQ(back.w, obs.w);
  EXPECT_EQ(back.b, obs.b);
  EXPECT_EQ(back.layer, 3);
  EXPECT_EQ(back.train_meta, obs.train_meta);
}

TEST(Sidecar, HeadRoundTripIsExact) {
  const auto data = labelled(300, 5, 14, [](auto h) { return h[2] > 0.0f; });
  auto cfg = obsv_test::desk_config();
  cfg.epochs = 3;
  const auto head = obsv::train_mlp_probe(data.records, data.target, obsv::MlpMode::kCustom, cfg, 6);
  const auto back = obsv::head_from_json(nlohmann::json::parse(obsv::head_to_json(head).dump()));
  EXPECT_EQ(back.w1, head.w1);
  EXPECT_EQ(back.b1, head.b1);
  EXPECT_EQ(back.w2, head.w2);
  EXPECT_EQ(back.b2, head.b2);
  EXPECT_EQ(obsv::predict(back, data.records), obsv::predict(head, data.records));
}

TEST(Sidecar, Errors) {
  const auto obs = obsv::random_observer(4, 1);
  auto j = obsv::observer_to_json(obs);
  EXPECT_THROW(obsv::head_from_json(j), obsv::SchemaError);
  j["d"] = 5;
  EXPECT_THROW(obsv::observer_from_json(j), obsv::SchemaError);
  j = obsv::observer_to_json(obs);
  j["format"] = "other";
  EXPECT_THROW(obsv::observer_from_json(j), obsv::SchemaError);
  j = obsv::observer_to_json(obs);
  j.erase("w");
  EXPECT_THROW(obsv::observer_from_json(j), obsv::SchemaError);
  const auto dir = obsv_test::temp_dir("sidecar_bad");
  std::ofstream(dir / "bad.json") << "{not json";
  EXPECT_THROW(obsv::load_observer_sidecar(dir / "bad.json"), obsv::FormatError);
  EXPECT_THROW(obsv::load_observer_sidecar(dir / "missing.json"), obsv::IoError);
}

}  // namespace
