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

#ifndef OBSV_PROBES_HPP_
#define OBSV_PROBES_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "obsv/controls.hpp"
#include "obsv/error.hpp"
#include "obsv/observer.hpp"
#include "obsv/parallel.hpp"
#include "obsv/rank_metrics.hpp"
#include "obsv/record_store.hpp"
#include "obsv/rng.hpp"

namespace obsv {

enum class Objective { kBce, kMse };

inline const char* to_string(Objective o) { return o == Objective::kBce ? "bce" : "mse"; }

inline Objective objective_from_string(const std::string& s) {
  if (s == "bce") return Objective::kBce;
  if (s == "mse") return Objective::kMse;
  throw SchemaError("unknown objective '" + s + "'");
}

// d -> width -> 1 with a rectifier. Outputs are raw logits (bce) or predicted
// loss (mse).
struct MlpHead {
  Eigen::MatrixXd w1;  // width x d
  Eigen::VectorXd b1;
  Eigen::VectorXd w2;
  double b2 = 0.0;
  Objective objective = Objective::kBce;
  std::uint64_t train_seed = 0;
  int layer = -1;
  TrainConfig train_meta;

  Eigen::Index width() const { return w1.rows(); }
  Eigen::Index dim() const { return w1.cols(); }

  Eigen::VectorXd forward(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd hidden =
        ((x * w1.transpose()).rowwise() + b1.transpose()).cwiseMax(0.0);
    return (hidden * w2).array() + b2;
  }
};

inline Eigen::VectorXd predict(const MlpHead& head, const RecordSet& records) {
  if (head.dim() != static_cast<Eigen::Index>(records.dim())) {
    throw SchemaError("head has d=" + std::to_string(head.dim()) +
                      " but records have d=" + std::to_string(records.dim()));
  }
  return head.forward(records.activation_matrix());
}

namespace detail {

class Adam {
 public:
  explicit Adam(Eigen::Index n, double lr) : lr_(lr), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = kBeta1 * m_ + (1.0 - kBeta1) * grad;
    v_ = kBeta2 * v_ + (1.0 - kBeta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    theta.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + kEps);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  long t_ = 0;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
};

inline double bce_with_logits(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Minibatch loop shared by every head. `grad_fn(theta, batch_idx, grad)`
// returns the batch loss and fills the data gradient; L2 decay is added here
// on all parameters.
template <typename GradFn>
void run_minibatch(Eigen::VectorXd& theta, std::size_t n, const TrainConfig& cfg, Rng& rng,
                   GradFn&& grad_fn) {
  Adam adam(theta.size(), cfg.lr);
  Eigen::VectorXd grad(theta.size());
  std::vector<Eigen::Index> batch;
  batch.reserve(std::min(n, cfg.batch_size));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      const double loss = grad_fn(theta, batch, grad);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch),
                              static_cast<long>(epoch));
      }
      if (cfg.weight_decay > 0.0) grad += cfg.weight_decay * theta;
      adam.step(theta, grad);
    }
  }
  if (!theta.allFinite()) {
    throw DivergenceError("non-finite weights after training", static_cast<long>(cfg.epochs) - 1);
  }
}

inline Eigen::VectorXd target_vector(const ResidualTarget& target) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(target.binary.size()));
  for (std::size_t i = 0; i < target.binary.size(); ++i) {
    y[static_cast<Eigen::Index>(i)] = target.binary[i];
  }
  return y;
}

inline MlpHead train_mlp(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Eigen::Index width,
                         Objective objective, const TrainConfig& cfg) {
  cfg.validate();
  if (width < 1) throw ConfigError("hidden width must be >= 1");
  if (x.rows() == 0) throw DataError("cannot train on zero tokens");
  const Eigen::Index d = x.cols();
  const Eigen::Index h = width;
  Rng rng(cfg.seed);
  // Layout: w1 (h*d, column-major), b1 (h), w2 (h), b2 (1).
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(h * d + 2 * h + 1);
  const double s1 = std::sqrt(2.0 / static_cast<double>(d));
  const double s2 = std::sqrt(1.0 / static_cast<double>(h));
  for (Eigen::Index i = 0; i < h * d; ++i) theta[i] = s1 * rng.normal();
  for (Eigen::Index i = 0; i < h; ++i) theta[h * d + h + i] = s2 * rng.normal();
  // Regression heads start at the mean target so early epochs fit structure.
  theta[h * d + 2 * h] = objective == Objective::kMse ? y.mean() : 0.0;

  Eigen::MatrixXd xb;
  Eigen::VectorXd yb;
  auto grad_fn = [&](const Eigen::VectorXd& th, const std::vector<Eigen::Index>& idx,
                     Eigen::VectorXd& grad) {
    const Eigen::Map<const Eigen::MatrixXd> w1(th.data(), h, d);
    const auto b1 = th.segment(h * d, h);
    const auto w2 = th.segment(h * d + h, h);
    const double b2 = th[h * d + 2 * h];
    xb = x(idx, Eigen::all);
    yb = y(idx);
    const double m = static_cast<double>(idx.size());
    Eigen::MatrixXd pre = (xb * w1.transpose()).rowwise() + b1.transpose();
    const Eigen::MatrixXd act = pre.cwiseMax(0.0);
    const Eigen::VectorXd out = (act * w2).array() + b2;
    Eigen::VectorXd dout(out.size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      if (objective == Objective::kBce) {
        loss += bce_with_logits(out[i], yb[i]);
        dout[i] = sigmoid(out[i]) - yb[i];
      } else {
        const double r = out[i] - yb[i];
        loss += r * r;
        dout[i] = 2.0 * r;
      }
    }
    dout /= m;
    Eigen::MatrixXd dpre = dout * w2.transpose();
    dpre.array() *= (pre.array() > 0.0).cast<double>();
    Eigen::Map<Eigen::MatrixXd>(grad.data(), h, d) = dpre.transpose() * xb;
    grad.segment(h * d, h) = dpre.colwise().sum().transpose();
    grad.segment(h * d + h, h) = act.transpose() * dout;
    grad[h * d + 2 * h] = dout.sum();
    return loss / m;
  };
  run_minibatch(theta, static_cast<std::size_t>(x.rows()), cfg, rng, grad_fn);

  MlpHead head;
  head.w1 = Eigen::Map<const Eigen::MatrixXd>(theta.data(), h, d);
  head.b1 = theta.segment(h * d, h);
  head.w2 = theta.segment(h * d + h, h);
  head.b2 = theta[h * d + 2 * h];
  head.objective = objective;
  head.train_seed = cfg.seed;
  head.train_meta = cfg;
  return head;
}

}  // namespace detail

// Logistic observer on the binary residual target, BCE in logit form.
inline LinearObserver train_linear_observer(const RecordSet& train, const ResidualTarget& target,
                                            const TrainConfig& cfg = TrainConfig::observer_defaults()) {
  cfg.validate();
  if (target.size() != train.size()) throw SchemaError("target length does not match records");
  if (train.empty()) throw DataError("cannot train on zero tokens");
  const Eigen::MatrixXd x = train.activation_matrix();
  const Eigen::VectorXd y = detail::target_vector(target);
  const Eigen::Index d = x.cols();
  Rng rng(cfg.seed);
  Eigen::VectorXd theta(d + 1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index j = 0; j < d; ++j) theta[j] = scale * rng.normal();
  theta[d] = 0.0;

  Eigen::MatrixXd xb;
  auto grad_fn = [&](const Eigen::VectorXd& th, const std::vector<Eigen::Index>& idx,
                     Eigen::VectorXd& grad) {
    xb = x(idx, Eigen::all);
    const Eigen::VectorXd z = (xb * th.head(d)).array() + th[d];
    Eigen::VectorXd dz(z.size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double yi = y[idx[static_cast<std::size_t>(i)]];
      loss += detail::bce_with_logits(z[i], yi);
      dz[i] = detail::sigmoid(z[i]) - yi;
    }
    const double m = static_cast<double>(idx.size());
    grad.head(d) = xb.transpose() * dz / m;
    grad[d] = dz.sum() / m;
    return loss / m;
  };
  detail::run_minibatch(theta, train.size(), cfg, rng, grad_fn);

  LinearObserver obs;
  obs.w = theta.head(d);
  obs.b = theta[d];
  obs.train_seed = cfg.seed;
  obs.train_meta = cfg;
  obs.kind = "trained";
  return obs;
}

// Untrained baseline with N(0, 1/d) weights.
inline LinearObserver random_observer(std::uint32_t d, std::uint64_t seed) {
  if (d == 0) throw ConfigError("observer dimension must be positive");
  Rng rng(seed);
  LinearObserver obs;
  obs.w.resize(d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::uint32_t j = 0; j < d; ++j) obs.w[j] = scale * rng.normal();
  obs.train_seed = seed;
  obs.kind = "random";
  return obs;
}

inline constexpr Eigen::Index kOutputPredictorWidth = 64;

// Loss regressor on final-layer activations; its held-out predictions are the
// extra control column for r_OC.
inline MlpHead train_output_predictor(const RecordSet& last_layer, const Eigen::VectorXd& loss,
                                      Eigen::Index width = kOutputPredictorWidth,
                                      const TrainConfig& cfg = TrainConfig::output_predictor_defaults()) {
  if (loss.size() != static_cast<Eigen::Index>(last_layer.size())) {
    throw SchemaError("loss length does not match records");
  }
  return detail::train_mlp(last_layer.activation_matrix(), loss, width, Objective::kMse, cfg);
}

inline MlpHead train_output_predictor(const RecordSet& last_layer,
                                      Eigen::Index width = kOutputPredictorWidth,
                                      const TrainConfig& cfg = TrainConfig::output_predictor_defaults()) {
  return train_output_predictor(last_layer, last_layer.loss_vector(), width, cfg);
}

enum class MlpMode { kMatched, kCustom };

inline constexpr Eigen::Index kMatchedWidth = 64;
inline constexpr std::size_t kMatchedEpochs = 50;

// Matched mode keeps the observer's lr, batch and seed but uses width 64 and
// 50 epochs; custom mode takes width and cfg as given.
inline MlpHead train_mlp_probe(const RecordSet& train, const ResidualTarget& target, MlpMode mode,
                               const TrainConfig& cfg = TrainConfig::observer_defaults(),
                               Eigen::Index width = kMatchedWidth) {
  if (target.size() != train.size()) throw SchemaError("target length does not match records");
  TrainConfig c = cfg;
  Eigen::Index w = width;
  if (mode == MlpMode::kMatched) {
    c.epochs = kMatchedEpochs;
    w = kMatchedWidth;
  }
  return detail::train_mlp(train.activation_matrix(), detail::target_vector(target), w,
                           Objective::kBce, c);
}

struct MlpGridPoint {
  Eigen::Index hidden = 64;
  double lr = 1e-3;
  std::size_t epochs = 20;
  bool operator==(const MlpGridPoint&) const = default;
};

inline std::vector<MlpGridPoint> default_mlp_grid() {
  std::vector<MlpGridPoint> grid;
  for (Eigen::Index h : {64, 128}) {
    for (double lr : {1e-2, 1e-3, 1e-4}) {
      for (std::size_t e : {20, 50}) grid.push_back({h, lr, e});
    }
  }
  return grid;
}

// Held-out split for evaluation: activations, loss and the fitted controls.
struct EvalSplit {
  const RecordSet* records = nullptr;
  const ControlMatrix* controls = nullptr;

  bool present() const { return records != nullptr && controls != nullptr && !records->empty(); }
};

struct SweepResult {
  MlpGridPoint best;
  std::size_t best_index = 0;
  std::vector<double> val_scores;
  double test_score = 0.0;
  MlpHead best_head;
};

inline double evaluate_head(const MlpHead& head, const EvalSplit& split) {
  return partial_spearman(predict(head, *split.records), split.records->loss_vector(),
                          *split.controls);
}

// Every grid point is fit on train and scored on validation; only the
// validation winner is scored on test. Ties keep the earlier grid point.
inline SweepResult sweep_mlp_probe(const RecordSet& train, const ResidualTarget& target,
                                   const EvalSplit& val, const EvalSplit& test,
                                   const std::vector<MlpGridPoint>& grid = default_mlp_grid(),
                                   const TrainConfig& base = TrainConfig::observer_defaults(),
                                   std::size_t threads = 1) {
  if (train.empty()) throw ConfigError("sweep requires a training split");
  if (!val.present()) throw ConfigError("sweep requires a validation split");
  if (!test.present()) throw ConfigError("sweep requires a test split");
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<MlpHead> heads(grid.size());
  SweepResult result;
  result.val_scores.assign(grid.size(), 0.0);
  parallel_for(grid.size(), threads, [&](std::size_t i) {
    TrainConfig c = base;
    c.lr = grid[i].lr;
    c.epochs = grid[i].epochs;
    heads[i] = train_mlp_probe(train, target, MlpMode::kCustom, c, grid[i].hidden);
    result.val_scores[i] = evaluate_head(heads[i], val);
  });
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (result.val_scores[i] > result.val_scores[result.best_index]) result.best_index = i;
  }
  result.best = grid[result.best_index];
  result.best_head = std::move(heads[result.best_index]);
  result.test_score = evaluate_head(result.best_head, test);
  return result;
}

// ---- JSON sidecars ----------------------------------------------------------

inline constexpr const char* kSidecarFormat = "obsv-probe";
inline constexpr int kSidecarVersion = 1;

namespace detail {

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd from_std(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename T>
T required(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw SchemaError(std::string("sidecar missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("sidecar field '") + key + "': " + e.what());
  }
}

inline void check_sidecar(const nlohmann::json& j, const char* type) {
  if (!j.is_object()) throw SchemaError("sidecar must be a JSON object");
  if (j.value("format", std::string{}) != kSidecarFormat) throw SchemaError("not an obsv probe sidecar");
  if (j.value("version", 0) != kSidecarVersion) throw SchemaError("unsupported sidecar version");
  if (j.value("type", std::string{}) != type) {
    throw SchemaError(std::string("sidecar type is not '") + type + "'");
  }
}

}  // namespace detail

inline nlohmann::json observer_to_json(const LinearObserver& obs) {
  return {{"format", kSidecarFormat},
          {"version", kSidecarVersion},
          {"type", "linear"},
          {"kind", obs.kind},
          {"d", obs.w.size()},
          {"w", detail::to_std(obs.w)},
          {"b", obs.b},
          {"train_seed", obs.train_seed},
          {"layer", obs.layer},
          {"train_meta", obs.train_meta}};
}

inline LinearObserver observer_from_json(const nlohmann::json& j) {
  detail::check_sidecar(j, "linear");
  LinearObserver obs;
  obs.w = detail::from_std(detail::required<std::vector<double>>(j, "w"));
  if (detail::required<Eigen::Index>(j, "d") != obs.w.size()) throw SchemaError("sidecar d does not match w");
  obs.b = detail::required<double>(j, "b");
  obs.train_seed = j.value("train_seed", std::uint64_t{0});
  obs.layer = j.value("layer", -1);
  obs.kind = j.value("kind", std::string("trained"));
  if (j.contains("train_meta")) obs.train_meta = j["train_meta"].get<TrainConfig>();
  if (!obs.w.allFinite() || !std::isfinite(obs.b)) throw SchemaError("sidecar weights are not finite");
  return obs;
}

inline nlohmann::json head_to_json(const MlpHead& head) {
  std::vector<std::vector<double>> w1(static_cast<std::size_t>(head.width()));
  for (Eigen::Index r = 0; r < head.width(); ++r) w1[static_cast<std::size_t>(r)] = detail::to_std(head.w1.row(r).transpose());
  return {{"format", kSidecarFormat},
          {"version", kSidecarVersion},
          {"type", "mlp"},
          {"objective", to_string(head.objective)},
          {"d", head.dim()},
          {"hidden_width", head.width()},
          {"w1", w1},
          {"b1", detail::to_std(head.b1)},
          {"w2", detail::to_std(head.w2)},
          {"b2", head.b2},
          {"train_seed", head.train_seed},
          {"layer", head.layer},
          {"train_meta", head.train_meta}};
}

inline MlpHead head_from_json(const nlohmann::json& j) {
  detail::check_sidecar(j, "mlp");
  MlpHead head;
  head.objective = objective_from_string(detail::required<std::string>(j, "objective"));
  const auto d = detail::required<Eigen::Index>(j, "d");
  const auto h = detail::required<Eigen::Index>(j, "hidden_width");
  const auto w1 = detail::required<std::vector<std::vector<double>>>(j, "w1");
  if (static_cast<Eigen::Index>(w1.size()) != h) throw SchemaError("w1 row count does not match hidden_width");
  head.w1.resize(h, d);
  for (Eigen::Index r = 0; r < h; ++r) {
    if (static_cast<Eigen::Index>(w1[static_cast<std::size_t>(r)].size()) != d) throw SchemaError("w1 row length does not match d");
    head.w1.row(r) = detail::from_std(w1[static_cast<std::size_t>(r)]).transpose();
  }
  head.b1 = detail::from_std(detail::required<std::vector<double>>(j, "b1"));
  head.w2 = detail::from_std(detail::required<std::vector<double>>(j, "w2"));
  if (head.b1.size() != h || head.w2.size() != h) throw SchemaError("b1/w2 length does not match hidden_width");
  head.b2 = detail::required<double>(j, "b2");
  head.train_seed = j.value("train_seed", std::uint64_t{0});
  head.layer = j.value("layer", -1);
  if (j.contains("train_meta")) head.train_meta = j["train_meta"].get<TrainConfig>();
  if (!head.w1.allFinite() || !head.b1.allFinite() || !head.w2.allFinite() || !std::isfinite(head.b2)) {
    throw SchemaError("sidecar weights are not finite");
  }
  return head;
}

namespace detail {

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void write_sidecar(const LinearObserver& obs, const std::filesystem::path& path) {
  detail::write_json_file(observer_to_json(obs), path);
}

inline void write_sidecar(const MlpHead& head, const std::filesystem::path& path) {
  detail::write_json_file(head_to_json(head), path);
}

inline LinearObserver load_observer_sidecar(const std::filesystem::path& path) {
  return observer_from_json(detail::read_json_file(path));
}

inline MlpHead load_head_sidecar(const std::filesystem::path& path) {
  return head_from_json(detail::read_json_file(path));
}

}  // namespace obsv

#endif  // OBSV_PROBES_HPP_
