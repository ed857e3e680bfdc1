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

#ifndef OBSV_SYNTH_ORACLE_HPP_
#define OBSV_SYNTH_ORACLE_HPP_

// Synthetic activation datasets with analytically known structure.
//
// Each token draws latents z_s (signal), z_u (confidence) and noise. The
// activation is h = Q diag(sqrt(lambda)) g, where g is standard normal except
// that the signal coordinate carries r = rho*z_s + sqrt(1-rho^2)*xi and the
// confidence coordinate carries z_u. Then
//   p_max   = logistic(a*z_u + c*eta)
//   loss    = softplus(gamma*(-log p_max) + beta*z_s + sigma*eps)
//   entropy = softplus(-(a*z_u + c*eta) + 0.25*eta2)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/QR>

#include "json.hpp"
#include "obsv/error.hpp"
#include "obsv/observer.hpp"
#include "obsv/record_store.hpp"
#include "obsv/rng.hpp"

namespace obsv {

enum class Placement { kMid, kLowVariance };

struct PlantSpec {
  std::uint64_t n = 3200;
  std::uint32_t d = 64;
  std::uint32_t docs = 64;
  std::uint64_t seed = 0;           // token sampling
  std::uint64_t geometry_seed = 1;  // bases and spectrum placement
  double beta = 1.0;
  double gamma = 1.0;
  double sigma = 1.0;
  double conf_scale = 1.5;
  double conf_noise = 0.3;
  Placement placement = Placement::kMid;
  double spectrum_hi = 4.0;
  double spectrum_lo = 0.05;
  std::uint32_t vocab = 1000;
  double zipf_exponent = 1.1;
  std::string model = "synthetic";
  std::int64_t step = 0;
  std::uint32_t doc_offset = 0;

  void validate() const {
    if (n == 0) throw ConfigError("plant: n must be positive");
    if (d < 4) throw ConfigError("plant: d must be at least 4");
    if (docs == 0 || docs > n) throw ConfigError("plant: docs must lie in [1, n]");
    if (!(sigma > 0.0)) throw ConfigError("plant: sigma must be positive");
    if (!(beta >= 0.0) || !(gamma >= 0.0)) throw ConfigError("plant: beta and gamma must be non-negative");
    if (!(conf_scale > 0.0) || !(conf_noise >= 0.0)) throw ConfigError("plant: invalid confidence channel");
    if (!(spectrum_hi >= spectrum_lo) || !(spectrum_lo > 0.0)) throw ConfigError("plant: invalid spectrum");
    if (vocab == 0) throw ConfigError("plant: vocab must be positive");
  }
};

// How readable the signal is at one layer. `top_variance` moves the signal
// coordinate onto the leading principal axis (used for final layers).
struct LayerPlant {
  double readability = 1.0;
  bool top_variance = false;
};

inline void to_json(nlohmann::json& j, const PlantSpec& s) {
  j = {{"n", s.n},
       {"d", s.d},
       {"docs", s.docs},
       {"seed", s.seed},
       {"geometry_seed", s.geometry_seed},
       {"beta", s.beta},
       {"gamma", s.gamma},
       {"sigma", s.sigma},
       {"conf_scale", s.conf_scale},
       {"conf_noise", s.conf_noise},
       {"placement", s.placement == Placement::kMid ? "mid" : "low_variance"},
       {"spectrum_hi", s.spectrum_hi},
       {"spectrum_lo", s.spectrum_lo},
       {"vocab", s.vocab},
       {"zipf_exponent", s.zipf_exponent},
       {"model", s.model},
       {"step", s.step},
       {"doc_offset", s.doc_offset}};
}

inline void from_json(const nlohmann::json& j, PlantSpec& s) {
  const PlantSpec d;
  s.n = j.value("n", d.n);
  s.d = j.value("d", d.d);
  s.docs = j.value("docs", d.docs);
  s.seed = j.value("seed", d.seed);
  s.geometry_seed = j.value("geometry_seed", d.geometry_seed);
  s.beta = j.value("beta", d.beta);
  s.gamma = j.value("gamma", d.gamma);
  s.sigma = j.value("sigma", d.sigma);
  s.conf_scale = j.value("conf_scale", d.conf_scale);
  s.conf_noise = j.value("conf_noise", d.conf_noise);
  const std::string placement = j.value("placement", std::string("mid"));
  if (placement == "mid") s.placement = Placement::kMid;
  else if (placement == "low_variance") s.placement = Placement::kLowVariance;
  else throw ConfigError("plant: unknown placement '" + placement + "'");
  s.spectrum_hi = j.value("spectrum_hi", d.spectrum_hi);
  s.spectrum_lo = j.value("spectrum_lo", d.spectrum_lo);
  s.vocab = j.value("vocab", d.vocab);
  s.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
  s.model = j.value("model", d.model);
  s.step = j.value("step", d.step);
  s.doc_offset = j.value("doc_offset", d.doc_offset);
}

inline void to_json(nlohmann::json& j, const LayerPlant& l) {
  j = {{"readability", l.readability}, {"top_variance", l.top_variance}};
}

inline void from_json(const nlohmann::json& j, LayerPlant& l) {
  l.readability = j.value("readability", 1.0);
  l.top_variance = j.value("top_variance", false);
}

struct PlantGeometry {
  Eigen::VectorXd eigenvalues;  // descending
  Eigen::MatrixXd basis;        // orthogonal, columns are principal axes
  Eigen::Index signal_index = 0;
  Eigen::Index confidence_index = 0;

  Eigen::VectorXd signal_direction() const { return basis.col(signal_index); }
  Eigen::VectorXd confidence_direction() const { return basis.col(confidence_index); }
};

inline Eigen::VectorXd plant_spectrum(const PlantSpec& spec) {
  Eigen::VectorXd lam(spec.d);
  const double lo = std::log(spec.spectrum_lo), hi = std::log(spec.spectrum_hi);
  for (std::uint32_t j = 0; j < spec.d; ++j) {
    const double t = spec.d == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(spec.d - 1);
    lam[j] = std::exp(hi + t * (lo - hi));
  }
  return lam;
}

inline PlantGeometry plant_geometry(const PlantSpec& spec, std::size_t layer,
                                    const LayerPlant& plant = {}) {
  spec.validate();
  PlantGeometry g;
  g.eigenvalues = plant_spectrum(spec);
  Rng rng(derive_seed(spec.geometry_seed, layer));
  Eigen::MatrixXd a(spec.d, spec.d);
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  g.basis = qr.householderQ() * Eigen::MatrixXd::Identity(spec.d, spec.d);
  // Fix column signs so the basis does not depend on QR sign conventions.
  const Eigen::MatrixXd rmat = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < g.basis.cols(); ++c) {
    if (rmat(c, c) < 0.0) g.basis.col(c) *= -1.0;
  }
  const auto d = static_cast<Eigen::Index>(spec.d);
  if (spec.placement == Placement::kMid) {
    g.signal_index = d / 2;
    g.confidence_index = d / 4;
  } else {
    g.signal_index = d - 1;
    g.confidence_index = 0;
  }
  if (plant.top_variance) {
    g.signal_index = spec.placement == Placement::kMid ? 0 : 1;
  }
  return g;
}

namespace detail {

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

class ZipfSampler {
 public:
  ZipfSampler(std::uint32_t vocab, double exponent) : cdf_(vocab) {
    double acc = 0.0;
    for (std::uint32_t k = 0; k < vocab; ++k) {
      acc += std::pow(static_cast<double>(k + 1), -exponent);
      cdf_[k] = acc;
    }
    for (auto& c : cdf_) c /= acc;
  }

  std::uint32_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return static_cast<std::uint32_t>(std::min<std::size_t>(it - cdf_.begin(), cdf_.size() - 1));
  }

 private:
  std::vector<double> cdf_;
};

// Per-token latents shared by every layer.
struct TokenLatents {
  double zs, zu, logit, p, loss, entropy;
};

inline TokenLatents draw_latents(const PlantSpec& s, Rng& rng) {
  TokenLatents t{};
  t.zs = rng.normal();
  t.zu = rng.normal();
  const double eta = rng.normal();
  const double eps = rng.normal();
  const double eta2 = rng.normal();
  t.logit = s.conf_scale * t.zu + s.conf_noise * eta;
  t.p = std::max(logistic(t.logit), 1e-6);
  t.loss = softplus(s.gamma * (-std::log(t.p)) + s.beta * t.zs + s.sigma * eps);
  t.entropy = softplus(-t.logit + 0.25 * eta2);
  return t;
}

}  // namespace detail

// Same tokens seen through several layers; one RecordSet per entry of `layers`.
inline std::vector<RecordSet> generate_layers(const PlantSpec& spec, const std::vector<LayerPlant>& layers) {
  spec.validate();
  if (layers.empty()) throw ConfigError("plant: at least one layer required");
  std::vector<PlantGeometry> geo;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!(std::abs(layers[l].readability) <= 1.0)) throw ConfigError("plant: readability must lie in [-1, 1]");
    geo.push_back(plant_geometry(spec, l, layers[l]));
  }
  const Eigen::VectorXd sd = geo.front().eigenvalues.cwiseSqrt();
  const detail::ZipfSampler zipf(spec.vocab, spec.zipf_exponent);
  std::vector<RecordSet> out(layers.size(), RecordSet(spec.d));
  for (auto& r : out) r.reserve(spec.n);
  Rng rng(spec.seed);
  Eigen::VectorXd g(spec.d), h(spec.d);
  std::vector<float> row(spec.d);
  for (std::uint64_t i = 0; i < spec.n; ++i) {
    const auto doc = static_cast<std::uint32_t>(i * spec.docs / spec.n);
    const std::uint64_t doc_start = (static_cast<std::uint64_t>(doc) * spec.n + spec.docs - 1) / spec.docs;
    const auto pos = static_cast<std::uint32_t>(i - doc_start);
    const std::uint32_t token = zipf(rng);
    const detail::TokenLatents t = detail::draw_latents(spec, rng);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const double rho = layers[l].readability;
      const double xi = rng.normal();
      for (Eigen::Index j = 0; j < g.size(); ++j) g[j] = rng.normal();
      g[geo[l].signal_index] = rho * t.zs + std::sqrt(std::max(0.0, 1.0 - rho * rho)) * xi;
      g[geo[l].confidence_index] = t.zu;
      h.noalias() = geo[l].basis * sd.cwiseProduct(g);
      for (std::uint32_t j = 0; j < spec.d; ++j) row[j] = static_cast<float>(h[j]);
      out[l].push_back(spec.doc_offset + doc, pos, token, static_cast<float>(t.loss),
                       static_cast<float>(t.p), static_cast<float>(t.entropy), row);
    }
  }
  return out;
}

inline RecordSet generate_planted(const PlantSpec& spec, const LayerPlant& layer = {}) {
  return std::move(generate_layers(spec, {layer}).front());
}

inline Shard generate_planted_shard(const PlantSpec& spec, const std::string& split = "train") {
  Shard s;
  s.records = generate_planted(spec);
  s.header = make_header(s.records, make_metadata(spec.model, 0, 1, spec.d, spec.step, split));
  s.header.metadata["synthetic"] = spec;
  return s;
}

// Linear observer w with w.h = signal_weight*r - confidence_weight*z_u, where
// r is the standardized signal coordinate of the given layer.
inline LinearObserver planted_observer(const PlantSpec& spec, double signal_weight,
                                       double confidence_weight, std::size_t layer = 0,
                                       const LayerPlant& plant = {}) {
  const PlantGeometry g = plant_geometry(spec, layer, plant);
  LinearObserver obs;
  obs.w = signal_weight * g.signal_direction() / std::sqrt(g.eigenvalues[g.signal_index]) -
          confidence_weight * g.confidence_direction() / std::sqrt(g.eigenvalues[g.confidence_index]);
  obs.layer = static_cast<int>(layer);
  obs.kind = "planted";
  return obs;
}

struct ScriptPoint {
  std::int64_t step = 0;
  double beta = 1.0;
};

struct CheckpointData {
  std::int64_t step = 0;
  std::vector<RecordSet> layers;
};

// One layer stack per scripted checkpoint. Geometry is shared across the
// script; token draws use a per-checkpoint seed.
inline std::vector<CheckpointData> generate_trajectory(const PlantSpec& base,
                                                       const std::vector<LayerPlant>& layers,
                                                       const std::vector<ScriptPoint>& script) {
  std::vector<CheckpointData> out;
  for (std::size_t c = 0; c < script.size(); ++c) {
    if (c > 0 && script[c].step <= script[c - 1].step) {
      throw ConfigError("trajectory steps must be strictly increasing");
    }
    PlantSpec s = base;
    s.beta = script[c].beta;
    s.step = script[c].step;
    s.seed = derive_seed(base.seed, c);
    out.push_back({script[c].step, generate_layers(s, layers)});
  }
  return out;
}

// ---- Monte Carlo reference -------------------------------------------------
//
// Population values for the ideal observer, computed without the generator's
// activations: the norm is evaluated in eigen-coordinates, ranks by plain
// sorting, and partial correlations from the inverse rank-correlation matrix.

struct ReferenceQuery {
  LayerPlant layer;
  double signal_weight = 1.0;
  double confidence_weight = 0.0;
  // When set, the final-layer signal coordinate joins the controls, which is
  // the population output predictor when gamma = 0.
  std::optional<LayerPlant> output_layer;
};

struct ReferenceValues {
  double raw = 0.0;
  double pcorr = 0.0;
  double absorbed = 0.0;
  std::optional<double> oc;
  std::uint64_t n_mc = 0;
};

namespace detail {

inline std::vector<double> plain_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t k = 0; k < idx.size();) {
    std::size_t e = k + 1;
    while (e < idx.size() && x[idx[e]] == x[idx[k]]) ++e;
    for (std::size_t t = k; t < e; ++t) r[idx[t]] = 0.5 * static_cast<double>(k + e + 1);
    k = e;
  }
  return r;
}

// Partial correlation of variables 0 and 1 given the rest, from the inverse of
// the Pearson correlation matrix.
inline double precision_partial(const std::vector<std::vector<double>>& cols) {
  const std::size_t k = cols.size();
  const auto n = static_cast<double>(cols.front().size());
  std::vector<double> mean(k, 0.0);
  for (std::size_t a = 0; a < k; ++a) mean[a] = std::accumulate(cols[a].begin(), cols[a].end(), 0.0) / n;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < cols.front().size(); ++i) {
    for (std::size_t a = 0; a < k; ++a) {
      const double da = cols[a][i] - mean[a];
      for (std::size_t b = a; b < k; ++b) cov(a, b) += da * (cols[b][i] - mean[b]);
    }
  }
  cov = cov.selfadjointView<Eigen::Upper>();
  const Eigen::VectorXd s = cov.diagonal().cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd corr = s.asDiagonal() * cov * s.asDiagonal();
  const Eigen::MatrixXd prec = corr.inverse();
  return -prec(0, 1) / std::sqrt(prec(0, 0) * prec(1, 1));
}

}  // namespace detail

inline ReferenceValues reference_metrics(const PlantSpec& spec, const ReferenceQuery& q,
                                         std::uint64_t n_mc, std::uint64_t mc_seed = 0x5eed) {
  spec.validate();
  if (n_mc < 100'000) throw ConfigError("reference Monte Carlo needs n_mc >= 1e5");
  const PlantGeometry g = plant_geometry(spec, 0, q.layer);
  const Eigen::VectorXd lam = g.eigenvalues;
  const double rho = q.layer.readability;
  const double rho_out = q.output_layer ? q.output_layer->readability : 0.0;
  std::vector<double> score(n_mc), loss(n_mc), conf(n_mc), norm(n_mc), out(q.output_layer ? n_mc : 0);
  Rng rng(mc_seed);
  for (std::uint64_t i = 0; i < n_mc; ++i) {
    const double zs = rng.normal(), zu = rng.normal(), eta = rng.normal(), eps = rng.normal();
    const double p = std::max(1.0 / (1.0 + std::exp(-(spec.conf_scale * zu + spec.conf_noise * eta))), 1e-6);
    const double x = spec.gamma * -std::log(p) + spec.beta * zs + spec.sigma * eps;
    const double r = rho * zs + std::sqrt(std::max(0.0, 1.0 - rho * rho)) * rng.normal();
    double sq = lam[g.signal_index] * r * r + lam[g.confidence_index] * zu * zu;
    for (Eigen::Index j = 0; j < lam.size(); ++j) {
      if (j == g.signal_index || j == g.confidence_index) continue;
      const double gj = rng.normal();
      sq += lam[j] * gj * gj;
    }
    score[i] = q.signal_weight * r - q.confidence_weight * zu;
    loss[i] = std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
    conf[i] = p;
    norm[i] = std::sqrt(sq);
    if (q.output_layer) out[i] = rho_out * zs + std::sqrt(std::max(0.0, 1.0 - rho_out * rho_out)) * rng.normal();
  }
  const auto rs = detail::plain_ranks(score), rl = detail::plain_ranks(loss);
  const auto rc = detail::plain_ranks(conf), rn = detail::plain_ranks(norm);
  ReferenceValues v;
  v.n_mc = n_mc;
  v.raw = detail::precision_partial({rs, rl});
  v.pcorr = detail::precision_partial({rs, rl, rc, rn});
  v.absorbed = v.raw != 0.0 ? 1.0 - v.pcorr / v.raw : 0.0;
  if (q.output_layer) v.oc = detail::precision_partial({rs, rl, rc, rn, detail::plain_ranks(out)});
  return v;
}

inline double reference_pcorr(const PlantSpec& spec, std::uint64_t n_mc, std::uint64_t mc_seed = 0x5eed) {
  return reference_metrics(spec, ReferenceQuery{}, n_mc, mc_seed).pcorr;
}

}  // namespace obsv

#endif  // OBSV_SYNTH_ORACLE_HPP_
