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

#ifndef OBSV_PROTOCOL_HPP_
#define OBSV_PROTOCOL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "obsv/controls.hpp"
#include "obsv/error.hpp"
#include "obsv/observer.hpp"
#include "obsv/parallel.hpp"
#include "obsv/probes.hpp"
#include "obsv/rank_metrics.hpp"
#include "obsv/record_store.hpp"
#include "obsv/stat_tests.hpp"

namespace obsv {

inline constexpr double kCollapseFloor = 0.15;
inline constexpr double kHealthyFloor = 0.208;

enum class Observability { kCollapsed, kIndeterminate, kHealthy };

inline const char* to_string(Observability s) {
  switch (s) {
    case Observability::kCollapsed: return "collapsed";
    case Observability::kIndeterminate: return "indeterminate";
    case Observability::kHealthy: return "healthy";
  }
  return "unknown";
}

struct CollapseVerdict {
  Observability status = Observability::kIndeterminate;
  double pcorr = 0.0;
  double collapse_floor = kCollapseFloor;
  double healthy_floor = kHealthyFloor;
};

inline void to_json(nlohmann::json& j, const CollapseVerdict& v) {
  j = {{"status", to_string(v.status)},
       {"pcorr", v.pcorr},
       {"collapse_floor", v.collapse_floor},
       {"healthy_floor", v.healthy_floor}};
}

inline CollapseVerdict classify_observability(double pcorr, double collapse_floor = kCollapseFloor,
                                              double healthy_floor = kHealthyFloor) {
  if (!(collapse_floor < healthy_floor)) throw ConfigError("collapse floor must lie below the healthy floor");
  CollapseVerdict v;
  v.pcorr = pcorr;
  v.collapse_floor = collapse_floor;
  v.healthy_floor = healthy_floor;
  if (pcorr <= collapse_floor) v.status = Observability::kCollapsed;
  else if (pcorr >= healthy_floor) v.status = Observability::kHealthy;
  else v.status = Observability::kIndeterminate;
  return v;
}

inline double depth_fraction(int layer, int n_layers) {
  if (n_layers <= 1) return 0.0;
  return static_cast<double>(layer) / static_cast<double>(n_layers - 1);
}

// One layer of one model. Probes fit on `train`; layer selection scores on
// `val`; reported numbers come from `test`, or from `val` when test is empty.
struct LayerData {
  int layer = 0;
  RecordSet train;
  RecordSet val;
  RecordSet test;

  const RecordSet& report_split() const { return test.empty() ? val : test; }
};

struct SweepConfig {
  std::string model = "model";
  int n_layers = 0;
  std::vector<int> expected_layers;  // empty: every layer in [0, n_layers)
  std::vector<std::string> controls = standard_controls();
  TrainConfig probe = TrainConfig::observer_defaults();
  std::vector<std::uint64_t> selection_seeds = {42};
  std::vector<std::uint64_t> report_seeds = {43, 44, 45, 46, 47, 48, 49};
  bool output_control = true;
  Eigen::Index predictor_width = kOutputPredictorWidth;
  TrainConfig predictor = TrainConfig::output_predictor_defaults();
  std::uint64_t vocab_size = 0;  // token_freq control; 0 infers max id + 1
  double collapse_floor = kCollapseFloor;
  double healthy_floor = kHealthyFloor;
  std::size_t threads = 1;

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be positive");
    if (selection_seeds.empty()) throw ConfigError("at least one selection seed required");
    if (report_seeds.empty()) throw ConfigError("at least one report seed required");
    for (auto s : selection_seeds) {
      if (std::find(report_seeds.begin(), report_seeds.end(), s) != report_seeds.end()) {
        throw ConfigError("selection seed " + std::to_string(s) + " reused for reporting");
      }
    }
    probe.validate();
    predictor.validate();
    classify_observability(0.0, collapse_floor, healthy_floor);
  }
};

// Controls and target for one layer. Typicality and corpus statistics come
// from the training split only.
struct PreparedLayer {
  std::shared_ptr<TypicalityStats> typicality;
  std::shared_ptr<CorpusCounts> corpus;
  ControlMatrix train_controls;
  ControlMatrix val_controls;
  ControlMatrix report_controls;
  ResidualTarget target;
};

inline PreparedLayer prepare_layer(const LayerData& data, const std::vector<std::string>& control_set,
                                   std::uint64_t vocab_size = 0) {
  if (data.train.empty()) throw DataError("layer " + std::to_string(data.layer) + ": empty training split");
  if (data.val.empty()) throw DataError("layer " + std::to_string(data.layer) + ": empty validation split");
  PreparedLayer p;
  ControlContext ctx;
  if (std::find(control_set.begin(), control_set.end(), kMahalanobis) != control_set.end()) {
    p.typicality = std::make_shared<TypicalityStats>(fit_typicality(data.train));
    ctx.typicality = p.typicality.get();
  }
  if (std::find(control_set.begin(), control_set.end(), kTokenFreq) != control_set.end()) {
    std::uint64_t v = vocab_size;
    if (v == 0) {
      for (auto id : data.train.token_ids()) v = std::max<std::uint64_t>(v, id + std::uint64_t{1});
    }
    p.corpus = std::make_shared<CorpusCounts>(build_corpus_counts(data.train, v));
    ctx.corpus = p.corpus.get();
  }
  p.train_controls = build_control_matrix(data.train, control_set, ctx, "train");
  p.val_controls = build_control_matrix(data.val, control_set, ctx, "train");
  p.report_controls = build_control_matrix(data.report_split(), control_set, ctx, "train");
  p.target = fit_residual_target(data.train.loss_vector(), p.train_controls);
  return p;
}

struct LayerPoint {
  int layer = 0;
  double depth_fraction = 0.0;
  double selection_pcorr = 0.0;
  double selection_raw = 0.0;
};

struct LayerProfile {
  std::string model;
  int n_layers = 0;
  std::vector<LayerPoint> layers;
  int peak_layer = -1;
  double peak_depth_fraction = 0.0;
  MetricReport report;
  std::vector<double> per_seed_raw;
  std::vector<double> per_seed_oc;
  CollapseVerdict verdict;
  std::vector<std::string> notes;
};

inline void to_json(nlohmann::json& j, const LayerPoint& p) {
  j = {{"layer", p.layer},
       {"depth_fraction", p.depth_fraction},
       {"selection_pcorr", p.selection_pcorr},
       {"selection_raw", p.selection_raw}};
}

inline void to_json(nlohmann::json& j, const LayerProfile& p) {
  j = {{"model", p.model},
       {"n_layers", p.n_layers},
       {"layers", p.layers},
       {"peak_layer", p.peak_layer},
       {"peak_depth_fraction", p.peak_depth_fraction},
       {"report", p.report},
       {"per_seed_raw", p.per_seed_raw},
       {"per_seed_oc", p.per_seed_oc},
       {"verdict", p.verdict},
       {"notes", p.notes}};
}

namespace detail {

inline void check_layers(const std::vector<LayerData>& layers, const SweepConfig& cfg) {
  std::vector<int> expected = cfg.expected_layers;
  if (expected.empty()) {
    for (int l = 0; l < cfg.n_layers; ++l) expected.push_back(l);
  }
  std::set<int> have;
  for (const auto& l : layers) {
    if (!have.insert(l.layer).second) throw DataError("layer " + std::to_string(l.layer) + " supplied twice");
    if (l.layer < 0 || l.layer >= cfg.n_layers) {
      throw DataError("layer " + std::to_string(l.layer) + " outside [0, n_layers)");
    }
  }
  std::string missing;
  for (int l : expected) {
    if (!have.count(l)) missing += (missing.empty() ? "" : ", ") + std::to_string(l);
  }
  if (!missing.empty()) throw DataError(cfg.model + ": missing layer shards: " + missing);
}

inline bool same_tokens(const RecordSet& a, const RecordSet& b) {
  return a.size() == b.size() && std::equal(a.doc_ids().begin(), a.doc_ids().end(), b.doc_ids().begin()) &&
         std::equal(a.positions().begin(), a.positions().end(), b.positions().begin());
}


}  // namespace detail

// Selection uses the selection seed on the validation split; reported numbers
// average the report seeds at the chosen layer on the report split.
inline LayerProfile layer_sweep(const std::vector<LayerData>& layers, const SweepConfig& cfg) {
  cfg.validate();
  if (layers.empty()) throw DataError(cfg.model + ": no layer shards supplied");
  detail::check_layers(layers, cfg);
  std::vector<const LayerData*> ordered;
  for (const auto& l : layers) ordered.push_back(&l);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->layer < b->layer; });

  std::vector<PreparedLayer> prep(ordered.size());
  std::vector<LayerPoint> points(ordered.size());
  parallel_for(ordered.size(), cfg.threads, [&](std::size_t i) {
    const LayerData& data = *ordered[i];
    prep[i] = prepare_layer(data, cfg.controls, cfg.vocab_size);
    const Eigen::VectorXd val_loss = data.val.loss_vector();
    const PartialCorrelator pc(val_loss, prep[i].val_controls);
    double pcorr = 0.0, raw = 0.0;
    for (auto seed : cfg.selection_seeds) {
      TrainConfig tc = cfg.probe;
      tc.seed = seed;
      const LinearObserver obs = train_linear_observer(data.train, prep[i].target, tc);
      const Eigen::VectorXd s = score_observer(obs, data.val);
      pcorr += pc(s);
      raw += spearman(s, val_loss);
    }
    const auto k = static_cast<double>(cfg.selection_seeds.size());
    points[i] = {data.layer, depth_fraction(data.layer, cfg.n_layers), pcorr / k, raw / k};
  });

  LayerProfile prof;
  prof.model = cfg.model;
  prof.n_layers = cfg.n_layers;
  prof.layers = points;
  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].selection_pcorr > points[best].selection_pcorr) best = i;
  }
  const LayerData& peak = *ordered[best];
  const PreparedLayer& pp = prep[best];
  prof.peak_layer = peak.layer;
  prof.peak_depth_fraction = depth_fraction(peak.layer, cfg.n_layers);
  if (peak.test.empty()) prof.notes.push_back("no test split; reported values use the validation split");

  const RecordSet& rep = peak.report_split();
  const Eigen::VectorXd rep_loss = rep.loss_vector();
  const PartialCorrelator pc(rep_loss, pp.report_controls);

  std::optional<PartialCorrelator> oc;
  const LayerData* final_layer = nullptr;
  for (auto* l : ordered) {
    if (l->layer == cfg.n_layers - 1) final_layer = l;
  }
  if (cfg.output_control) {
    if (final_layer == nullptr) {
      prof.notes.push_back("final layer not supplied; r_OC skipped");
    } else {
      const RecordSet& final_rep = final_layer->report_split();
      if (!detail::same_tokens(rep, final_rep)) {
        throw SchemaError("peak and final layer report splits hold different tokens");
      }
      TrainConfig tc = cfg.predictor;
      const MlpHead head = train_output_predictor(final_layer->train, cfg.predictor_width, tc);
      oc.emplace(rep_loss, pp.report_controls.with_column("output_pred", predict(head, final_rep)));
    }
  }

  const std::size_t ns = cfg.report_seeds.size();
  std::vector<Eigen::VectorXd> scores(ns);
  std::vector<double> pcs(ns), raws(ns), ocs(oc ? ns : 0);
  parallel_for(ns, cfg.threads, [&](std::size_t i) {
    TrainConfig tc = cfg.probe;
    tc.seed = cfg.report_seeds[i];
    LinearObserver obs = train_linear_observer(peak.train, pp.target, tc);
    scores[i] = score_observer(obs, rep);
    pcs[i] = pc(scores[i]);
    raws[i] = spearman(scores[i], rep_loss);
    if (oc) ocs[i] = (*oc)(scores[i]);
  });

  MetricReport& r = prof.report;
  r.model = cfg.model;
  r.layer = peak.layer;
  r.n_tokens = rep.size();
  r.control_set = cfg.controls;
  r.per_seed_pcorr = pcs;
  r.pcorr = detail::mean_of(pcs);
  r.pcorr_std = detail::sample_std(pcs);
  r.raw_spearman = detail::mean_of(raws);
  if (ns >= 2) r.seed_agreement = seed_agreement(scores);
  if (r.raw_spearman != 0.0) r.absorbed_fraction = absorbed_fraction(r.raw_spearman, r.pcorr);
  if (oc) r.oc_resid = detail::mean_of(ocs);
  prof.per_seed_raw = raws;
  prof.per_seed_oc = ocs;
  prof.verdict = classify_observability(r.pcorr, cfg.collapse_floor, cfg.healthy_floor);
  return prof;
}

// Range of selection-profile values across the k best layers.
inline double layer_flatness(std::span<const double> profile, std::size_t k = 3) {
  if (k < 1) throw ConfigError("flatness needs k >= 1");
  if (profile.size() < k) throw DataError("profile has fewer than k layers");
  std::vector<double> v(profile.begin(), profile.end());
  std::sort(v.begin(), v.end(), std::greater<>());
  return v.front() - v[k - 1];
}

inline double layer_flatness(const LayerProfile& profile, std::size_t k = 3) {
  std::vector<double> v;
  for (const auto& p : profile.layers) v.push_back(p.selection_pcorr);
  return layer_flatness(v, k);
}

struct CheckpointInput {
  std::int64_t step = 0;
  std::optional<double> tokens_seen;
  std::optional<double> perplexity;
  std::vector<LayerData> layers;
};

struct TrajectoryPoint {
  std::int64_t step = 0;
  std::optional<double> tokens_seen;
  std::optional<double> perplexity;
  double pcorr = 0.0;
  double pcorr_std = 0.0;
  std::optional<double> oc_resid;
  std::optional<double> oc_fraction;  // r_OC / pcorr
  int peak_layer = -1;
  std::optional<double> seed_agreement;
  Observability status = Observability::kIndeterminate;
};

struct TrajectoryReport {
  std::vector<TrajectoryPoint> points;
  std::vector<LayerProfile> profiles;
  std::optional<std::int64_t> first_collapse_step;
  bool oc_fraction_declines = false;  // non-increasing across points with r_OC
};

inline void to_json(nlohmann::json& j, const TrajectoryPoint& p) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"step", p.step},
       {"tokens_seen", opt(p.tokens_seen)},
       {"perplexity", opt(p.perplexity)},
       {"pcorr", p.pcorr},
       {"pcorr_std", p.pcorr_std},
       {"oc_resid", opt(p.oc_resid)},
       {"oc_fraction", opt(p.oc_fraction)},
       {"peak_layer", p.peak_layer},
       {"seed_agreement", opt(p.seed_agreement)},
       {"status", to_string(p.status)}};
}

inline void to_json(nlohmann::json& j, const TrajectoryReport& r) {
  j = {{"points", r.points},
       {"profiles", r.profiles},
       {"first_collapse_step", r.first_collapse_step ? nlohmann::json(*r.first_collapse_step) : nlohmann::json(nullptr)},
       {"oc_fraction_declines", r.oc_fraction_declines}};
}

// Full layer sweep per checkpoint. `expected_steps`, when given, must all be
// present.
inline TrajectoryReport checkpoint_trajectory(const std::vector<CheckpointInput>& checkpoints,
                                              const SweepConfig& cfg,
                                              const std::vector<std::int64_t>& expected_steps = {}) {
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    if (checkpoints[i].step <= checkpoints[i - 1].step) {
      throw DataError("checkpoint steps must be strictly increasing");
    }
  }
  std::string missing;
  for (auto s : expected_steps) {
    const bool found = std::any_of(checkpoints.begin(), checkpoints.end(),
                                   [&](const CheckpointInput& c) { return c.step == s; });
    if (!found) missing += (missing.empty() ? "" : ", ") + std::to_string(s);
  }
  if (!missing.empty()) throw DataError("missing checkpoints: " + missing);
  TrajectoryReport out;
  for (const auto& c : checkpoints) {
    SweepConfig sc = cfg;
    sc.model = cfg.model + "@" + std::to_string(c.step);
    LayerProfile prof = layer_sweep(c.layers, sc);
    TrajectoryPoint p;
    p.step = c.step;
    p.tokens_seen = c.tokens_seen;
    p.perplexity = c.perplexity;
    p.pcorr = prof.report.pcorr;
    p.pcorr_std = prof.report.pcorr_std;
    p.oc_resid = prof.report.oc_resid;
    if (p.oc_resid && p.pcorr != 0.0) p.oc_fraction = *p.oc_resid / p.pcorr;
    p.peak_layer = prof.peak_layer;
    p.seed_agreement = prof.report.seed_agreement;
    p.status = prof.verdict.status;
    if (!out.first_collapse_step && p.status == Observability::kCollapsed) out.first_collapse_step = p.step;
    out.points.push_back(p);
    out.profiles.push_back(std::move(prof));
  }
  std::vector<double> fr;
  for (const auto& p : out.points) {
    if (p.oc_fraction) fr.push_back(*p.oc_fraction);
  }
  out.oc_fraction_declines = fr.size() >= 2 && std::is_sorted(fr.rbegin(), fr.rend());
  return out;
}

struct ModelRow {
  std::string model;
  std::string family;
  int layers = 0;
  int heads = 0;
  int hidden = 0;
  double params = 0.0;
  double pcorr = 0.0;
  double pcorr_std = 0.0;
  std::optional<double> oc_resid;

  int head_dim() const { return heads > 0 ? hidden / heads : 0; }
};

inline void to_json(nlohmann::json& j, const ModelRow& r) {
  j = {{"model", r.model},   {"family", r.family}, {"layers", r.layers},
       {"heads", r.heads},   {"hidden", r.hidden}, {"head_dim", r.head_dim()},
       {"params", r.params}, {"pcorr", r.pcorr},   {"pcorr_std", r.pcorr_std},
       {"oc_resid", r.oc_resid ? nlohmann::json(*r.oc_resid) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, ModelRow& r) {
  r.model = j.at("model").get<std::string>();
  r.family = j.value("family", std::string{});
  r.layers = j.value("layers", 0);
  r.heads = j.value("heads", 0);
  r.hidden = j.value("hidden", 0);
  r.params = j.value("params", 0.0);
  r.pcorr = j.at("pcorr").get<double>();
  r.pcorr_std = j.value("pcorr_std", 0.0);
  if (j.contains("oc_resid") && !j["oc_resid"].is_null()) r.oc_resid = j["oc_resid"].get<double>();
}

struct CrossModelReport {
  std::vector<ModelRow> rows;
  std::vector<std::size_t> flagged;
  std::vector<CollapseVerdict> verdicts;
  std::optional<TestResult> partition;
  std::optional<LooReport> leave_one_out;
  std::optional<TestResult> f_test;
};

inline void to_json(nlohmann::json& j, const CrossModelReport& r) {
  j = {{"rows", r.rows}, {"flagged", r.flagged}, {"verdicts", r.verdicts}};
  j["partition"] = r.partition ? nlohmann::json(*r.partition) : nlohmann::json(nullptr);
  j["leave_one_out"] = r.leave_one_out ? nlohmann::json(*r.leave_one_out) : nlohmann::json(nullptr);
  j["f_test"] = r.f_test ? nlohmann::json(*r.f_test) : nlohmann::json(nullptr);
}

// Table of models with the flagged configuration class tested against the
// rest: exact partition test, leave-one-out separation and one-way F.
inline CrossModelReport cross_model_report(const std::vector<ModelRow>& rows,
                                           const std::vector<std::size_t>& flagged,
                                           double collapse_floor = kCollapseFloor,
                                           double healthy_floor = kHealthyFloor) {
  if (rows.size() < 2) throw DataError("cross-model report needs at least 2 models");
  CrossModelReport out;
  out.rows = rows;
  out.flagged = flagged;
  std::vector<double> values;
  for (const auto& r : rows) {
    values.push_back(r.pcorr);
    out.verdicts.push_back(classify_observability(r.pcorr, collapse_floor, healthy_floor));
  }
  if (!flagged.empty()) {
    out.partition = exact_partition_test(values, flagged);
    out.leave_one_out = leave_one_out_separation(values, flagged);
    const auto mask = detail::flag_mask(values.size(), flagged);
    std::vector<std::vector<double>> groups(2);
    for (std::size_t i = 0; i < values.size(); ++i) groups[mask[i] ? 1 : 0].push_back(values[i]);
    if (values.size() > 2) out.f_test = oneway_f_eta2(groups);
  }
  return out;
}

// Flags rows whose (layers, heads) matches the given configuration.
inline std::vector<std::size_t> flag_configuration(const std::vector<ModelRow>& rows, int layers, int heads) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].layers == layers && rows[i].heads == heads) out.push_back(i);
  }
  return out;
}

}  // namespace obsv

#endif  // OBSV_PROTOCOL_HPP_
