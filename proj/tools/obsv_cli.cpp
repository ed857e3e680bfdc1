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

// obsv command-line tool. Each subcommand reads a JSON config, writes JSON
// reports (plus CSV/SVG views) to --out, and records provenance.
//
// Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "obsv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string command;
  fs::path config;
  fs::path out = "obsv_out";
  std::optional<std::uint64_t> seed_override;
  std::size_t threads = obsv::default_threads();
};

struct Context {
  Options opt;
  json cfg;
  fs::path base;  // relative paths in the config resolve against this
  obsv::Provenance prov;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
  }

  obsv::RecordSet load(const std::string& p) {
    const fs::path path = resolve(p);
    prov.inputs.emplace_back(p, obsv::sha256_file(path));
    return obsv::load_shard(path).records;
  }
};

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw obsv::ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw obsv::ConfigError(std::string("config missing field '") + key + "'");
  return get_or<T>(j, key, T{});
}

obsv::TrainConfig train_config(const json& j, const char* key, obsv::TrainConfig fallback) {
  if (!j.contains(key)) return fallback;
  obsv::TrainConfig c = fallback;
  const json& t = j.at(key);
  c.lr = get_or(t, "lr", c.lr);
  c.batch_size = get_or(t, "batch_size", c.batch_size);
  c.epochs = get_or(t, "epochs", c.epochs);
  c.weight_decay = get_or(t, "weight_decay", c.weight_decay);
  c.seed = get_or(t, "seed", c.seed);
  c.validate();
  return c;
}

std::vector<std::string> control_set(const json& j) {
  return get_or(j, "controls", obsv::standard_controls());
}

std::pair<double, double> floors(const json& j) {
  const json f = j.value("floors", json::object());
  return {get_or(f, "collapse", obsv::kCollapseFloor), get_or(f, "healthy", obsv::kHealthyFloor)};
}

obsv::SweepConfig sweep_config(Context& ctx) {
  const json& j = ctx.cfg;
  obsv::SweepConfig c;
  c.model = get_or(j, "model", c.model);
  c.n_layers = require<int>(j, "n_layers");
  c.expected_layers = get_or(j, "expected_layers", c.expected_layers);
  c.controls = control_set(j);
  c.probe = train_config(j, "probe", c.probe);
  c.predictor = train_config(j, "predictor", c.predictor);
  c.predictor_width = get_or(j, "predictor_width", c.predictor_width);
  c.output_control = get_or(j, "output_control", c.output_control);
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  if (j.contains("seeds")) {
    c.selection_seeds = get_or(j["seeds"], "selection", c.selection_seeds);
    c.report_seeds = get_or(j["seeds"], "report", c.report_seeds);
  }
  if (ctx.opt.seed_override) {
    const std::uint64_t s = *ctx.opt.seed_override;
    c.selection_seeds = {s};
    c.report_seeds.clear();
    for (std::uint64_t k = 1; k <= 7; ++k) c.report_seeds.push_back(s + k);
  }
  std::tie(c.collapse_floor, c.healthy_floor) = floors(j);
  c.threads = ctx.opt.threads;
  c.validate();
  return c;
}

std::vector<obsv::LayerData> layer_data(Context& ctx, const json& layers) {
  std::vector<obsv::LayerData> out;
  for (const auto& l : layers) {
    obsv::LayerData d;
    d.layer = require<int>(l, "layer");
    d.train = ctx.load(require<std::string>(l, "train"));
    d.val = ctx.load(require<std::string>(l, "val"));
    if (l.contains("test")) d.test = ctx.load(l["test"].get<std::string>());
    out.push_back(std::move(d));
  }
  return out;
}

json profile_rows(const obsv::LayerProfile& p) {
  json rows = json::array();
  for (const auto& l : p.layers) rows.push_back(l);
  return rows;
}

obsv::PlotSpec profile_plot(const obsv::LayerProfile& p, double collapse, double healthy) {
  obsv::PlotSpec plot;
  plot.title = p.model + ": selection-seed profile";
  plot.x_label = "layer";
  plot.y_label = "partial Spearman";
  obsv::PlotSeries s{"pcorr", {}, {}};
  for (const auto& l : p.layers) {
    s.x.push_back(l.layer);
    s.y.push_back(l.selection_pcorr);
  }
  plot.series.push_back(s);
  plot.hlines = {{"collapse floor", collapse}, {"healthy floor", healthy}};
  return plot;
}

// ---- subcommands -----------------------------------------------------------

void run_audit(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  const obsv::RecordSet train = ctx.load(require<std::string>(j, "train"));
  const obsv::RecordSet eval = ctx.load(require<std::string>(j, "eval"));
  const auto controls = control_set(j);
  obsv::LayerData layer{get_or(j, "layer", 0), train, eval, {}};
  const obsv::PreparedLayer prep = obsv::prepare_layer(layer, controls, get_or<std::uint64_t>(j, "vocab_size", 0));
  obsv::TrainConfig tc = train_config(j, "probe", obsv::TrainConfig::observer_defaults());
  std::vector<std::uint64_t> seeds = get_or(j, "seeds", std::vector<std::uint64_t>{43, 44, 45, 46, 47, 48, 49});
  if (ctx.opt.seed_override) seeds = {*ctx.opt.seed_override};
  if (seeds.empty()) throw obsv::ConfigError("audit needs at least one seed");

  const Eigen::VectorXd loss = eval.loss_vector();
  const obsv::PartialCorrelator pc(loss, prep.val_controls);
  std::optional<obsv::PartialCorrelator> oc;
  if (j.contains("final_layer")) {
    const obsv::RecordSet ftrain = ctx.load(require<std::string>(j["final_layer"], "train"));
    const obsv::RecordSet feval = ctx.load(require<std::string>(j["final_layer"], "eval"));
    const auto head = obsv::train_output_predictor(
        ftrain, get_or<Eigen::Index>(j, "predictor_width", obsv::kOutputPredictorWidth),
        train_config(j, "predictor", obsv::TrainConfig::output_predictor_defaults()));
    if (feval.size() != eval.size()) throw obsv::SchemaError("final-layer eval split holds different tokens");
    oc.emplace(loss, prep.val_controls.with_column("output_pred", obsv::predict(head, feval)));
  }

  std::vector<Eigen::VectorXd> scores(seeds.size());
  std::vector<double> pcs(seeds.size()), raws(seeds.size()), ocs(oc ? seeds.size() : 0);
  std::vector<obsv::LinearObserver> observers(seeds.size());
  obsv::parallel_for(seeds.size(), ctx.opt.threads, [&](std::size_t i) {
    obsv::TrainConfig c = tc;
    c.seed = seeds[i];
    observers[i] = obsv::train_linear_observer(train, prep.target, c);
    observers[i].layer = layer.layer;
    scores[i] = obsv::score_observer(observers[i], eval);
    pcs[i] = pc(scores[i]);
    raws[i] = obsv::spearman(scores[i], loss);
    if (oc) ocs[i] = (*oc)(scores[i]);
  });

  obsv::MetricReport r;
  r.model = get_or(j, "model", std::string("model"));
  r.layer = layer.layer;
  r.n_tokens = eval.size();
  r.control_set = controls;
  r.per_seed_pcorr = pcs;
  r.pcorr = obsv::detail::mean_of(pcs);
  r.pcorr_std = obsv::detail::sample_std(pcs);
  r.raw_spearman = obsv::detail::mean_of(raws);
  if (seeds.size() >= 2) r.seed_agreement = obsv::seed_agreement(scores);
  if (r.raw_spearman != 0.0) r.absorbed_fraction = obsv::absorbed_fraction(r.raw_spearman, r.pcorr);
  if (oc) r.oc_resid = obsv::detail::mean_of(ocs);

  // Hand-designed and untrained baselines on the same split and controls.
  const obsv::HandcraftedStats hs = obsv::handcrafted_stats(eval);
  json baselines = {{"ff_goodness", pc(hs.ff_goodness)},
                    {"active_ratio", pc(hs.active_ratio)},
                    {"activation_entropy", pc(hs.activation_entropy)},
                    {"act_norm", pc(hs.act_norm)},
                    {"random_head", pc(obsv::score_observer(obsv::random_observer(eval.dim(), seeds.front()), eval))}};
  const auto geo = obsv::signal_geometry(observers.front(), train);
  const auto budget = obsv::check_budget(train.size(), train.dim(), get_or(j, "budget_threshold", 350.0));
  const auto [collapse, healthy] = floors(j);

  json report = {{"provenance", ctx.prov},
                 {"metrics", r},
                 {"verdict", obsv::classify_observability(r.pcorr, collapse, healthy)},
                 {"baselines", baselines},
                 {"geometry", {{"pc1_cosine", geo.pc1_cosine}, {"top10_var_share", geo.top10_var_share}}},
                 {"budget",
                  {{"ex_per_dim", budget.ex_per_dim},
                   {"threshold", budget.threshold},
                   {"adequate", budget.adequate},
                   {"in_caution_band", budget.in_caution_band},
                   {"note", budget.note}}},
                 {"target_positive_rate", prep.target.positive_rate()}};
  out.write_json("audit.json", report);
  json row = r;
  row["status"] = report["verdict"]["status"];
  out.write_text("audit.csv", obsv::to_csv({"model", "layer", "n_tokens", "raw_spearman", "pcorr", "pcorr_std",
                                            "oc_resid", "seed_agreement", "absorbed_fraction", "status"},
                                           json::array({row})));
  for (std::size_t i = 0; i < observers.size(); ++i) {
    out.write_json("probe_seed" + std::to_string(seeds[i]) + ".json", obsv::observer_to_json(observers[i]));
  }
}

void run_sweep(Context& ctx, obsv::OutputDir& out) {
  const obsv::SweepConfig sc = sweep_config(ctx);
  const auto layers = layer_data(ctx, require<json>(ctx.cfg, "layers"));
  const obsv::LayerProfile prof = obsv::layer_sweep(layers, sc);
  json report = {{"provenance", ctx.prov}, {"profile", prof}};
  if (prof.layers.size() >= 3) report["flatness_top3"] = obsv::layer_flatness(prof, 3);
  out.write_json("profile.json", report);
  out.write_text("profile.csv", obsv::to_csv({"layer", "depth_fraction", "selection_pcorr", "selection_raw"},
                                             profile_rows(prof)));
  out.write_text("profile.svg", obsv::render_svg(profile_plot(prof, sc.collapse_floor, sc.healthy_floor)));
}

void run_shuffle(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  const obsv::RecordSet train = ctx.load(require<std::string>(j, "train"));
  const obsv::RecordSet eval = ctx.load(require<std::string>(j, "eval"));
  obsv::LayerData layer{0, train, eval, {}};
  const obsv::PreparedLayer prep = obsv::prepare_layer(layer, control_set(j), get_or<std::uint64_t>(j, "vocab_size", 0));
  obsv::TrainConfig tc = train_config(j, "probe", obsv::TrainConfig::observer_defaults());
  std::uint64_t seed = get_or<std::uint64_t>(j, "seed", 0);
  if (ctx.opt.seed_override) seed = *ctx.opt.seed_override;
  const obsv::ShuffleInput in{&train, &prep.target, &eval, &prep.val_controls};
  const auto r = obsv::shuffle_test(in, tc, get_or<std::size_t>(j, "n_perms", obsv::kShufflePermutations), seed,
                                    ctx.opt.threads);
  out.write_json("shuffle.json", {{"provenance", ctx.prov}, {"shuffle", r}});
}

void run_permtest(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  std::vector<obsv::ModelRow> rows;
  if (j.contains("rows")) {
    try {
      rows = j["rows"].get<std::vector<obsv::ModelRow>>();
    } catch (const json::exception& e) {
      throw obsv::ConfigError(std::string("rows: ") + e.what());
    }
  } else {
    const auto values = require<std::vector<double>>(j, "values");
    for (std::size_t i = 0; i < values.size(); ++i) {
      obsv::ModelRow r;
      r.model = "config_" + std::to_string(i);
      r.pcorr = values[i];
      rows.push_back(r);
    }
  }
  std::vector<std::size_t> flagged = get_or(j, "flagged", std::vector<std::size_t>{});
  if (j.contains("flag_config")) {
    flagged = obsv::flag_configuration(rows, require<int>(j["flag_config"], "layers"), require<int>(j["flag_config"], "heads"));
  }
  if (flagged.empty()) throw obsv::ConfigError("permtest needs 'flagged' indices or a matching 'flag_config'");
  const auto [collapse, healthy] = floors(j);
  const auto rep = obsv::cross_model_report(rows, flagged, collapse, healthy);
  out.write_json("permtest.json", {{"provenance", ctx.prov}, {"report", rep}});
}

void run_flag(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  const auto rates = get_or(j, "rates", std::vector<double>{0.05, 0.10, 0.20});
  json report = {{"provenance", ctx.prov}};
  json rows = json::array();
  if (j.contains("tokens")) {
    const json& t = j["tokens"];
    const obsv::RecordSet recs = ctx.load(require<std::string>(t, "shard"));
    const std::string sidecar_name = require<std::string>(t, "observer");
    const fs::path sidecar = ctx.resolve(sidecar_name);
    ctx.prov.add_input(sidecar_name, sidecar);
    const auto obs = obsv::load_observer_sidecar(sidecar);
    const Eigen::VectorXd s = obsv::score_observer(obs, recs);
    const Eigen::VectorXd conf = recs.max_softmax_vector();
    const auto errors = obsv::loss_above_median(recs.loss_vector());
    json tok = json::array();
    for (double f : rates) {
      const auto fo = obsv::flag_at_rate(s, f, obsv::RankOrder::kDescending, "observer");
      const auto fc = obsv::flag_at_rate(conf, f, obsv::RankOrder::kAscending, "confidence");
      json row = {{"level", "token"},
                  {"rate", f},
                  {"exclusive_catch", obsv::exclusive_catch_rate(fo, fc, errors)},
                  {"random_baseline", obsv::random_ranker_baseline(f, fc, errors)},
                  {"n", recs.size()}};
      tok.push_back(row);
      rows.push_back(row);
    }
    report["tokens"] = tok;
  }
  if (j.contains("questions")) {
    const std::string qname = require<std::string>(j, "questions");
    const fs::path qpath = ctx.resolve(qname);
    ctx.prov.add_input(qname, qpath);
    const auto qs = obsv::aggregate_questions(obsv::load_question_records(qpath));
    json q = json::array();
    for (double f : rates) {
      json row = obsv::downstream_catch(qs, f);
      row["level"] = "question";
      q.push_back(row);
      rows.push_back(row);
    }
    report["questions"] = q;
    try {
      report["confident_wrong_auc"] = obsv::confident_wrong_auc(qs, get_or(j, "confidence_quantile", obsv::kConfidentWrongQuantile));
    } catch (const obsv::UndefinedError& e) {
      report["confident_wrong_auc"] = nullptr;
      report["confident_wrong_auc_note"] = e.what();
    }
  }
  if (!j.contains("tokens") && !j.contains("questions")) throw obsv::ConfigError("flag needs 'tokens' or 'questions'");
  report["provenance"] = ctx.prov;
  out.write_json("flag.json", report);
  out.write_text("flag.csv", obsv::to_csv({"level", "rate", "exclusive_catch", "random_baseline"}, rows));
}

void run_trajectory(Context& ctx, obsv::OutputDir& out) {
  const obsv::SweepConfig sc = sweep_config(ctx);
  std::vector<obsv::CheckpointInput> cps;
  for (const auto& c : require<json>(ctx.cfg, "checkpoints")) {
    obsv::CheckpointInput in;
    in.step = require<std::int64_t>(c, "step");
    if (c.contains("tokens_seen")) in.tokens_seen = c["tokens_seen"].get<double>();
    if (c.contains("perplexity")) in.perplexity = c["perplexity"].get<double>();
    in.layers = layer_data(ctx, require<json>(c, "layers"));
    cps.push_back(std::move(in));
  }
  const auto rep = obsv::checkpoint_trajectory(cps, sc, get_or(ctx.cfg, "expected_steps", std::vector<std::int64_t>{}));
  out.write_json("trajectory.json", {{"provenance", ctx.prov}, {"trajectory", rep}});
  json rows = json::array();
  for (const auto& p : rep.points) rows.push_back(p);
  out.write_text("trajectory.csv", obsv::to_csv({"step", "tokens_seen", "perplexity", "pcorr", "pcorr_std", "oc_resid",
                                                 "oc_fraction", "peak_layer", "seed_agreement", "status"},
                                                rows));
  obsv::PlotSpec plot;
  plot.title = sc.model + ": checkpoint trajectory";
  plot.x_label = "step";
  plot.y_label = "partial Spearman";
  obsv::PlotSeries pc{"pcorr", {}, {}}, oc{"r_OC", {}, {}};
  for (const auto& p : rep.points) {
    pc.x.push_back(static_cast<double>(p.step));
    pc.y.push_back(p.pcorr);
    oc.x.push_back(static_cast<double>(p.step));
    oc.y.push_back(p.oc_resid ? *p.oc_resid : NAN);
  }
  plot.series = {pc, oc};
  plot.hlines = {{"collapse floor", sc.collapse_floor}, {"healthy floor", sc.healthy_floor}};
  out.write_text("trajectory.svg", obsv::render_svg(plot));
}

json synth_layer_entry(const fs::path& dir, const std::string& stem, int layer) {
  return {{"layer", layer},
          {"train", (dir / (stem + "_L" + std::to_string(layer) + "_train.obsa")).string()},
          {"val", (dir / (stem + "_L" + std::to_string(layer) + "_val.obsa")).string()},
          {"test", (dir / (stem + "_L" + std::to_string(layer) + "_test.obsa")).string()}};
}

// Splits each layer by document and writes train/val/test shards; returns the
// layer entries of a sweep config pointing at them (relative to --out).
json write_synth_layers(obsv::OutputDir& out, const obsv::PlantSpec& spec, const std::vector<obsv::RecordSet>& layers,
                        const std::array<double, 3>& fractions, const std::string& stem) {
  const auto split = obsv::assign_splits(layers.front().doc_ids(), fractions, spec.seed);
  json entries = json::array();
  const int n_layers = static_cast<int>(layers.size());
  for (int l = 0; l < n_layers; ++l) {
    const std::array<std::pair<const char*, const std::vector<std::uint32_t>*>, 3> parts = {
        {{"train", &split.train_ids}, {"val", &split.val_ids}, {"test", &split.test_ids}}};
    for (const auto& [name, ids] : parts) {
      const obsv::RecordSet rs = obsv::select_docs(layers[static_cast<std::size_t>(l)], *ids);
      json meta = obsv::make_metadata(spec.model, l, n_layers, spec.d, spec.step, name);
      meta["synthetic"] = spec;
      const auto bytes = obsv::encode_shard(obsv::make_header(rs, meta), rs);
      out.write_text(stem + "_L" + std::to_string(l) + "_" + name + ".obsa",
                     std::string(bytes.begin(), bytes.end()));
    }
    entries.push_back(synth_layer_entry("", stem, l));
  }
  return entries;
}

void run_synth(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  obsv::PlantSpec spec;
  try {
    spec = j.value("spec", json::object()).get<obsv::PlantSpec>();
  } catch (const json::exception& e) {
    throw obsv::ConfigError(std::string("spec: ") + e.what());
  }
  if (ctx.opt.seed_override) spec.seed = *ctx.opt.seed_override;
  spec.validate();
  std::vector<obsv::LayerPlant> layers = get_or(j, "layers", std::vector<obsv::LayerPlant>{obsv::LayerPlant{}});
  const auto fr = get_or(j, "splits", std::vector<double>{0.6, 0.2, 0.2});
  if (fr.size() != 3) throw obsv::ConfigError("splits must list train/val/test fractions");
  const std::array<double, 3> fractions{fr[0], fr[1], fr[2]};
  json sweep = {{"model", spec.model},
                {"n_layers", layers.size()},
                {"controls", control_set(j)}};
  for (const char* key : {"probe", "predictor", "seeds", "floors", "predictor_width"}) {
    if (j.contains(key)) sweep[key] = j[key];
  }
  if (j.contains("script")) {
    std::vector<obsv::ScriptPoint> script;
    for (const auto& p : j["script"]) script.push_back({require<std::int64_t>(p, "step"), require<double>(p, "beta")});
    const auto cps = obsv::generate_trajectory(spec, layers, script);
    json checkpoints = json::array();
    for (const auto& c : cps) {
      obsv::PlantSpec s = spec;
      s.step = c.step;
      checkpoints.push_back({{"step", c.step}, {"layers", write_synth_layers(out, s, c.layers, fractions,
                                                                             "ckpt" + std::to_string(c.step))}});
    }
    sweep["checkpoints"] = checkpoints;
    out.write_json("trajectory_config.json", sweep);
  } else {
    sweep["layers"] = write_synth_layers(out, spec, obsv::generate_layers(spec, layers), fractions, "synth");
    out.write_json("sweep_config.json", sweep);
  }
  out.write_json("synth.json", {{"provenance", ctx.prov}, {"spec", spec}, {"layers", layers}});
}

void run_report(Context& ctx, obsv::OutputDir& out) {
  const json& j = ctx.cfg;
  std::vector<obsv::ModelRow> rows = get_or(j, "rows", std::vector<obsv::ModelRow>{});
  // Merge sweep outputs: each cell is a profile.json plus architecture fields.
  for (const auto& cell : get_or(j, "cells", json::array())) {
    const std::string name = require<std::string>(cell, "profile");
    const fs::path p = ctx.resolve(name);
    ctx.prov.add_input(name, p);
    const json prof = obsv::detail::read_json_file(p).at("profile");
    obsv::ModelRow r;
    r.model = prof.at("model").get<std::string>();
    r.family = get_or(cell, "family", std::string{});
    r.layers = get_or(cell, "layers", prof.value("n_layers", 0));
    r.heads = get_or(cell, "heads", 0);
    r.hidden = get_or(cell, "hidden", 0);
    r.params = get_or(cell, "params", 0.0);
    r.pcorr = prof.at("report").at("pcorr").get<double>();
    r.pcorr_std = prof.at("report").value("pcorr_std", 0.0);
    const json& oc = prof.at("report").at("oc_resid");
    if (!oc.is_null()) r.oc_resid = oc.get<double>();
    rows.push_back(r);
  }
  if (rows.size() < 2) throw obsv::ConfigError("report needs at least 2 rows or cells");
  std::vector<std::size_t> flagged = get_or(j, "flagged", std::vector<std::size_t>{});
  if (j.contains("flag_config")) {
    flagged = obsv::flag_configuration(rows, require<int>(j["flag_config"], "layers"), require<int>(j["flag_config"], "heads"));
  }
  const auto [collapse, healthy] = floors(j);
  const auto rep = obsv::cross_model_report(rows, flagged, collapse, healthy);
  out.write_json("cross_model.json", {{"provenance", ctx.prov}, {"report", rep}});
  json table = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json r = rows[i];
    r["status"] = obsv::to_string(rep.verdicts[i].status);
    table.push_back(r);
  }
  out.write_text("cross_model.csv", obsv::to_csv({"model", "family", "layers", "heads", "hidden", "head_dim", "params",
                                                  "pcorr", "pcorr_std", "oc_resid", "status"},
                                                 table));
  obsv::PlotSpec plot;
  plot.title = "partial Spearman by model";
  plot.x_label = "model index";
  plot.y_label = "partial Spearman";
  obsv::PlotSeries s{"pcorr", {}, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s.x.push_back(static_cast<double>(i));
    s.y.push_back(rows[i].pcorr);
  }
  plot.series = {s};
  plot.hlines = {{"collapse floor", collapse}, {"healthy floor", healthy}};
  out.write_text("cross_model.svg", obsv::render_svg(plot));
}

json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw obsv::ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    json j = json::parse(buf.str());
    if (!j.is_object()) throw obsv::ConfigError("config must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw obsv::ConfigError("config " + path.string() + ": " + e.what());
  }
}

void print_diagnostic(const std::string& kind, const std::string& message) {
  std::cerr << json{{"status", "error"}, {"error_kind", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"obsv: observability audits for frozen activations"};
  app.require_subcommand(1);
  Options opt;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"audit", "metrics for one model layer"},
      {"sweep", "layer profile and collapse verdict"},
      {"shuffle", "shuffled-label null for the observer"},
      {"permtest", "exact partition test over configurations"},
      {"flag", "token and question level exclusive catch"},
      {"trajectory", "checkpoint trajectory"},
      {"synth", "generate synthetic oracle shards"},
      {"report", "merge sweep cells into a cross-model table"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "JSON config file")->required();
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed-override", opt.seed_override, "replace configured seeds");
    sub->add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->callback([&opt, n = name] { opt.command = n; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : obsv::exit_code(obsv::ErrorKind::kConfig);
  }

  std::optional<obsv::OutputDir> out;
  try {
    Context ctx;
    ctx.opt = opt;
    ctx.cfg = read_config(opt.config);
    ctx.base = fs::absolute(opt.config).parent_path();
    ctx.prov.command = opt.command;
    ctx.prov.config_digest = obsv::sha256_file(opt.config);
    out.emplace(opt.out);
    if (opt.command == "audit") run_audit(ctx, *out);
    else if (opt.command == "sweep") run_sweep(ctx, *out);
    else if (opt.command == "shuffle") run_shuffle(ctx, *out);
    else if (opt.command == "permtest") run_permtest(ctx, *out);
    else if (opt.command == "flag") run_flag(ctx, *out);
    else if (opt.command == "trajectory") run_trajectory(ctx, *out);
    else if (opt.command == "synth") run_synth(ctx, *out);
    else if (opt.command == "report") run_report(ctx, *out);
    json run_info = ctx.prov;
    if (opt.seed_override) run_info["seed_override"] = *opt.seed_override;
    out->write_run_info(run_info);
    return 0;
  } catch (const obsv::Error& e) {
    print_diagnostic(obsv::to_string(e.kind()), e.what());
    if (out) out->mark_failed(e);
    return obsv::exit_code(e.kind());
  } catch (const json::exception& e) {
    print_diagnostic("config", e.what());
    if (out) out->mark_failed("config", e.what());
    return obsv::exit_code(obsv::ErrorKind::kConfig);
  } catch (const std::exception& e) {
    print_diagnostic("data", e.what());
    if (out) out->mark_failed("data", e.what());
    return obsv::exit_code(obsv::ErrorKind::kData);
  }
}
