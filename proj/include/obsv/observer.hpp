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

#ifndef OBSV_OBSERVER_HPP_
#define OBSV_OBSERVER_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include <Eigen/Core>

#include "json.hpp"
#include "obsv/error.hpp"
#include "obsv/record_store.hpp"

namespace obsv {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 4096;
  std::size_t epochs = 20;
  double weight_decay = 1e-4;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  }

  // Linear observer: Adam lr 1e-3, batch 4096, weight decay 1e-4, 20 epochs.
  static TrainConfig observer_defaults() { return {}; }
  // Output-side loss predictor: as above with batch 1024.
  static TrainConfig output_predictor_defaults() {
    TrainConfig c;
    c.batch_size = 1024;
    return c;
  }
  // Matched MLP probe: the observer's settings with 50 epochs.
  static TrainConfig matched_mlp_defaults() {
    TrainConfig c;
    c.epochs = 50;
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
}

// Linear head o(h) = w.h + b over a d-dimensional activation space.
struct LinearObserver {
  Eigen::VectorXd w;
  double b = 0.0;
  std::uint64_t train_seed = 0;
  int layer = -1;
  TrainConfig train_meta;
  std::string kind = "trained";  // trained | random | planted

  Eigen::Index dim() const { return w.size(); }

  double score(std::span<const float> h) const {
    double s = b;
    for (Eigen::Index j = 0; j < w.size(); ++j) s += w[j] * h[static_cast<std::size_t>(j)];
    return s;
  }
};

// Raw logits s_i = w.h_i + b; never squashed.
inline Eigen::VectorXd score_observer(const LinearObserver& obs, const RecordSet& records) {
  if (obs.dim() != static_cast<Eigen::Index>(records.dim())) {
    throw SchemaError("observer has d=" + std::to_string(obs.dim()) +
                      " but records have d=" + std::to_string(records.dim()));
  }
  Eigen::VectorXd out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) out[static_cast<Eigen::Index>(i)] = obs.score(records.row(i));
  return out;
}

}  // namespace obsv

#endif  // OBSV_OBSERVER_HPP_
