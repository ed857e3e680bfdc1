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

#ifndef OBSV_OBSV_HPP_
#define OBSV_OBSV_HPP_

#include "obsv/controls.hpp"
#include "obsv/error.hpp"
#include "obsv/flagging.hpp"
#include "obsv/linalg.hpp"
#include "obsv/observer.hpp"
#include "obsv/parallel.hpp"
#include "obsv/probes.hpp"
#include "obsv/protocol.hpp"
#include "obsv/rank_metrics.hpp"
#include "obsv/record_store.hpp"
#include "obsv/report.hpp"
#include "obsv/rng.hpp"
#include "obsv/stat_tests.hpp"
#include "obsv/synth_oracle.hpp"

#endif  // OBSV_OBSV_HPP_
