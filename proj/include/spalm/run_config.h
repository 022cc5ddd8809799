// Copyright 2026 The SPALM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#ifndef SPALM_RUN_CONFIG_H_
#define SPALM_RUN_CONFIG_H_

#include <span>
#include <string_view>

#include "spalm/config.h"
#include "spalm/corpus.h"
#include "spalm/memory.h"
#include "spalm/pipeline.h"
#include "spalm/synthetic.h"
#include "spalm/transformer.h"

// Settings keys understood by the command-line tools, grouped by prefix:
// model.*, train.*, eval.*, corpus.*, memory.*, synthetic.*. Unset keys
// keep the struct defaults.
namespace spalm::config {

std::span<const std::string_view> known_keys();

// "learned", "one" or "zero".
model::GateOverride gate(const Settings& s, std::string_view key);

model::ModelConfig model_config(const Settings& s, std::size_t vocab_size);
pipeline::TrainOptions train_options(const Settings& s);
pipeline::EvalOptions eval_options(const Settings& s);
synthetic::SyntheticOptions synthetic_options(const Settings& s);
pipeline::NeighborSearchOptions neighbor_options(const Settings& s);
memory::AnnOptions ann_options(const Settings& s);
memory::Metric metric(const Settings& s);
corpus::TokenLevel token_level(const Settings& s);
std::uint64_t min_count(const Settings& s);
std::size_t encode_lanes(const Settings& s);

}  // namespace spalm::config

#endif  // SPALM_RUN_CONFIG_H_
