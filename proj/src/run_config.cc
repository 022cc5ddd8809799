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


#include "spalm/run_config.h"

namespace spalm::config {

namespace {

constexpr std::string_view kKeys[] = {
    "model.layers", "model.d_model", "model.heads", "model.ffn_dim", "model.context_length",
    "model.cache_length", "model.eval_cache_length", "model.neighbors",
    "model.gate_per_dimension", "model.dropout", "model.init_std",
    "train.lanes", "train.lr", "train.warmup_steps", "train.max_steps",
    "train.final_lr_fraction", "train.clip_norm", "train.eval_interval", "train.patience",
    "train.seed", "train.beta1", "train.beta2", "train.epsilon", "train.gate",
    "eval.lanes", "eval.cache_length", "eval.tau", "eval.lambda", "eval.k", "eval.gate",
    "eval.max_segments",
    "corpus.level", "corpus.min_count",
    "memory.metric", "memory.encode_lanes", "memory.k", "memory.exclusion", "memory.radius",
    "memory.approximate", "memory.workers", "memory.block", "memory.partitions",
    "memory.probes", "memory.pq_subspaces", "memory.rerank", "memory.kmeans_iterations",
    "memory.training_sample", "memory.seed",
    "synthetic.train_tokens", "synthetic.dev_tokens", "synthetic.test_tokens",
    "synthetic.filler_words", "synthetic.filler_successors", "synthetic.titles",
    "synthetic.names", "synthetic.attributes", "synthetic.attributes_per_entity",
    "synthetic.entities", "synthetic.zipf_exponent", "synthetic.entities_per_document",
    "synthetic.mentions_per_document", "synthetic.filler_mean_length", "synthetic.seed",
};

std::uint32_t u32(const Settings& s, std::string_view key, std::uint32_t fallback) {
  const auto v = s.get_u64(key, fallback);
  SPALM_CHECK(v <= 0xffffffffULL, "setting " << key << " is out of range");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::span<const std::string_view> known_keys() { return kKeys; }

model::GateOverride gate(const Settings& s, std::string_view key) {
  const auto g = s.get_string(key, "learned");
  if (g == "learned") return model::GateOverride::kLearned;
  if (g == "one") return model::GateOverride::kForceOne;
  if (g == "zero") return model::GateOverride::kForceZero;
  throw Error(std::string(key) + " must be learned, one or zero, got '" + g + "'");
}

model::ModelConfig model_config(const Settings& s, std::size_t vocab_size) {
  model::ModelConfig c;
  c.num_layers = u32(s, "model.layers", c.num_layers);
  c.d_model = u32(s, "model.d_model", c.d_model);
  c.num_heads = u32(s, "model.heads", c.num_heads);
  c.ffn_dim = u32(s, "model.ffn_dim", c.ffn_dim);
  c.context_length = u32(s, "model.context_length", c.context_length);
  c.cache_length = u32(s, "model.cache_length", c.cache_length);
  c.eval_cache_length = u32(s, "model.eval_cache_length", c.eval_cache_length);
  c.neighbor_count = u32(s, "model.neighbors", c.neighbor_count);
  c.gate_per_dimension = s.get_bool("model.gate_per_dimension", c.gate_per_dimension);
  c.dropout = s.get_f64("model.dropout", c.dropout);
  c.init_std = s.get_f64("model.init_std", c.init_std);
  c.vocab_size = static_cast<std::uint32_t>(vocab_size);
  c.validate();
  return c;
}

pipeline::TrainOptions train_options(const Settings& s) {
  pipeline::TrainOptions o;
  o.lanes = s.get_u64("train.lanes", o.lanes);
  o.learning_rate = s.get_f64("train.lr", o.learning_rate);
  o.warmup_steps = s.get_u64("train.warmup_steps", o.warmup_steps);
  o.max_steps = s.get_u64("train.max_steps", o.max_steps);
  o.final_lr_fraction = s.get_f64("train.final_lr_fraction", o.final_lr_fraction);
  o.clip_norm = s.get_f64("train.clip_norm", o.clip_norm);
  o.eval_interval = s.get_u64("train.eval_interval", o.eval_interval);
  o.patience = s.get_u64("train.patience", o.patience);
  o.seed = s.get_u64("train.seed", o.seed);
  o.adam.beta1 = s.get_f64("train.beta1", o.adam.beta1);
  o.adam.beta2 = s.get_f64("train.beta2", o.adam.beta2);
  o.adam.epsilon = s.get_f64("train.epsilon", o.adam.epsilon);
  o.gate = gate(s, "train.gate");
  o.validate();
  return o;
}

pipeline::EvalOptions eval_options(const Settings& s) {
  pipeline::EvalOptions o;
  o.lanes = s.get_u64("eval.lanes", o.lanes);
  if (s.has("eval.cache_length")) o.cache_length = s.get_u64("eval.cache_length", 0);
  if (s.has("eval.lambda")) o.lambda = s.get_f64("eval.lambda", 0.0);
  o.tau = s.get_f64("eval.tau", o.tau);
  o.k = s.get_u64("eval.k", o.k);
  o.gate = gate(s, "eval.gate");
  o.max_segments = s.get_u64("eval.max_segments", o.max_segments);
  return o;
}

synthetic::SyntheticOptions synthetic_options(const Settings& s) {
  synthetic::SyntheticOptions o;
  o.train_tokens = s.get_u64("synthetic.train_tokens", o.train_tokens);
  o.dev_tokens = s.get_u64("synthetic.dev_tokens", o.dev_tokens);
  o.test_tokens = s.get_u64("synthetic.test_tokens", o.test_tokens);
  o.filler_words = s.get_u64("synthetic.filler_words", o.filler_words);
  o.filler_successors = s.get_u64("synthetic.filler_successors", o.filler_successors);
  o.titles = s.get_u64("synthetic.titles", o.titles);
  o.names = s.get_u64("synthetic.names", o.names);
  o.attributes = s.get_u64("synthetic.attributes", o.attributes);
  o.attributes_per_entity = s.get_u64("synthetic.attributes_per_entity", o.attributes_per_entity);
  o.entities = s.get_u64("synthetic.entities", o.entities);
  o.zipf_exponent = s.get_f64("synthetic.zipf_exponent", o.zipf_exponent);
  o.entities_per_document = s.get_u64("synthetic.entities_per_document", o.entities_per_document);
  o.mentions_per_document = s.get_u64("synthetic.mentions_per_document", o.mentions_per_document);
  o.filler_mean_length = s.get_f64("synthetic.filler_mean_length", o.filler_mean_length);
  o.seed = s.get_u64("synthetic.seed", o.seed);
  o.validate();
  return o;
}

pipeline::NeighborSearchOptions neighbor_options(const Settings& s) {
  pipeline::NeighborSearchOptions o;
  o.k = s.get_u64("memory.k", o.k);
  o.exclusion = pipeline::parse_exclusion(
      s.get_string("memory.exclusion", pipeline::exclusion_name(o.exclusion)));
  o.radius = s.get_u64("memory.radius", o.radius);
  o.approximate = s.get_bool("memory.approximate", o.approximate);
  o.workers = s.get_u64("memory.workers", o.workers);
  o.block = s.get_u64("memory.block", o.block);
  return o;
}

memory::AnnOptions ann_options(const Settings& s) {
  memory::AnnOptions o;
  o.partitions = s.get_u64("memory.partitions", o.partitions);
  o.probes = s.get_u64("memory.probes", o.probes);
  o.pq_subspaces = s.get_u64("memory.pq_subspaces", o.pq_subspaces);
  o.rerank = s.get_u64("memory.rerank", o.rerank);
  o.kmeans_iterations = s.get_u64("memory.kmeans_iterations", o.kmeans_iterations);
  o.training_sample = s.get_u64("memory.training_sample", o.training_sample);
  o.seed = s.get_u64("memory.seed", o.seed);
  return o;
}

memory::Metric metric(const Settings& s) {
  const auto m = s.get_string("memory.metric", "ip");
  if (m == "ip") return memory::Metric::kInnerProduct;
  if (m == "l2") return memory::Metric::kL2;
  throw Error("memory.metric must be ip or l2, got '" + m + "'");
}

corpus::TokenLevel token_level(const Settings& s) {
  return corpus::parse_level(s.get_string("corpus.level", "word"));
}

std::uint64_t min_count(const Settings& s) { return s.get_u64("corpus.min_count", 1); }

std::size_t encode_lanes(const Settings& s) { return s.get_u64("memory.encode_lanes", 16); }

}  // namespace spalm::config
