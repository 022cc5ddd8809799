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

// Decoder-only transformer with relative-position attention over the current
// segment plus a stop-gradient cache of earlier hidden states, tied input and
// output embeddings, and (when neighbor_count > 0) the retrieval gate that
// mixes the final hidden state with attended neighbor embeddings.

#ifndef SPALM_TRANSFORMER_H_
#define SPALM_TRANSFORMER_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "spalm/autodiff.h"
#include "spalm/common.h"

namespace spalm::model {

// Binary layout inside a checkpoint, in order: num_layers, d_model,
// num_heads, ffn_dim, context_length, cache_length, eval_cache_length,
// vocab_size, neighbor_count (all u32), gate_per_dimension (u8), dropout,
// init_std (f64).
struct ModelConfig {
  std::uint32_t num_layers = 4;        // R
  std::uint32_t d_model = 128;         // d
  std::uint32_t num_heads = 4;
  std::uint32_t ffn_dim = 512;
  std::uint32_t context_length = 64;   // N
  std::uint32_t cache_length = 64;     // M during training
  std::uint32_t eval_cache_length = 64;
  std::uint32_t vocab_size = 0;        // V
  std::uint32_t neighbor_count = 0;    // K; 0 means no long-term memory
  bool gate_per_dimension = false;
  double dropout = 0.25;
  double init_std = 0.02;

  void validate() const;
  bool uses_memory() const { return neighbor_count > 0; }

  void write(std::ostream& os) const;
  static ModelConfig read(std::istream& is);
  bool operator==(const ModelConfig&) const = default;
};

// Per-layer stash of previous segment hidden states. Entry r holds the
// inputs to layer r as a stop-gradient [lanes * length, d] tensor.
class XLCache {
 public:
  XLCache() = default;
  XLCache(std::size_t num_layers, std::size_t lanes, std::size_t d_model,
          std::size_t capacity);

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t lanes() const { return lanes_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t length() const { return length_; }
  // Stream index (within each lane) of the oldest cached state.
  std::uint64_t oldest_position() const { return oldest_position_; }
  const ad::Tensor& layer(std::size_t r) const { return layers_[r]; }

  // Appends this segment's per-layer states ([lanes * n, d] each) and evicts
  // oldest-first down to capacity. Stored values are detached.
  void append(std::span<const ad::Tensor> layer_states, std::size_t segment_len);
  void reset();

  void write(std::ostream& os) const;
  static XLCache read(std::istream& is);

 private:
  std::vector<ad::Tensor> layers_;
  std::size_t lanes_ = 1;
  std::size_t d_model_ = 0;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  std::uint64_t oldest_position_ = 0;
};

enum class GateOverride { kLearned, kForceOne, kForceZero };

struct ForwardOptions {
  bool training = false;
  GateOverride gate = GateOverride::kLearned;
  bool collect_neighbor_weights = false;
};

// One batch of lane segments, row-major [lanes, length].
struct ForwardBatch {
  std::size_t lanes = 1;
  std::size_t length = 0;
  std::span<const std::uint32_t> tokens;
  // [lanes, length, K] neighbor value ids and validity (1 = present). Only
  // read when the model uses memory.
  std::span<const std::uint32_t> neighbor_ids;
  std::span<const std::uint8_t> neighbor_valid;
};

struct ForwardOutput {
  ad::Tensor hidden;    // h^R after the final layer norm, [lanes*n, d]
  ad::Tensor combined;  // z; same tensor as hidden without memory
  ad::Tensor gate;      // [lanes*n, 1] or [lanes*n, d]; undefined without memory
  ad::Tensor logits;    // [lanes*n, V]
  std::vector<double> neighbor_weights;  // [lanes*n, K] when collected
  std::vector<ad::Tensor> layer_inputs;  // H^0..H^{R-1}, for the cache
};

struct LayerParams {
  ad::Tensor ln1_gain, ln1_bias;
  ad::Tensor w_query, w_key, w_value, w_position, w_output;
  ad::Tensor content_bias, position_bias;
  ad::Tensor ln2_gain, ln2_bias;
  ad::Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Sinusoidal embeddings of relative distances 0..length-1, [length, d].
ad::Tensor relative_position_table(std::size_t length, std::size_t d_model);

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  // Changing the neighbor count only affects how many cached neighbors a
  // forward pass reads; it must stay > 0 for memory models.
  void set_neighbor_count(std::uint32_t k);

  // Fixed order: embedding; per layer r: layer{r}.ln1.gain, .ln1.bias,
  // .attn.w_query, .attn.w_key, .attn.w_value, .attn.w_position,
  // .attn.content_bias, .attn.position_bias, .attn.w_output, .ln2.gain,
  // .ln2.bias, .ffn.w1, .ffn.b1, .ffn.w2, .ffn.b2; final_ln.gain,
  // final_ln.bias; gate.w (memory models only).
  std::vector<ad::Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  ad::Tensor& embedding() { return embedding_; }
  const ad::Tensor& embedding() const { return embedding_; }
  ad::Tensor& gate_weight() { return gate_w_; }
  const ad::Tensor& gate_weight() const { return gate_w_; }
  ad::Tensor& final_ln_gain() { return final_gain_; }
  ad::Tensor& final_ln_bias() { return final_bias_; }
  const LayerParams& layer(std::size_t r) const { return layers_[r]; }

  // H^0 = W[ids] * sqrt(d).
  ad::Tensor embed(std::span<const std::uint32_t> ids) const;
  // One pre-norm block: relative attention over [memory; x] then FFN.
  ad::Tensor layer_forward(std::size_t r, const ad::Tensor& x, const ad::Tensor& memory,
                           std::size_t lanes, bool training, Rng& rng,
                           std::vector<double>* attention_out = nullptr) const;
  // logits = z W^T.
  ad::Tensor lm_logits(const ad::Tensor& z) const;

  // Full forward over a batch. Reads `cache` (which must have matching
  // lanes) and appends this batch's layer inputs to it.
  ForwardOutput forward(const ForwardBatch& batch, XLCache& cache, Rng& rng,
                        const ForwardOptions& options = {}) const;

  // Single-stream encoding without retrieval: returns h^R for each token.
  ad::Tensor encode(std::span<const std::uint32_t> segment, XLCache& cache) const;

  XLCache make_cache(std::size_t lanes, std::size_t capacity) const;

  LanguageModel clone() const;
  void copy_values_from(const LanguageModel& other);

  void save(const std::filesystem::path& path) const;
  static LanguageModel load(const std::filesystem::path& path);
  void write(std::ostream& os) const;
  static LanguageModel read(std::istream& is);

 private:
  void init_parameters(Rng& rng);

  ModelConfig config_;
  ad::Tensor embedding_;
  std::vector<LayerParams> layers_;
  ad::Tensor final_gain_, final_bias_;
  ad::Tensor gate_w_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace spalm::model

#endif  // SPALM_TRANSFORMER_H_
