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

#include "spalm/transformer.h"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "spalm/binary_io.h"

namespace spalm::model {

namespace {

constexpr std::string_view kCheckpointMagic = "SPLM";

ad::Tensor normal_param(ad::Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = nd(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), true);
}

ad::Tensor filled_param(ad::Shape shape, double value) {
  return ad::Tensor::from(shape, std::vector<double>(ad::numel(shape), value), true);
}

}  // namespace

void ModelConfig::validate() const {
  SPALM_CHECK(num_layers >= 1, "num_layers must be >= 1");
  SPALM_CHECK(d_model >= 1 && num_heads >= 1 && d_model % num_heads == 0,
              "d_model " << d_model << " must be divisible by num_heads " << num_heads);
  SPALM_CHECK(ffn_dim >= 1, "ffn_dim must be >= 1");
  SPALM_CHECK(context_length >= 1, "context_length (N) must be >= 1");
  SPALM_CHECK(vocab_size >= 1, "vocab_size must be >= 1");
  SPALM_CHECK(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
  SPALM_CHECK(init_std > 0.0, "init_std must be positive");
}

void ModelConfig::write(std::ostream& os) const {
  for (std::uint32_t v : {num_layers, d_model, num_heads, ffn_dim, context_length,
                          cache_length, eval_cache_length, vocab_size, neighbor_count})
    io::write_u32(os, v);
  io::write_u8(os, gate_per_dimension ? 1 : 0);
  io::write_f64(os, dropout);
  io::write_f64(os, init_std);
}

ModelConfig ModelConfig::read(std::istream& is) {
  ModelConfig c;
  c.num_layers = io::read_u32(is, "config.num_layers");
  c.d_model = io::read_u32(is, "config.d_model");
  c.num_heads = io::read_u32(is, "config.num_heads");
  c.ffn_dim = io::read_u32(is, "config.ffn_dim");
  c.context_length = io::read_u32(is, "config.context_length");
  c.cache_length = io::read_u32(is, "config.cache_length");
  c.eval_cache_length = io::read_u32(is, "config.eval_cache_length");
  c.vocab_size = io::read_u32(is, "config.vocab_size");
  c.neighbor_count = io::read_u32(is, "config.neighbor_count");
  c.gate_per_dimension = io::read_u8(is, "config.gate_per_dimension") != 0;
  c.dropout = io::read_f64(is, "config.dropout");
  c.init_std = io::read_f64(is, "config.init_std");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

XLCache::XLCache(std::size_t num_layers, std::size_t lanes, std::size_t d_model,
                 std::size_t capacity)
    : layers_(num_layers), lanes_(lanes), d_model_(d_model), capacity_(capacity) {
  SPALM_CHECK(lanes >= 1, "cache needs at least one lane");
}

void XLCache::reset() {
  for (auto& l : layers_) l = ad::Tensor();
  length_ = 0;
  oldest_position_ = 0;
}

void XLCache::append(std::span<const ad::Tensor> layer_states, std::size_t segment_len) {
  SPALM_CHECK(layer_states.size() == layers_.size(),
              "cache: " << layer_states.size() << " layer states for " << layers_.size()
                        << " layers");
  const std::size_t keep = std::min(capacity_, length_ + segment_len);
  const std::size_t total = length_ + segment_len;
  const std::size_t drop = total - keep;
  for (std::size_t r = 0; r < layers_.size(); ++r) {
    const auto& st = layer_states[r];
    SPALM_CHECK(st.rows() == lanes_ * segment_len && st.cols() == d_model_,
                "cache: layer " << r << " state shape " << ad::shape_string(st.shape()));
    std::vector<double> merged(lanes_ * keep * d_model_);
    const double* old = layers_[r].defined() ? layers_[r].data().data() : nullptr;
    for (std::size_t b = 0; b < lanes_; ++b) {
      for (std::size_t i = drop; i < total; ++i) {
        const double* src = i < length_ ? old + (b * length_ + i) * d_model_
                                        : st.data().data() + (b * segment_len + i - length_) * d_model_;
        std::copy_n(src, d_model_, merged.data() + (b * keep + i - drop) * d_model_);
      }
    }
    if (keep == 0) {
      layers_[r] = ad::Tensor();
    } else {
      layers_[r] = ad::stop_gradient(ad::Tensor::from({lanes_ * keep, d_model_}, std::move(merged)));
    }
  }
  oldest_position_ += drop;
  length_ = keep;
}

void XLCache::write(std::ostream& os) const {
  io::write_u64(os, layers_.size());
  io::write_u64(os, lanes_);
  io::write_u64(os, d_model_);
  io::write_u64(os, capacity_);
  io::write_u64(os, length_);
  io::write_u64(os, oldest_position_);
  for (const auto& l : layers_) {
    if (length_ == 0) {
      io::write_f64_vector(os, {});
    } else {
      io::write_f64_vector(os, l.data());
    }
  }
}

XLCache XLCache::read(std::istream& is) {
  const auto layers = io::read_u64(is, "cache.layers");
  const auto lanes = io::read_u64(is, "cache.lanes");
  const auto d = io::read_u64(is, "cache.d_model");
  const auto cap = io::read_u64(is, "cache.capacity");
  XLCache c(layers, lanes, d, cap);
  c.length_ = io::read_u64(is, "cache.length");
  c.oldest_position_ = io::read_u64(is, "cache.oldest_position");
  for (auto& l : c.layers_) {
    auto v = io::read_f64_vector(is, "cache.states");
    SPALM_CHECK(v.size() == lanes * c.length_ * d, "cache: state size mismatch");
    if (c.length_) l = ad::stop_gradient(ad::Tensor::from({lanes * c.length_, d}, std::move(v)));
  }
  return c;
}

// ---------------------------------------------------------------------------

ad::Tensor relative_position_table(std::size_t length, std::size_t d_model) {
  std::vector<double> v(length * d_model);
  const std::size_t half = d_model / 2;
  for (std::size_t dist = 0; dist < length; ++dist) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq =
          1.0 / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      const double a = static_cast<double>(dist) * inv_freq;
      v[dist * d_model + i] = std::sin(a);
      v[dist * d_model + half + i] = std::cos(a);
    }
    if (d_model % 2) v[dist * d_model + d_model - 1] = 0.0;
  }
  return ad::Tensor::from({length, d_model}, std::move(v));
}

LanguageModel::LanguageModel(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  init_parameters(rng);
}

void LanguageModel::init_parameters(Rng& rng) {
  const std::size_t d = config_.d_model, f = config_.ffn_dim, v = config_.vocab_size;
  const double sd = config_.init_std;
  embedding_ = normal_param({v, d}, sd, rng);
  layers_.clear();
  for (std::uint32_t r = 0; r < config_.num_layers; ++r) {
    LayerParams p;
    p.ln1_gain = filled_param({d}, 1.0);
    p.ln1_bias = filled_param({d}, 0.0);
    p.w_query = normal_param({d, d}, sd, rng);
    p.w_key = normal_param({d, d}, sd, rng);
    p.w_value = normal_param({d, d}, sd, rng);
    p.w_position = normal_param({d, d}, sd, rng);
    p.content_bias = filled_param({d}, 0.0);
    p.position_bias = filled_param({d}, 0.0);
    p.w_output = normal_param({d, d}, sd, rng);
    p.ln2_gain = filled_param({d}, 1.0);
    p.ln2_bias = filled_param({d}, 0.0);
    p.ffn_w1 = normal_param({d, f}, sd, rng);
    p.ffn_b1 = filled_param({f}, 0.0);
    p.ffn_w2 = normal_param({f, d}, sd, rng);
    p.ffn_b2 = filled_param({d}, 0.0);
    layers_.push_back(std::move(p));
  }
  final_gain_ = filled_param({d}, 1.0);
  final_bias_ = filled_param({d}, 0.0);
  if (config_.uses_memory())
    gate_w_ = filled_param({d, config_.gate_per_dimension ? d : std::size_t{1}}, 0.0);
  else
    gate_w_ = ad::Tensor();
}

void LanguageModel::set_neighbor_count(std::uint32_t k) {
  SPALM_CHECK(config_.uses_memory() && k > 0,
              "neighbor count can only be changed on a memory model, to a value > 0");
  config_.neighbor_count = k;
}

std::vector<ad::Tensor> LanguageModel::parameters() const {
  std::vector<ad::Tensor> out{embedding_};
  for (const auto& p : layers_) {
    for (const auto* t : {&p.ln1_gain, &p.ln1_bias, &p.w_query, &p.w_key, &p.w_value,
                          &p.w_position, &p.content_bias, &p.position_bias, &p.w_output,
                          &p.ln2_gain, &p.ln2_bias, &p.ffn_w1, &p.ffn_b1, &p.ffn_w2,
                          &p.ffn_b2})
      out.push_back(*t);
  }
  out.push_back(final_gain_);
  out.push_back(final_bias_);
  if (gate_w_.defined()) out.push_back(gate_w_);
  return out;
}

std::vector<std::string> LanguageModel::parameter_names() const {
  std::vector<std::string> out{"embedding"};
  for (std::size_t r = 0; r < layers_.size(); ++r) {
    const std::string pre = "layer" + std::to_string(r) + ".";
    for (const char* n : {"ln1.gain", "ln1.bias", "attn.w_query", "attn.w_key", "attn.w_value",
                          "attn.w_position", "attn.content_bias", "attn.position_bias",
                          "attn.w_output", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1",
                          "ffn.w2", "ffn.b2"})
      out.push_back(pre + n);
  }
  out.push_back("final_ln.gain");
  out.push_back("final_ln.bias");
  if (gate_w_.defined()) out.push_back("gate.w");
  return out;
}

std::size_t LanguageModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

ad::Tensor LanguageModel::embed(std::span<const std::uint32_t> ids) const {
  return ad::embedding(embedding_, ids, std::sqrt(static_cast<double>(config_.d_model)));
}

ad::Tensor LanguageModel::layer_forward(std::size_t r, const ad::Tensor& x,
                                        const ad::Tensor& memory, std::size_t lanes,
                                        bool training, Rng& rng,
                                        std::vector<double>* attention_out) const {
  SPALM_CHECK(r < layers_.size(), "layer index " << r << " out of range");
  const auto& p = layers_[r];
  const std::size_t d = config_.d_model;
  SPALM_CHECK(x.rank() == 2 && x.cols() == d,
              "layer input must be [rows, " << d << "], got " << ad::shape_string(x.shape()));
  SPALM_CHECK(lanes >= 1 && x.rows() % lanes == 0, "layer input rows not divisible by lanes");
  const std::size_t n = x.rows() / lanes;
  std::size_t m = 0;
  if (memory.defined() && memory.size() > 0) {
    SPALM_CHECK(memory.rank() == 2 && memory.cols() == d && memory.rows() % lanes == 0,
                "memory must be [lanes*m, " << d << "], got " << ad::shape_string(memory.shape()));
    m = memory.rows() / lanes;
  }
  const std::size_t l = m + n;

  ad::Tensor xn = ad::layer_norm(x, p.ln1_gain, p.ln1_bias);
  ad::Tensor ctx = xn;
  if (m) ctx = ad::prepend_memory(ad::layer_norm(memory, p.ln1_gain, p.ln1_bias), xn, lanes);
  ad::Tensor q = ad::matmul(xn, p.w_query);
  ad::Tensor k = ad::matmul(ctx, p.w_key);
  ad::Tensor v = ad::matmul(ctx, p.w_value);
  ad::Tensor pos = ad::matmul(relative_position_table(l, d), p.w_position);
  ad::Tensor att = ad::rel_attention(q, k, v, pos, p.content_bias, p.position_bias,
                                     {lanes, n, l, config_.num_heads}, attention_out);
  ad::Tensor out = ad::dropout(ad::matmul(att, p.w_output), config_.dropout, rng, training);
  ad::Tensor x1 = ad::add(x, out);
  ad::Tensor hid = ad::gelu(ad::add_bias(
      ad::matmul(ad::layer_norm(x1, p.ln2_gain, p.ln2_bias), p.ffn_w1), p.ffn_b1));
  ad::Tensor ff = ad::add_bias(ad::matmul(hid, p.ffn_w2), p.ffn_b2);
  return ad::add(x1, ad::dropout(ff, config_.dropout, rng, training));
}

ad::Tensor LanguageModel::lm_logits(const ad::Tensor& z) const {
  return ad::matmul_nt(z, embedding_);
}

XLCache LanguageModel::make_cache(std::size_t lanes, std::size_t capacity) const {
  return XLCache(config_.num_layers, lanes, config_.d_model, capacity);
}

ForwardOutput LanguageModel::forward(const ForwardBatch& batch, XLCache& cache, Rng& rng,
                                     const ForwardOptions& options) const {
  const std::size_t lanes = batch.lanes, n = batch.length, d = config_.d_model;
  SPALM_CHECK(n >= 1, "empty segment");
  SPALM_CHECK(n <= config_.context_length,
              "segment length " << n << " exceeds context length N=" << config_.context_length);
  SPALM_CHECK(batch.tokens.size() == lanes * n,
              "batch has " << batch.tokens.size() << " tokens for " << lanes << "x" << n);
  SPALM_CHECK(cache.lanes() == lanes && cache.num_layers() == config_.num_layers,
              "cache shape (" << cache.lanes() << " lanes, " << cache.num_layers()
                              << " layers) does not match batch");

  ForwardOutput out;
  ad::Tensor x = ad::dropout(embed(batch.tokens), config_.dropout, rng, options.training);
  for (std::size_t r = 0; r < config_.num_layers; ++r) {
    out.layer_inputs.push_back(x);
    x = layer_forward(r, x, cache.layer(r), lanes, options.training, rng);
  }
  out.hidden = ad::layer_norm(x, final_gain_, final_bias_);
  out.combined = out.hidden;

  if (config_.uses_memory()) {
    const std::size_t k = config_.neighbor_count;
    const std::size_t rows = lanes * n;
    SPALM_CHECK(batch.neighbor_ids.size() == rows * k,
                "memory model needs " << rows * k << " neighbor ids, got "
                                      << batch.neighbor_ids.size());
    SPALM_CHECK(batch.neighbor_valid.empty() || batch.neighbor_valid.size() == rows * k,
                "neighbor validity mask size mismatch");
    // Neighbor values enter in the input representation, W[y] * sqrt(d).
    ad::Tensor y = ad::embedding(embedding_, batch.neighbor_ids,
                                 std::sqrt(static_cast<double>(d)));
    ad::Tensor mem = ad::neighbor_attention(
        out.hidden, y, k, batch.neighbor_valid,
        options.collect_neighbor_weights ? &out.neighbor_weights : nullptr);
    const std::size_t gw = config_.gate_per_dimension ? d : 1;
    switch (options.gate) {
      case GateOverride::kLearned:
        out.gate = ad::sigmoid(ad::matmul(out.hidden, gate_w_));
        break;
      case GateOverride::kForceOne:
        out.gate = ad::Tensor::from({rows, gw}, std::vector<double>(rows * gw, 1.0));
        break;
      case GateOverride::kForceZero:
        out.gate = ad::Tensor::from({rows, gw}, std::vector<double>(rows * gw, 0.0));
        break;
    }
    out.combined = ad::gated_mix(out.hidden, mem, out.gate);
  }
  out.logits = lm_logits(out.combined);
  cache.append(out.layer_inputs, n);
  return out;
}

ad::Tensor LanguageModel::encode(std::span<const std::uint32_t> segment, XLCache& cache) const {
  SPALM_CHECK(segment.size() <= config_.context_length,
              "segment length " << segment.size() << " exceeds context length N="
                                << config_.context_length);
  SPALM_CHECK(cache.lanes() == 1, "encode expects a single-lane cache");
  Rng unused(0);
  std::vector<ad::Tensor> inputs;
  ad::Tensor x = embed(segment);
  for (std::size_t r = 0; r < config_.num_layers; ++r) {
    inputs.push_back(x);
    x = layer_forward(r, x, cache.layer(r), 1, false, unused);
  }
  cache.append(inputs, segment.size());
  return ad::layer_norm(x, final_gain_, final_bias_);
}

LanguageModel LanguageModel::clone() const {
  LanguageModel m;
  m.config_ = config_;
  Rng rng(0);
  m.init_parameters(rng);
  m.copy_values_from(*this);
  return m;
}

void LanguageModel::copy_values_from(const LanguageModel& other) {
  SPALM_CHECK(config_.num_layers == other.config_.num_layers &&
                  config_.d_model == other.config_.d_model &&
                  config_.vocab_size == other.config_.vocab_size &&
                  config_.ffn_dim == other.config_.ffn_dim,
              "copy_values_from: incompatible model shapes");
  auto dst = parameters();
  auto src = other.parameters();
  SPALM_CHECK(dst.size() == src.size(), "copy_values_from: parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    SPALM_CHECK(dst[i].shape() == src[i].shape(), "copy_values_from: shape mismatch");
    std::copy(src[i].data().begin(), src[i].data().end(), dst[i].mutable_data().begin());
  }
}

void LanguageModel::write(std::ostream& os) const {
  io::write_magic(os, kCheckpointMagic);
  io::write_u32(os, kCheckpointVersion);
  config_.write(os);
  const auto params = parameters();
  const auto names = parameter_names();
  io::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    io::write_string(os, names[i]);
    const auto& shape = params[i].shape();
    io::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto dim : shape) io::write_u64(os, dim);
    io::write_bytes(os, params[i].data().data(), params[i].size() * sizeof(double));
  }
}

LanguageModel LanguageModel::read(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const auto version = io::read_u32(is, "checkpoint.version");
  SPALM_CHECK(version == kCheckpointVersion,
              "checkpoint version " << version << " unsupported (expected "
                                    << kCheckpointVersion << ")");
  LanguageModel m;
  m.config_ = ModelConfig::read(is);
  Rng rng(0);
  m.init_parameters(rng);
  auto params = m.parameters();
  const auto names = m.parameter_names();
  const auto count = io::read_u32(is, "checkpoint.parameter_count");
  SPALM_CHECK(count == params.size(), "checkpoint has " << count << " parameters, expected "
                                                        << params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = io::read_string(is, "checkpoint.parameter_name");
    SPALM_CHECK(name == names[i], "checkpoint parameter " << i << " is '" << name
                                                          << "', expected '" << names[i] << "'");
    const auto rank = io::read_u32(is, "checkpoint.rank");
    ad::Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(io::read_u64(is, "checkpoint.dims"));
    SPALM_CHECK(shape == params[i].shape(), "checkpoint parameter '" << name << "' has shape "
                                                                     << ad::shape_string(shape));
    io::read_bytes(is, params[i].mutable_data().data(), params[i].size() * sizeof(double),
                   "checkpoint.data");
  }
  return m;
}

void LanguageModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  SPALM_CHECK(os, "cannot write checkpoint " << path);
  write(os);
}

LanguageModel LanguageModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  SPALM_CHECK(is, "cannot open checkpoint " << path);
  return read(is);
}

}  // namespace spalm::model
