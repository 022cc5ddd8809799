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

// Minimal reverse-mode automatic differentiation over dense row-major
// float64 tensors. Graphs are built dynamically while ops execute and are
// released by backward().

#ifndef SPALM_AUTODIFF_H_
#define SPALM_AUTODIFF_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spalm/common.h"

namespace spalm::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool stop_gradient = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  // Rank-2 view: rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_stop_gradient() const { return node_->stop_gradient; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span when nothing has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  // Gradient values, with zeros when none was accumulated.
  std::vector<double> grad_or_zero() const;
  void zero_grad() { node_->grad.clear(); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Builds an op result. Records parents and the backward closure only when
  // gradients are enabled and some parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward_fn);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a scalar loss. Accumulates into every requires_grad leaf
// and frees the interior of the graph.
void backward(const Tensor& loss);

// Sg(x): a leaf holding x's values that never requires or accumulates grad.
Tensor stop_gradient(const Tensor& x);

bool grad_enabled();

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Shapes are [rows, cols] unless stated.

Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k] x [k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n,k] x [m,k]^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias: [cols]
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_rows(const Tensor& x);

// Rows of `table` selected by `ids`, multiplied by `factor`.
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids,
                 double factor = 1.0);

// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);
// Dropout with an explicit keep mask (1 = keep); exposed for gradient tests.
Tensor dropout_with_mask(const Tensor& x, std::vector<std::uint8_t> keep,
                         double rate);

// Per lane, stacks memory rows [m,d] on top of current rows [n,d].
// memory: [lanes*m, d]; x: [lanes*n, d]; result: [lanes*(m+n), d].
Tensor prepend_memory(const Tensor& memory, const Tensor& x,
                      std::size_t lanes);

struct RelAttentionShape {
  std::size_t lanes = 1;
  std::size_t query_len = 0;  // n
  std::size_t key_len = 0;    // m + n
  std::size_t heads = 1;
};

// Relative-position multi-head attention with causal masking over a cached
// prefix. For lane b, head h, query i and key j <= m + i:
//   s_ij = ((q_i + u) . k_j + (q_i + w) . p_{m+i-j}) / sqrt(d_head)
// q: [lanes*n, d], k/v: [lanes*L, d], pos: [L, d] indexed by distance,
// u/w: [d] global content and position biases. Returns [lanes*n, d].
// When `probs_out` is non-null the attention rows are copied there as
// [lanes, heads, n, L].
Tensor rel_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& pos, const Tensor& content_bias,
                     const Tensor& position_bias, const RelAttentionShape& shape,
                     std::vector<double>* probs_out = nullptr);

// m_i = sum_k alpha_ik y_ik with alpha_i = softmax_k(y_ik . h_i).
// h: [n,d], y: [n*K, d]. `valid` ([n*K], optional) drops absent neighbors;
// a row with none present yields m_i = 0. `alpha_out`, if given, receives
// [n, K].
Tensor neighbor_attention(const Tensor& h, const Tensor& y,
                          std::size_t neighbors,
                          std::span<const std::uint8_t> valid = {},
                          std::vector<double>* alpha_out = nullptr);

// z = (1 - g) * m + g * h with g either [n,1] (broadcast) or [n,d].
Tensor gated_mix(const Tensor& h, const Tensor& m, const Tensor& g);

// Sum over rows with mask != 0 of -log softmax(logits_i)[target_i].
// `token_nll_out`, if given, receives per-row NLL (0 for masked rows).
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                     std::span<const std::uint8_t> mask,
                     std::vector<double>* token_nll_out = nullptr);

// ---------------------------------------------------------------------------
// Plain (non-graph) numerics shared by the heads.

// Max-subtracted softmax. Throws on non-finite input.
std::vector<double> softmax(std::span<const double> logits);
double sigmoid(double x);

}  // namespace spalm::ad

#endif  // SPALM_AUTODIFF_H_
