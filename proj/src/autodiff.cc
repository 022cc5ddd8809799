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

#include "spalm/autodiff.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>

namespace spalm::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

MatMap as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MatMap(v.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(c));
}

// Parent accessor inside backward closures.
detail::Node& parent(detail::Node& self, std::size_t i) {
  return *self.parents[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  SPALM_CHECK(a.shape() == b.shape(), op << ": shape mismatch "
                                         << shape_string(a.shape()) << " vs "
                                         << shape_string(b.shape()));
}

void check_rank2(const Tensor& a, const char* op) {
  SPALM_CHECK(a.rank() == 2, op << ": expected rank-2 tensor, got "
                                << shape_string(a.shape()));
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(numel(shape), 0.0);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  SPALM_CHECK(values.size() == numel(shape),
              "tensor data length " << values.size() << " does not match shape "
                                    << shape_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.size() <= 1) return 1;
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  return numel(s) / s[0];
}

double Tensor::item() const {
  SPALM_CHECK(size() == 1, "item() on tensor of shape " << shape_string(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad_or_zero() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> value,
                           std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward_fn) {
  Tensor out = from(std::move(shape), std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Tensor& loss) {
  SPALM_CHECK(loss.defined(), "backward on undefined tensor");
  SPALM_CHECK(loss.size() == 1, "backward requires a scalar loss, got shape "
                                    << shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

Tensor stop_gradient(const Tensor& x) {
  Tensor out = Tensor::from(x.shape(), std::vector<double>(x.data().begin(),
                                                           x.data().end()));
  out.node()->stop_gradient = true;
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  SPALM_CHECK(b.rows() == k, "matmul: inner dimension mismatch "
                                 << shape_string(a.shape()) << " x "
                                 << shape_string(b.shape()));
  std::vector<double> out(n * m);
  as_mat(out, n, m).noalias() = as_mat(a.node()->value, n, k) *
                                as_mat(b.node()->value, k, m);
  return Tensor::make_result({n, m}, std::move(out), {a, b},
                             [n, k, m](detail::Node& self) {
                               auto& pa = parent(self, 0);
                               auto& pb = parent(self, 1);
                               auto g = as_mat(self.grad, n, m);
                               if (pa.requires_grad)
                                 as_mat(pa.ensure_grad(), n, k).noalias() +=
                                     g * as_mat(pb.value, k, m).transpose();
                               if (pb.requires_grad)
                                 as_mat(pb.ensure_grad(), k, m).noalias() +=
                                     as_mat(pa.value, n, k).transpose() * g;
                             });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul_nt");
  check_rank2(b, "matmul_nt");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  SPALM_CHECK(b.cols() == k, "matmul_nt: inner dimension mismatch "
                                 << shape_string(a.shape()) << " x "
                                 << shape_string(b.shape()) << "^T");
  std::vector<double> out(n * m);
  as_mat(out, n, m).noalias() =
      as_mat(a.node()->value, n, k) * as_mat(b.node()->value, m, k).transpose();
  return Tensor::make_result({n, m}, std::move(out), {a, b},
                             [n, k, m](detail::Node& self) {
                               auto& pa = parent(self, 0);
                               auto& pb = parent(self, 1);
                               auto g = as_mat(self.grad, n, m);
                               if (pa.requires_grad)
                                 as_mat(pa.ensure_grad(), n, k).noalias() +=
                                     g * as_mat(pb.value, m, k);
                               if (pb.requires_grad)
                                 as_mat(pb.ensure_grad(), m, k).noalias() +=
                                     g.transpose() * as_mat(pa.value, n, k);
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               for (std::size_t p = 0; p < 2; ++p) {
                                 auto& pn = parent(self, p);
                                 if (!pn.requires_grad) continue;
                                 auto& g = pn.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i];
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               auto& pa = parent(self, 0);
                               auto& pb = parent(self, 1);
                               if (pa.requires_grad) {
                                 auto& g = pa.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] -= self.grad[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               auto& pa = parent(self, 0);
                               auto& pb = parent(self, 1);
                               if (pa.requires_grad) {
                                 auto& g = pa.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pb.value[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pa.value[i];
                               }
                             });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.rows(), m = x.cols();
  SPALM_CHECK(bias.size() == m, "add_bias: bias length " << bias.size()
                                                         << " vs cols " << m);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bias.at(c);
  return Tensor::make_result(x.shape(), std::move(out), {x, bias},
                             [n, m](detail::Node& self) {
                               auto& px = parent(self, 0);
                               auto& pb = parent(self, 1);
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t c = 0; c < m; ++c)
                                     g[c] += self.grad[r * m + c];
                               }
                             });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [factor](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += self.grad[i] * factor;
                             });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  SPALM_CHECK(x.size() > 0, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  SPALM_CHECK(gain.size() == d && bias.size() == d,
              "layer_norm: parameter length mismatch (" << gain.size() << ", "
                                                        << bias.size() << ") vs "
                                                        << d);
  std::vector<double> out(n * d);
  // Normalized activations and inverse std are kept for the backward pass.
  std::vector<double> xhat(n * d);
  std::vector<double> inv_std(n);
  const double* xv = x.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gain.at(c) + bias.at(c);
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& pg = parent(self, 1);
        auto& pb = parent(self, 2);
        const double* gy = self.grad.data();
        if (pg.requires_grad) {
          auto& g = pg.ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c] * xhat[r * d + c];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c];
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = gy[r * d + c] * pg.value[c];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = gy[r * d + c] * pg.value[c];
              g[r * d + c] +=
                  inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto xv = x.data();
  const auto n = static_cast<Eigen::Index>(xv.size());
  // Owned (aligned) arrays: on unaligned maps Eigen peels a prefix through
  // scalar exp, which rounds differently from the packet path.
  const Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(xv.data(), n);
  // tanh(u) = 1 - 2 / (exp(2u) + 1); Eigen vectorizes exp but not tanh.
  const Eigen::ArrayXd t = 1.0 - 2.0 / ((2.0 * kC * (v + kA * v.cube())).min(40.0).exp() + 1.0);
  const Eigen::ArrayXd o = 0.5 * v * (1.0 + t);
  std::vector<double> out(o.begin(), o.end()), th(t.begin(), t.end());
  return Tensor::make_result(
      x.shape(), std::move(out), {x}, [th = std::move(th)](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& g = px.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = px.value[i];
          const double t = th[i];
          const double du = kC * (1.0 + 3.0 * kA * v * v);
          g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
      });
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(x.at(i));
  return Tensor::make_result(x.shape(), out, {x},
                             [out](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += self.grad[i] * out[i] * (1.0 - out[i]);
                             });
}

std::vector<double> softmax(std::span<const double> logits) {
  SPALM_CHECK(!logits.empty(), "softmax of empty vector");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    SPALM_CHECK(std::isfinite(v), "softmax: non-finite logit (corrupted activations)");
    mx = std::max(mx, v);
  }
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  for (std::size_t r = 0; r < n; ++r) {
    auto p = softmax(x.data().subspan(r * m, m));
    std::copy(p.begin(), p.end(), out.begin() + r * m);
  }
  return Tensor::make_result(x.shape(), out, {x}, [n, m, out](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += self.grad[r * m + c] * out[r * m + c];
      for (std::size_t c = 0; c < m; ++c)
        g[r * m + c] += out[r * m + c] * (self.grad[r * m + c] - dot);
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids,
                 double factor) {
  check_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols(), n = ids.size();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    SPALM_CHECK(ids[i] < v, "embedding: token id " << ids[i]
                                                   << " out of range for vocab " << v);
    const double* row = table.data().data() + ids[i] * d;
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = row[c] * factor;
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return Tensor::make_result({n, d}, std::move(out), {table},
                             [d, factor, idv = std::move(idv)](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 double* row = g.data() + idv[i] * d;
                                 for (std::size_t c = 0; c < d; ++c)
                                   row[c] += self.grad[i * d + c] * factor;
                               }
                             });
}

Tensor dropout_with_mask(const Tensor& x, std::vector<std::uint8_t> keep,
                         double rate) {
  SPALM_CHECK(keep.size() == x.size(), "dropout: mask length mismatch");
  SPALM_CHECK(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got " << rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? x.at(i) * s : 0.0;
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [s, keep = std::move(keep)](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (keep[i]) g[i] += self.grad[i] * s;
                             });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep_dist(1.0 - rate);
  std::vector<std::uint8_t> keep(x.size());
  for (auto& k : keep) k = keep_dist(rng) ? 1 : 0;
  return dropout_with_mask(x, std::move(keep), rate);
}

Tensor prepend_memory(const Tensor& memory, const Tensor& x, std::size_t lanes) {
  check_rank2(x, "prepend_memory");
  SPALM_CHECK(lanes > 0 && x.rows() % lanes == 0,
              "prepend_memory: rows " << x.rows() << " not divisible by lanes " << lanes);
  const std::size_t d = x.cols();
  const std::size_t n = x.rows() / lanes;
  std::size_t m = 0;
  if (memory.defined() && memory.size() > 0) {
    SPALM_CHECK(memory.cols() == d, "prepend_memory: memory width " << memory.cols()
                                                                    << " vs " << d);
    SPALM_CHECK(memory.rows() % lanes == 0, "prepend_memory: memory rows not divisible by lanes");
    m = memory.rows() / lanes;
  }
  const std::size_t l = m + n;
  std::vector<double> out(lanes * l * d);
  for (std::size_t b = 0; b < lanes; ++b) {
    if (m) std::copy_n(memory.data().data() + b * m * d, m * d, out.data() + b * l * d);
    std::copy_n(x.data().data() + b * n * d, n * d, out.data() + (b * l + m) * d);
  }
  std::vector<Tensor> parents{x};
  if (m) parents.push_back(memory);
  return Tensor::make_result({lanes * l, d}, std::move(out), parents,
                             [lanes, m, n, l, d](detail::Node& self) {
                               auto& px = parent(self, 0);
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t b = 0; b < lanes; ++b)
                                   for (std::size_t i = 0; i < n * d; ++i)
                                     g[b * n * d + i] += self.grad[(b * l + m) * d + i];
                               }
                               if (m && self.parents.size() > 1) {
                                 auto& pm = parent(self, 1);
                                 if (!pm.requires_grad) return;
                                 auto& g = pm.ensure_grad();
                                 for (std::size_t b = 0; b < lanes; ++b)
                                   for (std::size_t i = 0; i < m * d; ++i)
                                     g[b * m * d + i] += self.grad[b * l * d + i];
                               }
                             });
}

Tensor rel_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& pos, const Tensor& content_bias,
                     const Tensor& position_bias, const RelAttentionShape& shape,
                     std::vector<double>* probs_out) {
  const std::size_t lanes = shape.lanes, n = shape.query_len, l = shape.key_len,
                    heads = shape.heads;
  SPALM_CHECK(l >= n, "rel_attention: key length " << l << " < query length " << n);
  const std::size_t m = l - n;
  const std::size_t d = q.cols();
  SPALM_CHECK(heads > 0 && d % heads == 0,
              "rel_attention: width " << d << " not divisible by heads " << heads);
  SPALM_CHECK(q.rows() == lanes * n, "rel_attention: query rows " << q.rows());
  SPALM_CHECK(k.rows() == lanes * l && k.cols() == d, "rel_attention: key shape "
                                                          << shape_string(k.shape()));
  SPALM_CHECK(v.rows() == lanes * l && v.cols() == d, "rel_attention: value shape "
                                                          << shape_string(v.shape()));
  SPALM_CHECK(pos.rows() >= l && pos.cols() == d, "rel_attention: position table "
                                                      << shape_string(pos.shape()));
  SPALM_CHECK(content_bias.size() == d && position_bias.size() == d,
              "rel_attention: bias length mismatch");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // Strided per-head views into [rows, d] buffers.
  using Stride = Eigen::OuterStride<>;
  using HeadMap = Eigen::Map<const RowMat, 0, Stride>;
  auto head_view = [d, dh](const double* base, std::size_t rows, std::size_t h) {
    return HeadMap(base + h * dh, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(d)));
  };

  std::vector<double> out(lanes * n * d, 0.0);
  std::vector<double> probs(lanes * heads * n * l, 0.0);
  RowMat qu(n, dh), qw(n, dh), ac(n, l), bd(n, l);
  Eigen::ArrayXd erow(static_cast<Eigen::Index>(l));
  for (std::size_t b = 0; b < lanes; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = head_view(q.data().data() + b * n * d, n, h);
      auto kh = head_view(k.data().data() + b * l * d, l, h);
      auto vh = head_view(v.data().data() + b * l * d, l, h);
      auto ph = head_view(pos.data().data(), l, h);
      ConstVecMap u(content_bias.data().data() + h * dh, dh);
      ConstVecMap w(position_bias.data().data() + h * dh, dh);
      qu = qh.rowwise() + u.transpose();
      qw = qh.rowwise() + w.transpose();
      ac.noalias() = qu * kh.transpose();
      bd.noalias() = qw * ph.transpose();
      double* pr = probs.data() + ((b * heads + h) * n) * l;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t last = m + i;  // inclusive
        double mx = -std::numeric_limits<double>::infinity();
        double* row = pr + i * l;
        for (std::size_t j = 0; j <= last; ++j) {
          row[j] = (ac(i, j) + bd(i, last - j)) * sc;
          mx = std::max(mx, row[j]);
        }
        Eigen::Map<Eigen::ArrayXd> ra(row, static_cast<Eigen::Index>(last + 1));
        auto e = erow.head(ra.size());  // aligned copy, see gelu
        e = (ra - mx).max(-700.0).exp();  // stay clear of denormals
        double total = 0.0;
        for (Eigen::Index j = 0; j < e.size(); ++j) total += e[j];
        ra = e / total;
      }
      Eigen::Map<RowMat, 0, Stride> oh(out.data() + b * n * d + h * dh,
                                       static_cast<Eigen::Index>(n),
                                       static_cast<Eigen::Index>(dh),
                                       Stride(static_cast<Eigen::Index>(d)));
      oh.noalias() = ConstMatMap(pr, n, l) * vh;
    }
  }
  if (probs_out) *probs_out = probs;

  return Tensor::make_result(
      {lanes * n, d}, std::move(out), {q, k, v, pos, content_bias, position_bias},
      [=, probs = std::move(probs)](detail::Node& self) {
        auto& pq = parent(self, 0);
        auto& pk = parent(self, 1);
        auto& pv = parent(self, 2);
        auto& pp = parent(self, 3);
        auto& pu = parent(self, 4);
        auto& pw = parent(self, 5);
        using MutHeadMap = Eigen::Map<RowMat, 0, Stride>;
        auto mut_view = [d, dh](double* base, std::size_t rows, std::size_t h) {
          return MutHeadMap(base + h * dh, static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(dh),
                            Stride(static_cast<Eigen::Index>(d)));
        };
        double* dq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        double* dk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        double* dv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        double* dp = pp.requires_grad ? pp.ensure_grad().data() : nullptr;
        double* du = pu.requires_grad ? pu.ensure_grad().data() : nullptr;
        double* dw = pw.requires_grad ? pw.ensure_grad().data() : nullptr;
        RowMat ds(n, l), dshift(n, l), da(n, l), qu2(n, dh), qw2(n, dh);
        RowMat dq_content(n, dh), dq_pos(n, dh);
        for (std::size_t b = 0; b < lanes; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            auto qh = head_view(pq.value.data() + b * n * d, n, h);
            auto kh = head_view(pk.value.data() + b * l * d, l, h);
            auto vh = head_view(pv.value.data() + b * l * d, l, h);
            auto ph = head_view(pp.value.data(), l, h);
            auto goh = head_view(self.grad.data() + b * n * d, n, h);
            ConstMatMap a(probs.data() + ((b * heads + h) * n) * l, n, l);
            ConstVecMap u(pu.value.data() + h * dh, dh);
            ConstVecMap w(pw.value.data() + h * dh, dh);
            // dA = dO V^T ; dV = A^T dO
            da.noalias() = goh * vh.transpose();
            if (dv) mut_view(dv + b * l * d, l, h).noalias() += a.transpose() * goh;
            ds.setZero();
            dshift.setZero();
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t last = m + i;
              double dot = 0.0;
              for (std::size_t j = 0; j <= last; ++j) dot += a(i, j) * da(i, j);
              for (std::size_t j = 0; j <= last; ++j) {
                const double g = a(i, j) * (da(i, j) - dot) * sc;
                ds(i, j) = g;
                dshift(i, last - j) = g;
              }
            }
            dq_content.noalias() = ds * kh;
            dq_pos.noalias() = dshift * ph;
            if (dq) mut_view(dq + b * n * d, n, h) += dq_content + dq_pos;
            // Plain loops: Eigen's vectorized column sums associate
            // differently from its scalar ones, so results would depend on
            // the address of du / dw.
            for (std::size_t c = 0; c < dh; ++c) {
              double su = 0.0, sw = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                su += dq_content(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
                sw += dq_pos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
              }
              if (du) du[h * dh + c] += su;
              if (dw) dw[h * dh + c] += sw;
            }
            if (dk) {
              qu2 = qh.rowwise() + u.transpose();
              mut_view(dk + b * l * d, l, h).noalias() += ds.transpose() * qu2;
            }
            if (dp) {
              qw2 = qh.rowwise() + w.transpose();
              mut_view(dp, l, h).noalias() += dshift.transpose() * qw2;
            }
          }
        }
      });
}

Tensor neighbor_attention(const Tensor& h, const Tensor& y, std::size_t neighbors,
                          std::span<const std::uint8_t> valid,
                          std::vector<double>* alpha_out) {
  check_rank2(h, "neighbor_attention");
  const std::size_t n = h.rows(), d = h.cols(), kk = neighbors;
  SPALM_CHECK(kk > 0, "neighbor_attention: need at least one neighbor");
  SPALM_CHECK(y.rows() == n * kk && y.cols() == d,
              "neighbor_attention: neighbor embeddings " << shape_string(y.shape())
                                                         << " vs " << n << "x" << kk
                                                         << "x" << d);
  SPALM_CHECK(valid.empty() || valid.size() == n * kk,
              "neighbor_attention: validity mask has " << valid.size() << " entries");
  std::vector<double> out(n * d, 0.0), alpha(n * kk, 0.0);
  const double* hv = h.data().data();
  const double* yv = y.data().data();
  std::vector<double> scores;
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < n; ++i) {
    scores.clear();
    slots.clear();
    for (std::size_t j = 0; j < kk; ++j) {
      if (!valid.empty() && !valid[i * kk + j]) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += yv[(i * kk + j) * d + c] * hv[i * d + c];
      scores.push_back(s);
      slots.push_back(j);
    }
    if (slots.empty()) continue;
    auto p = softmax(scores);
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const std::size_t j = slots[s];
      alpha[i * kk + j] = p[s];
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += p[s] * yv[(i * kk + j) * d + c];
    }
  }
  if (alpha_out) *alpha_out = alpha;
  return Tensor::make_result(
      {n, d}, std::move(out), {h, y},
      [n, d, kk, alpha = std::move(alpha)](detail::Node& self) {
        auto& ph = parent(self, 0);
        auto& py = parent(self, 1);
        double* dh = ph.requires_grad ? ph.ensure_grad().data() : nullptr;
        double* dy = py.requires_grad ? py.ensure_grad().data() : nullptr;
        std::vector<double> ds(kk);
        for (std::size_t i = 0; i < n; ++i) {
          const double* go = self.grad.data() + i * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < kk; ++j) {
            const double* yr = py.value.data() + (i * kk + j) * d;
            double da = 0.0;
            for (std::size_t c = 0; c < d; ++c) da += go[c] * yr[c];
            ds[j] = da;
            dot += alpha[i * kk + j] * da;
          }
          for (std::size_t j = 0; j < kk; ++j) {
            const double a = alpha[i * kk + j];
            if (a == 0.0) continue;
            const double g = a * (ds[j] - dot);
            const double* yr = py.value.data() + (i * kk + j) * d;
            if (dh)
              for (std::size_t c = 0; c < d; ++c) dh[i * d + c] += g * yr[c];
            if (dy) {
              double* dyr = dy + (i * kk + j) * d;
              const double* hr = ph.value.data() + i * d;
              for (std::size_t c = 0; c < d; ++c) dyr[c] += a * go[c] + g * hr[c];
            }
          }
        }
      });
}

Tensor gated_mix(const Tensor& h, const Tensor& m, const Tensor& g) {
  check_same_shape(h, m, "gated_mix");
  const std::size_t n = h.rows(), d = h.cols();
  const bool per_dim = g.size() == n * d && d != 1;
  SPALM_CHECK(per_dim || g.size() == n,
              "gated_mix: gate shape " << shape_string(g.shape()) << " vs " << n << "x" << d);
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      const double gv = per_dim ? g.at(i * d + c) : g.at(i);
      out[i * d + c] = (1.0 - gv) * m.at(i * d + c) + gv * h.at(i * d + c);
    }
  return Tensor::make_result(
      h.shape(), std::move(out), {h, m, g}, [n, d, per_dim](detail::Node& self) {
        auto& ph = parent(self, 0);
        auto& pm = parent(self, 1);
        auto& pg = parent(self, 2);
        double* dh = ph.requires_grad ? ph.ensure_grad().data() : nullptr;
        double* dm = pm.requires_grad ? pm.ensure_grad().data() : nullptr;
        double* dg = pg.requires_grad ? pg.ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t idx = i * d + c;
            const double gv = per_dim ? pg.value[idx] : pg.value[i];
            const double go = self.grad[idx];
            if (dh) dh[idx] += go * gv;
            if (dm) dm[idx] += go * (1.0 - gv);
            if (dg) dg[per_dim ? idx : i] += go * (ph.value[idx] - pm.value[idx]);
          }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                     std::span<const std::uint8_t> mask,
                     std::vector<double>* token_nll_out) {
  check_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), v = logits.cols();
  SPALM_CHECK(targets.size() == n && mask.size() == n,
              "cross_entropy: " << targets.size() << " targets / " << mask.size()
                                << " mask entries for " << n << " rows");
  std::vector<double> probs(n * v, 0.0);
  std::vector<double> nll(n, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    SPALM_CHECK(targets[r] < v, "cross_entropy: target " << targets[r]
                                                         << " out of range " << v);
    const double* row = logits.data().data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v; ++c) {
      SPALM_CHECK(std::isfinite(row[c]), "cross_entropy: non-finite logit");
      mx = std::max(mx, row[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(row[c] - mx);
      z += probs[r * v + c];
    }
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    nll[r] = -(row[targets[r]] - mx - std::log(z));
    total += nll[r];
  }
  if (token_nll_out) *token_nll_out = nll;
  std::vector<std::uint32_t> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return Tensor::make_result(
      {1}, {total}, {logits},
      [n, v, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv)](
          detail::Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        const double go = self.grad[0];
        for (std::size_t r = 0; r < n; ++r) {
          if (!mv[r]) continue;
          for (std::size_t c = 0; c < v; ++c) g[r * v + c] += go * probs[r * v + c];
          g[r * v + tv[r]] -= go;
        }
      });
}

}  // namespace spalm::ad
