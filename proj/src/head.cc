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

#include "spalm/head.h"

#include <cmath>

#include "spalm/autodiff.h"

namespace spalm::head {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_lambda(double lambda) {
  SPALM_CHECK(lambda >= 0.0 && lambda <= 1.0, "lambda " << lambda << " outside [0, 1]");
}

}  // namespace

std::span<const double> EmbeddingView::row(std::uint32_t id) const {
  SPALM_CHECK(id < vocab, "token id " << id << " >= vocabulary size " << vocab);
  return data.subspan(static_cast<std::size_t>(id) * dim, dim);
}

Aggregation aggregate_neighbors(std::span<const double> h, std::span<const std::uint32_t> ids,
                                const EmbeddingView& w) {
  SPALM_CHECK(h.size() == w.dim, "hidden size " << h.size() << " != embedding dim " << w.dim);
  Aggregation out;
  out.m.assign(w.dim, 0.0);
  if (ids.empty()) {
    out.empty = true;
    return out;
  }
  std::vector<double> scores;
  for (auto id : ids) scores.push_back(dot(w.row(id), h));
  out.alpha = ad::softmax(scores);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto y = w.row(ids[k]);
    for (std::size_t c = 0; c < w.dim; ++c) out.m[c] += out.alpha[k] * y[c];
  }
  return out;
}

double gate(std::span<const double> h, std::span<const double> w_g) {
  SPALM_CHECK(h.size() == w_g.size(), "gate weight size " << w_g.size() << " != " << h.size());
  return ad::sigmoid(dot(w_g, h));
}

std::vector<double> combine(std::span<const double> h, std::span<const double> m, double g) {
  SPALM_CHECK(h.size() == m.size(), "combine: h has " << h.size() << " dims, m has " << m.size());
  std::vector<double> z(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) z[i] = (1.0 - g) * m[i] + g * h[i];
  return z;
}

std::vector<double> spalm_distribution(std::span<const double> z, const EmbeddingView& w) {
  SPALM_CHECK(z.size() == w.dim, "z has " << z.size() << " dims, embedding " << w.dim);
  std::vector<double> logits(w.vocab);
  for (std::uint32_t v = 0; v < w.vocab; ++v) logits[v] = dot(w.row(v), z);
  return ad::softmax(logits);
}

void InterpolationConfig::validate() const {
  check_lambda(lambda);
  SPALM_CHECK(tau > 0.0, "tau must be positive, got " << tau);
}

std::vector<double> knn_distribution(std::span<const std::uint32_t> values,
                                     std::span<const double> scores, std::size_t vocab,
                                     double tau) {
  SPALM_CHECK(!values.empty(), "kNN distribution needs at least one neighbor");
  SPALM_CHECK(values.size() == scores.size(), "neighbor values and scores differ in length");
  SPALM_CHECK(tau > 0.0, "tau must be positive");
  std::vector<double> scaled(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) scaled[k] = scores[k] / tau;
  const auto weights = ad::softmax(scaled);
  std::vector<double> p(vocab, 0.0);
  for (std::size_t k = 0; k < values.size(); ++k) {
    SPALM_CHECK(values[k] < vocab, "neighbor value " << values[k] << " >= vocabulary " << vocab);
    p[values[k]] += weights[k];
  }
  return p;
}

double knn_probability(std::span<const std::uint32_t> values, std::span<const double> scores,
                       std::uint32_t token, double tau) {
  SPALM_CHECK(!values.empty(), "kNN distribution needs at least one neighbor");
  SPALM_CHECK(values.size() == scores.size(), "neighbor values and scores differ in length");
  SPALM_CHECK(tau > 0.0, "tau must be positive");
  std::vector<double> scaled(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) scaled[k] = scores[k] / tau;
  const auto weights = ad::softmax(scaled);
  double p = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k)
    if (values[k] == token) p += weights[k];
  return p;
}

std::vector<double> interpolate(std::span<const double> p_lm, std::span<const double> p_knn,
                                double lambda) {
  check_lambda(lambda);
  SPALM_CHECK(p_lm.size() == p_knn.size(), "distributions differ in size");
  std::vector<double> p(p_lm.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = interpolate(p_lm[i], p_knn[i], lambda);
  return p;
}

double interpolate(double p_lm, double p_knn, double lambda) {
  check_lambda(lambda);
  if (lambda == 1.0) return p_lm;
  if (lambda == 0.0) return p_knn;
  return lambda * p_lm + (1.0 - lambda) * p_knn;
}

}  // namespace spalm::head
