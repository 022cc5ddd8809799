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

#ifndef SPALM_HEAD_H_
#define SPALM_HEAD_H_

#include <cstdint>
#include <span>
#include <vector>

#include "spalm/common.h"

// Per-token reference implementations of the memory head and the kNN-LM
// mixture. The batched training path lives in LanguageModel::forward.
namespace spalm::head {

// Row-major [vocab, dim] view of the tied embedding matrix.
struct EmbeddingView {
  std::span<const double> data;
  std::size_t vocab = 0;
  std::size_t dim = 0;

  std::span<const double> row(std::uint32_t id) const;
};

struct Aggregation {
  std::vector<double> m;      // dim
  std::vector<double> alpha;  // one weight per neighbor
  bool empty = false;         // no neighbors: m is zero
};

Aggregation aggregate_neighbors(std::span<const double> h, std::span<const std::uint32_t> ids,
                                const EmbeddingView& w);

double gate(std::span<const double> h, std::span<const double> w_g);

std::vector<double> combine(std::span<const double> h, std::span<const double> m, double g);

// softmax(W z)
std::vector<double> spalm_distribution(std::span<const double> z, const EmbeddingView& w);

struct InterpolationConfig {
  double lambda = 0.25;  // weight on the language model
  double tau = 1.0;

  void validate() const;
};

// p(v) proportional to sum_k [y_k = v] exp(score_k / tau).
std::vector<double> knn_distribution(std::span<const std::uint32_t> values,
                                     std::span<const double> scores, std::size_t vocab,
                                     double tau);
// Same quantity for a single token, without materializing the vocabulary.
double knn_probability(std::span<const std::uint32_t> values, std::span<const double> scores,
                       std::uint32_t token, double tau);

std::vector<double> interpolate(std::span<const double> p_lm, std::span<const double> p_knn,
                                double lambda);
double interpolate(double p_lm, double p_knn, double lambda);

inline constexpr double kDefaultLambdaGrid[] = {0.05, 0.1, 0.2, 0.3, 0.4};

}  // namespace spalm::head

#endif  // SPALM_HEAD_H_
