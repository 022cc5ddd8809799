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

#include "spalm/adam.h"

#include <cmath>
#include <istream>
#include <ostream>

#include "spalm/binary_io.h"

namespace spalm::ad {

AdamState AdamState::for_params(std::span<const Tensor> params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.size(), 0.0);
    s.second_moment.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad,
                 std::span<double> first_moment, std::span<double> second_moment,
                 std::uint64_t step, const AdamOptions& options,
                 double learning_rate) {
  SPALM_CHECK(grad.size() == param.size() && first_moment.size() == param.size() &&
                  second_moment.size() == param.size(),
              "adam: shape mismatch (param " << param.size() << ", grad " << grad.size()
                                             << ", moments " << first_moment.size()
                                             << "/" << second_moment.size() << ")");
  SPALM_CHECK(step >= 1, "adam: step must be >= 1");
  const double b1 = options.beta1, b2 = options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    first_moment[i] = b1 * first_moment[i] + (1.0 - b1) * g;
    second_moment[i] = b2 * second_moment[i] + (1.0 - b2) * g * g;
    const double mhat = first_moment[i] / c1;
    const double vhat = second_moment[i] / c2;
    param[i] -= learning_rate * mhat / (std::sqrt(vhat) + options.epsilon);
  }
}

void adam_step(std::span<Tensor> params, AdamState& state, double learning_rate) {
  SPALM_CHECK(params.size() == state.first_moment.size() &&
                  params.size() == state.second_moment.size(),
              "adam: " << params.size() << " params but state holds "
                       << state.first_moment.size() << " moment buffers");
  const double lr = learning_rate > 0 ? learning_rate : state.options.learning_rate;
  const std::uint64_t step = state.step + 1;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    SPALM_CHECK(state.first_moment[i].size() == p.size(),
                "adam: moment buffer " << i << " has " << state.first_moment[i].size()
                                       << " entries, parameter has " << p.size());
    std::span<const double> g = p.grad();
    if (g.empty()) {
      zeros.assign(p.size(), 0.0);
      g = zeros;
    }
    adam_update(p.mutable_data(), g, state.first_moment[i], state.second_moment[i],
                step, state.options, lr);
  }
  state.step = step;
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

void AdamState::write(std::ostream& os) const {
  io::write_f64(os, options.learning_rate);
  io::write_f64(os, options.beta1);
  io::write_f64(os, options.beta2);
  io::write_f64(os, options.epsilon);
  io::write_u64(os, step);
  io::write_u64(os, first_moment.size());
  for (std::size_t i = 0; i < first_moment.size(); ++i) {
    io::write_f64_vector(os, first_moment[i]);
    io::write_f64_vector(os, second_moment[i]);
  }
}

AdamState AdamState::read(std::istream& is) {
  AdamState s;
  s.options.learning_rate = io::read_f64(is, "adam.learning_rate");
  s.options.beta1 = io::read_f64(is, "adam.beta1");
  s.options.beta2 = io::read_f64(is, "adam.beta2");
  s.options.epsilon = io::read_f64(is, "adam.epsilon");
  s.step = io::read_u64(is, "adam.step");
  const std::uint64_t count = io::read_u64(is, "adam.count");
  for (std::uint64_t i = 0; i < count; ++i) {
    s.first_moment.push_back(io::read_f64_vector(is, "adam.first_moment"));
    s.second_moment.push_back(io::read_f64_vector(is, "adam.second_moment"));
  }
  return s;
}

}  // namespace spalm::ad
