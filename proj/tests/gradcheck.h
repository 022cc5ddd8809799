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


// Test-only central finite-difference oracle. It only perturbs raw input
// values and re-evaluates the forward function, so it shares no code path
// with the analytic backward closures it checks.

#ifndef SPALM_TESTS_GRADCHECK_H_
#define SPALM_TESTS_GRADCHECK_H_

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spalm/autodiff.h"

namespace spalm::testing {

struct GradCheckResult {
  double worst_error = 0.0;  // max |a - n| / (max(|a|,|n|) + floor)
  bool ok = true;
  std::string detail;
};

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng,
                                double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = nd(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Checks d f / d input for every input. f must be deterministic.
inline GradCheckResult grad_check(
    const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& f,
    std::vector<ad::Tensor> inputs, double h = 1e-4, double rel_tol = 1e-3,
    double abs_floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  ad::Tensor loss = f(inputs);
  ad::backward(loss);
  GradCheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t].requires_grad()) continue;
    std::vector<double> analytic = inputs[t].grad_or_zero();
    auto data = inputs[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double fp, fm;
      {
        ad::NoGradGuard ng;
        data[i] = orig + h;
        fp = f(inputs).item();
        data[i] = orig - h;
        fm = f(inputs).item();
        data[i] = orig;
      }
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + abs_floor);
      const bool close = std::abs(a - numeric) <= rel_tol * std::max(std::abs(a), std::abs(numeric)) + abs_floor;
      res.worst_error = std::max(res.worst_error, close ? 0.0 : err);
      if (!close && res.ok) {
        res.ok = false;
        res.detail = "input " + std::to_string(t) + " index " + std::to_string(i) +
                     ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

// Projects an op output to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
inline ad::Tensor weighted_sum(const ad::Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> w(y.size());
  for (double& x : w) x = nd(rng);
  return ad::sum(ad::mul(y, ad::Tensor::from(y.shape(), std::move(w))));
}

}  // namespace spalm::testing

#endif  // SPALM_TESTS_GRADCHECK_H_
