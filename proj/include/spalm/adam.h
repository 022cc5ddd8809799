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

#ifndef SPALM_ADAM_H_
#define SPALM_ADAM_H_

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "spalm/autodiff.h"

namespace spalm::ad {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment estimates, one buffer per parameter, plus the step
// counter used for bias correction.
struct AdamState {
  AdamOptions options;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;

  // Allocates zeroed moments congruent with `params`.
  static AdamState for_params(std::span<const Tensor> params, AdamOptions options);

  void write(std::ostream& os) const;
  static AdamState read(std::istream& is);
};

// One bias-corrected Adam update of `param` from `grad`. `step` is the
// already-incremented 1-based step number.
void adam_update(std::span<double> param, std::span<const double> grad,
                 std::span<double> first_moment, std::span<double> second_moment,
                 std::uint64_t step, const AdamOptions& options,
                 double learning_rate);

// Applies one update to every parameter using its accumulated grad (missing
// grads count as zero) and advances state.step by one. `learning_rate`
// overrides options.learning_rate when positive (for schedules).
void adam_step(std::span<Tensor> params, AdamState& state,
               double learning_rate = -1.0);

// Scales all grads so that their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace spalm::ad

#endif  // SPALM_ADAM_H_
