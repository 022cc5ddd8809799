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

#ifndef SPALM_COMMON_H_
#define SPALM_COMMON_H_

#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace spalm {

// All recoverable failures in the library surface as spalm::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The single random engine type threaded through initialization, dropout,
// sampling and synthetic data generation.
using Rng = std::mt19937_64;

namespace detail {
[[noreturn]] inline void throw_check_failure(const char* cond, const char* file,
                                             int line, const std::string& msg) {
  std::ostringstream os;
  os << msg << " [" << cond << " at " << file << ":" << line << "]";
  throw Error(os.str());
}
}  // namespace detail

}  // namespace spalm

#define SPALM_CHECK(cond, msg)                                              \
  do {                                                                      \
    if (!(cond)) {                                                          \
      std::ostringstream spalm_check_os_;                                   \
      spalm_check_os_ << msg;                                               \
      ::spalm::detail::throw_check_failure(#cond, __FILE__, __LINE__,       \
                                           spalm_check_os_.str());          \
    }                                                                       \
  } while (false)

#endif  // SPALM_COMMON_H_
