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

#ifndef SPALM_SYNTHETIC_H_
#define SPALM_SYNTHETIC_H_

#include <cstdint>
#include <string>
#include <vector>

#include "spalm/common.h"

// Seeded word-level corpus with long-range entity repeats. Documents are
// Markov filler interleaved with entity mentions "title name attr...". The
// entity inventory is shared by all splits, so the attributes of an entity
// met for the first time in a document are only predictable from other
// documents; later mentions in the same document are predictable from
// context.
namespace spalm::synthetic {

struct SyntheticOptions {
  std::size_t train_tokens = 1'000'000;
  std::size_t dev_tokens = 32'000;
  std::size_t test_tokens = 32'000;
  std::size_t filler_words = 200;
  std::size_t filler_successors = 4;
  std::size_t titles = 64;
  std::size_t names = 1024;
  std::size_t attributes = 1024;
  std::size_t attributes_per_entity = 2;
  std::size_t entities = 3000;
  double zipf_exponent = 0.6;
  std::size_t entities_per_document = 4;
  std::size_t mentions_per_document = 12;
  // Mean filler run between mentions; sets the typical repeat distance.
  double filler_mean_length = 16.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Entity {
  std::uint32_t title = 0;
  std::uint32_t name = 0;
  std::vector<std::uint32_t> attributes;
};

struct SyntheticCorpus {
  std::string train, dev, test;  // documents separated by blank lines
  std::vector<Entity> entities;
};

SyntheticCorpus generate(const SyntheticOptions& options);

std::string filler_word(std::size_t i);
std::string title_word(std::size_t i);
std::string name_word(std::size_t i);
std::string attribute_word(std::size_t i);

}  // namespace spalm::synthetic

#endif  // SPALM_SYNTHETIC_H_
