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

#include "spalm/synthetic.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

namespace spalm::synthetic {

namespace {

std::string tagged(char tag, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*zu", tag, width, i);
  return buf;
}

class Generator {
 public:
  explicit Generator(const SyntheticOptions& o) : o_(o), rng_(o.seed) {
    // Filler chain: each word has a few successors with decaying weights.
    std::uniform_int_distribution<std::size_t> word(0, o.filler_words - 1);
    for (std::size_t w = 0; w < o.filler_words; ++w) {
      std::vector<std::size_t> next;
      std::vector<double> weight;
      for (std::size_t s = 0; s < o.filler_successors; ++s) {
        next.push_back(word(rng_));
        weight.push_back(1.0 / static_cast<double>(s + 1));
      }
      successors_.push_back(next);
      successor_weights_.emplace_back(weight.begin(), weight.end());
    }
    std::uniform_int_distribution<std::uint32_t> title(0, o.titles - 1), name(0, o.names - 1),
        attr(0, o.attributes - 1);
    std::set<std::pair<std::uint32_t, std::uint32_t>> used;
    while (entities_.size() < o.entities) {
      Entity e;
      e.title = title(rng_);
      e.name = name(rng_);
      if (!used.insert({e.title, e.name}).second) continue;
      for (std::size_t a = 0; a < o.attributes_per_entity; ++a) e.attributes.push_back(attr(rng_));
      entities_.push_back(std::move(e));
    }
    std::vector<double> zipf(o.entities);
    for (std::size_t i = 0; i < o.entities; ++i)
      zipf[i] = std::pow(static_cast<double>(i + 1), -o.zipf_exponent);
    entity_dist_ = std::discrete_distribution<std::size_t>(zipf.begin(), zipf.end());
  }

  std::string split(std::size_t target_tokens) {
    std::string out;
    std::size_t tokens = 0;
    while (tokens < target_tokens) {
      if (!out.empty()) out += "\n\n";
      tokens += document(out);
    }
    out += "\n";
    return out;
  }

  const std::vector<Entity>& entities() const { return entities_; }

 private:
  std::size_t document(std::string& out) {
    std::vector<std::size_t> chosen;
    while (chosen.size() < o_.entities_per_document) {
      const std::size_t e = entity_dist_(rng_);
      if (std::find(chosen.begin(), chosen.end(), e) == chosen.end()) chosen.push_back(e);
    }
    std::vector<std::size_t> mentions = chosen;
    std::uniform_int_distribution<std::size_t> pick(0, chosen.size() - 1);
    while (mentions.size() < o_.mentions_per_document) mentions.push_back(chosen[pick(rng_)]);
    std::shuffle(mentions.begin(), mentions.end(), rng_);

    std::size_t count = 0;
    bool first = true;
    auto emit = [&](const std::string& w) {
      if (!first) out += ' ';
      out += w;
      first = false;
      ++count;
    };
    for (std::size_t e : mentions) {
      filler(emit);
      const auto& ent = entities_[e];
      emit(title_word(ent.title));
      emit(name_word(ent.name));
      for (auto a : ent.attributes) emit(attribute_word(a));
    }
    filler(emit);
    return count;
  }

  template <typename Emit>
  void filler(Emit& emit) {
    std::geometric_distribution<std::size_t> len(1.0 / o_.filler_mean_length);
    std::uniform_int_distribution<std::size_t> start(0, o_.filler_words - 1);
    const std::size_t n = 1 + len(rng_);
    std::size_t w = start(rng_);
    for (std::size_t i = 0; i < n; ++i) {
      emit(filler_word(w));
      w = successors_[w][successor_weights_[w](rng_)];
    }
  }

  SyntheticOptions o_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<std::discrete_distribution<std::size_t>> successor_weights_;
  std::vector<Entity> entities_;
  std::discrete_distribution<std::size_t> entity_dist_;
};

}  // namespace

void SyntheticOptions::validate() const {
  SPALM_CHECK(filler_words >= 1 && filler_successors >= 1, "filler vocabulary must be non-empty");
  SPALM_CHECK(titles >= 1 && names >= 1 && attributes >= 1, "entity pools must be non-empty");
  SPALM_CHECK(entities >= entities_per_document && entities_per_document >= 1,
              "need at least entities_per_document (" << entities_per_document << ") entities");
  SPALM_CHECK(entities <= titles * names,
              entities << " entities cannot have unique (title, name) pairs from " << titles
                       << " x " << names);
  SPALM_CHECK(mentions_per_document >= entities_per_document,
              "every chosen entity must be mentioned at least once");
  SPALM_CHECK(filler_mean_length >= 1.0, "filler_mean_length must be >= 1");
  SPALM_CHECK(zipf_exponent >= 0.0, "zipf_exponent must be >= 0");
  SPALM_CHECK(filler_words < 1000 && titles < 100 && names < 10000 && attributes < 10000,
              "pool sizes exceed the fixed-width token spelling");
}

SyntheticCorpus generate(const SyntheticOptions& options) {
  options.validate();
  Generator g(options);
  SyntheticCorpus c;
  c.entities = g.entities();
  c.train = g.split(options.train_tokens);
  c.dev = g.split(options.dev_tokens);
  c.test = g.split(options.test_tokens);
  return c;
}

std::string filler_word(std::size_t i) { return tagged('w', i, 3); }
std::string title_word(std::size_t i) { return tagged('T', i, 2); }
std::string name_word(std::size_t i) { return tagged('n', i, 4); }
std::string attribute_word(std::size_t i) { return tagged('a', i, 4); }

}  // namespace spalm::synthetic
