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

#ifndef SPALM_MEMORY_H_
#define SPALM_MEMORY_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "spalm/common.h"

namespace spalm::memory {

enum class Metric : std::uint8_t { kInnerProduct = 0, kL2 = 1 };

const char* metric_name(Metric m);

struct Neighbor {
  std::uint32_t value = 0;
  std::uint64_t position = 0;
  double score = 0.0;  // inner product, or negated squared distance for L2
};

// Entries sorted by descending score, ties broken by lower position.
struct NeighborSet {
  std::vector<Neighbor> entries;
  bool short_set = false;  // fewer than K records survived exclusion
};

// Skips records whose position falls in a half-open interval.
struct ExclusionRule {
  bool active = false;
  std::uint64_t begin = 0;  // excluded positions are [begin, end)
  std::uint64_t end = 0;

  static ExclusionRule none() { return {}; }
  // Positions p with |p - center| < radius.
  static ExclusionRule around(std::uint64_t center, std::uint64_t radius) {
    if (radius == 0) return {true, center, center};
    return {true, center >= radius - 1 ? center - (radius - 1) : 0, center + radius};
  }
  static ExclusionRule span(std::uint64_t begin, std::uint64_t end) {
    return {true, begin, end};
  }
  bool excludes(std::uint64_t p) const { return active && p >= begin && p < end; }
};

// Inverted-file index: k-means coarse partitions, optional product
// quantization of residuals, final candidates re-scored exactly.
struct AnnOptions {
  std::size_t partitions = 0;     // 0: sqrt(count) / 5
  std::size_t probes = 0;         // 0: three quarters of the partitions
  std::size_t pq_subspaces = 0;   // 0 disables PQ; must divide dim
  std::size_t rerank = 64;        // PQ candidates re-scored exactly per query
  std::size_t kmeans_iterations = 12;
  std::size_t training_sample = 65536;
  std::uint64_t seed = 17;
};

class EpisodicStore;

class AnnIndex {
 public:
  AnnIndex() = default;
  static AnnIndex build(const EpisodicStore& store, const AnnOptions& options);

  bool built() const { return !centroids_.empty(); }
  std::size_t partitions() const { return list_offsets_.empty() ? 0 : list_offsets_.size() - 1; }
  std::size_t probes() const { return probes_; }
  void set_probes(std::size_t probes);

  NeighborSet search(const EpisodicStore& store, std::span<const double> query, std::size_t k,
                     const ExclusionRule& exclude) const;
  // Queries are [count, dim]; lists are scanned once per batch.
  std::vector<NeighborSet> search_batch(const EpisodicStore& store,
                                        std::span<const double> queries, std::size_t k,
                                        std::span<const ExclusionRule> rules = {}) const;

 private:
  std::vector<std::size_t> ranked_partitions(std::span<const double> query, bool ip) const;

  std::size_t dim_ = 0;
  std::size_t probes_ = 0;
  std::size_t rerank_ = 0;
  std::vector<double> centroids_;          // [partitions, dim]
  std::vector<std::size_t> list_offsets_;  // partitions + 1
  std::vector<std::uint32_t> list_records_;
  std::vector<float> list_keys_;           // keys copied in list order
  // Product quantizer over residuals (empty when disabled).
  std::size_t pq_m_ = 0;
  std::vector<double> codebooks_;          // [m, 256, dim / m]
  std::vector<std::uint8_t> codes_;        // [records in list order, m]
};

class EpisodicStore {
 public:
  EpisodicStore() = default;
  EpisodicStore(std::size_t dim, Metric metric = Metric::kInnerProduct);

  void reserve(std::size_t count);
  // Keys are stored as f32.
  void add(std::span<const double> key, std::uint32_t value, std::uint64_t position);

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }
  std::span<const float> key(std::size_t i) const {
    return {keys_.data() + i * dim_, dim_};
  }
  std::span<const float> keys() const { return keys_; }
  std::uint32_t value(std::size_t i) const { return values_[i]; }
  std::uint64_t position(std::size_t i) const { return positions_[i]; }
  double key_sq_norm(std::size_t i) const { return key_sq_norms_[i]; }

  // Score of record i for the query, computed in double.
  double score(std::span<const double> query, std::size_t i) const;

  NeighborSet exact_topk(std::span<const double> query, std::size_t k,
                         const ExclusionRule& exclude = {}) const;
  // Queries are [count, dim] row-major; `rules` is empty or one per query.
  std::vector<NeighborSet> exact_topk_batch(std::span<const double> queries, std::size_t k,
                                            std::span<const ExclusionRule> rules = {}) const;

  void build_index(const AnnOptions& options = {});
  const AnnIndex& index() const { return index_; }
  AnnIndex& index() { return index_; }
  NeighborSet ann_topk(std::span<const double> query, std::size_t k,
                       const ExclusionRule& exclude = {}) const;
  std::vector<NeighborSet> ann_topk_batch(std::span<const double> queries, std::size_t k,
                                          std::span<const ExclusionRule> rules = {}) const;

  void write(std::ostream& os) const;
  static EpisodicStore read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static EpisodicStore load(const std::filesystem::path& path);

 private:
  std::size_t dim_ = 0;
  Metric metric_ = Metric::kInnerProduct;
  std::vector<float> keys_;
  std::vector<double> key_sq_norms_;
  std::vector<std::uint32_t> values_;
  std::vector<std::uint64_t> positions_;
  AnnIndex index_;
};

inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::uint32_t kNeighborCacheVersion = 1;
inline constexpr std::uint32_t kAbsentValue = std::numeric_limits<std::uint32_t>::max();
inline constexpr std::uint64_t kAbsentPosition = std::numeric_limits<std::uint64_t>::max();

// Fixed-K neighbor lists for a run of consecutive corpus positions. Slots past
// the end of a short set hold kAbsentValue / kAbsentPosition / -inf.
class NeighborCache {
 public:
  NeighborCache() = default;
  NeighborCache(std::size_t k, std::size_t count);

  std::size_t k() const { return k_; }
  std::size_t size() const { return count_; }

  void set(std::size_t i, const NeighborSet& set);
  NeighborSet get(std::size_t i) const;
  std::uint32_t value(std::size_t i, std::size_t rank) const { return values_[i * k_ + rank]; }
  std::uint64_t position(std::size_t i, std::size_t rank) const {
    return positions_[i * k_ + rank];
  }
  float score(std::size_t i, std::size_t rank) const { return scores_[i * k_ + rank]; }
  bool present(std::size_t i, std::size_t rank) const {
    return values_[i * k_ + rank] != kAbsentValue;
  }

  // Keeps the top `k` ranks; k may not exceed the cached K.
  NeighborCache truncated(std::size_t k) const;
  // Concatenates caches over consecutive position ranges.
  static NeighborCache concat(std::span<const NeighborCache> parts);

  void write(std::ostream& os) const;
  static NeighborCache read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static NeighborCache load(const std::filesystem::path& path);

  bool operator==(const NeighborCache&) const = default;

 private:
  std::size_t k_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint32_t> values_;
  std::vector<std::uint64_t> positions_;
  std::vector<float> scores_;
};

// Recall@k of `approx` against `exact`: shared positions / exact size.
double recall(const NeighborSet& approx, const NeighborSet& exact);

}  // namespace spalm::memory

#endif  // SPALM_MEMORY_H_
