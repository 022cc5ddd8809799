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

#include "spalm/memory.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "spalm/binary_io.h"

namespace spalm::memory {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::string_view kStoreMagic = "SPKV";
constexpr std::string_view kNeighborMagic = "SPNN";
constexpr std::size_t kQueryBlock = 16;
constexpr std::size_t kKeyBlock = 2048;
constexpr std::size_t kPqCentroids = 256;

bool better(double sa, std::uint64_t pa, double sb, std::uint64_t pb) {
  return sa > sb || (sa == sb && pa < pb);
}

// Bounded best-first list of (score, position, record).
class TopK {
 public:
  explicit TopK(std::size_t capacity) : cap_(capacity) { items_.reserve(capacity + 1); }

  bool would_accept(double s, std::uint64_t pos) const {
    return items_.size() < cap_ ||
           better(s, pos, items_.back().score, items_.back().position);
  }
  void offer(double s, std::uint64_t pos, std::uint32_t rec) {
    if (cap_ == 0 || !would_accept(s, pos)) return;
    Item it{s, pos, rec};
    auto at = std::upper_bound(items_.begin(), items_.end(), it, [](const Item& a, const Item& b) {
      return better(a.score, a.position, b.score, b.position);
    });
    items_.insert(at, it);
    if (items_.size() > cap_) items_.pop_back();
  }
  struct Item {
    double score;
    std::uint64_t position;
    std::uint32_t record;
  };
  const std::vector<Item>& items() const { return items_; }

 private:
  std::size_t cap_;
  std::vector<Item> items_;
};

// Re-scores candidates with the store's scalar scorer and keeps the best k.
NeighborSet finalize(const EpisodicStore& store, std::span<const double> query,
                     const std::vector<TopK::Item>& candidates, std::size_t k) {
  TopK best(k);
  for (const auto& c : candidates) best.offer(store.score(query, c.record), c.position, c.record);
  NeighborSet out;
  for (const auto& it : best.items())
    out.entries.push_back({store.value(it.record), it.position, it.score});
  out.short_set = out.entries.size() < k;
  return out;
}

std::size_t candidate_pool(std::size_t k) { return k + std::max<std::size_t>(4, k / 2); }

double sq_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// Plain Lloyd iterations on the rows of `data` ([n, dim]); returns [c, dim].
std::vector<double> kmeans(const RowMat& data, std::size_t c, std::size_t iterations,
                           Rng& rng) {
  const std::size_t n = data.rows(), dim = data.cols();
  SPALM_CHECK(n >= 1 && c >= 1, "k-means needs data and at least one centroid");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  RowMat cent(c, dim);
  for (std::size_t j = 0; j < c; ++j) cent.row(j) = data.row(order[j % n]);
  std::vector<std::size_t> assign(n);
  for (std::size_t it = 0; it <= iterations; ++it) {
    const Eigen::VectorXd cn = cent.rowwise().squaredNorm();
    for (std::size_t b = 0; b < n; b += kKeyBlock) {
      const std::size_t rows = std::min(kKeyBlock, n - b);
      RowMat s = data.middleRows(b, rows) * cent.transpose();
      for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
          const double dist = cn(j) - 2.0 * s(i, j);
          if (dist < bd) {
            bd = dist;
            best = j;
          }
        }
        assign[b + i] = best;
      }
    }
    if (it == iterations) break;
    RowMat sum = RowMat::Zero(c, dim);
    std::vector<std::size_t> count(c, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum.row(assign[i]) += data.row(i);
      ++count[assign[i]];
    }
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t j = 0; j < c; ++j) {
      if (count[j]) {
        cent.row(j) = sum.row(j) / static_cast<double>(count[j]);
      } else {
        cent.row(j) = data.row(pick(rng));
      }
    }
  }
  return std::vector<double>(cent.data(), cent.data() + cent.size());
}

std::size_t nearest_centroid(std::span<const double> centroids, std::size_t dim,
                             const double* x) {
  const std::size_t c = centroids.size() / dim;
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) {
    double dist = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double diff = x[t] - centroids[j * dim + t];
      dist += diff * diff;
    }
    if (dist < bd) {
      bd = dist;
      best = j;
    }
  }
  return best;
}

void write_checksum(std::ostream& os, std::uint32_t crc) { io::write_u32(os, crc); }

template <typename T>
std::uint32_t crc_of(const std::vector<T>& v, std::uint32_t seed) {
  return io::crc32({reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(T)}, seed);
}

template <typename T>
void read_array(std::istream& is, std::vector<T>& v, std::size_t count, std::string_view field) {
  v.resize(count);
  io::read_bytes(is, v.data(), count * sizeof(T), field);
}

}  // namespace

const char* metric_name(Metric m) {
  return m == Metric::kInnerProduct ? "inner_product" : "l2";
}

double recall(const NeighborSet& approx, const NeighborSet& exact) {
  if (exact.entries.empty()) return 1.0;
  std::size_t hit = 0;
  for (const auto& e : exact.entries)
    for (const auto& a : approx.entries)
      if (a.position == e.position) {
        ++hit;
        break;
      }
  return static_cast<double>(hit) / static_cast<double>(exact.entries.size());
}

// ---------------------------------------------------------------------------

EpisodicStore::EpisodicStore(std::size_t dim, Metric metric) : dim_(dim), metric_(metric) {
  SPALM_CHECK(dim >= 1, "store dimension must be >= 1");
}

void EpisodicStore::reserve(std::size_t count) {
  keys_.reserve(count * dim_);
  key_sq_norms_.reserve(count);
  values_.reserve(count);
  positions_.reserve(count);
}

void EpisodicStore::add(std::span<const double> key, std::uint32_t value,
                        std::uint64_t position) {
  SPALM_CHECK(key.size() == dim_,
              "store key has dimension " << key.size() << ", store expects " << dim_);
  SPALM_CHECK(!index_.built(), "store is immutable once an index is built");
  double sq = 0.0;
  for (double x : key) {
    const float f = static_cast<float>(x);
    keys_.push_back(f);
    sq += static_cast<double>(f) * f;
  }
  key_sq_norms_.push_back(sq);
  values_.push_back(value);
  positions_.push_back(position);
}

double EpisodicStore::score(std::span<const double> query, std::size_t i) const {
  const float* k = keys_.data() + i * dim_;
  if (metric_ == Metric::kInnerProduct) {
    double s = 0.0;
    for (std::size_t t = 0; t < dim_; ++t) s += query[t] * static_cast<double>(k[t]);
    return s;
  }
  double s = 0.0;
  for (std::size_t t = 0; t < dim_; ++t) {
    const double diff = query[t] - static_cast<double>(k[t]);
    s += diff * diff;
  }
  return -s;
}

NeighborSet EpisodicStore::exact_topk(std::span<const double> query, std::size_t k,
                                      const ExclusionRule& exclude) const {
  const ExclusionRule rules[] = {exclude};
  return exact_topk_batch(query, k, rules).front();
}

std::vector<NeighborSet> EpisodicStore::exact_topk_batch(
    std::span<const double> queries, std::size_t k, std::span<const ExclusionRule> rules) const {
  SPALM_CHECK(queries.size() % dim_ == 0,
              "query buffer of " << queries.size() << " values is not a multiple of dim " << dim_);
  const std::size_t nq = queries.size() / dim_;
  SPALM_CHECK(rules.empty() || rules.size() == nq,
              rules.size() << " exclusion rules for " << nq << " queries");
  const std::size_t n = size();
  const std::size_t pool = candidate_pool(k);
  std::vector<TopK> tops(nq, TopK(pool));

  // Fixed, padded block shapes keep every score on the same GEMM code path
  // regardless of how queries are grouped.
  const std::size_t qblocks = (nq + kQueryBlock - 1) / kQueryBlock;
  std::vector<RowMat> qmats(qblocks, RowMat::Zero(kQueryBlock, dim_));
  std::vector<double> qnorms(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t t = 0; t < dim_; ++t)
      qmats[q / kQueryBlock](q % kQueryBlock, t) = queries[q * dim_ + t];
    qnorms[q] = sq_norm(queries.subspan(q * dim_, dim_));
  }
  RowMat kblock(kKeyBlock, dim_);
  RowMat s(kQueryBlock, kKeyBlock);
  for (std::size_t b = 0; b < n; b += kKeyBlock) {
    const std::size_t rows = std::min(kKeyBlock, n - b);
    kblock.setZero();
    kblock.topRows(rows) =
        Eigen::Map<const RowMatF>(keys_.data() + b * dim_, rows, dim_).cast<double>();
    for (std::size_t qb = 0; qb < qblocks; ++qb) {
      s.noalias() = qmats[qb] * kblock.transpose();
      const std::size_t q0 = qb * kQueryBlock, q1 = std::min(nq, q0 + kQueryBlock);
      for (std::size_t q = q0; q < q1; ++q) {
        const ExclusionRule* rule = rules.empty() ? nullptr : &rules[q];
        auto& top = tops[q];
        const double* row = s.data() + (q - q0) * kKeyBlock;
        for (std::size_t i = 0; i < rows; ++i) {
          const std::size_t rec = b + i;
          double sc = row[i];
          if (metric_ == Metric::kL2) sc = 2.0 * sc - qnorms[q] - key_sq_norms_[rec];
          if (!top.would_accept(sc, positions_[rec])) continue;
          if (rule && rule->excludes(positions_[rec])) continue;
          top.offer(sc, positions_[rec], static_cast<std::uint32_t>(rec));
        }
      }
    }
  }
  std::vector<NeighborSet> out;
  out.reserve(nq);
  for (std::size_t q = 0; q < nq; ++q)
    out.push_back(finalize(*this, queries.subspan(q * dim_, dim_), tops[q].items(), k));
  return out;
}

void EpisodicStore::build_index(const AnnOptions& options) {
  index_ = AnnIndex();
  index_ = AnnIndex::build(*this, options);
}

NeighborSet EpisodicStore::ann_topk(std::span<const double> query, std::size_t k,
                                    const ExclusionRule& exclude) const {
  SPALM_CHECK(index_.built(), "approximate search requested but no index has been built");
  return index_.search(*this, query, k, exclude);
}

std::vector<NeighborSet> EpisodicStore::ann_topk_batch(std::span<const double> queries,
                                                       std::size_t k,
                                                       std::span<const ExclusionRule> rules) const {
  SPALM_CHECK(index_.built(), "approximate search requested but no index has been built");
  return index_.search_batch(*this, queries, k, rules);
}

void EpisodicStore::write(std::ostream& os) const {
  io::write_magic(os, kStoreMagic);
  io::write_u32(os, kStoreVersion);
  io::write_u8(os, static_cast<std::uint8_t>(metric_));
  io::write_u32(os, static_cast<std::uint32_t>(dim_));
  io::write_u64(os, size());
  io::write_bytes(os, keys_.data(), keys_.size() * sizeof(float));
  io::write_bytes(os, values_.data(), values_.size() * sizeof(std::uint32_t));
  io::write_bytes(os, positions_.data(), positions_.size() * sizeof(std::uint64_t));
  write_checksum(os, crc_of(positions_, crc_of(values_, crc_of(keys_, 0))));
}

EpisodicStore EpisodicStore::read(std::istream& is) {
  io::expect_magic(is, kStoreMagic);
  const auto version = io::read_u32(is, "store.version");
  SPALM_CHECK(version == kStoreVersion,
              "store.version is " << version << ", expected " << kStoreVersion);
  const auto metric = io::read_u8(is, "store.metric");
  SPALM_CHECK(metric <= 1, "store.metric tag " << int(metric) << " is unknown");
  const auto dim = io::read_u32(is, "store.dim");
  SPALM_CHECK(dim >= 1, "store.dim is zero");
  const auto count = io::read_u64(is, "store.count");
  EpisodicStore s(dim, static_cast<Metric>(metric));
  read_array(is, s.keys_, count * dim, "store.keys");
  read_array(is, s.values_, count, "store.values");
  read_array(is, s.positions_, count, "store.positions");
  const auto crc = io::read_u32(is, "store.checksum");
  SPALM_CHECK(crc == crc_of(s.positions_, crc_of(s.values_, crc_of(s.keys_, 0))),
              "store.checksum does not match the record data");
  s.key_sq_norms_.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    double sq = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double f = s.keys_[i * dim + t];
      sq += f * f;
    }
    s.key_sq_norms_[i] = sq;
  }
  return s;
}

void EpisodicStore::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  SPALM_CHECK(os, "cannot write store " << path);
  write(os);
  SPALM_CHECK(os, "failed writing store " << path);
}

EpisodicStore EpisodicStore::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  SPALM_CHECK(is, "cannot open store " << path);
  return read(is);
}

// ---------------------------------------------------------------------------

AnnIndex AnnIndex::build(const EpisodicStore& store, const AnnOptions& options) {
  const std::size_t n = store.size(), dim = store.dim();
  SPALM_CHECK(n >= 1, "cannot index an empty store");
  AnnIndex idx;
  idx.dim_ = dim;
  std::size_t parts = options.partitions
                          ? options.partitions
                          : static_cast<std::size_t>(std::lround(std::sqrt(double(n)) / 5.0));
  parts = std::clamp<std::size_t>(parts, 1, n);
  idx.probes_ = std::clamp<std::size_t>(options.probes ? options.probes : (3 * parts + 3) / 4, 1,
                                        parts);
  idx.rerank_ = std::max<std::size_t>(options.rerank, 1);

  Rng rng(options.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t sample = std::min(n, std::max(options.training_sample, parts));
  RowMat train(sample, dim);
  for (std::size_t i = 0; i < sample; ++i)
    for (std::size_t t = 0; t < dim; ++t) train(i, t) = store.key(order[i])[t];
  idx.centroids_ = kmeans(train, parts, options.kmeans_iterations, rng);

  // Assign every record to its nearest centroid.
  std::vector<std::uint32_t> assign(n);
  {
    // Owned copy: reductions over an unaligned map depend on its address.
    const RowMat cent = Eigen::Map<const RowMat>(idx.centroids_.data(), parts, dim);
    const Eigen::VectorXd cn = cent.rowwise().squaredNorm();
    for (std::size_t b = 0; b < n; b += kKeyBlock) {
      const std::size_t rows = std::min(kKeyBlock, n - b);
      RowMat kb = Eigen::Map<const RowMatF>(store.keys().data() + b * dim, rows, dim).cast<double>();
      RowMat s = kb * cent.transpose();
      for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < parts; ++j) {
          const double dist = cn(j) - 2.0 * s(i, j);
          if (dist < bd) {
            bd = dist;
            best = j;
          }
        }
        assign[b + i] = static_cast<std::uint32_t>(best);
      }
    }
  }
  idx.list_offsets_.assign(parts + 1, 0);
  for (auto a : assign) ++idx.list_offsets_[a + 1];
  for (std::size_t j = 0; j < parts; ++j) idx.list_offsets_[j + 1] += idx.list_offsets_[j];
  idx.list_records_.resize(n);
  {
    std::vector<std::size_t> fill(idx.list_offsets_.begin(), idx.list_offsets_.end() - 1);
    for (std::size_t i = 0; i < n; ++i)
      idx.list_records_[fill[assign[i]]++] = static_cast<std::uint32_t>(i);
  }
  idx.list_keys_.resize(n * dim);
  for (std::size_t slot = 0; slot < n; ++slot) {
    const auto k = store.key(idx.list_records_[slot]);
    std::copy(k.begin(), k.end(), idx.list_keys_.begin() + slot * dim);
  }

  if (options.pq_subspaces) {
    const std::size_t m = options.pq_subspaces;
    SPALM_CHECK(dim % m == 0, "pq_subspaces " << m << " must divide dim " << dim);
    const std::size_t sub = dim / m;
    idx.pq_m_ = m;
    idx.codebooks_.assign(m * kPqCentroids * sub, 0.0);
    // Residuals of the training sample, one subspace at a time.
    for (std::size_t s = 0; s < m; ++s) {
      RowMat res(sample, sub);
      for (std::size_t i = 0; i < sample; ++i) {
        const std::size_t c = assign[order[i]];
        for (std::size_t t = 0; t < sub; ++t)
          res(i, t) = train(i, s * sub + t) - idx.centroids_[c * dim + s * sub + t];
      }
      const auto cb = kmeans(res, std::min(kPqCentroids, sample), options.kmeans_iterations, rng);
      std::copy(cb.begin(), cb.end(), idx.codebooks_.begin() + s * kPqCentroids * sub);
    }
    const std::size_t used = std::min(kPqCentroids, sample);
    idx.codes_.resize(n * m);
    std::vector<double> r(sub);
    for (std::size_t slot = 0; slot < n; ++slot) {
      const std::size_t c = assign[idx.list_records_[slot]];
      for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t t = 0; t < sub; ++t)
          r[t] = idx.list_keys_[slot * dim + s * sub + t] - idx.centroids_[c * dim + s * sub + t];
        std::span<const double> cb(idx.codebooks_.data() + s * kPqCentroids * sub, used * sub);
        idx.codes_[slot * m + s] = static_cast<std::uint8_t>(nearest_centroid(cb, sub, r.data()));
      }
    }
  }
  return idx;
}

void AnnIndex::set_probes(std::size_t probes) {
  SPALM_CHECK(built(), "index not built");
  SPALM_CHECK(probes >= 1 && probes <= partitions(),
              "probes " << probes << " outside [1, " << partitions() << "]");
  probes_ = probes;
}

NeighborSet AnnIndex::search(const EpisodicStore& store, std::span<const double> query,
                             std::size_t k, const ExclusionRule& exclude) const {
  SPALM_CHECK(built(), "approximate search requested but no index has been built");
  SPALM_CHECK(query.size() == dim_, "query dimension " << query.size() << " != " << dim_);
  const bool ip = store.metric() == Metric::kInnerProduct;
  const auto ranked = ranked_partitions(query, ip);
  TopK cand(pq_m_ ? std::max(rerank_, k) : candidate_pool(k));
  const std::size_t sub = pq_m_ ? dim_ / pq_m_ : 0;
  std::vector<double> table;
  for (std::size_t p = 0; p < probes_; ++p) {
    const std::size_t list = ranked[p];
    const std::size_t begin = list_offsets_[list], end = list_offsets_[list + 1];
    if (pq_m_) {
      // Asymmetric distance tables over the residual codebooks.
      table.assign(pq_m_ * kPqCentroids, 0.0);
      for (std::size_t s = 0; s < pq_m_; ++s)
        for (std::size_t c = 0; c < kPqCentroids; ++c) {
          const double* cb = codebooks_.data() + (s * kPqCentroids + c) * sub;
          double v = 0.0;
          for (std::size_t t = 0; t < sub; ++t) {
            if (ip) {
              v += query[s * sub + t] * cb[t];
            } else {
              const double diff = query[s * sub + t] - centroids_[list * dim_ + s * sub + t] - cb[t];
              v -= diff * diff;
            }
          }
          table[s * kPqCentroids + c] = v;
        }
      double base = 0.0;
      if (ip)
        for (std::size_t t = 0; t < dim_; ++t) base += query[t] * centroids_[list * dim_ + t];
      for (std::size_t slot = begin; slot < end; ++slot) {
        const std::uint32_t rec = list_records_[slot];
        const std::uint64_t pos = store.position(rec);
        double sc = base;
        const std::uint8_t* code = codes_.data() + slot * pq_m_;
        for (std::size_t s = 0; s < pq_m_; ++s) sc += table[s * kPqCentroids + code[s]];
        if (!cand.would_accept(sc, pos) || exclude.excludes(pos)) continue;
        cand.offer(sc, pos, rec);
      }
    } else {
      for (std::size_t slot = begin; slot < end; ++slot) {
        const std::uint32_t rec = list_records_[slot];
        const std::uint64_t pos = store.position(rec);
        const float* key = list_keys_.data() + slot * dim_;
        double sc = 0.0;
        if (ip) {
          for (std::size_t t = 0; t < dim_; ++t) sc += query[t] * static_cast<double>(key[t]);
        } else {
          for (std::size_t t = 0; t < dim_; ++t) {
            const double diff = query[t] - static_cast<double>(key[t]);
            sc -= diff * diff;
          }
        }
        if (!cand.would_accept(sc, pos) || exclude.excludes(pos)) continue;
        cand.offer(sc, pos, rec);
      }
    }
  }
  return finalize(store, query, cand.items(), k);
}

std::vector<std::size_t> AnnIndex::ranked_partitions(std::span<const double> query,
                                                     bool ip) const {
  const std::size_t parts = partitions();
  std::vector<std::pair<double, std::size_t>> cs(parts);
  for (std::size_t j = 0; j < parts; ++j) {
    double dot = 0.0, dist = 0.0;
    for (std::size_t t = 0; t < dim_; ++t) {
      const double c = centroids_[j * dim_ + t];
      dot += query[t] * c;
      dist += (query[t] - c) * (query[t] - c);
    }
    cs[j] = {ip ? dot : -dist, j};
  }
  std::partial_sort(cs.begin(), cs.begin() + probes_, cs.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<std::size_t> out(probes_);
  for (std::size_t p = 0; p < probes_; ++p) out[p] = cs[p].second;
  return out;
}

std::vector<NeighborSet> AnnIndex::search_batch(const EpisodicStore& store,
                                                std::span<const double> queries, std::size_t k,
                                                std::span<const ExclusionRule> rules) const {
  SPALM_CHECK(built(), "approximate search requested but no index has been built");
  SPALM_CHECK(queries.size() % dim_ == 0, "query buffer is not a multiple of dim " << dim_);
  const std::size_t nq = queries.size() / dim_;
  SPALM_CHECK(rules.empty() || rules.size() == nq,
              rules.size() << " exclusion rules for " << nq << " queries");
  std::vector<NeighborSet> out;
  out.reserve(nq);
  if (pq_m_) {
    for (std::size_t q = 0; q < nq; ++q)
      out.push_back(search(store, queries.subspan(q * dim_, dim_), k,
                           rules.empty() ? ExclusionRule{} : rules[q]));
    return out;
  }
  const bool ip = store.metric() == Metric::kInnerProduct;
  std::vector<std::vector<std::uint32_t>> probing(partitions());
  std::vector<double> qnorms(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    const auto query = queries.subspan(q * dim_, dim_);
    qnorms[q] = sq_norm(query);
    for (std::size_t list : ranked_partitions(query, ip))
      probing[list].push_back(static_cast<std::uint32_t>(q));
  }
  std::vector<TopK> tops(nq, TopK(candidate_pool(k)));
  RowMat qblock(kQueryBlock, dim_);
  for (std::size_t list = 0; list < partitions(); ++list) {
    const auto& qs = probing[list];
    const std::size_t begin = list_offsets_[list], rows = list_offsets_[list + 1] - begin;
    if (qs.empty() || rows == 0) continue;
    const RowMat keys =
        Eigen::Map<const RowMatF>(list_keys_.data() + begin * dim_, rows, dim_).cast<double>();
    RowMat s(kQueryBlock, rows);
    for (std::size_t b = 0; b < qs.size(); b += kQueryBlock) {
      qblock.setZero();
      const std::size_t nb = std::min(kQueryBlock, qs.size() - b);
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t t = 0; t < dim_; ++t) qblock(i, t) = queries[qs[b + i] * dim_ + t];
      s.noalias() = qblock * keys.transpose();
      for (std::size_t i = 0; i < nb; ++i) {
        const std::size_t q = qs[b + i];
        const ExclusionRule* rule = rules.empty() ? nullptr : &rules[q];
        auto& top = tops[q];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::uint32_t rec = list_records_[begin + r];
          const std::uint64_t pos = store.position(rec);
          double sc = s(i, r);
          if (!ip) sc = 2.0 * sc - qnorms[q] - store.key_sq_norm(rec);
          if (!top.would_accept(sc, pos)) continue;
          if (rule && rule->excludes(pos)) continue;
          top.offer(sc, pos, rec);
        }
      }
    }
  }
  for (std::size_t q = 0; q < nq; ++q)
    out.push_back(finalize(store, queries.subspan(q * dim_, dim_), tops[q].items(), k));
  return out;
}

// ---------------------------------------------------------------------------

NeighborCache::NeighborCache(std::size_t k, std::size_t count)
    : k_(k),
      count_(count),
      values_(k * count, kAbsentValue),
      positions_(k * count, kAbsentPosition),
      scores_(k * count, -std::numeric_limits<float>::infinity()) {
  SPALM_CHECK(k >= 1, "neighbor cache needs K >= 1");
}

void NeighborCache::set(std::size_t i, const NeighborSet& set) {
  SPALM_CHECK(i < count_, "neighbor cache index " << i << " out of range " << count_);
  SPALM_CHECK(set.entries.size() <= k_,
              "neighbor set of " << set.entries.size() << " exceeds cache K " << k_);
  for (std::size_t r = 0; r < k_; ++r) {
    if (r < set.entries.size()) {
      const auto& e = set.entries[r];
      SPALM_CHECK(e.value != kAbsentValue, "neighbor value collides with the absent sentinel");
      values_[i * k_ + r] = e.value;
      positions_[i * k_ + r] = e.position;
      scores_[i * k_ + r] = static_cast<float>(e.score);
    } else {
      values_[i * k_ + r] = kAbsentValue;
      positions_[i * k_ + r] = kAbsentPosition;
      scores_[i * k_ + r] = -std::numeric_limits<float>::infinity();
    }
  }
}

NeighborSet NeighborCache::get(std::size_t i) const {
  SPALM_CHECK(i < count_, "neighbor cache index " << i << " out of range " << count_);
  NeighborSet s;
  for (std::size_t r = 0; r < k_ && present(i, r); ++r)
    s.entries.push_back({value(i, r), position(i, r), static_cast<double>(score(i, r))});
  s.short_set = s.entries.size() < k_;
  return s;
}

NeighborCache NeighborCache::truncated(std::size_t k) const {
  SPALM_CHECK(k >= 1 && k <= k_, "cannot use K=" << k << " from a cache holding K=" << k_);
  NeighborCache out(k, count_);
  for (std::size_t i = 0; i < count_; ++i)
    for (std::size_t r = 0; r < k; ++r) {
      out.values_[i * k + r] = values_[i * k_ + r];
      out.positions_[i * k + r] = positions_[i * k_ + r];
      out.scores_[i * k + r] = scores_[i * k_ + r];
    }
  return out;
}

NeighborCache NeighborCache::concat(std::span<const NeighborCache> parts) {
  SPALM_CHECK(!parts.empty(), "nothing to concatenate");
  std::size_t total = 0;
  for (const auto& p : parts) {
    SPALM_CHECK(p.k_ == parts[0].k_, "cannot concatenate caches with different K");
    total += p.count_;
  }
  NeighborCache out(parts[0].k_, total);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.values_.begin(), p.values_.end(), out.values_.begin() + at);
    std::copy(p.positions_.begin(), p.positions_.end(), out.positions_.begin() + at);
    std::copy(p.scores_.begin(), p.scores_.end(), out.scores_.begin() + at);
    at += p.values_.size();
  }
  return out;
}

void NeighborCache::write(std::ostream& os) const {
  io::write_magic(os, kNeighborMagic);
  io::write_u32(os, kNeighborCacheVersion);
  io::write_u32(os, static_cast<std::uint32_t>(k_));
  io::write_u64(os, count_);
  // Interleaved (value u32, position u64, score f32) per slot.
  std::vector<std::uint8_t> buf(values_.size() * 16);
  for (std::size_t s = 0; s < values_.size(); ++s) {
    std::memcpy(buf.data() + s * 16, &values_[s], 4);
    std::memcpy(buf.data() + s * 16 + 4, &positions_[s], 8);
    std::memcpy(buf.data() + s * 16 + 12, &scores_[s], 4);
  }
  io::write_bytes(os, buf.data(), buf.size());
  write_checksum(os, io::crc32(buf));
}

NeighborCache NeighborCache::read(std::istream& is) {
  io::expect_magic(is, kNeighborMagic);
  const auto version = io::read_u32(is, "neighbors.version");
  SPALM_CHECK(version == kNeighborCacheVersion,
              "neighbors.version is " << version << ", expected " << kNeighborCacheVersion);
  const auto k = io::read_u32(is, "neighbors.k");
  SPALM_CHECK(k >= 1, "neighbors.k is zero");
  const auto count = io::read_u64(is, "neighbors.count");
  std::vector<std::uint8_t> buf;
  read_array(is, buf, count * k * 16, "neighbors.entries");
  const auto crc = io::read_u32(is, "neighbors.checksum");
  SPALM_CHECK(crc == io::crc32(buf), "neighbors.checksum does not match the entries");
  NeighborCache c(k, count);
  for (std::size_t s = 0; s < c.values_.size(); ++s) {
    std::memcpy(&c.values_[s], buf.data() + s * 16, 4);
    std::memcpy(&c.positions_[s], buf.data() + s * 16 + 4, 8);
    std::memcpy(&c.scores_[s], buf.data() + s * 16 + 12, 4);
  }
  return c;
}

void NeighborCache::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  SPALM_CHECK(os, "cannot write neighbor cache " << path);
  write(os);
  SPALM_CHECK(os, "failed writing neighbor cache " << path);
}

NeighborCache NeighborCache::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  SPALM_CHECK(is, "cannot open neighbor cache " << path);
  return read(is);
}

}  // namespace spalm::memory
