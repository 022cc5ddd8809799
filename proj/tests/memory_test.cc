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


#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "spalm/memory.h"

using namespace spalm;
using memory::EpisodicStore;
using memory::ExclusionRule;
using memory::Metric;
using memory::NeighborSet;

namespace {

std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

EpisodicStore random_store(std::size_t n, std::size_t dim, Metric metric, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EpisodicStore s(dim, metric);
  for (std::size_t i = 0; i < n; ++i) s.add(gaussian(dim, rng), static_cast<std::uint32_t>(i % 7), i);
  return s;
}

struct Hit {
  double score;
  std::uint64_t position;
};

// Independent scan: float keys widened, scores from scratch, full sort.
std::vector<Hit> linear_scan(const EpisodicStore& s, const std::vector<double>& q, std::size_t k,
                             const ExclusionRule& ex) {
  std::vector<Hit> all;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (ex.excludes(s.position(i))) continue;
    double v = 0;
    for (std::size_t t = 0; t < s.dim(); ++t) {
      const double key = s.key(i)[t];
      v += s.metric() == Metric::kInnerProduct ? q[t] * key : -(q[t] - key) * (q[t] - key);
    }
    all.push_back({v, s.position(i)});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score > b.score || (a.score == b.score && a.position < b.position);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

void check_matches_scan(const NeighborSet& got, const std::vector<Hit>& want) {
  REQUIRE(got.entries.size() == want.size());
  for (std::size_t r = 0; r < want.size(); ++r) {
    CHECK(got.entries[r].position == want[r].position);
    CHECK(std::abs(got.entries[r].score - want[r].score) < 1e-9);
  }
}

}  // namespace

TEST_CASE("exclusion rule") {
  auto none = ExclusionRule::none();
  CHECK_FALSE(none.excludes(5));
  auto r = ExclusionRule::around(10, 3);
  CHECK(r.excludes(10));
  CHECK(r.excludes(8));
  CHECK(r.excludes(12));
  CHECK_FALSE(r.excludes(7));
  CHECK_FALSE(r.excludes(13));
  CHECK(ExclusionRule::around(0, 1).excludes(0));
  CHECK_FALSE(ExclusionRule::around(0, 1).excludes(1));
  CHECK(ExclusionRule::around(1, 5).excludes(0));
  CHECK_FALSE(ExclusionRule::around(4, 0).excludes(4));
  auto doc = ExclusionRule::span(20, 30);
  CHECK(doc.excludes(20));
  CHECK(doc.excludes(29));
  CHECK_FALSE(doc.excludes(19));
  CHECK_FALSE(doc.excludes(30));
}

TEST_CASE("exact search matches an independent linear scan") {
  for (Metric metric : {Metric::kInnerProduct, Metric::kL2}) {
    auto s = random_store(50, 6, metric, 1);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 30; ++t) {
      auto q = gaussian(6, rng);
      for (std::size_t k : {1u, 4u, 13u}) {
        check_matches_scan(s.exact_topk(q, k), linear_scan(s, q, k, {}));
        auto ex = ExclusionRule::around(t, 5);
        auto got = s.exact_topk(q, k, ex);
        check_matches_scan(got, linear_scan(s, q, k, ex));
        for (const auto& e : got.entries) CHECK_FALSE(ex.excludes(e.position));
      }
    }
  }
}

TEST_CASE("exact search across block boundaries and batch equals single queries") {
  auto s = random_store(5000, 16, Metric::kInnerProduct, 3);
  std::mt19937_64 rng(4);
  const std::size_t nq = 37;
  auto qs = gaussian(nq * 16, rng);
  std::vector<ExclusionRule> rules;
  for (std::size_t i = 0; i < nq; ++i) rules.push_back(ExclusionRule::around(i * 100, 50));
  auto batch = s.exact_topk_batch(qs, 8, rules);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> q(qs.begin() + i * 16, qs.begin() + (i + 1) * 16);
    check_matches_scan(batch[i], linear_scan(s, q, 8, rules[i]));
    auto single = s.exact_topk(q, 8, rules[i]);
    for (std::size_t r = 0; r < 8; ++r) {
      CHECK(single.entries[r].position == batch[i].entries[r].position);
      CHECK(single.entries[r].score == batch[i].entries[r].score);
    }
  }
}

TEST_CASE("scores are in descending order with ties broken by lower position") {
  EpisodicStore s(2);
  for (std::uint64_t p : {5u, 3u, 9u, 1u}) s.add(std::vector<double>{1.0, 0.0}, 7, p);
  s.add(std::vector<double>{2.0, 0.0}, 8, 4);
  auto got = s.exact_topk(std::vector<double>{1.0, 0.0}, 4);
  REQUIRE(got.entries.size() == 4);
  CHECK(got.entries[0].position == 4);
  CHECK(got.entries[1].position == 1);
  CHECK(got.entries[2].position == 3);
  CHECK(got.entries[3].position == 5);
  for (std::size_t r = 1; r < 4; ++r) CHECK(got.entries[r - 1].score >= got.entries[r].score);
}

TEST_CASE("L2 self retrieval, full-size K, short sets") {
  auto s = random_store(40, 5, Metric::kL2, 5);
  for (std::size_t i = 0; i < 40; ++i) {
    std::vector<double> q(s.key(i).begin(), s.key(i).end());
    auto got = s.exact_topk(q, 1);
    CHECK(got.entries[0].position == i);
    CHECK(got.entries[0].score == 0.0);
  }
  std::vector<double> q(5, 0.1);
  auto all = s.exact_topk(q, 40);
  CHECK(all.entries.size() == 40);
  CHECK_FALSE(all.short_set);
  auto excl = s.exact_topk(q, 40, ExclusionRule::around(0, 3));
  CHECK(excl.entries.size() == 37);
  CHECK(excl.short_set);
  EpisodicStore empty(5);
  auto none = empty.exact_topk(q, 4);
  CHECK(none.entries.empty());
  CHECK(none.short_set);
}

TEST_CASE("dimension mismatch is rejected") {
  EpisodicStore s(4);
  CHECK_THROWS_AS(s.add(std::vector<double>{1, 2, 3}, 0, 0), Error);
  s.add(std::vector<double>{1, 2, 3, 4}, 0, 0);
  CHECK_THROWS_AS(s.exact_topk(std::vector<double>{1, 2}, 1), Error);
  CHECK_THROWS_AS(s.ann_topk(std::vector<double>{1, 2, 3, 4}, 1), Error);
}

TEST_CASE("approximate search: clusters, exhaustive probing, plausible scores") {
  // Ten well-separated clusters.
  std::mt19937_64 rng(6);
  const std::size_t dim = 8;
  EpisodicStore s(dim, Metric::kL2);
  std::vector<std::vector<double>> centers;
  for (int c = 0; c < 10; ++c) {
    std::vector<double> ctr(dim, 0.0);
    ctr[c % dim] = 50.0 * (c < 8 ? 1 : -1);
    if (c >= 8) ctr[(c + 3) % dim] = 50.0;
    centers.push_back(ctr);
  }
  std::normal_distribution<double> nd(0, 1);
  for (std::size_t i = 0; i < 2000; ++i) {
    auto k = centers[i % 10];
    for (double& x : k) x += nd(rng);
    s.add(k, static_cast<std::uint32_t>(i % 10), i);
  }
  memory::AnnOptions opt;
  opt.partitions = 10;
  opt.probes = 1;
  s.build_index(opt);
  for (std::size_t c = 0; c < 10; ++c) {
    auto got = s.ann_topk(centers[c], 4);
    REQUIRE(got.entries.size() == 4);
    for (const auto& e : got.entries) CHECK(e.value == c);
  }

  auto ip = random_store(3000, 12, Metric::kInnerProduct, 7);
  memory::AnnOptions o2;
  o2.partitions = 20;
  ip.build_index(o2);
  ip.index().set_probes(20);
  for (int t = 0; t < 20; ++t) {
    auto q = gaussian(12, rng);
    auto ex = ExclusionRule::around(t * 50, 10);
    auto a = ip.ann_topk(q, 5, ex), e = ip.exact_topk(q, 5, ex);
    REQUIRE(a.entries.size() == 5);
    for (std::size_t r = 0; r < 5; ++r) CHECK(a.entries[r].position == e.entries[r].position);
  }
  // Every approximate hit exists and its score is recomputable.
  ip.index().set_probes(2);
  for (int t = 0; t < 20; ++t) {
    auto q = gaussian(12, rng);
    for (const auto& h : ip.ann_topk(q, 4).entries) {
      CHECK(h.position < ip.size());
      CHECK(std::abs(h.score - ip.score(q, h.position)) < 1e-6);
      CHECK(h.value == ip.value(h.position));
    }
  }
  CHECK_THROWS_AS(ip.index().set_probes(0), Error);
  CHECK_THROWS_AS(ip.add(std::vector<double>(12, 0.0), 0, 0), Error);
}

TEST_CASE("product quantized index with rerank keeps useful recall") {
  auto s = random_store(4000, 16, Metric::kInnerProduct, 8);
  memory::AnnOptions o;
  o.partitions = 32;
  o.probes = 32;
  o.pq_subspaces = 4;
  o.rerank = 200;
  s.build_index(o);
  std::mt19937_64 rng(9);
  double rec = 0;
  for (int t = 0; t < 50; ++t) {
    auto q = gaussian(16, rng);
    rec += memory::recall(s.ann_topk(q, 4), s.exact_topk(q, 4));
  }
  CHECK(rec / 50 >= 0.9);
}

TEST_CASE("store file round trip, truncation, corruption, empty store") {
  auto s = random_store(30, 4, Metric::kL2, 10);
  std::stringstream ss;
  s.write(ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "SPKV");
  CHECK(bytes.size() == 4 + 4 + 1 + 4 + 8 + 30 * (16 + 4 + 8) + 4);
  std::stringstream in(bytes);
  auto back = EpisodicStore::read(in);
  CHECK(back.metric() == Metric::kL2);
  REQUIRE(back.size() == 30);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(std::equal(back.key(i).begin(), back.key(i).end(), s.key(i).begin()));
    CHECK(back.value(i) == s.value(i));
    CHECK(back.position(i) == s.position(i));
  }
  std::stringstream tr(bytes.substr(0, bytes.size() - 20));
  CHECK_THROWS_AS(EpisodicStore::read(tr), Error);
  std::string flipped = bytes;
  flipped[40] ^= 0x10;
  std::stringstream fl(flipped);
  CHECK_THROWS_WITH_AS(EpisodicStore::read(fl), doctest::Contains("store.checksum"), Error);
  std::string badver = bytes;
  badver[4] = 2;
  std::stringstream bv(badver);
  CHECK_THROWS_WITH_AS(EpisodicStore::read(bv), doctest::Contains("store.version"), Error);

  EpisodicStore empty(7);
  std::stringstream es;
  empty.write(es);
  auto e2 = EpisodicStore::read(es);
  CHECK(e2.size() == 0);
  CHECK(e2.dim() == 7);
}

TEST_CASE("neighbor cache: sentinels, truncation, concat, file round trip") {
  memory::NeighborCache c(3, 4);
  NeighborSet full{{{5, 10, 2.5}, {6, 11, 1.5}, {7, 12, 0.5}}, false};
  NeighborSet partial{{{8, 20, 3.0}}, true};
  c.set(0, full);
  c.set(1, partial);
  CHECK(c.present(1, 0));
  CHECK_FALSE(c.present(1, 1));
  CHECK(c.position(1, 2) == memory::kAbsentPosition);
  auto g = c.get(1);
  CHECK(g.short_set);
  CHECK(g.entries.size() == 1);
  CHECK(c.get(3).entries.empty());

  auto t = c.truncated(1);
  CHECK(t.k() == 1);
  CHECK(t.value(0, 0) == 5);
  CHECK(t.value(1, 0) == 8);
  CHECK_THROWS_AS(c.truncated(4), Error);

  std::vector<memory::NeighborCache> parts{t, t};
  auto joined = memory::NeighborCache::concat(parts);
  CHECK(joined.size() == 8);
  CHECK(joined.value(5, 0) == 8);

  std::stringstream ss;
  c.write(ss);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 4 + 4 + 4 + 8 + 12 * 16 + 4);
  std::stringstream in(bytes);
  CHECK(memory::NeighborCache::read(in) == c);
  std::stringstream tr(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(memory::NeighborCache::read(tr), Error);
  std::string flipped = bytes;
  flipped[30] ^= 1;
  std::stringstream fl(flipped);
  CHECK_THROWS_WITH_AS(memory::NeighborCache::read(fl), doctest::Contains("checksum"), Error);
}

TEST_CASE("recall counts shared positions") {
  NeighborSet a{{{0, 1, 0}, {0, 2, 0}, {0, 3, 0}, {0, 4, 0}}, false};
  NeighborSet b{{{0, 1, 0}, {0, 9, 0}, {0, 3, 0}, {0, 8, 0}}, false};
  CHECK(memory::recall(a, b) == 0.5);
  CHECK(memory::recall(a, a) == 1.0);
}

TEST_CASE("batched approximate search equals per-query search") {
  for (Metric metric : {Metric::kInnerProduct, Metric::kL2}) {
    auto s = random_store(6000, 10, metric, 11);
    memory::AnnOptions o;
    o.partitions = 24;
    o.probes = 5;
    s.build_index(o);
    std::mt19937_64 rng(12);
    const std::size_t nq = 41;
    auto qs = gaussian(nq * 10, rng);
    std::vector<ExclusionRule> rules;
    for (std::size_t i = 0; i < nq; ++i) rules.push_back(ExclusionRule::around(i * 140, 70));
    auto batch = s.ann_topk_batch(qs, 6, rules);
    for (std::size_t i = 0; i < nq; ++i) {
      auto single = s.ann_topk(std::span<const double>(qs).subspan(i * 10, 10), 6, rules[i]);
      REQUIRE(single.entries.size() == batch[i].entries.size());
      for (std::size_t r = 0; r < single.entries.size(); ++r) {
        CHECK(single.entries[r].position == batch[i].entries[r].position);
        CHECK(single.entries[r].score == batch[i].entries[r].score);
      }
    }
  }
}
