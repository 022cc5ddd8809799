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


// Acceptance gate: one PASS/FAIL line per criterion. Criteria 5 and 6 train
// five 4-layer models on the 1M-token synthetic corpus and dominate the
// runtime. Usage: spalm_acceptance [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "op_catalogue.h"
#include "spalm/autodiff.h"
#include "spalm/binary_io.h"
#include "spalm/config.h"
#include "spalm/corpus.h"
#include "spalm/head.h"
#include "spalm/memory.h"
#include "spalm/pipeline.h"
#include "spalm/synthetic.h"
#include "spalm/transformer.h"

namespace {

using namespace spalm;
using namespace spalm::pipeline;
using ad::Tensor;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const Clock& global_clock() {
  static const Clock c;
  return c;
}

void progress(const std::string& line) {
  std::fprintf(stderr, "[%8.1fs] %s\n", global_clock().seconds(), line.c_str());
  std::fflush(stderr);
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradients() {
  const Clock clock;
  std::mt19937_64 rng(7);
  std::size_t cases = 0, failures = 0;
  std::string first_failure;
  for (const auto& op : testing::op_catalogue()) {
    for (int trial = 0; trial < 100; ++trial) {
      auto c = op.make(rng);
      const auto r = testing::grad_check(c.f, c.inputs, 1e-4, 1e-3);
      ++cases;
      if (!r.ok) {
        ++failures;
        if (first_failure.empty()) first_failure = op.name + ": " + r.detail;
      }
    }
  }

  // Stop-gradient: the detached branch contributes nothing, exactly.
  bool stop_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor w = testing::random_tensor({3, 4}, rng);
    Tensor frozen = ad::stop_gradient(ad::scale(w, 3.0));
    ad::backward(ad::sum(ad::mul(frozen, w)));
    const auto g = w.grad_or_zero();
    for (std::size_t i = 0; i < g.size(); ++i) stop_ok &= g[i] == frozen.data()[i];
    stop_ok &= !frozen.has_grad() || std::all_of(frozen.grad().begin(), frozen.grad().end(),
                                                 [](double x) { return x == 0.0; });
  }
  // The XL cache is a stop-gradient boundary.
  {
    model::ModelConfig c;
    c.num_layers = 2;
    c.d_model = 8;
    c.num_heads = 2;
    c.ffn_dim = 16;
    c.context_length = 8;
    c.cache_length = 8;
    c.vocab_size = 13;
    c.dropout = 0.0;
    Rng init(3);
    model::LanguageModel m(c, init);
    auto cache = m.make_cache(1, 8);
    Rng rng2(0);
    const std::vector<std::uint32_t> s1{1, 2, 3, 4}, s2{5, 6, 7, 8};
    const std::vector<std::uint8_t> mask(4, 1);
    auto out1 = m.forward({1, 4, s1, {}, {}}, cache, rng2, {.training = true});
    auto out2 = m.forward({1, 4, s2, {}, {}}, cache, rng2, {.training = true});
    ad::backward(ad::cross_entropy(out2.logits, s1, mask));
    for (const auto& t : out1.layer_inputs)
      for (double g : t.grad_or_zero()) stop_ok &= g == 0.0;
  }

  const double secs = clock.seconds();
  Outcome o;
  o.pass = failures == 0 && stop_ok && secs < 60.0;
  o.detail = std::to_string(testing::op_catalogue().size()) + " ops x 100 cases, " +
             std::to_string(failures) + " failures; stop-gradient " +
             (stop_ok ? "exact zero" : "LEAKS") + "; " + fmt("%.1fs", secs);
  if (!first_failure.empty()) o.detail += "; first failure " + first_failure;
  return o;
}

// ---------------------------------------------------------------------------
// 2. XL recurrence equivalence

std::vector<double> forward_nll(const model::LanguageModel& m,
                                std::span<const std::uint32_t> tokens,
                                std::span<const std::uint32_t> targets, model::XLCache& cache) {
  Rng rng(0);
  auto out = m.forward({1, tokens.size(), tokens, {}, {}}, cache, rng);
  const std::vector<std::uint8_t> mask(tokens.size(), 1);
  std::vector<double> nll;
  ad::cross_entropy(out.logits, targets, mask, &nll);
  return nll;
}

Outcome recurrence() {
  const Clock clock;
  std::mt19937_64 rng(11);
  double worst = 0.0;
  std::size_t sequences = 0;
  for (int trial = 0; trial < 40; ++trial) {
    model::ModelConfig c;
    c.num_layers = 2;
    c.d_model = 16;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.context_length = 64;
    c.cache_length = 64;
    c.eval_cache_length = 64;
    c.vocab_size = 37;
    c.dropout = 0.0;
    Rng init(rng());
    model::LanguageModel m(c, init);
    // Random, non-trivial parameters.
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& p : m.parameters())
      for (double& v : p.mutable_data()) v = nd(init);

    const std::size_t len = std::uniform_int_distribution<std::size_t>(2, 64)(rng);
    std::vector<std::uint32_t> tokens(len + 1);
    for (auto& t : tokens) t = std::uniform_int_distribution<std::uint32_t>(0, 36)(rng);
    std::span<const std::uint32_t> in(tokens.data(), len), tgt(tokens.data() + 1, len);

    auto joint_cache = m.make_cache(1, 64);
    const auto joint = forward_nll(m, in, tgt, joint_cache);

    auto cache = m.make_cache(1, 64);
    std::vector<double> segmented;
    for (std::size_t at = 0; at < len;) {
      const std::size_t n = std::min(len - at, std::uniform_int_distribution<std::size_t>(1, 16)(rng));
      const auto part = forward_nll(m, in.subspan(at, n), tgt.subspan(at, n), cache);
      segmented.insert(segmented.end(), part.begin(), part.end());
      at += n;
    }
    for (std::size_t i = 0; i < len; ++i) worst = std::max(worst, std::abs(joint[i] - segmented[i]));
    ++sequences;
  }
  const double secs = clock.seconds();
  Outcome o;
  o.pass = worst <= 1e-6 && secs < 60.0;
  o.detail = std::to_string(sequences) + " random 2-layer models, lengths <= 64, random segment "
             "splits; max |dNLL| = " + fmt("%.3g", worst) + "; " + fmt("%.1fs", secs);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Reduction invariants

struct SmallData {
  corpus::Vocabulary vocab;
  TokenizedCorpus train, dev;
};

SmallData word_data(std::uint64_t seed) {
  synthetic::SyntheticOptions o;
  o.train_tokens = 6000;
  o.dev_tokens = 1500;
  o.test_tokens = 50;
  o.filler_words = 40;
  o.titles = 8;
  o.names = 64;
  o.attributes = 64;
  o.entities = 60;
  o.filler_mean_length = 6;
  o.seed = seed;
  auto c = synthetic::generate(o);
  SmallData d;
  d.vocab = corpus::Vocabulary::build(c.train + c.dev, corpus::TokenLevel::kWord);
  d.train = corpus::tokenize(c.train, d.vocab);
  d.dev = corpus::tokenize(c.dev, d.vocab);
  return d;
}

SmallData char_data() {
  SmallData d;
  const std::string train =
      "the quick brown fox jumps over the lazy dog\n\nall work and no play makes jack a dull "
      "boy\n\npack my box with five dozen liquor jugs\n";
  const std::string dev = "the lazy dog sleeps\n\nfive boxes of jugs\n";
  d.vocab = corpus::Vocabulary::build(train, corpus::TokenLevel::kChar);
  d.train = corpus::tokenize(train, d.vocab);
  d.dev = corpus::tokenize(dev, d.vocab);
  return d;
}

model::ModelConfig small_config(std::size_t vocab, std::uint32_t k) {
  model::ModelConfig c;
  c.num_layers = 2;
  c.d_model = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.context_length = 8;
  c.cache_length = 8;
  c.eval_cache_length = 16;
  c.vocab_size = static_cast<std::uint32_t>(vocab);
  c.neighbor_count = k;
  c.dropout = 0.1;
  return c;
}

TrainOptions small_training(std::size_t steps, std::uint64_t seed) {
  TrainOptions o;
  o.lanes = 4;
  o.max_steps = steps;
  o.warmup_steps = 5;
  o.learning_rate = 3e-3;
  o.eval_interval = 0;
  o.patience = 0;
  o.seed = seed;
  return o;
}

Outcome reductions() {
  double worst_gate = 0.0;
  bool knn_exact = true;
  std::size_t tokens = 0;
  int corpora = 0;
  for (const auto& d : {word_data(3), word_data(4), char_data()}) {
    ++corpora;
    const auto V = d.vocab.size();
    // XL model, then a memory model sharing every transformer tensor.
    Trainer xl_trainer(d.train, small_training(30, 2));
    Rng init(2);
    auto xl_state = xl_trainer.initial_state(model::LanguageModel(small_config(V, 0), init));
    xl_trainer.run(xl_state, {});
    const auto& xl = xl_state.model;
    Rng init2(5);
    model::LanguageModel sp(small_config(V, 4), init2);
    warm_start(sp, xl);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& w : sp.gate_weight().mutable_data()) w = nd(init2);

    const auto nn = random_neighbors(d.dev, 4, V, 9);
    EvalOptions xo;
    xo.mode = EvalMode::kXL;
    xo.keep_records = true;
    const auto base = evaluate(xl, d.dev, nullptr, xo);
    EvalOptions so = xo;
    so.mode = EvalMode::kSpalm;
    so.gate = model::GateOverride::kForceOne;
    const auto forced = evaluate(sp, d.dev, &nn, so);
    for (std::size_t i = 0; i < base.records.size(); ++i)
      worst_gate = std::max(worst_gate, std::abs(base.records[i].nll - forced.records[i].nll));
    tokens += base.records.size();

    EvalOptions ko = xo;
    ko.mode = EvalMode::kKnnLm;
    ko.lambda = 1.0;
    const auto knn = evaluate(xl, d.dev, &nn, ko);
    knn_exact &= knn.total_nll == base.total_nll;
    for (std::size_t i = 0; i < base.records.size(); ++i)
      knn_exact &= knn.records[i].nll == base.records[i].nll;
  }
  Outcome o;
  o.pass = worst_gate <= 1e-9 && knn_exact;
  o.detail = std::to_string(corpora) + " corpora (2 word, 1 char), " + std::to_string(tokens) +
             " tokens; gate=1 max |dNLL| vs XL = " + fmt("%.3g", worst_gate) +
             "; kNN-LM at lambda=1 " + (knn_exact ? "bit-identical" : "DIFFERS");
  return o;
}

// ---------------------------------------------------------------------------
// 4. Retrieval

struct Hit {
  double score;
  std::uint64_t position;
};

std::vector<Hit> linear_scan(const memory::EpisodicStore& s, std::span<const double> q,
                             std::size_t k) {
  std::vector<Hit> all(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    long double v = 0;
    const auto key = s.key(i);
    for (std::size_t t = 0; t < s.dim(); ++t) {
      const long double kv = key[t];
      v += s.metric() == memory::Metric::kInnerProduct ? q[t] * kv : -(q[t] - kv) * (q[t] - kv);
    }
    all[i] = {static_cast<double>(v), s.position(i)};
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const Hit& a, const Hit& b) {
                      return a.score > b.score || (a.score == b.score && a.position < b.position);
                    });
  all.resize(k);
  return all;
}

// Equal positions rank by rank, except that records whose scores agree to
// rounding may swap.
bool matches_scan(const memory::NeighborSet& got, const std::vector<Hit>& want) {
  if (got.entries.size() != want.size()) return false;
  for (std::size_t r = 0; r < want.size(); ++r) {
    const auto& e = got.entries[r];
    if (std::abs(e.score - want[r].score) > 1e-9 * (1.0 + std::abs(want[r].score))) return false;
    if (e.position == want[r].position) continue;
    const bool tie = std::any_of(want.begin(), want.end(), [&](const Hit& h) {
      return h.position == e.position && std::abs(h.score - e.score) <= 1e-9 * (1.0 + std::abs(h.score));
    });
    if (!tie) return false;
  }
  return true;
}

Outcome retrieval() {
  const Clock clock;
  constexpr std::size_t kRecords = 100'000, kDim = 64, kQueries = 1000, kK = 4;
  std::string detail;
  bool pass = true;
  for (auto metric : {memory::Metric::kInnerProduct, memory::Metric::kL2}) {
    std::mt19937_64 rng(metric == memory::Metric::kInnerProduct ? 101 : 202);
    std::normal_distribution<double> nd(0.0, 1.0);
    memory::EpisodicStore store(kDim, metric);
    store.reserve(kRecords);
    std::vector<double> key(kDim);
    for (std::size_t i = 0; i < kRecords; ++i) {
      for (double& x : key) x = nd(rng);
      store.add(key, static_cast<std::uint32_t>(i % 1000), i);
    }
    std::vector<double> queries(kQueries * kDim);
    for (double& x : queries) x = nd(rng);
    store.build_index();
    const auto exact = store.exact_topk_batch(queries, kK);
    const auto approx = store.ann_topk_batch(queries, kK);
    double recall_sum = 0.0;
    std::size_t scan_mismatches = 0;
    for (std::size_t q = 0; q < kQueries; ++q) {
      recall_sum += memory::recall(approx[q], exact[q]);
      const std::span<const double> query(queries.data() + q * kDim, kDim);
      if (!matches_scan(exact[q], linear_scan(store, query, kK))) ++scan_mismatches;
    }
    const double recall = recall_sum / kQueries;
    pass &= recall >= 0.95 && scan_mismatches == 0;
    detail += std::string(metric == memory::Metric::kInnerProduct ? "ip" : "l2") +
              ": recall@4 " + fmt("%.4f", recall) + ", exact vs scan mismatches " +
              std::to_string(scan_mismatches) + "/" + std::to_string(kQueries) + "; ";
  }
  const double secs = clock.seconds();
  pass &= secs < 300.0;
  return {pass, "100k x 64-dim records, 1000 queries; " + detail + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------------------
// 7. Match-rate instrumentation

std::optional<double> experiment_dev_rank1;

Outcome match_rates() {
  const auto d = word_data(6);
  const auto V = d.vocab.size();
  Rng init(4);
  model::LanguageModel sp(small_config(V, 4), init);
  AnalyzeOptions ao;
  const auto oracle = analyze(sp, d.dev, oracle_neighbors(d.dev, 4), ao);
  bool pass = oracle.rank1_match() == 1.0 && oracle.match_within_rank.back() == 1.0;

  // Random cache: rank-1 matches are Bernoulli(1/V) per scored token.
  const auto random = analyze(sp, d.dev, random_neighbors(d.dev, 4, V, 12), ao);
  const double p = 1.0 / static_cast<double>(V);
  const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(random.tokens));
  const double z = (random.rank1_match() - p) / se;
  pass &= std::abs(z) <= 3.0;
  std::string detail = "oracle rank-1 " + fmt("%.6f", oracle.rank1_match()) + "; random rank-1 " +
                       fmt("%.5f", random.rank1_match()) + " vs 1/V " + fmt("%.5f", p) + " (" +
                       fmt("%+.2f", z) + " SE over " + std::to_string(random.tokens) + " tokens)";
  if (experiment_dev_rank1)
    detail += "; synthetic dev rank-1 with trained keys " + fmt("%.3f", *experiment_dev_rank1) +
              " (reported, not gated)";
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

std::string model_bytes(const model::LanguageModel& m) {
  std::ostringstream os;
  m.write(os);
  return os.str();
}

Outcome persistence() {
  const auto d = word_data(8);
  const auto V = d.vocab.size();
  bool pass = true;
  std::string detail;

  Rng enc_init(1);
  const model::LanguageModel encoder(small_config(V, 0), enc_init);
  const auto keys = encode_corpus(encoder, d.train, 4, 0);
  const auto store = build_store(keys, d.train, memory::Metric::kInnerProduct);
  NeighborSearchOptions so;
  so.k = 4;
  so.radius = 8;
  so.workers = 3;
  const auto train_nn = precompute_neighbors(store, keys, d.train.size() - 1, &d.train, so);
  so.workers = 1;
  pass &= precompute_neighbors(store, keys, d.train.size() - 1, &d.train, so) == train_nn;
  const auto dev_keys = encode_corpus(encoder, d.dev, 4, 0);
  so.exclusion = Exclusion::kNone;
  const auto dev_nn = precompute_neighbors(store, dev_keys, d.dev.size() - 1, nullptr, so);

  auto run = [&] {
    EvalOptions eo;
    eo.mode = EvalMode::kSpalm;
    return train_model(small_config(V, 4), d.train, &train_nn, d.dev, &dev_nn,
                       small_training(40, 3), eo);
  };
  const auto a = run();
  const auto b = run();
  const bool same_ckpt = model_bytes(a.best) == model_bytes(b.best);
  pass &= same_ckpt;
  detail += std::string("rerun checkpoints ") + (same_ckpt ? "bit-identical" : "DIFFER");

  const auto dir = std::filesystem::temp_directory_path() / "spalm_acceptance";
  std::filesystem::create_directories(dir);
  store.save(dir / "store.spkv");
  dev_nn.save(dir / "dev.spnn");
  a.best.save(dir / "model.ckpt");
  const auto loaded_store = memory::EpisodicStore::load(dir / "store.spkv");
  const auto loaded_nn = NeighborCache::load(dir / "dev.spnn");
  const auto loaded_model = model::LanguageModel::load(dir / "model.ckpt");
  loaded_store.save(dir / "store2.spkv");
  bool lossless = loaded_nn == dev_nn && model_bytes(loaded_model) == model_bytes(a.best) &&
                  io::file_crc32(dir / "store.spkv") == io::file_crc32(dir / "store2.spkv") &&
                  loaded_store.size() == store.size();
  for (std::size_t i = 0; lossless && i < store.size(); ++i) {
    lossless &= std::equal(store.key(i).begin(), store.key(i).end(), loaded_store.key(i).begin()) &&
                store.value(i) == loaded_store.value(i) &&
                store.position(i) == loaded_store.position(i);
  }
  pass &= lossless;
  detail += std::string("; store/cache/checkpoint round trip ") + (lossless ? "lossless" : "LOSSY");

  const auto store_crc = io::file_crc32(dir / "store.spkv");
  const auto nn_crc = io::file_crc32(dir / "dev.spnn");
  EvalOptions eo;
  eo.mode = EvalMode::kSpalmKnn;
  eo.lambda = 0.3;
  eo.keep_records = true;
  const auto r1 = evaluate(loaded_model, d.dev, &loaded_nn, eo);
  const auto r2 = evaluate(loaded_model, d.dev, &loaded_nn, eo);
  const bool same_report = r1.lines() == r2.lines();
  const bool untouched = io::file_crc32(dir / "store.spkv") == store_crc &&
                         io::file_crc32(dir / "dev.spnn") == nn_crc && loaded_nn == dev_nn;
  pass &= same_report && untouched;
  detail += std::string("; reports ") + (same_report ? "bit-identical" : "DIFFER") +
            "; inputs after evaluation " + (untouched ? "checksum-unchanged" : "MODIFIED");
  std::filesystem::remove_all(dir);
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 9. Lambda grid

Outcome lambda_grid() {
  const std::vector<double> grid(std::begin(head::kDefaultLambdaGrid),
                                 std::end(head::kDefaultLambdaGrid));
  bool pass = grid == std::vector<double>{0.05, 0.1, 0.2, 0.3, 0.4};
  const auto d = word_data(9);
  const auto V = d.vocab.size();
  Trainer t(d.train, small_training(30, 4));
  Rng init(4);
  auto st = t.initial_state(model::LanguageModel(small_config(V, 0), init));
  t.run(st, {});
  EvalOptions eo;
  eo.mode = EvalMode::kKnnLm;
  const auto base = evaluate(st.model, d.dev, nullptr, {});

  const double one[] = {1.0};
  const auto r1 = tune_lambda(st.model, d.dev, random_neighbors(d.dev, 4, V, 3), one, eo);
  const bool trivial = r1.best_lambda == 1.0 && r1.perplexity[0].second == base.perplexity();
  const auto ro = tune_lambda(st.model, d.dev, oracle_neighbors(d.dev, 4), grid, eo);
  const bool oracle = ro.best_lambda == 0.05;
  pass &= trivial && oracle;
  return {pass, "default grid {0.05, 0.1, 0.2, 0.3, 0.4}; grid {1} -> " +
                    fmt("%.2f", r1.best_lambda) + " with base perplexity " +
                    (trivial ? "reproduced" : "NOT reproduced") + "; oracle cache -> " +
                    fmt("%.2f", ro.best_lambda)};
}

// ---------------------------------------------------------------------------
// 5 and 6. Trained experiments on the synthetic long-range corpus

struct Experiment {
  corpus::Vocabulary vocab;
  TokenizedCorpus train, dev;
  model::ModelConfig base;
  TrainOptions training;
  EvalOptions xl_eval;
  std::optional<model::LanguageModel> xl;
  double xl_dev = 0.0;
  std::size_t xl_params = 0;
  double shared_seconds = 0.0;  // corpus generation and the XL baseline
};

constexpr std::uint32_t kNeighbors = 4;

model::ModelConfig experiment_config(std::size_t vocab) {
  model::ModelConfig c;  // 4 layers, d = 128, 4 heads, FFN 512
  c.context_length = 64;
  c.cache_length = 64;
  c.eval_cache_length = 64;
  c.dropout = 0.1;
  c.vocab_size = static_cast<std::uint32_t>(vocab);
  return c;
}

TrainOptions experiment_training() {
  TrainOptions o;
  o.lanes = 8;
  o.learning_rate = 1e-3;
  o.warmup_steps = 200;
  o.max_steps = 2000;
  o.eval_interval = 500;
  o.patience = 0;
  o.seed = 1;
  return o;
}

std::function<void(const std::string&)> tagged(const std::string& tag) {
  return [tag](const std::string& l) { progress(tag + ": " + l); };
}

Experiment& experiment() {
  static Experiment e = [] {
    const Clock clock;
    Experiment x;
    const auto corpus = synthetic::generate(synthetic::SyntheticOptions{});
    x.vocab = corpus::Vocabulary::build(corpus.train, corpus::TokenLevel::kWord);
    x.train = corpus::tokenize(corpus.train, x.vocab);
    x.dev = corpus::tokenize(corpus.dev, x.vocab);
    progress("synthetic corpus: V=" + std::to_string(x.vocab.size()) + " train=" +
             std::to_string(x.train.size()) + " dev=" + std::to_string(x.dev.size()));
    x.base = experiment_config(x.vocab.size());
    x.training = experiment_training();
    x.xl_eval.mode = EvalMode::kXL;
    auto r = train_model(x.base, x.train, nullptr, x.dev, nullptr, x.training, x.xl_eval, nullptr,
                         tagged("xl"));
    x.xl_dev = r.best_dev_nll;
    x.xl_params = r.best.parameter_count();
    x.xl = std::move(r.best);
    x.shared_seconds = clock.seconds();
    return x;
  }();
  return e;
}

struct MemoryModel {
  model::LanguageModel model;
  double dev_nll = 0.0;
  double mean_gate = 0.0;
};

MemoryModel train_memory_model(const Experiment& x, const NeighborCache& train_nn,
                               const NeighborCache& dev_nn, const std::string& tag) {
  auto c = x.base;
  c.neighbor_count = kNeighbors;
  EvalOptions eo;
  eo.mode = EvalMode::kSpalm;
  auto r = train_model(c, x.train, &train_nn, x.dev, &dev_nn, x.training, eo, nullptr, tagged(tag));
  AnalyzeOptions ao;
  ao.eval = eo;
  const auto a = analyze(r.best, x.dev, dev_nn, ao);
  progress(tag + ": dev_nll=" + fmt("%.4f", r.best_dev_nll) + " mean_gate=" + fmt("%.3f", a.mean_gate));
  return {std::move(r.best), r.best_dev_nll, a.mean_gate};
}

Outcome ordering() {
  const Clock clock;
  auto& x = experiment();

  auto c0 = x.base;
  c0.cache_length = 0;
  c0.eval_cache_length = 0;
  EvalOptions to;
  to.mode = EvalMode::kTransformer;
  auto tr = train_model(c0, x.train, nullptr, x.dev, nullptr, x.training, to, nullptr,
                        tagged("transformer"));
  const double tf_dev = tr.best_dev_nll;

  // The trained transformer is the frozen encoder for the memory keys.
  const auto keys = encode_corpus(tr.best, x.train, 16, 0);
  const auto store = build_store(keys, x.train, memory::Metric::kInnerProduct);
  progress("store: " + std::to_string(store.size()) + " records");
  auto indexed = store;
  memory::AnnOptions ann;
  ann.partitions = 1024;
  ann.probes = 16;
  indexed.build_index(ann);
  NeighborSearchOptions so;
  so.k = kNeighbors;
  so.exclusion = Exclusion::kWindow;
  so.radius = x.base.context_length;
  so.approximate = true;
  const auto train_nn = precompute_neighbors(indexed, keys, x.train.size() - 1, &x.train, so);
  progress("train neighbors done");
  const auto dev_keys = encode_corpus(tr.best, x.dev, 16, 0);
  so.exclusion = Exclusion::kNone;
  so.approximate = false;
  const auto dev_nn = precompute_neighbors(store, dev_keys, x.dev.size() - 1, nullptr, so);
  AnalyzeOptions ao;
  ao.eval.mode = EvalMode::kSpalm;
  {
    std::uint64_t hits = 0, scored = 0;
    for (std::size_t t = 0; t + 1 < x.dev.size(); ++t) {
      if (x.dev.ids[t + 1] == 0) continue;
      ++scored;
      hits += dev_nn.present(t, 0) && dev_nn.value(t, 0) == x.dev.ids[t + 1];
    }
    experiment_dev_rank1 = static_cast<double>(hits) / static_cast<double>(scored);
  }

  const auto sp = train_memory_model(x, train_nn, dev_nn, "spalm");
  const double secs = clock.seconds() + x.shared_seconds;
  const double margin = x.xl_dev - sp.dev_nll;
  Outcome o;
  o.pass = sp.dev_nll < x.xl_dev && x.xl_dev < tf_dev && margin >= 0.02 && secs <= 7200.0;
  o.detail = "dev NLL transformer " + fmt("%.4f", tf_dev) + ", XL " + fmt("%.4f", x.xl_dev) +
             ", SPALM " + fmt("%.4f", sp.dev_nll) + " (margin " + fmt("%.4f", margin) +
             " nats/token, need >= 0.02); parameters XL " + std::to_string(x.xl_params) +
             ", SPALM " + std::to_string(sp.model.parameter_count()) + "; " + fmt("%.0fs", secs);
  return o;
}

Outcome gate_adaptivity() {
  const Clock clock;
  auto& x = experiment();
  const auto V = x.vocab.size();
  const auto oracle = train_memory_model(x, oracle_neighbors(x.train, kNeighbors),
                                         oracle_neighbors(x.dev, kNeighbors), "oracle");
  const auto random = train_memory_model(x, random_neighbors(x.train, kNeighbors, V, 21),
                                         random_neighbors(x.dev, kNeighbors, V, 22), "random");
  const double secs = clock.seconds() + x.shared_seconds;
  const double gap = std::abs(random.dev_nll - x.xl_dev);
  Outcome o;
  o.pass = oracle.mean_gate < 0.5 && random.mean_gate > 0.8 && gap <= 0.02 && secs <= 7200.0;
  o.detail = "mean dev gate: oracle cache " + fmt("%.3f", oracle.mean_gate) +
             " (need < 0.5), random cache " + fmt("%.3f", random.mean_gate) +
             " (need > 0.8); random-cache dev NLL " + fmt("%.4f", random.dev_nll) + " vs XL " +
             fmt("%.4f", x.xl_dev) + " (|diff| " + fmt("%.4f", gap) + ", need <= 0.02); " +
             fmt("%.0fs", secs);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: spalm_acceptance [--only 1,2,...]\n";
      return 2;
    }
  }
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradients},   {2, recurrence}, {3, reductions},      {4, retrieval},
      {8, persistence}, {9, lambda_grid}, {5, ordering},       {6, gate_adaptivity},
      {7, match_rates}};
  const std::map<int, std::string> names = {
      {1, "gradient correctness"},  {2, "XL recurrence equivalence"},
      {3, "reduction invariants"},  {4, "retrieval oracle equivalence"},
      {5, "ordering experiment"},   {6, "gate adaptivity"},
      {7, "match-rate instrumentation"}, {8, "determinism and persistence"},
      {9, "lambda grid tuning"}};
  std::map<int, Outcome> results;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    progress("criterion " + std::to_string(id) + ": " + names.at(id));
    try {
      results[id] = run();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("exception: ") + e.what()};
    }
    const auto& r = results[id];
    std::printf("criterion %d %s: %s: %s\n", id, r.pass ? "PASS" : "FAIL", names.at(id).c_str(),
                r.detail.c_str());
    std::fflush(stdout);
  }
  const auto passed = std::count_if(results.begin(), results.end(),
                                    [](const auto& kv) { return kv.second.pass; });
  std::printf("acceptance: %td/%zu criteria passed\n", passed, results.size());
  return passed == static_cast<std::ptrdiff_t>(results.size()) ? 0 : 1;
}
