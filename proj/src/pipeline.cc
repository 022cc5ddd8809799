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


#include "spalm/pipeline.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "spalm/binary_io.h"
#include "spalm/config.h"
#include "spalm/head.h"

namespace spalm::pipeline {

namespace {

constexpr std::uint32_t kTrainStateVersion = 1;

struct Batch {
  std::vector<corpus::Segment> segments;
  std::vector<std::uint32_t> tokens, targets;
  std::vector<std::uint8_t> mask;
};

Batch make_batch(const corpus::LaneStreams& streams, std::size_t index, std::size_t n) {
  Batch b;
  for (std::size_t lane = 0; lane < streams.lanes(); ++lane) {
    b.segments.push_back(streams.segment(lane, index, n));
    const auto& s = b.segments.back();
    b.tokens.insert(b.tokens.end(), s.inputs.begin(), s.inputs.end());
    b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
  }
  return b;
}

std::size_t scored(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

}  // namespace

NeighborBatch gather_neighbors(const NeighborCache* cache,
                               std::span<const corpus::Segment> segments, std::size_t k) {
  NeighborBatch nb;
  std::size_t rows = 0;
  for (const auto& s : segments) rows += s.inputs.size();
  nb.ids.assign(rows * k, 0);
  nb.valid.assign(rows * k, 0);
  if (cache) SPALM_CHECK(k <= cache->k(), "K=" << k << " exceeds cached K=" << cache->k());
  std::size_t row = 0;
  for (const auto& s : segments) {
    for (std::size_t i = 0; i < s.inputs.size(); ++i, ++row) {
      const std::uint64_t p = s.positions[i];
      if (!cache || p == corpus::kNoPosition || p >= cache->size()) continue;
      for (std::size_t r = 0; r < k; ++r) {
        if (!cache->present(p, r)) continue;
        nb.ids[row * k + r] = cache->value(p, r);
        nb.valid[row * k + r] = 1;
      }
    }
  }
  return nb;
}

void check_alignment(const NeighborCache& cache, const TokenizedCorpus& corpus, std::size_t k) {
  const std::size_t expected = corpus.size() > 0 ? corpus.size() - 1 : 0;
  SPALM_CHECK(cache.size() == expected, "neighbor cache has " << cache.size()
                                            << " records but the corpus needs " << expected);
  SPALM_CHECK(k <= cache.k(), "K=" << k << " exceeds cached K=" << cache.k());
}

// ---------------------------------------------------------------------------

void TrainOptions::validate() const {
  SPALM_CHECK(lanes >= 1, "lanes must be >= 1");
  SPALM_CHECK(learning_rate > 0.0, "learning_rate must be > 0");
  SPALM_CHECK(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0,
              "final_lr_fraction must be in [0, 1]");
  SPALM_CHECK(clip_norm >= 0.0, "clip_norm must be >= 0");
  SPALM_CHECK(max_steps >= 1, "max_steps must be >= 1");
}

void TrainState::write(std::ostream& os) const {
  io::write_magic(os, "SPTS");
  io::write_u32(os, kTrainStateVersion);
  model.write(os);
  adam.write(os);
  io::write_u64(os, step);
  io::write_u64(os, epoch);
  io::write_u64(os, cursor);
  std::ostringstream engine;
  engine << rng;
  io::write_string(os, engine.str());
  cache.write(os);
  io::write_f64(os, best_dev_nll);
  io::write_u64(os, best_step);
  io::write_u64(os, stale_evals);
}

TrainState TrainState::read(std::istream& is) {
  io::expect_magic(is, "SPTS");
  const auto version = io::read_u32(is, "train_state.version");
  SPALM_CHECK(version == kTrainStateVersion, "unsupported train state version " << version);
  TrainState s;
  s.model = LanguageModel::read(is);
  s.adam = ad::AdamState::read(is);
  s.step = io::read_u64(is, "train_state.step");
  s.epoch = io::read_u64(is, "train_state.epoch");
  s.cursor = io::read_u64(is, "train_state.cursor");
  std::istringstream engine(io::read_string(is, "train_state.rng"));
  engine >> s.rng;
  SPALM_CHECK(!engine.fail(), "corrupt engine state in train state");
  s.cache = model::XLCache::read(is);
  s.best_dev_nll = io::read_f64(is, "train_state.best_dev_nll");
  s.best_step = io::read_u64(is, "train_state.best_step");
  s.stale_evals = io::read_u64(is, "train_state.stale_evals");
  return s;
}

void TrainState::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  SPALM_CHECK(os, "cannot write " << path);
  write(os);
  SPALM_CHECK(os.good(), "write failed for " << path);
}

TrainState TrainState::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  SPALM_CHECK(is, "cannot open " << path);
  return read(is);
}

std::size_t warm_start(LanguageModel& target, const LanguageModel& source) {
  const auto src = source.parameters();
  const auto src_names = source.parameter_names();
  auto dst = target.parameters();
  const auto dst_names = target.parameter_names();
  std::size_t copied = 0;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t j = 0; j < src.size(); ++j) {
      if (src_names[j] != dst_names[i] || src[j].shape() != dst[i].shape()) continue;
      std::copy(src[j].data().begin(), src[j].data().end(), dst[i].mutable_data().begin());
      ++copied;
      break;
    }
  }
  return copied;
}

Trainer::Trainer(const TokenizedCorpus& train, TrainOptions options,
                 const NeighborCache* neighbors)
    : train_(train), options_(options), neighbors_(neighbors), streams_(train, options.lanes) {
  options_.validate();
  SPALM_CHECK(train.size() >= 2, "training corpus needs at least two tokens");
}

void Trainer::check_model(const LanguageModel& model) const {
  const auto& c = model.config();
  if (!c.uses_memory()) return;
  SPALM_CHECK(neighbors_ != nullptr, "a memory model needs a training neighbor cache");
  check_alignment(*neighbors_, train_, c.neighbor_count);
}

TrainState Trainer::initial_state(const ModelConfig& config) const {
  Rng init(options_.seed);
  return initial_state(LanguageModel(config, init));
}

TrainState Trainer::initial_state(LanguageModel model) const {
  check_model(model);
  TrainState s;
  s.adam = ad::AdamState::for_params(model.parameters(), options_.adam);
  s.cache = model.make_cache(options_.lanes, model.config().cache_length);
  s.rng = Rng(options_.seed ^ 0x9e3779b97f4a7c15ULL);
  s.model = std::move(model);
  return s;
}

double Trainer::learning_rate(std::uint64_t step) const {
  const double base = options_.learning_rate;
  const auto warmup = static_cast<double>(options_.warmup_steps);
  const auto s = static_cast<double>(step);
  if (s < warmup) return base * (s + 1.0) / warmup;
  const double span = std::max(1.0, static_cast<double>(options_.max_steps) - warmup);
  const double progress = std::clamp((s - warmup) / span, 0.0, 1.0);
  const double f = options_.final_lr_fraction;
  return base * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

StepResult Trainer::step(TrainState& state) const {
  check_model(state.model);
  const auto& c = state.model.config();
  const std::size_t n = c.context_length;
  const std::size_t segments = streams_.num_segments(n);
  if (state.cursor >= segments) {
    state.cursor = 0;
    ++state.epoch;
    state.cache.reset();
  }
  Batch b = make_batch(streams_, state.cursor, n);
  NeighborBatch nb;
  if (c.uses_memory()) nb = gather_neighbors(neighbors_, b.segments, c.neighbor_count);

  auto params = state.model.parameters();
  for (auto& p : params) p.zero_grad();
  model::ForwardBatch fb{options_.lanes, n, b.tokens, nb.ids, nb.valid};
  model::ForwardOptions fo;
  fo.training = true;
  fo.gate = options_.gate;
  auto out = state.model.forward(fb, state.cache, state.rng, fo);

  StepResult r;
  r.tokens = scored(b.mask);
  r.learning_rate = learning_rate(state.step);
  if (r.tokens > 0) {
    ad::Tensor loss = ad::scale(ad::cross_entropy(out.logits, b.targets, b.mask),
                                1.0 / static_cast<double>(r.tokens));
    r.loss = loss.data()[0];
    SPALM_CHECK(std::isfinite(r.loss), "training diverged: loss " << r.loss << " at step "
                                                                  << state.step << " (epoch "
                                                                  << state.epoch << ")");
    ad::backward(loss);
    const double clip =
        options_.clip_norm > 0.0 ? options_.clip_norm : std::numeric_limits<double>::infinity();
    r.grad_norm = ad::clip_grad_norm(params, clip);
    SPALM_CHECK(std::isfinite(r.grad_norm),
                "training diverged: gradient norm " << r.grad_norm << " at step " << state.step);
    ad::adam_step(params, state.adam, r.learning_rate);
  }
  for (auto& p : params) p.zero_grad();
  ++state.step;
  ++state.cursor;
  return r;
}

Trainer::RunSummary Trainer::run(TrainState& state, const Hooks& hooks) const {
  RunSummary summary;
  while (state.step < options_.max_steps) {
    const StepResult r = step(state);
    ++summary.steps;
    if (hooks.on_step) hooks.on_step(state, r);
    const bool due = (options_.eval_interval > 0 && state.step % options_.eval_interval == 0) ||
                     state.step == options_.max_steps;
    if (!hooks.dev_nll || !due) continue;
    const double dev = hooks.dev_nll(state.model);
    if (dev < state.best_dev_nll) {
      state.best_dev_nll = dev;
      state.best_step = state.step;
      state.stale_evals = 0;
      if (hooks.on_best) hooks.on_best(state);
    } else {
      ++state.stale_evals;
    }
    if (hooks.on_eval) hooks.on_eval(state, dev);
    if (options_.patience > 0 && state.stale_evals >= options_.patience) {
      summary.stopped_early = true;
      break;
    }
  }
  return summary;
}

// ---------------------------------------------------------------------------

std::vector<float> encode_corpus(const LanguageModel& encoder, const TokenizedCorpus& corpus,
                                 std::size_t lanes, std::size_t cache_length) {
  const auto& c = encoder.config();
  SPALM_CHECK(!c.uses_memory(), "the encoder must be a model without long-term memory");
  SPALM_CHECK(lanes >= 1, "lanes must be >= 1");
  ad::NoGradGuard no_grad;
  const std::size_t n = c.context_length, d = c.d_model;
  corpus::LaneStreams streams(corpus, lanes);
  auto cache = encoder.make_cache(lanes, cache_length);
  std::vector<float> keys(corpus.size() * d, 0.0f);
  Rng unused(0);
  for (std::size_t s = 0, segs = streams.num_segments(n); s < segs; ++s) {
    Batch b = make_batch(streams, s, n);
    auto out = encoder.forward({lanes, n, b.tokens, {}, {}}, cache, unused);
    const auto h = out.hidden.data();
    std::size_t row = 0;
    for (const auto& seg : b.segments) {
      for (std::size_t i = 0; i < n; ++i, ++row) {
        const std::uint64_t p = seg.positions[i];
        if (p == corpus::kNoPosition) continue;
        std::copy(h.begin() + static_cast<std::ptrdiff_t>(row * d),
                  h.begin() + static_cast<std::ptrdiff_t>((row + 1) * d),
                  keys.begin() + static_cast<std::ptrdiff_t>(p * d));
      }
    }
  }
  return keys;
}

EpisodicStore build_store(std::span<const float> keys, const TokenizedCorpus& corpus,
                          memory::Metric metric) {
  SPALM_CHECK(corpus.size() >= 2, "corpus needs at least two tokens");
  SPALM_CHECK(keys.size() % corpus.size() == 0,
              "key matrix size " << keys.size() << " is not a multiple of corpus length "
                                 << corpus.size());
  const std::size_t d = keys.size() / corpus.size();
  EpisodicStore store(d, metric);
  store.reserve(corpus.size() - 1);
  std::vector<double> key(d);
  for (std::size_t t = 0; t + 1 < corpus.size(); ++t) {
    std::copy(keys.begin() + static_cast<std::ptrdiff_t>(t * d),
              keys.begin() + static_cast<std::ptrdiff_t>((t + 1) * d), key.begin());
    store.add(key, corpus.ids[t + 1], t);
  }
  return store;
}

std::string_view exclusion_name(Exclusion e) {
  switch (e) {
    case Exclusion::kNone: return "none";
    case Exclusion::kWindow: return "window";
    case Exclusion::kDocument: return "document";
  }
  return "?";
}

Exclusion parse_exclusion(std::string_view name) {
  if (name == "none") return Exclusion::kNone;
  if (name == "window") return Exclusion::kWindow;
  if (name == "document") return Exclusion::kDocument;
  throw Error("unknown exclusion '" + std::string(name) + "' (none|window|document)");
}

NeighborCache precompute_neighbors(const EpisodicStore& store, std::span<const float> queries,
                                   std::size_t count, const TokenizedCorpus* store_corpus,
                                   const NeighborSearchOptions& options) {
  const std::size_t d = store.dim();
  SPALM_CHECK(options.k >= 1, "K must be >= 1");
  SPALM_CHECK(options.block >= 1 && options.workers >= 1, "block and workers must be >= 1");
  SPALM_CHECK(queries.size() >= count * d,
              "query matrix holds " << queries.size() / d << " rows, need " << count);
  if (options.exclusion != Exclusion::kNone) {
    SPALM_CHECK(store_corpus != nullptr, "exclusion needs the corpus the store was built from");
    SPALM_CHECK(store_corpus->size() == store.size() + 1,
                "store/corpus length mismatch: " << store.size() << " records for a corpus of "
                                                 << store_corpus->size() << " tokens");
    SPALM_CHECK(count <= store.size(), "more queries than store records under exclusion");
  }
  if (options.approximate) SPALM_CHECK(store.index().built(), "approximate search needs an index");

  auto rule_for = [&](std::uint64_t t) {
    switch (options.exclusion) {
      case Exclusion::kNone: return memory::ExclusionRule::none();
      case Exclusion::kWindow: return memory::ExclusionRule::around(t, options.radius);
      case Exclusion::kDocument: {
        const auto& off = store_corpus->doc_offsets;
        const auto it = std::upper_bound(off.begin(), off.end(), t);
        const std::size_t doc = it == off.begin() ? 0 : static_cast<std::size_t>(it - off.begin()) - 1;
        return memory::ExclusionRule::span(store_corpus->document_begin(doc),
                                           store_corpus->document_end(doc));
      }
    }
    return memory::ExclusionRule::none();
  };

  NeighborCache out(options.k, count);
  const std::size_t blocks = (count + options.block - 1) / options.block;
  // Block b always covers the same queries, whatever the worker count.
  auto work = [&](std::size_t first_block, std::size_t last_block) {
    std::vector<double> q;
    std::vector<memory::ExclusionRule> rules;
    for (std::size_t b = first_block; b < last_block; ++b) {
      const std::size_t lo = b * options.block, hi = std::min(count, lo + options.block);
      q.assign(queries.begin() + static_cast<std::ptrdiff_t>(lo * d),
               queries.begin() + static_cast<std::ptrdiff_t>(hi * d));
      rules.clear();
      if (options.exclusion != Exclusion::kNone)
        for (std::size_t t = lo; t < hi; ++t) rules.push_back(rule_for(t));
      auto sets = options.approximate ? store.ann_topk_batch(q, options.k, rules)
                                      : store.exact_topk_batch(q, options.k, rules);
      for (std::size_t t = lo; t < hi; ++t) out.set(t, sets[t - lo]);
    }
  };
  const std::size_t workers = std::min(options.workers, std::max<std::size_t>(blocks, 1));
  if (workers <= 1) {
    work(0, blocks);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          work(blocks * w / workers, blocks * (w + 1) / workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

NeighborCache oracle_neighbors(const TokenizedCorpus& corpus, std::size_t k) {
  SPALM_CHECK(k >= 1 && corpus.size() >= 2, "need K >= 1 and at least two tokens");
  NeighborCache out(k, corpus.size() - 1);
  memory::NeighborSet set;
  set.entries.resize(k);
  for (std::size_t t = 0; t + 1 < corpus.size(); ++t) {
    for (auto& e : set.entries) e = {corpus.ids[t + 1], t, 0.0};
    out.set(t, set);
  }
  return out;
}

NeighborCache random_neighbors(const TokenizedCorpus& corpus, std::size_t k, std::size_t vocab,
                               std::uint64_t seed) {
  SPALM_CHECK(k >= 1 && corpus.size() >= 2 && vocab >= 1,
              "need K >= 1, a non-empty vocabulary and at least two tokens");
  NeighborCache out(k, corpus.size() - 1);
  Rng rng(seed);
  std::uniform_int_distribution<std::uint32_t> token(0, static_cast<std::uint32_t>(vocab - 1));
  memory::NeighborSet set;
  set.entries.resize(k);
  for (std::size_t t = 0; t + 1 < corpus.size(); ++t) {
    for (auto& e : set.entries) e = {token(rng), t, 0.0};
    out.set(t, set);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kTransformer: return "transformer";
    case EvalMode::kXL: return "xl";
    case EvalMode::kKnnLm: return "knnlm";
    case EvalMode::kSpalm: return "spalm";
    case EvalMode::kSpalmKnn: return "spalm+knn";
  }
  return "?";
}

EvalMode parse_mode(std::string_view name) {
  for (auto m : {EvalMode::kTransformer, EvalMode::kXL, EvalMode::kKnnLm, EvalMode::kSpalm,
                 EvalMode::kSpalmKnn})
    if (mode_name(m) == name) return m;
  throw Error("unknown evaluation mode '" + std::string(name) +
              "' (transformer|xl|knnlm|spalm|spalm+knn)");
}

bool mode_needs_lambda(EvalMode mode) {
  return mode == EvalMode::kKnnLm || mode == EvalMode::kSpalmKnn;
}

bool mode_needs_neighbors(EvalMode mode) {
  return mode != EvalMode::kTransformer && mode != EvalMode::kXL;
}

namespace {

struct RowView {
  std::uint64_t position = 0;
  std::uint32_t target = 0;
  double nll = 0.0;
  std::span<const double> gate;  // empty without memory
  std::span<const double> z;
};

// Streams the split and reports every scored row in a fixed order:
// segment, then lane, then offset.
void scan(const LanguageModel& base, const TokenizedCorpus& split,
          const NeighborCache* neighbors, const EvalOptions& o,
          const std::function<void(const RowView&)>& fn) {
  const auto& c = base.config();
  SPALM_CHECK(o.lanes >= 1, "lanes must be >= 1");
  SPALM_CHECK(split.size() >= 2, "evaluation split needs at least two tokens");
  const bool retrieval = mode_needs_neighbors(o.mode);
  SPALM_CHECK(!retrieval || neighbors != nullptr,
              "mode " << mode_name(o.mode) << " needs a neighbor cache");
  SPALM_CHECK(!mode_needs_lambda(o.mode) || o.lambda.has_value(),
              "mode " << mode_name(o.mode) << " needs lambda");
  SPALM_CHECK(o.mode == EvalMode::kTransformer || o.mode == EvalMode::kXL ||
                  o.mode == EvalMode::kKnnLm || c.uses_memory(),
              "mode " << mode_name(o.mode) << " needs a model with long-term memory");

  // Memory models fall back to their XL path in the non-gated modes.
  const bool gated = o.mode == EvalMode::kSpalm || o.mode == EvalMode::kSpalmKnn;
  const model::GateOverride gate = gated ? o.gate : model::GateOverride::kForceOne;

  std::optional<LanguageModel> resized;
  const LanguageModel* model = &base;
  std::size_t k_model = 0;
  if (c.uses_memory()) {
    k_model = o.k ? o.k : c.neighbor_count;
    if (k_model != c.neighbor_count) {
      resized = base.clone();
      resized->set_neighbor_count(static_cast<std::uint32_t>(k_model));
      model = &*resized;
    }
  }
  if (neighbors) check_alignment(*neighbors, split, gated ? k_model : 0);

  const std::size_t n = c.context_length, d = c.d_model;
  const std::size_t cache_len =
      o.mode == EvalMode::kTransformer ? 0 : o.cache_length.value_or(c.eval_cache_length);
  corpus::LaneStreams streams(split, o.lanes);
  std::size_t segments = streams.num_segments(n);
  if (o.max_segments > 0) segments = std::min(segments, o.max_segments);

  ad::NoGradGuard no_grad;
  auto cache = model->make_cache(o.lanes, cache_len);
  Rng unused(0);
  std::vector<double> nll;
  for (std::size_t s = 0; s < segments; ++s) {
    Batch b = make_batch(streams, s, n);
    NeighborBatch nb;
    if (c.uses_memory())
      nb = gather_neighbors(gated ? neighbors : nullptr, b.segments, k_model);
    model::ForwardOptions fo;
    fo.gate = gate;
    auto out = model->forward({o.lanes, n, b.tokens, nb.ids, nb.valid}, cache, unused, fo);
    ad::cross_entropy(out.logits, b.targets, b.mask, &nll);
    const auto z = out.combined.data();
    const std::span<const double> g = c.uses_memory() ? out.gate.data() : std::span<const double>{};
    const std::size_t gw = c.uses_memory() ? out.gate.shape()[1] : 0;
    std::size_t row = 0;
    for (const auto& seg : b.segments) {
      for (std::size_t i = 0; i < n; ++i, ++row) {
        if (!b.mask[row]) continue;
        RowView v;
        v.position = seg.positions[i];
        v.target = b.targets[row];
        v.nll = nll[row];
        if (gw) v.gate = g.subspan(row * gw, gw);
        v.z = z.subspan(row * d, d);
        fn(v);
      }
    }
  }
}

std::size_t knn_k(const LanguageModel& model, const NeighborCache& neighbors,
                  const EvalOptions& o) {
  if (o.k) return o.k;
  return model.config().uses_memory() ? model.config().neighbor_count : neighbors.k();
}

// p_kNN(target) from the cached neighbors of `position`; 0 without any.
double knn_target_probability(const NeighborCache& cache, std::uint64_t position,
                              std::uint32_t target, std::size_t k, double tau) {
  if (position >= cache.size()) return 0.0;
  std::vector<std::uint32_t> values;
  std::vector<double> scores;
  for (std::size_t r = 0; r < k; ++r) {
    if (!cache.present(position, r)) continue;
    values.push_back(cache.value(position, r));
    scores.push_back(cache.score(position, r));
  }
  if (values.empty()) return 0.0;
  return head::knn_probability(values, scores, target, tau);
}

// -log(lambda p_lm + (1 - lambda) p_knn), written so that lambda = 1
// reproduces nll_lm bit for bit.
double mixed_nll(double nll_lm, double p_knn, double lambda) {
  const double ratio = p_knn * std::exp(nll_lm);  // p_knn / p_lm
  return nll_lm - std::log(head::interpolate(1.0, ratio, lambda));
}

bool rank1_hit(const NeighborCache* cache, std::uint64_t position, std::uint32_t target) {
  return cache && position < cache->size() && cache->present(position, 0) &&
         cache->value(position, 0) == target;
}

}  // namespace

double EvalReport::perplexity() const { return std::exp(mean_nll()); }

double EvalReport::bpc() const { return mean_nll() / std::numbers::ln2; }

double EvalReport::mean_gate() const {
  return gate_tokens ? gate_sum / static_cast<double>(gate_tokens)
                     : std::numeric_limits<double>::quiet_NaN();
}

std::vector<std::string> EvalReport::lines() const {
  using config::Record;
  std::vector<std::string> out;
  out.push_back(Record("eval")
                    .add("mode", mode_name(mode))
                    .add("lambda", lambda)
                    .add("tokens", tokens)
                    .add("total_nll", total_nll)
                    .add("mean_nll", mean_nll())
                    .add("perplexity", perplexity())
                    .add("bpc", bpc())
                    .add("mean_gate", mean_gate())
                    .add("rank1_hit_rate",
                         tokens ? static_cast<double>(neighbor_hits) / static_cast<double>(tokens)
                                : 0.0)
                    .str());
  for (const auto& r : records)
    out.push_back(Record("token")
                      .add("position", r.position)
                      .add("target", r.target)
                      .add("nll", r.nll)
                      .add("gate", r.gate)
                      .add("hit", r.neighbor_hit ? 1 : 0)
                      .str());
  return out;
}

EvalReport evaluate(const LanguageModel& model, const TokenizedCorpus& split,
                    const NeighborCache* neighbors, const EvalOptions& options) {
  EvalReport rep;
  rep.mode = options.mode;
  const bool knn = mode_needs_lambda(options.mode);
  if (knn) {
    SPALM_CHECK(options.lambda.has_value(), "mode " << mode_name(options.mode) << " needs lambda");
    head::InterpolationConfig{*options.lambda, options.tau}.validate();
    rep.lambda = *options.lambda;
  }
  const std::size_t kk = knn && neighbors ? knn_k(model, *neighbors, options) : 0;
  if (knn && neighbors) check_alignment(*neighbors, split, kk);
  scan(model, split, neighbors, options, [&](const RowView& v) {
    double nll = v.nll;
    if (knn) {
      const double p = knn_target_probability(*neighbors, v.position, v.target, kk, options.tau);
      nll = mixed_nll(v.nll, p, *options.lambda);
    }
    const bool hit = rank1_hit(neighbors, v.position, v.target);
    double g = std::numeric_limits<double>::quiet_NaN();
    if (!v.gate.empty()) {
      g = 0.0;
      for (double x : v.gate) g += x;
      g /= static_cast<double>(v.gate.size());
      rep.gate_sum += g;
      ++rep.gate_tokens;
    }
    rep.total_nll += nll;
    ++rep.tokens;
    rep.neighbor_hits += hit ? 1 : 0;
    if (options.keep_records) rep.records.push_back({v.position, v.target, nll, g, hit});
  });
  return rep;
}

std::vector<std::string> LambdaResult::lines() const {
  std::vector<std::string> out;
  for (const auto& [l, ppl] : perplexity)
    out.push_back(config::Record("lambda").add("lambda", l).add("perplexity", ppl).str());
  out.push_back(config::Record("lambda_best").add("lambda", best_lambda).str());
  return out;
}

LambdaResult tune_lambda(const LanguageModel& model, const TokenizedCorpus& dev,
                         const NeighborCache& neighbors, std::span<const double> grid,
                         EvalOptions options) {
  SPALM_CHECK(!grid.empty(), "lambda grid is empty");
  SPALM_CHECK(mode_needs_lambda(options.mode),
              "tune_lambda needs an interpolating mode, got " << mode_name(options.mode));
  for (double l : grid) head::InterpolationConfig{l, options.tau}.validate();
  options.lambda = grid[0];
  const std::size_t kk = knn_k(model, neighbors, options);
  check_alignment(neighbors, dev, kk);
  std::vector<std::pair<double, double>> rows;  // (nll_lm, p_knn)
  scan(model, dev, &neighbors, options, [&](const RowView& v) {
    rows.emplace_back(v.nll, knn_target_probability(neighbors, v.position, v.target, kk,
                                                    options.tau));
  });
  LambdaResult res;
  double best = std::numeric_limits<double>::infinity();
  for (double l : grid) {
    double total = 0.0;
    for (const auto& [nll, p] : rows) total += mixed_nll(nll, p, l);
    const double ppl = std::exp(rows.empty() ? 0.0 : total / static_cast<double>(rows.size()));
    res.perplexity.emplace_back(l, ppl);
    if (ppl < best || (ppl == best && l < res.best_lambda)) {
      best = ppl;
      res.best_lambda = l;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

std::vector<std::string> Analysis::lines() const {
  using config::Record;
  std::vector<std::string> out;
  out.push_back(Record("analysis")
                    .add("tokens", tokens)
                    .add("mean_gate", mean_gate)
                    .add("rank1_match", rank1_match())
                    .add("rank_weighted_match", rank_weighted_match)
                    .str());
  const std::size_t bins = gate_histogram.size();
  for (std::size_t b = 0; b < bins; ++b)
    out.push_back(Record("gate_bin")
                      .add("index", b)
                      .add("lo", static_cast<double>(b) / static_cast<double>(bins))
                      .add("hi", static_cast<double>(b + 1) / static_cast<double>(bins))
                      .add("count", gate_histogram[b])
                      .str());
  for (std::size_t r = 0; r < match_at_rank.size(); ++r)
    out.push_back(Record("match")
                      .add("rank", r + 1)
                      .add("at", match_at_rank[r])
                      .add("within", match_within_rank[r])
                      .str());
  auto join = [](std::span<const double> v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += config::format_double(v[i]);
    }
    return s;
  };
  for (const auto& w : window)
    out.push_back(Record("window")
                      .add("position", w.position)
                      .add("target", w.target)
                      .add("gate", join(w.gate))
                      .add("z", join(w.z))
                      .str());
  return out;
}

Analysis analyze(const LanguageModel& model, const TokenizedCorpus& split,
                 const NeighborCache& neighbors, const AnalyzeOptions& options) {
  SPALM_CHECK(options.bins >= 1, "histogram needs at least one bin");
  SPALM_CHECK(model.config().uses_memory(), "analysis needs a model with long-term memory");
  EvalOptions eo = options.eval;
  eo.mode = EvalMode::kSpalm;
  const std::size_t k = eo.k ? eo.k : model.config().neighbor_count;
  check_alignment(neighbors, split, k);

  Analysis a;
  a.gate_histogram.assign(options.bins, 0);
  std::vector<std::uint64_t> at(k, 0), within(k, 0);
  double gate_sum = 0.0;
  const std::uint64_t wlo = options.window_begin, whi = wlo + options.window_length;
  scan(model, split, &neighbors, eo, [&](const RowView& v) {
    double g = 0.0;
    for (double x : v.gate) g += x;
    g /= static_cast<double>(v.gate.size());
    gate_sum += g;
    const auto b = static_cast<std::size_t>(std::clamp(
        std::floor(g * static_cast<double>(options.bins)), 0.0,
        static_cast<double>(options.bins - 1)));
    ++a.gate_histogram[b];
    bool any = false;
    for (std::size_t r = 0; r < k; ++r) {
      const bool m = v.position < neighbors.size() && neighbors.present(v.position, r) &&
                     neighbors.value(v.position, r) == v.target;
      any = any || m;
      at[r] += m ? 1 : 0;
      within[r] += any ? 1 : 0;
    }
    ++a.tokens;
    if (v.position >= wlo && v.position < whi)
      a.window.push_back({v.position, v.target, {v.gate.begin(), v.gate.end()},
                          {v.z.begin(), v.z.end()}});
  });
  const double t = static_cast<double>(std::max<std::uint64_t>(a.tokens, 1));
  a.mean_gate = gate_sum / t;
  double wsum = 0.0, norm = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    a.match_at_rank.push_back(static_cast<double>(at[r]) / t);
    a.match_within_rank.push_back(static_cast<double>(within[r]) / t);
    wsum += a.match_at_rank.back() / static_cast<double>(r + 1);
    norm += 1.0 / static_cast<double>(r + 1);
  }
  a.rank_weighted_match = norm > 0.0 ? wsum / norm : 0.0;
  std::sort(a.window.begin(), a.window.end(),
            [](const auto& x, const auto& y) { return x.position < y.position; });
  return a;
}

// ---------------------------------------------------------------------------

TrainResult train_model(const ModelConfig& config, const TokenizedCorpus& train,
                        const NeighborCache* train_neighbors, const TokenizedCorpus& dev,
                        const NeighborCache* dev_neighbors, const TrainOptions& options,
                        const EvalOptions& dev_options, const LanguageModel* initial,
                        const std::function<void(const std::string&)>& log) {
  config.validate();
  Trainer trainer(train, options, train_neighbors);
  Rng init(options.seed);
  LanguageModel fresh(config, init);
  if (initial) {
    const std::size_t copied = warm_start(fresh, *initial);
    if (log) log("warm start: copied " + std::to_string(copied) + " parameter tensors");
  }
  TrainState state = trainer.initial_state(std::move(fresh));
  TrainResult res;
  res.best = state.model.clone();

  Trainer::Hooks hooks;
  hooks.dev_nll = [&](const LanguageModel& m) {
    return evaluate(m, dev, dev_neighbors, dev_options).mean_nll();
  };
  hooks.on_best = [&](const TrainState& s) { res.best.copy_values_from(s.model); };
  hooks.on_step = [&](const TrainState&, const StepResult& r) { res.losses.push_back(r.loss); };
  hooks.on_eval = [&](const TrainState& s, double dev_nll) {
    res.dev_curve.emplace_back(s.step, dev_nll);
    if (!log) return;
    double recent = 0.0;
    const std::size_t w = std::min<std::size_t>(res.losses.size(), options.eval_interval);
    for (std::size_t i = res.losses.size() - w; i < res.losses.size(); ++i) recent += res.losses[i];
    log(config::Record("train_eval")
            .add("step", s.step)
            .add("epoch", s.epoch)
            .add("train_nll", w ? recent / static_cast<double>(w) : 0.0)
            .add("dev_nll", dev_nll)
            .add("best_dev_nll", s.best_dev_nll)
            .add("lr", trainer.learning_rate(s.step))
            .str());
  };
  const auto summary = trainer.run(state, hooks);
  res.steps = state.step;
  res.stopped_early = summary.stopped_early;
  res.best_step = state.best_step;
  res.best_dev_nll = state.best_dev_nll;
  return res;
}

std::vector<SweepRow> sweep_neighbors(const ModelConfig& config, std::span<const std::size_t> ks,
                                      const TokenizedCorpus& train,
                                      const NeighborCache& train_neighbors,
                                      const TokenizedCorpus& dev,
                                      const NeighborCache& dev_neighbors,
                                      const TrainOptions& options, const EvalOptions& dev_options,
                                      const std::function<void(const std::string&)>& log) {
  for (std::size_t k : ks) {
    SPALM_CHECK(k <= train_neighbors.k() && k <= dev_neighbors.k(),
                "K=" << k << " exceeds the cached K (" << train_neighbors.k() << " train, "
                     << dev_neighbors.k() << " dev)");
  }
  std::vector<SweepRow> rows;
  for (std::size_t k : ks) {
    ModelConfig c = config;
    c.neighbor_count = static_cast<std::uint32_t>(std::max<std::size_t>(k, 1));
    TrainOptions to = options;
    EvalOptions eo = dev_options;
    eo.mode = EvalMode::kSpalm;
    eo.k = 0;
    to.gate = k == 0 ? model::GateOverride::kForceOne : options.gate;
    eo.gate = to.gate;
    if (log) log("sweep: training K=" + std::to_string(k));
    auto r = train_model(c, train, &train_neighbors, dev, &dev_neighbors, to, eo, nullptr, log);
    rows.push_back({k, r.best_dev_nll, std::exp(r.best_dev_nll), r.best_step});
  }
  return rows;
}

}  // namespace spalm::pipeline
