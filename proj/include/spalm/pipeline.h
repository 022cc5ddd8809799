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


#ifndef SPALM_PIPELINE_H_
#define SPALM_PIPELINE_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spalm/adam.h"
#include "spalm/common.h"
#include "spalm/corpus.h"
#include "spalm/memory.h"
#include "spalm/transformer.h"

// Two-phase training and evaluation: pretrain an encoder, build the episodic
// store from its hidden states, fix every training position's neighbors, then
// train the gated model against those frozen neighbors.
namespace spalm::pipeline {

using corpus::TokenizedCorpus;
using memory::EpisodicStore;
using memory::NeighborCache;
using model::LanguageModel;
using model::ModelConfig;

// Neighbor ids and validity for a batch of segments, [lanes * n * k]. Record
// t of `cache` belongs to corpus position t; padding, positions past the
// cache and absent slots are invalid.
struct NeighborBatch {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> valid;
};
NeighborBatch gather_neighbors(const NeighborCache* cache,
                               std::span<const corpus::Segment> segments, std::size_t k);

// Throws unless `cache` has one record per position but the last and at
// least `k` ranks.
void check_alignment(const NeighborCache& cache, const TokenizedCorpus& corpus, std::size_t k);

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t lanes = 8;
  double learning_rate = 5e-4;
  std::size_t warmup_steps = 200;
  std::size_t max_steps = 4000;
  double final_lr_fraction = 0.1;  // cosine decay floor
  double clip_norm = 1.0;          // 0 disables clipping
  std::size_t eval_interval = 250;
  std::size_t patience = 4;        // 0 disables early stopping
  std::uint64_t seed = 1;
  model::GateOverride gate = model::GateOverride::kLearned;
  ad::AdamOptions adam;

  void validate() const;
};

// Everything needed to continue a run bit-for-bit. Binary format "SPTS":
// version u32, model, Adam state, step, epoch, cursor (u64), engine state
// string, XL cache, best dev NLL (f64), best step, stale evals (u64).
struct TrainState {
  LanguageModel model;
  ad::AdamState adam;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;  // next segment index of the current epoch
  Rng rng;
  model::XLCache cache;
  double best_dev_nll = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  std::uint64_t stale_evals = 0;

  void write(std::ostream& os) const;
  static TrainState read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);
};

struct StepResult {
  double loss = 0.0;  // mean NLL over scored tokens
  std::size_t tokens = 0;
  double learning_rate = 0.0;
  double grad_norm = 0.0;
};

// Copies every parameter of `source` whose name and shape match one in
// `target`. Returns the number copied.
std::size_t warm_start(LanguageModel& target, const LanguageModel& source);

class Trainer {
 public:
  // `neighbors` is required for memory models and must stay alive.
  Trainer(const TokenizedCorpus& train, TrainOptions options,
          const NeighborCache* neighbors = nullptr);

  const TrainOptions& options() const { return options_; }
  // Fresh parameters from options.seed.
  TrainState initial_state(const ModelConfig& config) const;
  // Adopts `model` (e.g. warm-started) with fresh optimizer state.
  TrainState initial_state(LanguageModel model) const;

  // Linear warmup, then cosine decay to final_lr_fraction.
  double learning_rate(std::uint64_t step) const;
  // One optimizer step on the next segment batch. A new epoch starts from
  // the first segment with an empty cache. Throws on a non-finite loss.
  StepResult step(TrainState& state) const;

  struct Hooks {
    std::function<double(const LanguageModel&)> dev_nll;  // mean nats/token
    std::function<void(const TrainState&)> on_best;
    std::function<void(const TrainState&, const StepResult&)> on_step;
    std::function<void(const TrainState&, double dev_nll)> on_eval;
  };
  struct RunSummary {
    std::uint64_t steps = 0;
    bool stopped_early = false;
  };
  // Steps until max_steps or until `patience` consecutive dev evaluations
  // fail to improve. Without dev_nll, runs to max_steps.
  RunSummary run(TrainState& state, const Hooks& hooks) const;

 private:
  void check_model(const LanguageModel& model) const;

  const TokenizedCorpus& train_;
  TrainOptions options_;
  const NeighborCache* neighbors_;
  corpus::LaneStreams streams_;
};

// ---------------------------------------------------------------------------
// Memory construction

// Encoder hidden states h^R for every corpus position, [n, d] as float. The
// corpus is streamed as `lanes` lanes with an XL cache of `cache_length`.
std::vector<float> encode_corpus(const LanguageModel& encoder, const TokenizedCorpus& corpus,
                                 std::size_t lanes, std::size_t cache_length);

// Record t: key = hidden state at position t, value = token t + 1,
// position = t, for t < n - 1.
EpisodicStore build_store(std::span<const float> keys, const TokenizedCorpus& corpus,
                          memory::Metric metric);

enum class Exclusion { kNone, kWindow, kDocument };
std::string_view exclusion_name(Exclusion e);
Exclusion parse_exclusion(std::string_view name);

struct NeighborSearchOptions {
  std::size_t k = 4;
  Exclusion exclusion = Exclusion::kWindow;
  std::size_t radius = 64;  // kWindow: excludes |p - t| < radius
  bool approximate = false;
  std::size_t workers = 1;
  std::size_t block = 2048;  // queries per search call
};

// Top-k neighbors for each query row t < count, [count, dim]. Exclusion
// rules need the corpus the store was built from; its length must then be
// store.size() + 1. Shards are contiguous query ranges, so the result does
// not depend on `workers`.
NeighborCache precompute_neighbors(const EpisodicStore& store, std::span<const float> queries,
                                   std::size_t count, const TokenizedCorpus* store_corpus,
                                   const NeighborSearchOptions& options);

// Every slot holds the gold next token.
NeighborCache oracle_neighbors(const TokenizedCorpus& corpus, std::size_t k);
// Every slot holds a uniformly random token id in [0, vocab).
NeighborCache random_neighbors(const TokenizedCorpus& corpus, std::size_t k, std::size_t vocab,
                               std::uint64_t seed);

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode { kTransformer, kXL, kKnnLm, kSpalm, kSpalmKnn };
std::string_view mode_name(EvalMode mode);
EvalMode parse_mode(std::string_view name);
bool mode_needs_lambda(EvalMode mode);
bool mode_needs_neighbors(EvalMode mode);

struct EvalOptions {
  EvalMode mode = EvalMode::kXL;
  std::size_t lanes = 8;
  // XL cache length; unset uses the model's eval_cache_length. Forced to 0
  // in kTransformer mode.
  std::optional<std::size_t> cache_length;
  std::optional<double> lambda;
  double tau = 1.0;
  // Neighbor ranks used; 0 means the model's K (memory models) or the
  // cache's K (kNN-LM on a plain model).
  std::size_t k = 0;
  model::GateOverride gate = model::GateOverride::kLearned;
  std::size_t max_segments = 0;  // per lane; 0 means the whole split
  bool keep_records = false;
};

struct TokenRecord {
  std::uint64_t position = 0;  // corpus index of the input token
  std::uint32_t target = 0;
  double nll = 0.0;
  double gate = std::numeric_limits<double>::quiet_NaN();  // mean over dims
  bool neighbor_hit = false;                                // rank-1 value == target
};

struct EvalReport {
  EvalMode mode = EvalMode::kXL;
  double lambda = std::numeric_limits<double>::quiet_NaN();
  double total_nll = 0.0;
  std::uint64_t tokens = 0;
  double gate_sum = 0.0;
  std::uint64_t gate_tokens = 0;
  std::uint64_t neighbor_hits = 0;
  std::vector<TokenRecord> records;

  double mean_nll() const { return tokens ? total_nll / static_cast<double>(tokens) : 0.0; }
  double perplexity() const;
  double bpc() const;
  double mean_gate() const;
  // "eval mode= lambda= tokens= total_nll= mean_nll= perplexity= bpc=
  // mean_gate= rank1_hit_rate=", then one "token position= target= nll=
  // gate= hit=" line per record.
  std::vector<std::string> lines() const;
};

// Static evaluation: the store and the neighbor cache are only read.
EvalReport evaluate(const LanguageModel& model, const TokenizedCorpus& split,
                    const NeighborCache* neighbors, const EvalOptions& options);

struct LambdaResult {
  double best_lambda = 0.0;
  std::vector<std::pair<double, double>> perplexity;  // (lambda, ppl) in grid order
  std::vector<std::string> lines() const;
};

// Scores the split once and picks argmin perplexity over `grid`; ties go to
// the smaller lambda. options.mode must be kKnnLm or kSpalmKnn.
LambdaResult tune_lambda(const LanguageModel& model, const TokenizedCorpus& dev,
                         const NeighborCache& neighbors, std::span<const double> grid,
                         EvalOptions options);

// ---------------------------------------------------------------------------
// Analysis

struct AnalyzeOptions {
  EvalOptions eval;      // mode is forced to kSpalm
  std::size_t bins = 20;  // gate histogram over [0, 1]
  std::uint64_t window_begin = 0;  // first corpus position of the z window
  std::size_t window_length = 32;
};

struct Analysis {
  std::uint64_t tokens = 0;
  std::vector<std::uint64_t> gate_histogram;  // bin b covers [b/B, (b+1)/B)
  double mean_gate = 0.0;
  // Per-rank exact-match rate between neighbor value and gold target, and
  // the rate that any of the top r+1 matches.
  std::vector<double> match_at_rank;
  std::vector<double> match_within_rank;
  // sum_r match_at_rank[r] / (r+1), normalized by sum_r 1/(r+1).
  double rank_weighted_match = 0.0;
  // Window rows in position order: position, token, gate (1 or d values),
  // z (d values).
  struct WindowRow {
    std::uint64_t position = 0;
    std::uint32_t target = 0;
    std::vector<double> gate;
    std::vector<double> z;
  };
  std::vector<WindowRow> window;

  double rank1_match() const { return match_at_rank.empty() ? 0.0 : match_at_rank[0]; }
  std::vector<std::string> lines() const;
};

Analysis analyze(const LanguageModel& model, const TokenizedCorpus& split,
                 const NeighborCache& neighbors, const AnalyzeOptions& options);

// ---------------------------------------------------------------------------
// Full runs

struct TrainResult {
  LanguageModel best;  // parameters at the best dev evaluation
  std::uint64_t best_step = 0;
  double best_dev_nll = 0.0;
  std::uint64_t steps = 0;
  bool stopped_early = false;
  std::vector<double> losses;
  std::vector<std::pair<std::uint64_t, double>> dev_curve;
};

// Trains from `initial` (or fresh parameters) with dev-NLL model selection.
// The dev evaluation uses `dev_options` with `dev_neighbors`.
TrainResult train_model(const ModelConfig& config, const TokenizedCorpus& train,
                        const NeighborCache* train_neighbors, const TokenizedCorpus& dev,
                        const NeighborCache* dev_neighbors, const TrainOptions& options,
                        const EvalOptions& dev_options,
                        const LanguageModel* initial = nullptr,
                        const std::function<void(const std::string&)>& log = {});

struct SweepRow {
  std::size_t k = 0;  // 0: memory path disabled by forcing the gate to 1
  double dev_nll = 0.0;
  double perplexity = 0.0;
  std::uint64_t best_step = 0;
};

// One trained and evaluated model per K; caches hold at least max(K) ranks
// and smaller K use their leading ranks.
std::vector<SweepRow> sweep_neighbors(const ModelConfig& config, std::span<const std::size_t> ks,
                                      const TokenizedCorpus& train,
                                      const NeighborCache& train_neighbors,
                                      const TokenizedCorpus& dev,
                                      const NeighborCache& dev_neighbors,
                                      const TrainOptions& options, const EvalOptions& dev_options,
                                      const std::function<void(const std::string&)>& log = {});

}  // namespace spalm::pipeline

#endif  // SPALM_PIPELINE_H_
