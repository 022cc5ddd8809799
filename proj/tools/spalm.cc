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


// spalm: command-line driver. Every subcommand reads an optional key=value
// config file (--config), applies --set overrides on top, writes its outputs
// plus a manifest (<output>.manifest) and prints line-delimited records.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spalm/config.h"
#include "spalm/corpus.h"
#include "spalm/pipeline.h"
#include "spalm/run_config.h"
#include "spalm/synthetic.h"

namespace {

using namespace spalm;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string report;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key=value settings file");
  app->add_option("--set", c.overrides, "setting override, key=value (repeatable)");
  app->add_option("--report", c.report, "also append report records to this file");
}

config::Settings load_settings(const Common& c) {
  config::Settings s = c.config.empty() ? config::Settings{} : config::Settings::load(c.config);
  for (const auto& o : c.overrides) s.apply(o);
  s.check_known(config::known_keys());
  return s;
}

class Output {
 public:
  explicit Output(const std::string& report) {
    if (report.empty()) return;
    file_ = std::make_unique<std::ofstream>(report, std::ios::app);
    SPALM_CHECK(*file_, "cannot open report " << report);
  }
  void line(const std::string& l) {
    std::cout << l << '\n' << std::flush;
    if (file_) *file_ << l << '\n' << std::flush;
  }
  void lines(const std::vector<std::string>& ls) {
    for (const auto& l : ls) line(l);
  }

 private:
  std::unique_ptr<std::ofstream> file_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_manifest(const fs::path& output, std::string command, const config::Settings& s,
                    std::uint64_t seed,
                    std::vector<std::pair<std::string, fs::path>> inputs) {
  config::Manifest m;
  m.command = std::move(command);
  m.settings = s;
  m.seed = seed;
  m.inputs = std::move(inputs);
  fs::path path = output;
  path += ".manifest";
  m.save(path);
}

corpus::TokenizedCorpus load_split(const std::string& path, const corpus::Vocabulary& vocab) {
  return corpus::tokenize(corpus::read_file(path), vocab);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::function<void(const std::string&)> logger(Output& out, const Stopwatch& clock) {
  return [&out, &clock](const std::string& l) {
    if (l.rfind("train_eval", 0) == 0) return out.line(l);
    char prefix[32];
    std::snprintf(prefix, sizeof prefix, "[%8.1fs] ", clock.seconds());
    std::cerr << prefix << l << '\n';
  };
}

// ---------------------------------------------------------------------------

int gen_synthetic(const Common& c, const std::string& out_dir) {
  const auto s = load_settings(c);
  const auto opts = config::synthetic_options(s);
  const auto corpus = synthetic::generate(opts);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  corpus::write_file(dir / "train.txt", corpus.train);
  corpus::write_file(dir / "dev.txt", corpus.dev);
  corpus::write_file(dir / "test.txt", corpus.test);
  std::ostringstream ents;
  for (std::size_t i = 0; i < corpus.entities.size(); ++i) {
    const auto& e = corpus.entities[i];
    ents << synthetic::title_word(e.title) << ' ' << synthetic::name_word(e.name);
    for (auto a : e.attributes) ents << ' ' << synthetic::attribute_word(a);
    ents << '\n';
  }
  corpus::write_file(dir / "entities.txt", ents.str());
  write_manifest(dir / "corpus", "gen-synthetic", s, opts.seed, {});
  Output out(c.report);
  for (const char* split : {"train", "dev", "test"}) {
    const std::string& text = split[0] == 't' && split[1] == 'r' ? corpus.train
                              : split[0] == 'd'                  ? corpus.dev
                                                                 : corpus.test;
    const auto docs = corpus::split_documents(text, corpus::TokenLevel::kWord);
    out.line(config::Record("synthetic")
                 .add("split", split)
                 .add("documents", static_cast<std::uint64_t>(docs.size()))
                 .add("bytes", static_cast<std::uint64_t>(text.size()))
                 .add("path", (dir / (std::string(split) + ".txt")).string())
                 .str());
  }
  return 0;
}

corpus::Vocabulary vocab_for(const std::string& vocab_path, const std::string& train_path,
                             const config::Settings& s, Output& out) {
  if (fs::exists(vocab_path)) return corpus::Vocabulary::load(vocab_path);
  auto v = corpus::Vocabulary::build(corpus::read_file(train_path), config::token_level(s),
                                     config::min_count(s));
  v.save(vocab_path);
  out.line(config::Record("vocab")
               .add("path", vocab_path)
               .add("size", static_cast<std::uint64_t>(v.size()))
               .add("level", corpus::level_name(v.level()))
               .str());
  return v;
}

int pretrain(const Common& c, const std::string& train_path, const std::string& dev_path,
             const std::string& vocab_path, const std::string& out_path) {
  auto s = load_settings(c);
  Output out(c.report);
  Stopwatch clock;
  const auto vocab = vocab_for(vocab_path, train_path, s, out);
  const auto train = load_split(train_path, vocab);
  const auto dev = load_split(dev_path, vocab);
  auto cfg = config::model_config(s, vocab.size());
  cfg.neighbor_count = 0;
  const auto to = config::train_options(s);
  auto eo = config::eval_options(s);
  eo.mode = cfg.cache_length > 0 ? pipeline::EvalMode::kXL : pipeline::EvalMode::kTransformer;
  const auto r = pipeline::train_model(cfg, train, nullptr, dev, nullptr, to, eo, nullptr,
                                       logger(out, clock));
  r.best.save(out_path);
  write_manifest(out_path, "pretrain", s, to.seed,
                 {{"train", train_path}, {"dev", dev_path}, {"vocab", vocab_path}});
  out.line(config::Record("pretrain")
               .add("steps", r.steps)
               .add("best_step", r.best_step)
               .add("best_dev_nll", r.best_dev_nll)
               .add("stopped_early", r.stopped_early ? "yes" : "no")
               .add("parameters", static_cast<std::uint64_t>(r.best.parameter_count()))
               .add("seconds", clock.seconds())
               .str());
  return 0;
}

int build_memory(const Common& c, const std::string& encoder_path, const std::string& vocab_path,
                 const std::string& corpus_path, const std::string& out_path) {
  const auto s = load_settings(c);
  Output out(c.report);
  Stopwatch clock;
  const auto vocab = corpus::Vocabulary::load(vocab_path);
  const auto corpus = load_split(corpus_path, vocab);
  const auto encoder = pipeline::LanguageModel::load(encoder_path);
  const auto keys = pipeline::encode_corpus(encoder, corpus, config::encode_lanes(s), 0);
  const auto store = pipeline::build_store(keys, corpus, config::metric(s));
  store.save(out_path);
  write_manifest(out_path, "build-memory", s, 0,
                 {{"encoder", encoder_path}, {"vocab", vocab_path}, {"corpus", corpus_path}});
  out.line(config::Record("memory")
               .add("records", static_cast<std::uint64_t>(store.size()))
               .add("dim", static_cast<std::uint64_t>(store.dim()))
               .add("metric", s.get_string("memory.metric", "ip"))
               .add("seconds", clock.seconds())
               .str());
  return 0;
}

struct PrecomputeArgs {
  std::string store, vocab, corpus, encoder, out;
  bool self = false;
};

int precompute(const Common& c, const PrecomputeArgs& a) {
  const auto s = load_settings(c);
  Output out(c.report);
  Stopwatch clock;
  auto store = memory::EpisodicStore::load(a.store);
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto corpus = load_split(a.corpus, vocab);
  auto opts = config::neighbor_options(s);
  if (opts.approximate) store.build_index(config::ann_options(s));
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"store", a.store}, {"vocab", a.vocab}, {"corpus", a.corpus}};
  pipeline::NeighborCache cache;
  if (a.self) {
    SPALM_CHECK(corpus.size() == store.size() + 1,
                "--self needs the corpus the store was built from");
    cache = pipeline::precompute_neighbors(store, store.keys(), store.size(), &corpus, opts);
  } else {
    SPALM_CHECK(!a.encoder.empty(), "--encoder is required unless --self is given");
    opts.exclusion = pipeline::Exclusion::kNone;
    const auto encoder = pipeline::LanguageModel::load(a.encoder);
    const auto queries = pipeline::encode_corpus(encoder, corpus, config::encode_lanes(s), 0);
    cache = pipeline::precompute_neighbors(store, queries, corpus.size() - 1, nullptr, opts);
    inputs.emplace_back("encoder", a.encoder);
  }
  cache.save(a.out);
  write_manifest(a.out, "precompute-neighbors", s, config::ann_options(s).seed, inputs);
  std::uint64_t hits = 0, scored = 0;
  for (std::size_t t = 0; t + 1 < corpus.size(); ++t) {
    if (corpus.ids[t + 1] == 0) continue;
    ++scored;
    hits += cache.present(t, 0) && cache.value(t, 0) == corpus.ids[t + 1];
  }
  out.line(config::Record("neighbors")
               .add("queries", static_cast<std::uint64_t>(cache.size()))
               .add("k", static_cast<std::uint64_t>(cache.k()))
               .add("exclusion", pipeline::exclusion_name(opts.exclusion))
               .add("approximate", opts.approximate ? "yes" : "no")
               .add("rank1_hit_rate", scored ? static_cast<double>(hits) / scored : 0.0)
               .add("seconds", clock.seconds())
               .str());
  return 0;
}

struct TrainArgs {
  std::string train, dev, vocab, neighbors, dev_neighbors, out, warm_start, state;
  bool resume = false;
};

int train(const Common& c, const TrainArgs& a) {
  auto s = load_settings(c);
  Output out(c.report);
  Stopwatch clock;
  const auto log = logger(out, clock);
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto train = load_split(a.train, vocab);
  const auto dev = load_split(a.dev, vocab);
  const auto cfg = config::model_config(s, vocab.size());
  const auto to = config::train_options(s);
  auto eo = config::eval_options(s);
  eo.gate = to.gate;

  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"train", a.train}, {"dev", a.dev}, {"vocab", a.vocab}};
  std::optional<pipeline::NeighborCache> tn, dn;
  if (cfg.uses_memory()) {
    SPALM_CHECK(!a.neighbors.empty() && !a.dev_neighbors.empty(),
                "a model with neighbors needs --neighbors and --dev-neighbors");
    tn = pipeline::NeighborCache::load(a.neighbors);
    dn = pipeline::NeighborCache::load(a.dev_neighbors);
    inputs.emplace_back("neighbors", a.neighbors);
    inputs.emplace_back("dev_neighbors", a.dev_neighbors);
    eo.mode = pipeline::EvalMode::kSpalm;
  } else {
    eo.mode = cfg.cache_length > 0 ? pipeline::EvalMode::kXL : pipeline::EvalMode::kTransformer;
  }

  pipeline::Trainer trainer(train, to, tn ? &*tn : nullptr);
  pipeline::TrainState state;
  if (a.resume) {
    SPALM_CHECK(!a.state.empty(), "--resume needs --state");
    state = pipeline::TrainState::load(a.state);
    SPALM_CHECK(state.model.config() == cfg, "resumed state was trained with another model config");
    inputs.emplace_back("resume", a.state);
    log("resumed at step " + std::to_string(state.step));
  } else {
    Rng init(to.seed);
    pipeline::LanguageModel fresh(cfg, init);
    if (!a.warm_start.empty()) {
      const auto copied = pipeline::warm_start(fresh, pipeline::LanguageModel::load(a.warm_start));
      log("warm start: copied " + std::to_string(copied) + " parameter tensors");
      inputs.emplace_back("warm_start", a.warm_start);
    }
    state = trainer.initial_state(std::move(fresh));
  }
  const char* init = a.resume ? "resume" : a.warm_start.empty() ? "fresh" : "warm";
  s.set("run.init", init);

  std::vector<double> losses;
  pipeline::Trainer::Hooks hooks;
  hooks.dev_nll = [&](const pipeline::LanguageModel& m) {
    return pipeline::evaluate(m, dev, dn ? &*dn : nullptr, eo).mean_nll();
  };
  hooks.on_best = [&](const pipeline::TrainState& st) { st.model.save(a.out); };
  hooks.on_step = [&](const pipeline::TrainState&, const pipeline::StepResult& r) {
    losses.push_back(r.loss);
  };
  hooks.on_eval = [&](const pipeline::TrainState& st, double dev_nll) {
    const std::size_t w = std::min<std::size_t>(losses.size(), to.eval_interval);
    double recent = 0.0;
    for (std::size_t i = losses.size() - w; i < losses.size(); ++i) recent += losses[i];
    log(config::Record("train_eval")
            .add("step", st.step)
            .add("epoch", st.epoch)
            .add("train_nll", w ? recent / static_cast<double>(w) : 0.0)
            .add("dev_nll", dev_nll)
            .add("best_dev_nll", st.best_dev_nll)
            .add("lr", trainer.learning_rate(st.step))
            .str());
    if (!a.state.empty()) st.save(a.state);
  };
  const auto summary = trainer.run(state, hooks);
  if (!fs::exists(a.out)) state.model.save(a.out);
  write_manifest(a.out, "train", s, to.seed, inputs);
  out.line(config::Record("train")
               .add("steps", state.step)
               .add("best_step", state.best_step)
               .add("best_dev_nll", state.best_dev_nll)
               .add("stopped_early", summary.stopped_early ? "yes" : "no")
               .add("init", init)
               .add("seconds", clock.seconds())
               .str());
  return 0;
}

struct EvalArgs {
  std::string model, vocab, corpus, neighbors, mode = "xl", lambda_grid;
  bool records = false;
};

std::optional<pipeline::NeighborCache> maybe_neighbors(const EvalArgs& a, bool needed,
                                                       std::vector<std::pair<std::string, fs::path>>& inputs) {
  if (a.neighbors.empty()) {
    SPALM_CHECK(!needed, "this mode needs --neighbors");
    return std::nullopt;
  }
  inputs.emplace_back("neighbors", a.neighbors);
  return pipeline::NeighborCache::load(a.neighbors);
}

int eval(const Common& c, const EvalArgs& a, const std::string& out_path) {
  const auto s = load_settings(c);
  Output out(c.report);
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto split = load_split(a.corpus, vocab);
  const auto model = pipeline::LanguageModel::load(a.model);
  auto eo = config::eval_options(s);
  eo.mode = pipeline::parse_mode(a.mode);
  eo.keep_records = a.records;
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"model", a.model}, {"vocab", a.vocab}, {"corpus", a.corpus}};
  const auto nn = maybe_neighbors(a, pipeline::mode_needs_neighbors(eo.mode), inputs);
  const auto report = pipeline::evaluate(model, split, nn ? &*nn : nullptr, eo);
  const auto lines = report.lines();
  out.lines(lines);
  if (!out_path.empty()) {
    std::string text;
    for (const auto& l : lines) text += l + '\n';
    corpus::write_file(out_path, text);
    write_manifest(out_path, "eval", s, 0, inputs);
  }
  return 0;
}

int tune_lambda(const Common& c, const EvalArgs& a, const std::string& out_path) {
  const auto s = load_settings(c);
  Output out(c.report);
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto split = load_split(a.corpus, vocab);
  const auto model = pipeline::LanguageModel::load(a.model);
  auto eo = config::eval_options(s);
  eo.mode = pipeline::parse_mode(a.mode);
  std::vector<double> grid;
  for (const auto& g : split_list(a.lambda_grid)) grid.push_back(std::stod(g));
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"model", a.model}, {"vocab", a.vocab}, {"corpus", a.corpus}};
  const auto nn = maybe_neighbors(a, true, inputs);
  const auto r = pipeline::tune_lambda(model, split, *nn, grid, eo);
  out.lines(r.lines());
  if (!out_path.empty()) {
    std::string text;
    for (const auto& l : r.lines()) text += l + '\n';
    corpus::write_file(out_path, text);
    write_manifest(out_path, "tune-lambda", s, 0, inputs);
  }
  return 0;
}

struct AnalyzeArgs {
  std::size_t bins = 20;
  std::uint64_t window_begin = 0;
  std::size_t window_length = 32;
};

int analyze(const Common& c, const EvalArgs& a, const AnalyzeArgs& an,
            const std::string& out_path) {
  const auto s = load_settings(c);
  Output out(c.report);
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto split = load_split(a.corpus, vocab);
  const auto model = pipeline::LanguageModel::load(a.model);
  pipeline::AnalyzeOptions ao;
  ao.eval = config::eval_options(s);
  ao.bins = an.bins;
  ao.window_begin = an.window_begin;
  ao.window_length = an.window_length;
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"model", a.model}, {"vocab", a.vocab}, {"corpus", a.corpus}};
  const auto nn = maybe_neighbors(a, true, inputs);
  const auto r = pipeline::analyze(model, split, *nn, ao);
  out.lines(r.lines());
  if (!out_path.empty()) {
    std::string text;
    for (const auto& l : r.lines()) text += l + '\n';
    corpus::write_file(out_path, text);
    write_manifest(out_path, "analyze", s, 0, inputs);
  }
  return 0;
}

int sweep_k(const Common& c, const TrainArgs& a, const std::string& ks_text,
            const std::string& out_path) {
  const auto s = load_settings(c);
  Output out(c.report);
  Stopwatch clock;
  const auto vocab = corpus::Vocabulary::load(a.vocab);
  const auto train = load_split(a.train, vocab);
  const auto dev = load_split(a.dev, vocab);
  const auto cfg = config::model_config(s, vocab.size());
  const auto to = config::train_options(s);
  const auto eo = config::eval_options(s);
  const auto tn = pipeline::NeighborCache::load(a.neighbors);
  const auto dn = pipeline::NeighborCache::load(a.dev_neighbors);
  std::vector<std::size_t> ks;
  for (const auto& k : split_list(ks_text)) ks.push_back(std::stoull(k));
  SPALM_CHECK(!ks.empty(), "--ks must list at least one K");
  const auto rows =
      pipeline::sweep_neighbors(cfg, ks, train, tn, dev, dn, to, eo, logger(out, clock));
  std::string text;
  for (const auto& r : rows) {
    const auto line = config::Record("sweep")
                          .add("k", static_cast<std::uint64_t>(r.k))
                          .add("dev_nll", r.dev_nll)
                          .add("perplexity", r.perplexity)
                          .add("best_step", r.best_step)
                          .str();
    out.line(line);
    text += line + '\n';
  }
  if (!out_path.empty()) {
    corpus::write_file(out_path, text);
    write_manifest(out_path, "sweep-k", s, to.seed,
                   {{"train", a.train},
                    {"dev", a.dev},
                    {"vocab", a.vocab},
                    {"neighbors", a.neighbors},
                    {"dev_neighbors", a.dev_neighbors}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spalm: language models with episodic memory"};
  app.require_subcommand(1);

  Common common;
  std::string out_dir, out, train_path, dev_path, vocab_path, encoder, corpus_path, ks = "1,2,4";
  PrecomputeArgs pre;
  TrainArgs tr;
  EvalArgs ev;
  AnalyzeArgs an;

  auto* gen = app.add_subcommand("gen-synthetic", "write a seeded entity-repeat corpus");
  add_common(gen, common);
  gen->add_option("--out-dir", out_dir, "directory for train/dev/test.txt")->required();

  auto* pt = app.add_subcommand("pretrain", "train the encoder transformer (no memory)");
  add_common(pt, common);
  pt->add_option("--train", train_path)->required()->check(CLI::ExistingFile);
  pt->add_option("--dev", dev_path)->required()->check(CLI::ExistingFile);
  pt->add_option("--vocab", vocab_path, "vocabulary; built from --train if missing")->required();
  pt->add_option("--out", out, "checkpoint path")->required();

  auto* bm = app.add_subcommand("build-memory", "encode a corpus into a key-value store");
  add_common(bm, common);
  bm->add_option("--encoder", encoder)->required()->check(CLI::ExistingFile);
  bm->add_option("--vocab", vocab_path)->required()->check(CLI::ExistingFile);
  bm->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  bm->add_option("--out", out, "store path")->required();

  auto* pn = app.add_subcommand("precompute-neighbors", "retrieve top-k neighbors per position");
  add_common(pn, common);
  pn->add_option("--store", pre.store)->required()->check(CLI::ExistingFile);
  pn->add_option("--vocab", pre.vocab)->required()->check(CLI::ExistingFile);
  pn->add_option("--corpus", pre.corpus, "query corpus")->required()->check(CLI::ExistingFile);
  pn->add_option("--encoder", pre.encoder, "encodes the queries (not needed with --self)");
  pn->add_flag("--self", pre.self,
               "queries are the store's own keys; memory.exclusion applies only here");
  pn->add_option("--out", pre.out, "neighbor cache path")->required();

  auto add_train_inputs = [&](CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--train", tr.train)->required()->check(CLI::ExistingFile);
    sub->add_option("--dev", tr.dev)->required()->check(CLI::ExistingFile);
    sub->add_option("--vocab", tr.vocab)->required()->check(CLI::ExistingFile);
    sub->add_option("--neighbors", tr.neighbors, "training neighbor cache");
    sub->add_option("--dev-neighbors", tr.dev_neighbors, "dev neighbor cache");
  };
  auto* tn = app.add_subcommand("train", "train a transformer, XL or memory-augmented model");
  add_train_inputs(tn);
  tn->add_option("--out", tr.out, "best checkpoint path")->required();
  tn->add_option("--warm-start", tr.warm_start, "copy matching parameters from a checkpoint");
  tn->add_option("--state", tr.state, "training state saved at every evaluation");
  tn->add_flag("--resume", tr.resume, "continue from --state");

  auto add_eval_inputs = [&](CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
    sub->add_option("--vocab", ev.vocab)->required()->check(CLI::ExistingFile);
    sub->add_option("--corpus", ev.corpus)->required()->check(CLI::ExistingFile);
    sub->add_option("--neighbors", ev.neighbors, "neighbor cache for --corpus");
    sub->add_option("--out", out, "write the report here too");
  };
  auto* es = app.add_subcommand("eval", "static evaluation of a split");
  add_eval_inputs(es);
  es->add_option("--mode", ev.mode, "transformer, xl, knnlm, spalm or spalm+knn");
  es->add_flag("--records", ev.records, "emit one record per token");

  auto* tl = app.add_subcommand("tune-lambda", "pick the interpolation weight on dev");
  add_eval_inputs(tl);
  ev.lambda_grid = "0.05,0.1,0.2,0.3,0.4";
  tl->add_option("--mode", ev.mode, "knnlm or spalm+knn")->required();
  tl->add_option("--grid", ev.lambda_grid, "comma-separated lambda values");

  auto* az = app.add_subcommand("analyze", "gate histogram, z window and neighbor match rates");
  add_eval_inputs(az);
  az->add_option("--bins", an.bins);
  az->add_option("--window-begin", an.window_begin);
  az->add_option("--window-length", an.window_length);

  auto* sk = app.add_subcommand("sweep-k", "train and evaluate one model per neighbor count");
  add_train_inputs(sk);
  sk->add_option("--ks", ks, "comma-separated K values; 0 disables memory");
  sk->add_option("--out", out, "write the sweep table here too");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_synthetic(common, out_dir);
    if (*pt) return pretrain(common, train_path, dev_path, vocab_path, out);
    if (*bm) return build_memory(common, encoder, vocab_path, corpus_path, out);
    if (*pn) return precompute(common, pre);
    if (*tn) return train(common, tr);
    if (*es) return eval(common, ev, out);
    if (*tl) return tune_lambda(common, ev, out);
    if (*az) return analyze(common, ev, an, out);
    if (*sk) {
      SPALM_CHECK(!tr.neighbors.empty() && !tr.dev_neighbors.empty(),
                  "sweep-k needs --neighbors and --dev-neighbors");
      return sweep_k(common, tr, ks, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "spalm: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
