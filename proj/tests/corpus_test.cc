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


#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "spalm/corpus.h"

using namespace spalm;
using namespace spalm::corpus;

namespace {
TokenizedCorpus make_corpus(std::vector<std::size_t> doc_lengths) {
  TokenizedCorpus c;
  std::uint32_t next = 2;
  for (auto len : doc_lengths) {
    c.doc_offsets.push_back(c.ids.size());
    for (std::size_t i = 0; i < len; ++i) c.ids.push_back(i == 0 ? kStartId : next++);
  }
  return c;
}
}  // namespace

TEST_CASE("char vocabulary covers every byte") {
  auto v = Vocabulary::build("hello\n\nworld", TokenLevel::kChar);
  CHECK(v.size() == 257);
  CHECK(v.size() - 1 <= 256);
  CHECK(v.token(kStartId) == "<s>");
  CHECK(v.count('l' + 1) == 3);
}

TEST_CASE("word vocabulary applies min_count") {
  auto v = Vocabulary::build("a a b", TokenLevel::kWord, 2);
  CHECK(v.size() == 3);  // <s>, <unk>, a
  CHECK(v.contains("a"));
  CHECK_FALSE(v.contains("b"));
  CHECK(v.id("b") == kUnknownId);
  CHECK(v.count(kUnknownId) == 1);
}

TEST_CASE("vocabulary construction is deterministic and rejects empty input") {
  const std::string text = "the cat sat on the mat the end\n\nzebra cat";
  CHECK(Vocabulary::build(text, TokenLevel::kWord) == Vocabulary::build(text, TokenLevel::kWord));
  CHECK_THROWS_AS(Vocabulary::build("", TokenLevel::kWord), Error);
  CHECK_THROWS_AS(Vocabulary::build("", TokenLevel::kChar), Error);
}

TEST_CASE("ids are dense and start symbol is id 0") {
  auto v = Vocabulary::build("x y z x", TokenLevel::kWord);
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < v.size(); ++i) {
    CHECK(v.id(v.token(i)) == i);
    CHECK(seen.insert(v.token(i)).second);
  }
  CHECK(v.id("<s>") == 0);
}

TEST_CASE("char round trip is the identity on arbitrary bytes") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255);
  auto vocab = Vocabulary::build(std::string(1, 'x'), TokenLevel::kChar);
  for (int trial = 0; trial < 50; ++trial) {
    std::string text(static_cast<std::size_t>(byte(rng)) * 4 + 1, '\0');
    for (auto& ch : text) ch = static_cast<char>(byte(rng));
    if (trial % 5 == 0) text += "\n\n\nnext doc\n\n";
    auto c = tokenize(text, vocab);
    c.validate(vocab.size());
    CHECK(detokenize(c.ids, vocab) == text);
  }
}

TEST_CASE("word round trip") {
  auto vocab = Vocabulary::build("hello world", TokenLevel::kWord);
  auto c = tokenize("hello world", vocab);
  REQUIRE(c.ids.size() == 3);  // <s> hello world
  CHECK(c.ids[0] == kStartId);
  CHECK(detokenize(c.ids, vocab) == "hello world");

  auto oov = tokenize("hello there", vocab);
  CHECK(oov.ids[2] == kUnknownId);
  CHECK(detokenize(oov.ids, vocab) == "hello <unk>");

  auto multi = tokenize("hello   world\n\n\nworld  hello\n", vocab);
  CHECK(multi.num_documents() == 2);
  CHECK(detokenize(multi.ids, vocab) == "hello world\n\nworld hello");
}

TEST_CASE("detokenize rejects out-of-range ids") {
  auto vocab = Vocabulary::build("a b", TokenLevel::kWord);
  std::vector<std::uint32_t> bad{0, 99};
  CHECK_THROWS_AS(detokenize(bad, vocab), Error);
}

TEST_CASE("vocabulary file round trip") {
  const auto dir = std::filesystem::temp_directory_path();
  for (auto level : {TokenLevel::kWord, TokenLevel::kChar}) {
    auto v = Vocabulary::build("alpha beta\tbeta \\x gamma\n\nbeta", level);
    auto path = dir / "spalm_vocab_test.txt";
    v.save(path);
    CHECK(Vocabulary::load(path) == v);
  }
}

TEST_CASE("token counts match an independent word count") {
  const std::string text = "one two  three\nfour\n\n five six\tseven\n\n\n eight";
  std::istringstream in(text);
  std::string w;
  std::size_t words = 0;
  while (in >> w) ++words;
  auto vocab = Vocabulary::build(text, TokenLevel::kWord);
  auto c = tokenize(text, vocab);
  CHECK(c.size() - c.num_documents() == words);
  CHECK(c.num_documents() == 3);
}

TEST_CASE("segments of a 10-token lane") {
  auto c = make_corpus({10});
  auto segs = segment_stream(c, 4, 1);
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].length == 4);
  CHECK(segs[1].length == 4);
  CHECK(segs[2].length == 2);
  CHECK(segs[2].inputs.size() == 4);
  CHECK(segs[2].mask[2] == 0);  // padding
  CHECK(segs[2].mask[1] == 0);  // last token has no target
  CHECK(segs[2].mask[0] == 1);
  CHECK(segs[0].targets[3] == segs[1].inputs[0]);
}

TEST_CASE("lane concatenation reproduces the lane stream") {
  auto c = make_corpus({7, 3, 12, 5, 9});
  LaneStreams streams(c, 2);
  auto segs = segment_stream(c, 4, 2);
  for (std::size_t lane = 0; lane < 2; ++lane) {
    std::vector<std::uint32_t> joined;
    for (const auto& s : segs)
      if (s.lane == lane)
        joined.insert(joined.end(), s.inputs.begin(), s.inputs.begin() + s.length);
    auto expect = streams.lane_tokens(lane);
    CHECK(std::equal(joined.begin(), joined.end(), expect.begin(), expect.end()));
  }
}

TEST_CASE("lanes partition documents disjointly and exhaustively") {
  auto c = make_corpus({7, 3, 12, 5, 9, 2});
  LaneStreams streams(c, 2);
  std::vector<int> owner(c.num_documents(), 0);
  std::size_t tokens = 0;
  for (std::size_t lane = 0; lane < 2; ++lane) {
    for (auto d : streams.lane_documents(lane)) ++owner[d];
    tokens += streams.lane_tokens(lane).size();
  }
  for (int o : owner) CHECK(o == 1);
  CHECK(tokens == c.size());
  // Every token is consumed exactly once.
  std::vector<int> seen(c.size(), 0);
  for (const auto& s : segment_stream(c, 5, 2))
    for (std::size_t i = 0; i < s.length; ++i) ++seen[s.positions[i]];
  for (int v : seen) CHECK(v == 1);
}

TEST_CASE("document starts are never scored as targets") {
  auto c = make_corpus({4, 4});
  auto segs = segment_stream(c, 8, 1);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].mask[3] == 0);  // target is the next document's <s>
  CHECK(segs[0].mask[4] == 1);
}
