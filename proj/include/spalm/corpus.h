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

// Text ingestion: vocabularies, tokenization and the lane/segment stream
// used for segment-recurrent training and evaluation.
//
// Documents are separated by blank lines. Every document starts with the
// start-of-sentence id 0. At char level each byte b maps to id b + 1, so the
// vocabulary always has 257 entries and round trips are lossless. At word
// level tokens are whitespace-delimited; detokenize joins words with single
// spaces and documents with one blank line, so whitespace is normalized.

#ifndef SPALM_CORPUS_H_
#define SPALM_CORPUS_H_

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spalm/common.h"

namespace spalm::corpus {

enum class TokenLevel : std::uint8_t { kChar = 0, kWord = 1 };

std::string_view level_name(TokenLevel level);
TokenLevel parse_level(std::string_view name);

inline constexpr std::uint32_t kStartId = 0;
inline constexpr std::uint32_t kUnknownId = 1;  // word level only
inline constexpr std::string_view kStartToken = "<s>";
inline constexpr std::string_view kUnknownToken = "<unk>";

class Vocabulary {
 public:
  // Char level: fixed 257-entry byte table. Word level: tokens with count >=
  // min_count, ordered by descending count then lexicographically.
  static Vocabulary build(std::string_view text, TokenLevel level,
                          std::uint64_t min_count = 1);

  TokenLevel level() const { return level_; }
  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::uint32_t id) const;
  std::uint64_t count(std::uint32_t id) const { return counts_.at(id); }
  // Word level: unknown tokens map to kUnknownId.
  std::uint32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;

  // Text format: a "#spalm-vocab level=<char|word>" header, then one
  // "<token>\t<count>" line per id in id order. Char tokens are written with
  // \xHH escapes for non-printable bytes.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return level_ == other.level_ && tokens_ == other.tokens_ && counts_ == other.counts_;
  }

 private:
  void add(std::string token, std::uint64_t count);

  TokenLevel level_ = TokenLevel::kWord;
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct TokenizedCorpus {
  TokenLevel level = TokenLevel::kWord;
  std::vector<std::uint32_t> ids;
  // Start offset of each document in `ids`, strictly increasing.
  std::vector<std::uint64_t> doc_offsets;

  std::size_t size() const { return ids.size(); }
  std::size_t num_documents() const { return doc_offsets.size(); }
  std::uint64_t document_begin(std::size_t doc) const { return doc_offsets[doc]; }
  std::uint64_t document_end(std::size_t doc) const {
    return doc + 1 < doc_offsets.size() ? doc_offsets[doc + 1] : ids.size();
  }
  std::span<const std::uint32_t> document(std::size_t doc) const {
    return std::span<const std::uint32_t>(ids).subspan(
        document_begin(doc), document_end(doc) - document_begin(doc));
  }
  // Throws unless ids < vocab_size and boundaries are sorted and in range.
  void validate(std::size_t vocab_size) const;
};

// Splits text into documents at blank lines. Char level keeps the separator
// bytes with the preceding document.
std::vector<std::string_view> split_documents(std::string_view text, TokenLevel level);

TokenizedCorpus tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const std::uint32_t> ids, const Vocabulary& vocab);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kNoPosition = std::numeric_limits<std::uint64_t>::max();

// One fixed-length window of a lane. Entries past `length` are padding.
struct Segment {
  std::size_t lane = 0;
  std::size_t index = 0;   // segment number within the lane
  std::size_t length = 0;  // valid (non-padding) inputs
  std::vector<std::uint32_t> inputs;
  std::vector<std::uint32_t> targets;
  std::vector<std::uint64_t> positions;  // corpus index of each input
  std::vector<std::uint8_t> mask;        // 1 where the target is scored
};

// Documents dealt into `lanes` continuous streams: each document goes, in
// corpus order, to the lane with the fewest tokens so far (lowest index on
// ties). Within a lane, the target of an input is the next lane token;
// targets equal to kStartId and the last token of a lane are unscored.
class LaneStreams {
 public:
  LaneStreams(const TokenizedCorpus& corpus, std::size_t lanes);

  std::size_t lanes() const { return lane_ids_.size(); }
  std::span<const std::uint32_t> lane_tokens(std::size_t lane) const { return lane_ids_[lane]; }
  std::span<const std::uint64_t> lane_positions(std::size_t lane) const {
    return lane_positions_[lane];
  }
  const std::vector<std::size_t>& lane_documents(std::size_t lane) const {
    return lane_docs_[lane];
  }
  // Segments needed to cover the longest lane.
  std::size_t num_segments(std::size_t segment_len) const;
  // Padded to segment_len; fully padded when the lane is exhausted.
  Segment segment(std::size_t lane, std::size_t index, std::size_t segment_len) const;

 private:
  std::vector<std::vector<std::uint32_t>> lane_ids_;
  std::vector<std::vector<std::uint64_t>> lane_positions_;
  std::vector<std::vector<std::size_t>> lane_docs_;
};

// Every (lane, segment) pair in lane-major order, skipping fully padded
// segments.
std::vector<Segment> segment_stream(const TokenizedCorpus& corpus, std::size_t segment_len,
                                    std::size_t lanes);

}  // namespace spalm::corpus

#endif  // SPALM_CORPUS_H_
