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

#include "spalm/corpus.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace spalm::corpus {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

template <typename F>
void for_each_word(std::string_view text, F&& f) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) f(text.substr(start, i - start));
  }
}

std::string escape_byte_token(const std::string& tok) {
  std::string out;
  for (unsigned char c : tok) {
    if (c >= 0x21 && c < 0x7f && c != '\\') {
      out.push_back(static_cast<char>(c));
    } else {
      static const char* hex = "0123456789abcdef";
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 15]);
    }
  }
  return out;
}

std::string unescape_byte_token(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 3 < s.size() && s[i + 1] == 'x') {
      out.push_back(static_cast<char>(std::stoi(std::string(s.substr(i + 2, 2)), nullptr, 16)));
      i += 3;
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

}  // namespace

std::string_view level_name(TokenLevel level) {
  return level == TokenLevel::kChar ? "char" : "word";
}

TokenLevel parse_level(std::string_view name) {
  if (name == "char") return TokenLevel::kChar;
  if (name == "word") return TokenLevel::kWord;
  throw Error("unknown token level '" + std::string(name) + "' (expected char or word)");
}

void Vocabulary::add(std::string token, std::uint64_t count) {
  const auto id = static_cast<std::uint32_t>(tokens_.size());
  SPALM_CHECK(index_.emplace(token, id).second, "duplicate vocabulary token '" << token << "'");
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
}

Vocabulary Vocabulary::build(std::string_view text, TokenLevel level, std::uint64_t min_count) {
  SPALM_CHECK(!text.empty(), "cannot build a vocabulary from empty input");
  Vocabulary v;
  v.level_ = level;
  const auto docs = split_documents(text, level);
  if (level == TokenLevel::kChar) {
    std::vector<std::uint64_t> counts(256, 0);
    for (unsigned char c : text) ++counts[c];
    v.add(std::string(kStartToken), docs.size());
    for (int b = 0; b < 256; ++b) v.add(std::string(1, static_cast<char>(b)), counts[b]);
    return v;
  }
  std::map<std::string, std::uint64_t, std::less<>> counts;
  for_each_word(text, [&](std::string_view w) {
    auto it = counts.find(w);
    if (it == counts.end()) counts.emplace(std::string(w), 1);
    else ++it->second;
  });
  SPALM_CHECK(!counts.empty(), "cannot build a vocabulary: input has no tokens");
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  std::uint64_t unknown = 0;
  for (auto& [w, c] : counts) {
    if (w == kStartToken || w == kUnknownToken) continue;
    if (c >= min_count) kept.emplace_back(w, c);
    else unknown += c;
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  v.add(std::string(kStartToken), docs.size());
  v.add(std::string(kUnknownToken), unknown);
  for (auto& [w, c] : kept) v.add(w, c);
  return v;
}

const std::string& Vocabulary::token(std::uint32_t id) const {
  SPALM_CHECK(id < tokens_.size(), "token id " << id << " out of range for vocabulary of size "
                                               << tokens_.size());
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

std::uint32_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  SPALM_CHECK(level_ == TokenLevel::kWord, "unknown byte token in char vocabulary");
  return kUnknownId;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  SPALM_CHECK(out, "cannot write vocabulary " << path);
  out << "#spalm-vocab level=" << level_name(level_) << "\n";
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const bool special = i == kStartId || (level_ == TokenLevel::kWord && i == kUnknownId);
    const std::string tok =
        level_ == TokenLevel::kChar && !special ? escape_byte_token(tokens_[i]) : tokens_[i];
    out << tok << "\t" << counts_[i] << "\n";
  }
  SPALM_CHECK(out.good(), "failed writing vocabulary " << path);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  SPALM_CHECK(in, "cannot open vocabulary " << path);
  std::string header;
  std::getline(in, header);
  const std::string prefix = "#spalm-vocab level=";
  SPALM_CHECK(header.rfind(prefix, 0) == 0, "vocabulary " << path << " lacks header");
  Vocabulary v;
  v.level_ = parse_level(header.substr(prefix.size()));
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.rfind('\t');
    SPALM_CHECK(tab != std::string::npos, "malformed vocabulary line: '" << line << "'");
    std::string tok = line.substr(0, tab);
    const std::uint64_t count = std::stoull(line.substr(tab + 1));
    const bool special = v.tokens_.size() == kStartId ||
                         (v.level_ == TokenLevel::kWord && v.tokens_.size() == kUnknownId);
    if (v.level_ == TokenLevel::kChar && !special) tok = unescape_byte_token(tok);
    v.add(std::move(tok), count);
  }
  if (v.level_ == TokenLevel::kChar)
    SPALM_CHECK(v.size() == 257, "char vocabulary must have 257 entries, found " << v.size());
  return v;
}

void TokenizedCorpus::validate(std::size_t vocab_size) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    SPALM_CHECK(ids[i] < vocab_size, "token id " << ids[i] << " at " << i
                                                 << " exceeds vocabulary size " << vocab_size);
  for (std::size_t i = 0; i < doc_offsets.size(); ++i) {
    SPALM_CHECK(doc_offsets[i] < ids.size(), "document offset out of range");
    if (i) SPALM_CHECK(doc_offsets[i] > doc_offsets[i - 1], "document offsets not increasing");
  }
}

std::vector<std::string_view> split_documents(std::string_view text, TokenLevel level) {
  std::vector<std::string_view> docs;
  if (level == TokenLevel::kChar) {
    std::size_t start = 0, i = 0;
    while (i < text.size()) {
      if (text[i] == '\n' && i + 1 < text.size() && text[i + 1] == '\n') {
        std::size_t end = i + 2;
        while (end < text.size() && text[end] == '\n') ++end;
        docs.push_back(text.substr(start, end - start));
        start = i = end;
      } else {
        ++i;
      }
    }
    if (start < text.size()) docs.push_back(text.substr(start));
    return docs;
  }
  std::size_t pos = 0;
  std::size_t doc_start = std::string_view::npos, doc_end = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const auto line = text.substr(pos, eol - pos);
    const bool blank = std::all_of(line.begin(), line.end(), is_space);
    if (blank) {
      if (doc_start != std::string_view::npos) {
        docs.push_back(text.substr(doc_start, doc_end - doc_start));
        doc_start = std::string_view::npos;
      }
    } else {
      if (doc_start == std::string_view::npos) doc_start = pos;
      doc_end = eol;
    }
    pos = eol + 1;
  }
  if (doc_start != std::string_view::npos) docs.push_back(text.substr(doc_start, doc_end - doc_start));
  return docs;
}

TokenizedCorpus tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenizedCorpus c;
  c.level = vocab.level();
  for (auto doc : split_documents(text, vocab.level())) {
    c.doc_offsets.push_back(c.ids.size());
    c.ids.push_back(kStartId);
    if (vocab.level() == TokenLevel::kChar) {
      for (unsigned char b : doc) c.ids.push_back(static_cast<std::uint32_t>(b) + 1);
    } else {
      for_each_word(doc, [&](std::string_view w) { c.ids.push_back(vocab.id(w)); });
    }
  }
  return c;
}

std::string detokenize(std::span<const std::uint32_t> ids, const Vocabulary& vocab) {
  std::string out;
  if (vocab.level() == TokenLevel::kChar) {
    for (auto id : ids) {
      SPALM_CHECK(id < vocab.size(), "token id " << id << " out of range " << vocab.size());
      if (id != kStartId) out.push_back(static_cast<char>(id - 1));
    }
    return out;
  }
  bool line_start = true;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    SPALM_CHECK(id < vocab.size(), "token id " << id << " out of range " << vocab.size());
    if (id == kStartId) {
      if (!out.empty()) out += "\n\n";
      line_start = true;
      continue;
    }
    if (!line_start) out.push_back(' ');
    out += vocab.token(id);
    line_start = false;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  SPALM_CHECK(in, "cannot open " << path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary);
  SPALM_CHECK(out, "cannot write " << path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  SPALM_CHECK(out.good(), "failed writing " << path);
}

// ---------------------------------------------------------------------------

LaneStreams::LaneStreams(const TokenizedCorpus& corpus, std::size_t lanes) {
  SPALM_CHECK(lanes >= 1, "need at least one lane");
  lane_ids_.resize(lanes);
  lane_positions_.resize(lanes);
  lane_docs_.resize(lanes);
  for (std::size_t doc = 0; doc < corpus.num_documents(); ++doc) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < lanes; ++l)
      if (lane_ids_[l].size() < lane_ids_[best].size()) best = l;
    lane_docs_[best].push_back(doc);
    for (auto p = corpus.document_begin(doc); p < corpus.document_end(doc); ++p) {
      lane_ids_[best].push_back(corpus.ids[p]);
      lane_positions_[best].push_back(p);
    }
  }
}

std::size_t LaneStreams::num_segments(std::size_t segment_len) const {
  SPALM_CHECK(segment_len >= 1, "segment length must be >= 1");
  std::size_t longest = 0;
  for (const auto& l : lane_ids_) longest = std::max(longest, l.size());
  return (longest + segment_len - 1) / segment_len;
}

Segment LaneStreams::segment(std::size_t lane, std::size_t index, std::size_t segment_len) const {
  SPALM_CHECK(lane < lanes(), "lane " << lane << " out of range");
  SPALM_CHECK(segment_len >= 1, "segment length must be >= 1");
  const auto& ids = lane_ids_[lane];
  const auto& pos = lane_positions_[lane];
  Segment s;
  s.lane = lane;
  s.index = index;
  s.inputs.assign(segment_len, kStartId);
  s.targets.assign(segment_len, kStartId);
  s.positions.assign(segment_len, kNoPosition);
  s.mask.assign(segment_len, 0);
  const std::size_t begin = index * segment_len;
  for (std::size_t i = 0; i < segment_len && begin + i < ids.size(); ++i) {
    const std::size_t p = begin + i;
    s.inputs[i] = ids[p];
    s.positions[i] = pos[p];
    s.length = i + 1;
    if (p + 1 < ids.size()) {
      s.targets[i] = ids[p + 1];
      s.mask[i] = ids[p + 1] != kStartId;
    }
  }
  return s;
}

std::vector<Segment> segment_stream(const TokenizedCorpus& corpus, std::size_t segment_len,
                                    std::size_t lanes) {
  LaneStreams streams(corpus, lanes);
  std::vector<Segment> out;
  for (std::size_t l = 0; l < streams.lanes(); ++l) {
    const std::size_t count = (streams.lane_tokens(l).size() + segment_len - 1) / segment_len;
    for (std::size_t i = 0; i < count; ++i) out.push_back(streams.segment(l, i, segment_len));
  }
  return out;
}

}  // namespace spalm::corpus
