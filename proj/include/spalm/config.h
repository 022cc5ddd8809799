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


#ifndef SPALM_CONFIG_H_
#define SPALM_CONFIG_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spalm/common.h"

namespace spalm::config {

// Flat key=value settings. In files, '#' starts a comment, blank lines are
// ignored and whitespace around keys and values is trimmed. Later
// assignments override earlier ones.
class Settings {
 public:
  static Settings parse(std::string_view text, std::string_view source = "<text>");
  static Settings load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  // "key=value"
  void apply(std::string_view assignment);

  bool has(std::string_view key) const { return values_.count(std::string(key)) != 0; }
  std::string get_string(std::string_view key, std::string_view fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  double get_f64(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  // Throws on the first key that is not in `known`, to catch typos.
  void check_known(std::span<const std::string_view> known) const;

  const std::map<std::string, std::string, std::less<>>& entries() const { return values_; }
  // Sorted "key=value" lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

// Written next to every output: what ran, with which settings, on which
// inputs.
struct Manifest {
  std::string command;
  Settings settings;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::filesystem::path>> inputs;  // role, path

  // "command=", "seed=", "git=", then "input.<role>=<path> crc32=<hex>"
  // lines, then "config.<key>=<value>" lines.
  std::string render() const;
  void save(const std::filesystem::path& path) const;
};

// `git describe --always --dirty` of the source tree, or "unknown".
std::string git_describe();

// One line-delimited report record: "<kind> k1=v1 k2=v2 ...", fields in the
// order given. Doubles use %.17g so records round-trip exactly.
class Record {
 public:
  explicit Record(std::string_view kind) : line_(kind) {}
  Record& add(std::string_view key, std::string_view value);
  Record& add(std::string_view key, const char* value) { return add(key, std::string_view(value)); }
  Record& add(std::string_view key, double value);
  Record& add(std::string_view key, std::uint64_t value);
  Record& add(std::string_view key, std::uint32_t value) {
    return add(key, static_cast<std::uint64_t>(value));
  }
  Record& add(std::string_view key, int value) { return add(key, static_cast<std::uint64_t>(value)); }
  const std::string& str() const { return line_; }

 private:
  std::string line_;
};

std::string format_double(double v);

}  // namespace spalm::config

#endif  // SPALM_CONFIG_H_
