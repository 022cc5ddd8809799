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


#include "spalm/config.h"

#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "spalm/binary_io.h"
#include "spalm/corpus.h"

#ifndef SPALM_SOURCE_DIR
#define SPALM_SOURCE_DIR "."
#endif

namespace spalm::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Settings Settings::parse(std::string_view text, std::string_view source) {
  Settings s;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    SPALM_CHECK(eq != std::string_view::npos,
                source << ":" << line_no << ": expected key=value, got '" << line << "'");
    const auto key = trim(line.substr(0, eq));
    SPALM_CHECK(!key.empty(), source << ":" << line_no << ": empty key");
    s.set(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return s;
}

Settings Settings::load(const std::filesystem::path& path) {
  return parse(corpus::read_file(path), path.string());
}

void Settings::set(std::string key, std::string value) {
  values_.insert_or_assign(std::move(key), std::move(value));
}

void Settings::apply(std::string_view assignment) {
  const auto eq = assignment.find('=');
  SPALM_CHECK(eq != std::string_view::npos && eq > 0,
              "override must look like key=value, got '" << assignment << "'");
  set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

std::string Settings::get_string(std::string_view key, std::string_view fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? std::string(fallback) : it->second;
}

std::uint64_t Settings::get_u64(std::string_view key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  SPALM_CHECK(!v.empty() && v[0] != '-' && *end == '\0' && errno == 0,
              "setting " << key << "=" << v << " is not an unsigned integer");
  return x;
}

double Settings::get_f64(std::string_view key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  SPALM_CHECK(!v.empty() && *end == '\0' && errno == 0,
              "setting " << key << "=" << v << " is not a number");
  return x;
}

bool Settings::get_bool(std::string_view key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("setting " + std::string(key) + "=" + v + " is not a boolean");
}

void Settings::check_known(std::span<const std::string_view> known) const {
  for (const auto& [k, v] : values_) {
    bool ok = false;
    for (auto n : known) ok = ok || n == k;
    SPALM_CHECK(ok, "unknown setting '" << k << "'");
  }
}

std::string Settings::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string Manifest::render() const {
  std::ostringstream os;
  os << "command=" << command << "\n";
  os << "seed=" << seed << "\n";
  os << "git=" << git_describe() << "\n";
  for (const auto& [role, path] : inputs) {
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08" PRIx32, io::file_crc32(path));
    os << "input." << role << "=" << path.string() << " crc32=" << crc << "\n";
  }
  for (const auto& [k, v] : settings.entries()) os << "config." << k << "=" << v << "\n";
  return os.str();
}

void Manifest::save(const std::filesystem::path& path) const {
  corpus::write_file(path, render());
}

std::string git_describe() {
  const std::string cmd =
      "git -C \"" SPALM_SOURCE_DIR "\" describe --always --dirty 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return "unknown";
  std::string out;
  char buf[128];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return status == 0 && !out.empty() ? out : "unknown";
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Record& Record::add(std::string_view key, std::string_view value) {
  line_ += ' ';
  line_ += key;
  line_ += '=';
  line_ += value;
  return *this;
}

Record& Record::add(std::string_view key, double value) { return add(key, format_double(value)); }

Record& Record::add(std::string_view key, std::uint64_t value) {
  return add(key, std::to_string(value));
}

}  // namespace spalm::config
