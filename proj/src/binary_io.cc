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

#include "spalm/binary_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <zlib.h>

#include "spalm/common.h"

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace spalm::io {

void write_bytes(std::ostream& os, const void* data, std::size_t size) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  SPALM_CHECK(os.good(), "write failed");
}

void read_bytes(std::istream& is, void* data, std::size_t size, std::string_view field) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  SPALM_CHECK(is.gcount() == static_cast<std::streamsize>(size),
              "truncated input while reading field '" << field << "'");
}

namespace {
template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}
template <typename T>
T read_pod(std::istream& is, std::string_view field) {
  T v{};
  read_bytes(is, &v, sizeof(T), field);
  return v;
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_pod(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }
void write_f32(std::ostream& os, float v) { write_pod(os, v); }
void write_f64(std::ostream& os, double v) { write_pod(os, v); }

void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

void write_f64_vector(std::ostream& os, std::span<const double> v) {
  write_u64(os, v.size());
  write_bytes(os, v.data(), v.size() * sizeof(double));
}

std::uint8_t read_u8(std::istream& is, std::string_view field) {
  return read_pod<std::uint8_t>(is, field);
}
std::uint32_t read_u32(std::istream& is, std::string_view field) {
  return read_pod<std::uint32_t>(is, field);
}
std::uint64_t read_u64(std::istream& is, std::string_view field) {
  return read_pod<std::uint64_t>(is, field);
}
float read_f32(std::istream& is, std::string_view field) {
  return read_pod<float>(is, field);
}
double read_f64(std::istream& is, std::string_view field) {
  return read_pod<double>(is, field);
}

std::string read_string(std::istream& is, std::string_view field) {
  const std::uint32_t n = read_u32(is, field);
  SPALM_CHECK(n < (1u << 20), "implausible string length " << n << " in field '" << field << "'");
  std::string s(n, '\0');
  read_bytes(is, s.data(), n, field);
  return s;
}

std::vector<double> read_f64_vector(std::istream& is, std::string_view field) {
  const std::uint64_t n = read_u64(is, field);
  SPALM_CHECK(n < (std::uint64_t{1} << 34), "implausible vector length in field '" << field << "'");
  std::vector<double> v(n);
  read_bytes(is, v.data(), n * sizeof(double), field);
  return v;
}

void write_magic(std::ostream& os, std::string_view magic) {
  SPALM_CHECK(magic.size() == 4, "magic must be 4 bytes");
  write_bytes(os, magic.data(), 4);
}

void expect_magic(std::istream& is, std::string_view magic) {
  char buf[4] = {};
  read_bytes(is, buf, 4, "magic");
  SPALM_CHECK(std::memcmp(buf, magic.data(), 4) == 0,
              "bad magic: expected '" << magic << "', got '" << std::string(buf, 4) << "'");
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed) {
  uLong crc = seed;
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t file_crc32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  SPALM_CHECK(in, "cannot open " << path);
  std::vector<std::uint8_t> buf(1 << 20);
  std::uint32_t crc = 0;
  while (in) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got == 0) break;
    crc = crc32(std::span<const std::uint8_t>(buf.data(), got), crc);
  }
  return crc;
}

}  // namespace spalm::io
