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

// Little-endian binary serialization helpers shared by the checkpoint,
// store and neighbor-cache formats. Reads name the field they were decoding
// when the stream runs dry.

#ifndef SPALM_BINARY_IO_H_
#define SPALM_BINARY_IO_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spalm::io {

void write_bytes(std::ostream& os, const void* data, std::size_t size);
void read_bytes(std::istream& is, void* data, std::size_t size, std::string_view field);

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, std::string_view s);  // u32 length + bytes
void write_f64_vector(std::ostream& os, std::span<const double> v);  // u64 count + data

std::uint8_t read_u8(std::istream& is, std::string_view field);
std::uint32_t read_u32(std::istream& is, std::string_view field);
std::uint64_t read_u64(std::istream& is, std::string_view field);
float read_f32(std::istream& is, std::string_view field);
double read_f64(std::istream& is, std::string_view field);
std::string read_string(std::istream& is, std::string_view field);
std::vector<double> read_f64_vector(std::istream& is, std::string_view field);

// Writes the 4-byte magic, or checks it on read.
void write_magic(std::ostream& os, std::string_view magic);
void expect_magic(std::istream& is, std::string_view magic);

// CRC-32 (zlib polynomial) of a byte range or a whole file.
std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0);
std::uint32_t file_crc32(const std::filesystem::path& path);

}  // namespace spalm::io

#endif  // SPALM_BINARY_IO_H_
