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

#include "doctest.h"
#include "spalm/config.h"
#include "spalm/corpus.h"

using namespace spalm;
using config::Settings;

TEST_CASE("settings parse, override and convert") {
  auto s = Settings::parse("# header\n  lr = 0.001  \nsteps=100 # trailing\n\nname = a b\nlr=0.002\n");
  CHECK(s.get_f64("lr", 0) == 0.002);
  CHECK(s.get_u64("steps", 0) == 100);
  CHECK(s.get_string("name", "") == "a b");
  CHECK(s.get_u64("missing", 7) == 7);
  s.apply("steps=250");
  CHECK(s.get_u64("steps", 0) == 250);
  s.apply("flag = yes");
  CHECK(s.get_bool("flag", false));
  CHECK(s.dump() == "flag=yes\nlr=0.002\nname=a b\nsteps=250\n");
}

TEST_CASE("settings errors") {
  CHECK_THROWS_AS(Settings::parse("novalue\n"), Error);
  CHECK_THROWS_AS(Settings::parse("= 3\n"), Error);
  auto s = Settings::parse("n=-3\nx=abc\nb=maybe\n");
  CHECK_THROWS_AS(s.get_u64("n", 0), Error);
  CHECK_THROWS_AS(s.get_f64("x", 0), Error);
  CHECK_THROWS_AS(s.get_bool("b", false), Error);
  CHECK_THROWS_AS(s.apply("noequals"), Error);
  const std::string_view known[] = {"n", "x"};
  CHECK_THROWS_AS(s.check_known(known), Error);
  const std::string_view all[] = {"n", "x", "b"};
  CHECK_NOTHROW(s.check_known(all));
}

TEST_CASE("records keep field order and round-trip doubles") {
  auto r = config::Record("eval").add("mode", "xl").add("tokens", 12).add("nll", 0.1);
  CHECK(r.str() == "eval mode=xl tokens=12 nll=0.10000000000000001");
  CHECK(std::stod(config::format_double(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("manifest lists command, seed, inputs with checksums and config") {
  const auto path = std::filesystem::temp_directory_path() / "spalm_manifest_input.txt";
  corpus::write_file(path, "hello");
  config::Manifest m;
  m.command = "train";
  m.seed = 42;
  m.settings.set("lr", "0.1");
  m.inputs.emplace_back("corpus", path);
  const auto text = m.render();
  CHECK(text.rfind("command=train\nseed=42\ngit=", 0) == 0);
  // crc32("hello") = 0x3610a686
  CHECK(text.find("input.corpus=" + path.string() + " crc32=3610a686\n") != std::string::npos);
  CHECK(text.find("config.lr=0.1\n") != std::string::npos);
  CHECK(config::git_describe() != "");
  std::filesystem::remove(path);
}
