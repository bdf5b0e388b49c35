// Copyright 2026 The vulnpref Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Shared vocabulary types, digests, seeded sampling and JSONL helpers.

#ifndef VULNPREF_COMMON_HPP
#define VULNPREF_COMMON_HPP

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace vulnpref {

using json = nlohmann::json;

inline constexpr std::string_view kVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  EmptyInput() : Error("empty input") {}
  explicit EmptyInput(const std::string& what) : Error(what) {}
};

// ---------------------------------------------------------------------------
// Languages and labels
// ---------------------------------------------------------------------------

enum class Language { kCSharp, kJavaScript, kJava, kPython, kC };

inline constexpr std::array<Language, 5> kAllLanguages = {
    Language::kCSharp, Language::kJavaScript, Language::kJava,
    Language::kPython, Language::kC};

inline std::string_view to_string(Language lang) {
  switch (lang) {
    case Language::kCSharp: return "csharp";
    case Language::kJavaScript: return "javascript";
    case Language::kJava: return "java";
    case Language::kPython: return "python";
    case Language::kC: return "c";
  }
  return "c";
}

inline Language parse_language(std::string_view s) {
  for (Language l : kAllLanguages) {
    if (to_string(l) == s) return l;
  }
  throw InvalidArgument("unsupported language: " + std::string(s));
}

// Name used inside fenced code blocks and prompts.
inline std::string_view fence_tag(Language lang) {
  switch (lang) {
    case Language::kCSharp: return "csharp";
    case Language::kJavaScript: return "javascript";
    case Language::kJava: return "java";
    case Language::kPython: return "python";
    case Language::kC: return "c";
  }
  return "";
}

enum class Label { kVulnerable, kNonVulnerable };

inline std::string_view to_string(Label label) {
  return label == Label::kVulnerable ? "vulnerable" : "non_vulnerable";
}

inline Label parse_label(std::string_view s) {
  if (s == "vulnerable") return Label::kVulnerable;
  if (s == "non_vulnerable") return Label::kNonVulnerable;
  throw InvalidArgument("unknown label: " + std::string(s));
}

inline Label opposite(Label label) {
  return label == Label::kVulnerable ? Label::kNonVulnerable
                                     : Label::kVulnerable;
}

NLOHMANN_JSON_SERIALIZE_ENUM(Language, {{Language::kCSharp, "csharp"},
                                        {Language::kJavaScript, "javascript"},
                                        {Language::kJava, "java"},
                                        {Language::kPython, "python"},
                                        {Language::kC, "c"}})

NLOHMANN_JSON_SERIALIZE_ENUM(Label, {{Label::kVulnerable, "vulnerable"},
                                     {Label::kNonVulnerable, "non_vulnerable"}})

// ---------------------------------------------------------------------------
// Digests (OpenSSL EVP)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hex_digest(const EVP_MD* md, std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, md, nullptr) != 1) {
    throw Error("digest computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[out[i] >> 4]);
    hex.push_back(kHex[out[i] & 0xF]);
  }
  return hex;
}

}  // namespace detail

inline std::string md5_hex(std::string_view data) {
  return detail::hex_digest(EVP_md5(), data);
}

inline std::string sha256_hex(std::string_view data) {
  return detail::hex_digest(EVP_sha256(), data);
}

// Canonical serialization: object keys sorted, no whitespace. Used for every
// content address so that logically equal documents hash equally.
inline std::string canonical_dump(const json& j) { return j.dump(); }

inline std::string json_digest(const json& j) {
  return sha256_hex(canonical_dump(j));
}

// ---------------------------------------------------------------------------
// Deterministic sampling
// ---------------------------------------------------------------------------

// mt19937_64 is fully specified by the standard; distributions are not, so
// bounded draws are done here by rejection to keep seeds portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw InvalidArgument("Rng::below(0)");
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % bound;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    // Box-Muller; one value per call keeps the stream simple to reason about.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Picks k distinct elements uniformly without replacement, in draw order.
template <class T>
std::vector<T> sample_without_replacement(std::vector<T> pool, std::size_t k,
                                          Rng& rng) {
  if (k > pool.size()) throw InvalidArgument("sample larger than pool");
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  }
  pool.resize(k);
  return pool;
}

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

inline std::string_view trim(std::string_view s) {
  const auto ws = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool starts_with_icase(std::string_view s, std::string_view prefix) {
  if (prefix.size() > s.size()) return false;
  return to_lower(s.substr(0, prefix.size())) == to_lower(prefix);
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.emplace_back(text.substr(start));
      break;
    }
    lines.emplace_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

inline std::string replace_all(std::string s, std::string_view from,
                               std::string_view to) {
  if (from.empty()) return s;
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

// Percentage rounded half-up to two decimals.
inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

inline double round2(double value) {
  return std::floor(value * 100.0 + 0.5 + 1e-9) / 100.0;
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

// Sink for non-fatal problems (skipped files, dropped samples). Stages never
// abort on these; callers decide whether to print or collect them.
using DiagnosticSink = std::function<void(std::string_view)>;

inline DiagnosticSink stderr_sink() {
  return [](std::string_view msg) { std::cerr << "[vulnpref] " << msg << '\n'; };
}

inline DiagnosticSink null_sink() {
  return [](std::string_view) {};
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file and renames, so readers never observe a
// partially written file.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::string_view content) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  static std::atomic<std::uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(counter.fetch_add(1)) + "." +
         std::to_string(std::hash<std::string>{}(path.string()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

template <class T>
std::vector<json> to_json_rows(const std::vector<T>& items) {
  std::vector<json> rows;
  rows.reserve(items.size());
  for (const auto& item : items) rows.emplace_back(item);
  return rows;
}

template <class T>
std::vector<T> from_json_rows(const std::vector<json>& rows) {
  std::vector<T> items;
  items.reserve(rows.size());
  for (const auto& r : rows) items.push_back(r.get<T>());
  return items;
}

}  // namespace vulnpref

#endif  // VULNPREF_COMMON_HPP
