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

// Function-pair corpus construction from vulnerability-fixing commits:
// per-language function extraction, pre/post alignment, test-artifact and
// length filters, and digest-based deduplication.

#ifndef VULNPREF_CORPUS_HPP
#define VULNPREF_CORPUS_HPP

#include <limits>
#include <map>
#include <memory>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "vulnpref/common.hpp"

namespace vulnpref::corpus {

struct FileChange {
  std::string path;
  std::string pre_text;
  std::string post_text;
};

struct RawCommitRecord {
  std::string repo_id;
  std::string commit_hash;
  Language language = Language::kC;
  std::vector<FileChange> files;
  std::string cve_id;
  std::vector<std::string> cwe_ids;
  std::string cve_description;

  void validate() const {
    if (commit_hash.empty()) throw InvalidArgument("commit_hash is empty");
  }
};

struct FunctionPair {
  std::string pre_function;
  std::string post_function;
  Language language = Language::kC;
  std::string path;
  std::string function_name;
  std::string cve_id;
  std::vector<std::string> cwe_ids;
  std::string cve_description;
  std::string content_digest;
  std::string repo_id;
  std::string commit_hash;
  // Filled by filter_by_length; zero until then.
  std::size_t pre_token_count = 0;
  std::size_t post_token_count = 0;

  bool operator==(const FunctionPair&) const = default;
};

// A function left untouched by a fixing commit. These form the negative pool.
struct PoolFunction {
  std::string text;
  Language language = Language::kC;
  std::string path;
  std::string function_name;
  std::string repo_id;
  std::string content_digest;

  bool operator==(const PoolFunction&) const = default;
};

struct FilterConfig {
  static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

  std::size_t max_tokens = 4096;
  std::vector<std::string> test_path_markers = {"test", "tests", "spec",
                                                "__tests__"};
  std::vector<std::string> test_name_prefixes = {"test", "Test"};

  void validate() const {
    if (max_tokens == 0) throw InvalidArgument("max_tokens must be positive");
  }
};

inline void to_json(json& j, const FileChange& f) {
  j = json{{"path", f.path}, {"pre_text", f.pre_text}, {"post_text", f.post_text}};
}
inline void from_json(const json& j, FileChange& f) {
  j.at("path").get_to(f.path);
  j.at("pre_text").get_to(f.pre_text);
  j.at("post_text").get_to(f.post_text);
}

inline void to_json(json& j, const RawCommitRecord& r) {
  j = json{{"repo_id", r.repo_id},   {"commit_hash", r.commit_hash},
           {"language", r.language}, {"files", r.files},
           {"cve_id", r.cve_id},     {"cwe_ids", r.cwe_ids},
           {"cve_description", r.cve_description}};
}
inline void from_json(const json& j, RawCommitRecord& r) {
  j.at("repo_id").get_to(r.repo_id);
  j.at("commit_hash").get_to(r.commit_hash);
  r.language = parse_language(j.at("language").get<std::string>());
  j.at("files").get_to(r.files);
  j.at("cve_id").get_to(r.cve_id);
  j.at("cwe_ids").get_to(r.cwe_ids);
  j.at("cve_description").get_to(r.cve_description);
}

inline void to_json(json& j, const FunctionPair& p) {
  j = json{{"pre_function", p.pre_function},
           {"post_function", p.post_function},
           {"language", p.language},
           {"path", p.path},
           {"function_name", p.function_name},
           {"cve_id", p.cve_id},
           {"cwe_ids", p.cwe_ids},
           {"cve_description", p.cve_description},
           {"content_digest", p.content_digest},
           {"repo_id", p.repo_id},
           {"commit_hash", p.commit_hash},
           {"pre_token_count", p.pre_token_count},
           {"post_token_count", p.post_token_count}};
}
inline void from_json(const json& j, FunctionPair& p) {
  j.at("pre_function").get_to(p.pre_function);
  j.at("post_function").get_to(p.post_function);
  j.at("language").get_to(p.language);
  j.at("path").get_to(p.path);
  j.at("function_name").get_to(p.function_name);
  j.at("cve_id").get_to(p.cve_id);
  j.at("cwe_ids").get_to(p.cwe_ids);
  j.at("cve_description").get_to(p.cve_description);
  j.at("content_digest").get_to(p.content_digest);
  p.repo_id = j.value("repo_id", "");
  p.commit_hash = j.value("commit_hash", "");
  p.pre_token_count = j.value("pre_token_count", std::size_t{0});
  p.post_token_count = j.value("post_token_count", std::size_t{0});
}

inline void to_json(json& j, const PoolFunction& f) {
  j = json{{"text", f.text},       {"language", f.language},
           {"path", f.path},       {"function_name", f.function_name},
           {"repo_id", f.repo_id}, {"content_digest", f.content_digest}};
}
inline void from_json(const json& j, PoolFunction& f) {
  j.at("text").get_to(f.text);
  j.at("language").get_to(f.language);
  j.at("path").get_to(f.path);
  j.at("function_name").get_to(f.function_name);
  f.repo_id = j.value("repo_id", "");
  j.at("content_digest").get_to(f.content_digest);
}

// ---------------------------------------------------------------------------
// Digest normalization
// ---------------------------------------------------------------------------

// CRLF and lone CR become LF, trailing spaces/tabs are stripped from every
// line, and trailing newlines at the end of the text are dropped.
inline std::string normalize_for_digest(std::string_view text) {
  std::string lf;
  lf.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\r') {
      lf.push_back('\n');
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
    } else {
      lf.push_back(text[i]);
    }
  }
  std::string out;
  out.reserve(lf.size());
  for (const auto& line : split_lines(lf)) {
    std::string_view l = line;
    while (!l.empty() && (l.back() == ' ' || l.back() == '\t')) l.remove_suffix(1);
    out.append(l);
    out.push_back('\n');
  }
  while (!out.empty() && out.back() == '\n') out.pop_back();
  return out;
}

inline std::string content_digest(std::string_view function_text) {
  return md5_hex(normalize_for_digest(function_text));
}

// ---------------------------------------------------------------------------
// Function extraction
// ---------------------------------------------------------------------------

class ExtractionFailure : public Error {
 public:
  using Error::Error;
};

class UnsupportedLanguage : public Error {
 public:
  explicit UnsupportedLanguage(Language lang)
      : Error("no function extractor registered for " + std::string(to_string(lang))) {}
};

struct ExtractedFunction {
  std::string name;
  std::string scope;  // "Outer::Inner", empty at file level
  std::size_t param_count = 0;
  std::string text;

  // Alignment key across file versions.
  std::string key() const {
    return scope + "::" + name + "/" + std::to_string(param_count);
  }
};

class FunctionExtractor {
 public:
  virtual ~FunctionExtractor() = default;
  // Throws ExtractionFailure on source it cannot make sense of.
  virtual std::vector<ExtractedFunction> extract(std::string_view source) const = 0;
};

namespace detail {

inline bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '$';
}

// Blanks out comments and the contents of string/char literals, keeping every
// newline and the overall length, so structural scanning can ignore them.
inline std::string mask_c_family(std::string_view src, Language lang) {
  std::string out(src);
  const std::size_t n = src.size();
  std::size_t i = 0;
  auto blank = [&](std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to && k < n; ++k) {
      if (out[k] != '\n' && out[k] != '\r') out[k] = ' ';
    }
  };
  while (i < n) {
    const char c = src[i];
    if (c == '/' && i + 1 < n && src[i + 1] == '/') {
      std::size_t e = src.find('\n', i);
      if (e == std::string_view::npos) e = n;
      blank(i, e);
      i = e;
    } else if (c == '/' && i + 1 < n && src[i + 1] == '*') {
      std::size_t e = src.find("*/", i + 2);
      if (e == std::string_view::npos) throw ExtractionFailure("unterminated block comment");
      blank(i, e + 2);
      i = e + 2;
    } else if (lang == Language::kJava && src.substr(i, 3) == "\"\"\"") {
      std::size_t e = src.find("\"\"\"", i + 3);
      if (e == std::string_view::npos) throw ExtractionFailure("unterminated text block");
      blank(i + 3, e);
      i = e + 3;
    } else if (lang == Language::kCSharp && c == '@' && i + 1 < n && src[i + 1] == '"') {
      std::size_t k = i + 2;
      while (true) {
        if (k >= n) throw ExtractionFailure("unterminated verbatim string");
        if (src[k] == '"') {
          if (k + 1 < n && src[k + 1] == '"') {
            k += 2;
            continue;
          }
          break;
        }
        ++k;
      }
      blank(i + 2, k);
      i = k + 1;
    } else if (c == '"' || c == '\'' || (c == '`' && lang == Language::kJavaScript)) {
      std::size_t k = i + 1;
      while (k < n && src[k] != c) {
        if (src[k] == '\\') ++k;
        else if (src[k] == '\n' && c != '`') break;
        ++k;
      }
      if (k >= n || src[k] != c) throw ExtractionFailure("unterminated literal");
      blank(i + 1, k);
      i = k + 1;
    } else {
      ++i;
    }
  }
  return out;
}

inline std::string mask_python(std::string_view src) {
  std::string out(src);
  const std::size_t n = src.size();
  std::size_t i = 0;
  auto blank = [&](std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to && k < n; ++k) {
      if (out[k] != '\n' && out[k] != '\r') out[k] = ' ';
    }
  };
  while (i < n) {
    const char c = src[i];
    if (c == '#') {
      std::size_t e = src.find('\n', i);
      if (e == std::string_view::npos) e = n;
      blank(i, e);
      i = e;
    } else if (c == '"' || c == '\'') {
      const std::string triple(3, c);
      if (src.substr(i, 3) == triple) {
        std::size_t e = src.find(triple, i + 3);
        if (e == std::string_view::npos) throw ExtractionFailure("unterminated triple-quoted string");
        blank(i + 3, e);
        i = e + 3;
      } else {
        std::size_t k = i + 1;
        while (k < n && src[k] != c && src[k] != '\n') {
          if (src[k] == '\\') ++k;
          ++k;
        }
        if (k >= n || src[k] != c) throw ExtractionFailure("unterminated string");
        blank(i + 1, k);
        i = k + 1;
      }
    } else {
      ++i;
    }
  }
  return out;
}

// Counts top-level parameters in a parenthesized list (without the parens).
inline std::size_t count_params(std::string_view params) {
  const std::string_view t = trim(params);
  if (t.empty() || t == "void") return 0;
  int depth = 0;
  std::size_t count = 1;
  bool trailing_comma = false;
  for (char c : t) {
    if (c == '(' || c == '[' || c == '{' || c == '<') ++depth;
    else if (c == ')' || c == ']' || c == '}' || c == '>') depth = std::max(0, depth - 1);
    else if (c == ',' && depth == 0) ++count;
    if (!std::isspace(static_cast<unsigned char>(c))) trailing_comma = (c == ',' && depth == 0);
  }
  return trailing_comma ? count - 1 : count;
}

inline std::string ident_before(std::string_view s, std::size_t pos) {
  std::size_t e = pos;
  while (e > 0 && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::size_t b = e;
  while (b > 0 && is_ident_char(s[b - 1])) --b;
  return std::string(s.substr(b, e - b));
}

inline std::size_t skip_space_back(std::string_view s, std::size_t pos) {
  while (pos > 0 && std::isspace(static_cast<unsigned char>(s[pos - 1]))) --pos;
  return pos;
}

inline const std::set<std::string, std::less<>>& control_keywords() {
  static const std::set<std::string, std::less<>> kw = {
      "if",      "for",    "while",  "switch",       "catch",  "foreach",
      "using",   "lock",   "fixed",  "synchronized", "return", "sizeof",
      "do",      "else",   "try",    "finally",      "new",    "function",
      "typeof",  "await",  "with",   "defined",      "case",   "throw",
      "checked", "unchecked"};
  return kw;
}

struct HeaderInfo {
  enum class Kind { kFunction, kScope, kBlock } kind = Kind::kBlock;
  std::string name;
  std::size_t param_count = 0;
};

// Classifies the text between the previous structural boundary and an
// opening brace.
inline HeaderInfo classify_header(std::string_view header) {
  HeaderInfo info;
  std::string_view h = trim(header);
  if (h.empty()) return info;

  // Trailer after the parameter list: qualifiers, throws clauses, C#
  // constraints, arrow markers. Strip known tails to find the closing paren.
  std::size_t close = std::string_view::npos;
  bool arrow = false;
  {
    std::string_view t = h;
    if (t.size() >= 2 && t.substr(t.size() - 2) == "=>") {
      arrow = true;
      t = trim(t.substr(0, t.size() - 2));
    } else if (t.size() >= 2 && t.substr(t.size() - 2) == "->") {
      return info;  // Java lambda body
    }
    if (!t.empty() && t.back() == ')') {
      close = t.size() - 1;
    } else if (!arrow) {
      // Qualifier/throws tail: find the last ')' and accept if what follows
      // is made of words, dots, commas and generic brackets only.
      const std::size_t last = t.rfind(')');
      if (last != std::string_view::npos) {
        const std::string_view tail = trim(t.substr(last + 1));
        static const std::regex kTail(
            R"(^(const|noexcept|override|final|volatile|throws|where|async|new\(\)|[A-Za-z_][\w.]*|[:,<>\s\[\]])*$)");
        const bool base_call = tail.rfind(':', 0) == 0;
        if (!base_call && std::regex_match(std::string(tail), kTail)) {
          close = last;
        }
      }
    }
    if (close != std::string_view::npos) h = t;
  }

  if (close != std::string_view::npos) {
    std::size_t open = std::string_view::npos;
    std::string name;
    std::size_t name_begin = 0;
    // Constructor initializers (`: base(x)`, `: a_(x), b_(y)`) sit between the
    // parameter list and the brace; step back over them.
    while (true) {
      int depth = 0;
      open = std::string_view::npos;
      for (std::size_t k = close + 1; k-- > 0;) {
        if (h[k] == ')') ++depth;
        else if (h[k] == '(') {
          if (--depth == 0) {
            open = k;
            break;
          }
        }
      }
      if (open == std::string_view::npos) return info;
      name = ident_before(h, open);
      name_begin = skip_space_back(h, open) - name.size();
      const std::size_t before = skip_space_back(h, name_begin);
      const bool initializer =
          before > 0 && (h[before - 1] == ',' ||
                         (h[before - 1] == ':' && (before < 2 || h[before - 2] != ':')));
      if (!initializer || name == "function") break;
      const std::size_t prev_close = h.substr(0, before - 1).rfind(')');
      if (prev_close == std::string_view::npos) return info;
      close = prev_close;
    }
    const std::size_t params = count_params(h.substr(open + 1, close - open - 1));
    const std::string prev = ident_before(h, name_begin);

    if (arrow || name == "function" || name.empty() ||
        (name == "async" && arrow)) {
      // JS: `name = (...) =>`, `name = function (...)`, `name: function(...)`
      std::size_t p = skip_space_back(h, name.empty() ? open : name_begin);
      if (ident_before(h, p) == "async") p = skip_space_back(h, p - 5);
      if (p > 0 && (h[p - 1] == '=' || h[p - 1] == ':') &&
          !(p > 1 && (h[p - 2] == '=' || h[p - 2] == '!' || h[p - 2] == '<' ||
                      h[p - 2] == '>'))) {
        const std::string bound = ident_before(h, p - 1);
        if (!bound.empty() && !control_keywords().contains(bound)) {
          info.kind = HeaderInfo::Kind::kFunction;
          info.name = bound;
          info.param_count = params;
        }
      }
      return info;
    }
    if (name.empty() || std::isdigit(static_cast<unsigned char>(name[0]))) return info;
    if (control_keywords().contains(name) || prev == "new") return info;
    // `else if (...)`, `} while (...)` handled by keywords above.
    info.kind = HeaderInfo::Kind::kFunction;
    info.name = name;
    info.param_count = params;
    return info;
  }

  static const std::regex kType(
      R"((?:^|[^\w])(class|struct|interface|namespace|enum|record|union)\s+([A-Za-z_][\w.]*))");
  std::smatch m;
  const std::string hs(h);
  if (std::regex_search(hs, m, kType)) {
    info.kind = HeaderInfo::Kind::kScope;
    info.name = m[2].str();
  }
  return info;
}

}  // namespace detail

// Brace-delimited languages (C, Java, C#, JavaScript). Works on a masked copy
// of the source so braces in strings and comments are ignored. Functions
// nested inside other functions are treated as part of the outer body.
class BraceFunctionExtractor : public FunctionExtractor {
 public:
  explicit BraceFunctionExtractor(Language lang) : lang_(lang) {}

  std::vector<ExtractedFunction> extract(std::string_view source) const override {
    const std::string masked = detail::mask_c_family(source, lang_);
    struct Frame {
      detail::HeaderInfo info;
      std::size_t start = 0;
    };
    std::vector<Frame> stack;
    std::vector<ExtractedFunction> out;
    std::size_t boundary = 0;  // one past the last ; { }
    int paren_depth = 0;

    for (std::size_t i = 0; i < masked.size(); ++i) {
      const char c = masked[i];
      if (c == '(') ++paren_depth;
      else if (c == ')') paren_depth = std::max(0, paren_depth - 1);
      else if (c == ';' && paren_depth == 0) boundary = i + 1;
      else if (c == '{') {
        const std::string_view header(masked.data() + boundary, i - boundary);
        Frame f;
        f.info = detail::classify_header(header);
        const bool inside_function = std::any_of(stack.begin(), stack.end(), [](const Frame& fr) {
          return fr.info.kind == detail::HeaderInfo::Kind::kFunction;
        });
        if (inside_function && f.info.kind != detail::HeaderInfo::Kind::kBlock) {
          f.info.kind = detail::HeaderInfo::Kind::kBlock;
        }
        f.start = declaration_start(masked, boundary, i);
        stack.push_back(std::move(f));
        boundary = i + 1;
        paren_depth = 0;
      } else if (c == '}') {
        if (stack.empty()) throw ExtractionFailure("unbalanced closing brace");
        Frame f = std::move(stack.back());
        stack.pop_back();
        if (f.info.kind == detail::HeaderInfo::Kind::kFunction) {
          ExtractedFunction fn;
          fn.name = f.info.name;
          fn.param_count = f.info.param_count;
          fn.scope = scope_of(stack);
          fn.text = std::string(source.substr(f.start, i + 1 - f.start));
          out.push_back(std::move(fn));
        }
        boundary = i + 1;
        paren_depth = 0;
      }
    }
    if (!stack.empty()) throw ExtractionFailure("unbalanced opening brace");
    return out;
  }

 private:
  template <class Frames>
  static std::string scope_of(const Frames& stack) {
    std::string scope;
    for (const auto& fr : stack) {
      if (fr.info.kind != detail::HeaderInfo::Kind::kScope) continue;
      if (!scope.empty()) scope += "::";
      scope += fr.info.name;
    }
    return scope;
  }

  // First non-blank character of the declaration, skipping preprocessor lines
  // that sit between the previous boundary and the signature.
  static std::size_t declaration_start(const std::string& masked, std::size_t from,
                                       std::size_t to) {
    std::size_t p = from;
    while (p < to) {
      while (p < to && std::isspace(static_cast<unsigned char>(masked[p]))) ++p;
      if (p < to && masked[p] == '#') {
        const std::size_t nl = masked.find('\n', p);
        p = (nl == std::string::npos || nl > to) ? to : nl + 1;
        continue;
      }
      break;
    }
    return p;
  }

  Language lang_;
};

// Indentation-delimited Python. Decorators directly above a def belong to it.
class IndentFunctionExtractor : public FunctionExtractor {
 public:
  std::vector<ExtractedFunction> extract(std::string_view source) const override {
    const std::string masked = detail::mask_python(source);
    const auto lines = split_lines(masked);
    const auto orig_lines = split_lines(source);

    // Line start offsets for mapping back into the source.
    std::vector<std::size_t> offsets(lines.size() + 1, 0);
    for (std::size_t k = 0; k < lines.size(); ++k) {
      offsets[k + 1] = offsets[k] + lines[k].size() + 1;
    }

    auto indent_of = [](const std::string& line) -> int {
      int col = 0;
      for (char ch : line) {
        if (ch == ' ') ++col;
        else if (ch == '\t') col = (col / 8 + 1) * 8;
        else break;
      }
      return col;
    };
    auto blank = [](const std::string& line) { return trim(line).empty(); };

    static const std::regex kDef(R"(^(\s*)(?:async\s+)?def\s+([A-Za-z_]\w*)\s*\()");
    static const std::regex kClass(R"(^(\s*)class\s+([A-Za-z_]\w*))");

    struct Scope {
      int indent;
      std::string name;
      bool is_function;
    };
    std::vector<Scope> scopes;
    std::vector<ExtractedFunction> out;
    int paren_balance = 0;
    for (const auto& l : lines) {
      for (char ch : l) {
        if (ch == '(' || ch == '[' || ch == '{') ++paren_balance;
        else if (ch == ')' || ch == ']' || ch == '}') --paren_balance;
        if (paren_balance < 0) throw ExtractionFailure("unbalanced brackets");
      }
    }
    if (paren_balance != 0) throw ExtractionFailure("unbalanced brackets");

    for (std::size_t k = 0; k < lines.size(); ++k) {
      const std::string& line = lines[k];
      if (blank(line)) continue;
      const int ind = indent_of(line);
      while (!scopes.empty() && scopes.back().indent >= ind) scopes.pop_back();

      std::smatch m;
      if (std::regex_search(line, m, kClass)) {
        scopes.push_back({ind, m[2].str(), false});
        continue;
      }
      if (!std::regex_search(line, m, kDef)) continue;

      const bool nested = std::any_of(scopes.begin(), scopes.end(),
                                      [](const Scope& s) { return s.is_function; });
      const std::string name = m[2].str();

      // Parameter list may span lines.
      const std::size_t open_abs = offsets[k] + static_cast<std::size_t>(m.position(0) + m.length(0)) - 1;
      int depth = 0;
      std::size_t close_abs = std::string::npos;
      for (std::size_t p = open_abs; p < masked.size(); ++p) {
        if (masked[p] == '(') ++depth;
        else if (masked[p] == ')' && --depth == 0) {
          close_abs = p;
          break;
        }
      }
      if (close_abs == std::string::npos) throw ExtractionFailure("unterminated parameter list");
      std::size_t sig_end_line = k;
      while (sig_end_line + 1 < lines.size() && offsets[sig_end_line + 1] <= close_abs) ++sig_end_line;

      std::size_t last = sig_end_line;
      for (std::size_t b = sig_end_line + 1; b < lines.size(); ++b) {
        if (blank(lines[b])) continue;
        if (indent_of(lines[b]) <= ind) break;
        last = b;
      }

      std::size_t first = k;
      while (first > 0 && !blank(lines[first - 1]) &&
             trim(lines[first - 1]).front() == '@' && indent_of(lines[first - 1]) == ind) {
        --first;
      }

      if (!nested) {
        ExtractedFunction fn;
        fn.name = name;
        fn.param_count = detail::count_params(
            std::string_view(masked).substr(open_abs + 1, close_abs - open_abs - 1));
        for (const auto& s : scopes) {
          if (!fn.scope.empty()) fn.scope += "::";
          fn.scope += s.name;
        }
        for (std::size_t b = first; b <= last; ++b) {
          fn.text += orig_lines[b];
          if (b != last) fn.text += '\n';
        }
        out.push_back(std::move(fn));
      }
      scopes.push_back({ind, name, true});
    }
    return out;
  }
};

class ExtractorRegistry {
 public:
  void add(Language lang, std::shared_ptr<const FunctionExtractor> ex) {
    extractors_[lang] = std::move(ex);
  }

  const FunctionExtractor& get(Language lang) const {
    const auto it = extractors_.find(lang);
    if (it == extractors_.end() || !it->second) throw UnsupportedLanguage(lang);
    return *it->second;
  }

  bool has(Language lang) const { return extractors_.contains(lang); }

  static ExtractorRegistry with_defaults() {
    ExtractorRegistry r;
    for (Language l : {Language::kC, Language::kJava, Language::kCSharp,
                       Language::kJavaScript}) {
      r.add(l, std::make_shared<BraceFunctionExtractor>(l));
    }
    r.add(Language::kPython, std::make_shared<IndentFunctionExtractor>());
    return r;
  }

 private:
  std::map<Language, std::shared_ptr<const FunctionExtractor>> extractors_;
};

namespace detail {

// Keys functions by alignment key in source order; repeated keys (same-arity
// overloads) get an ordinal suffix.
inline std::vector<std::pair<std::string, ExtractedFunction>> keyed(
    std::vector<ExtractedFunction> fns) {
  std::vector<std::pair<std::string, ExtractedFunction>> out;
  std::map<std::string, int> seen;
  for (auto& f : fns) {
    const std::string base = f.key();
    const int ord = seen[base]++;
    out.emplace_back(ord == 0 ? base : base + "#" + std::to_string(ord), std::move(f));
  }
  return out;
}

inline std::map<std::string, std::string> text_by_key(
    const std::vector<std::pair<std::string, ExtractedFunction>>& fns) {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fns) out.emplace(k, f.text);
  return out;
}

inline std::vector<ExtractedFunction> extract_or_empty(const FunctionExtractor& ex,
                                                       std::string_view text,
                                                       const std::string& where,
                                                       const DiagnosticSink& diag) {
  try {
    return ex.extract(text);
  } catch (const ExtractionFailure& e) {
    if (diag) diag("extraction failed for " + where + ": " + e.what());
    return {};
  }
}

}  // namespace detail

// Pairs of (pre, post) bodies for functions whose text changed, aligned by
// (scope, name, parameter count). Renamed or added/removed functions are not
// paired. A file that fails to parse contributes nothing.
inline std::vector<FunctionPair> extract_function_pairs(const RawCommitRecord& record,
                                                        const ExtractorRegistry& registry,
                                                        const DiagnosticSink& diag = stderr_sink()) {
  record.validate();
  const FunctionExtractor& ex = registry.get(record.language);
  std::vector<FunctionPair> pairs;
  for (const auto& file : record.files) {
    if (file.pre_text == file.post_text) continue;
    const std::string where = record.commit_hash + ":" + file.path;
    auto pre = detail::extract_or_empty(ex, file.pre_text, where + "@pre", diag);
    auto post = detail::extract_or_empty(ex, file.post_text, where + "@post", diag);
    if (pre.empty() || post.empty()) continue;
    const auto post_k = detail::text_by_key(detail::keyed(std::move(post)));
    for (const auto& [key, fn] : detail::keyed(std::move(pre))) {
      const auto it = post_k.find(key);
      if (it == post_k.end() || it->second == fn.text) continue;
      FunctionPair p;
      p.pre_function = fn.text;
      p.post_function = it->second;
      p.language = record.language;
      p.path = file.path;
      p.function_name = fn.scope.empty() ? fn.name : fn.scope + "::" + fn.name;
      p.cve_id = record.cve_id;
      p.cwe_ids = record.cwe_ids;
      p.cve_description = record.cve_description;
      p.content_digest = content_digest(p.pre_function);
      p.repo_id = record.repo_id;
      p.commit_hash = record.commit_hash;
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

// Functions present with identical text before and after the commit.
inline std::vector<PoolFunction> extract_unmodified_functions(const RawCommitRecord& record,
                                                              const ExtractorRegistry& registry,
                                                              const DiagnosticSink& diag = stderr_sink()) {
  record.validate();
  const FunctionExtractor& ex = registry.get(record.language);
  std::vector<PoolFunction> out;
  for (const auto& file : record.files) {
    const std::string where = record.commit_hash + ":" + file.path;
    auto post = detail::extract_or_empty(ex, file.post_text, where + "@post", diag);
    if (post.empty()) continue;
    const auto pre_k = detail::text_by_key(detail::keyed(
        file.pre_text == file.post_text
            ? post
            : detail::extract_or_empty(ex, file.pre_text, where + "@pre", diag)));
    for (const auto& [key, fn] : detail::keyed(std::move(post))) {
      const auto it = pre_k.find(key);
      if (it == pre_k.end() || it->second != fn.text) continue;
      PoolFunction pf;
      pf.text = fn.text;
      pf.language = record.language;
      pf.path = file.path;
      pf.function_name = fn.scope.empty() ? fn.name : fn.scope + "::" + fn.name;
      pf.repo_id = record.repo_id;
      pf.content_digest = content_digest(fn.text);
      out.push_back(std::move(pf));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

namespace detail {

// A path segment matches a marker when, ignoring case and the file
// extension, it equals the marker or carries it as a separated affix
// ("test_io.py", "io_test.c", "FooTest.java", "tests").
inline bool segment_matches(std::string_view segment, std::string_view marker) {
  if (segment.empty() || marker.empty()) return false;
  std::string_view stem = segment;
  if (const auto dot = stem.find('.'); dot != std::string_view::npos && dot > 0) {
    stem = stem.substr(0, dot);
  }
  const std::string ls = to_lower(stem);
  const std::string lm = to_lower(marker);
  if (ls == lm) return true;
  const auto sep = [](char c) { return c == '_' || c == '-' || c == '.'; };
  if (ls.size() > lm.size() && ls.compare(0, lm.size(), lm) == 0) {
    const char next = stem[lm.size()];
    if (sep(next) || std::isupper(static_cast<unsigned char>(next)) ||
        (lm.back() != 's' && next == 's' && ls.size() == lm.size() + 1)) {
      return true;
    }
  }
  if (ls.size() > lm.size() &&
      ls.compare(ls.size() - lm.size(), lm.size(), lm) == 0) {
    const std::size_t at = stem.size() - lm.size();
    const char before = stem[at - 1];
    if (sep(before) || (std::isupper(static_cast<unsigned char>(stem[at])) &&
                        std::islower(static_cast<unsigned char>(before)))) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

inline bool is_test_artifact(const FunctionPair& pair, const FilterConfig& cfg) {
  std::string_view path = pair.path;
  std::size_t start = 0;
  while (start <= path.size()) {
    std::size_t slash = path.find_first_of("/\\", start);
    if (slash == std::string_view::npos) slash = path.size();
    const auto segment = path.substr(start, slash - start);
    for (const auto& m : cfg.test_path_markers) {
      if (detail::segment_matches(segment, m)) return true;
    }
    start = slash + 1;
  }
  // Scope-qualified names are matched on the unqualified part.
  std::string_view name = pair.function_name;
  if (const auto p = name.rfind("::"); p != std::string_view::npos) name = name.substr(p + 2);
  for (const auto& prefix : cfg.test_name_prefixes) {
    if (starts_with_icase(name, prefix)) return true;
  }
  return false;
}

class TokenCounter {
 public:
  virtual ~TokenCounter() = default;
  virtual std::size_t count(std::string_view text) const = 0;
};

// Every maximal run of [A-Za-z0-9_] is one token; every other
// non-whitespace byte is its own token.
class ReferenceTokenCounter : public TokenCounter {
 public:
  std::size_t count(std::string_view text) const override {
    std::size_t n = 0;
    bool in_word = false;
    for (char c : text) {
      const auto uc = static_cast<unsigned char>(c);
      if (std::isalnum(uc) || c == '_') {
        if (!in_word) ++n;
        in_word = true;
      } else {
        in_word = false;
        if (!std::isspace(uc)) ++n;
      }
    }
    return n;
  }
};

inline std::vector<FunctionPair> filter_test_artifacts(std::vector<FunctionPair> pairs,
                                                       const FilterConfig& cfg) {
  std::erase_if(pairs, [&](const FunctionPair& p) { return is_test_artifact(p, cfg); });
  return pairs;
}

// Caps the pre-commit text only; both counts are recorded on the pair.
inline std::vector<FunctionPair> filter_by_length(std::vector<FunctionPair> pairs,
                                                  const TokenCounter& tokenizer,
                                                  const FilterConfig& cfg) {
  cfg.validate();
  std::vector<FunctionPair> out;
  out.reserve(pairs.size());
  for (auto& p : pairs) {
    p.pre_token_count = tokenizer.count(p.pre_function);
    p.post_token_count = tokenizer.count(p.post_function);
    if (p.pre_token_count <= cfg.max_tokens) out.push_back(std::move(p));
  }
  return out;
}

// First occurrence per digest wins; input order is preserved.
inline std::vector<FunctionPair> dedup(std::vector<FunctionPair> pairs) {
  std::unordered_set<std::string> seen;
  std::vector<FunctionPair> out;
  out.reserve(pairs.size());
  for (auto& p : pairs) {
    if (seen.insert(p.content_digest).second) out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<PoolFunction> dedup(std::vector<PoolFunction> fns) {
  std::unordered_set<std::string> seen;
  std::vector<PoolFunction> out;
  for (auto& f : fns) {
    if (seen.insert(f.content_digest).second) out.push_back(std::move(f));
  }
  return out;
}

struct CorpusResult {
  std::vector<FunctionPair> pairs;
  std::vector<PoolFunction> pool;
  std::size_t records = 0;
  std::size_t dropped_test = 0;
  std::size_t dropped_length = 0;
  std::size_t dropped_duplicate = 0;
};

// Full stage: extract, drop test artifacts, cap length, dedup. The negative
// pool goes through the same filters and never contains a digest that is also
// a vulnerable pre-commit function or a post-commit twin.
inline CorpusResult build_corpus(const std::vector<RawCommitRecord>& records,
                                 const ExtractorRegistry& registry,
                                 const TokenCounter& tokenizer,
                                 const FilterConfig& cfg,
                                 const DiagnosticSink& diag = stderr_sink()) {
  CorpusResult res;
  res.records = records.size();
  std::vector<FunctionPair> pairs;
  std::vector<PoolFunction> pool;
  for (const auto& r : records) {
    if (!registry.has(r.language)) throw UnsupportedLanguage(r.language);
    for (auto& p : extract_function_pairs(r, registry, diag)) pairs.push_back(std::move(p));
    for (auto& f : extract_unmodified_functions(r, registry, diag)) pool.push_back(std::move(f));
  }
  const std::size_t n0 = pairs.size();
  pairs = filter_test_artifacts(std::move(pairs), cfg);
  res.dropped_test = n0 - pairs.size();
  const std::size_t n1 = pairs.size();
  pairs = filter_by_length(std::move(pairs), tokenizer, cfg);
  res.dropped_length = n1 - pairs.size();
  const std::size_t n2 = pairs.size();
  res.pairs = dedup(std::move(pairs));
  res.dropped_duplicate = n2 - res.pairs.size();

  std::unordered_set<std::string> touched;
  for (const auto& p : res.pairs) {
    touched.insert(p.content_digest);
    touched.insert(content_digest(p.post_function));
  }
  std::erase_if(pool, [&](const PoolFunction& f) {
    FunctionPair probe;
    probe.path = f.path;
    probe.function_name = f.function_name;
    return touched.contains(f.content_digest) || is_test_artifact(probe, cfg) ||
           tokenizer.count(f.text) > cfg.max_tokens;
  });
  res.pool = dedup(std::move(pool));
  return res;
}

}  // namespace vulnpref::corpus

#endif  // VULNPREF_CORPUS_HPP
