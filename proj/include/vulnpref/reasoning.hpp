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

// Structured reasoning: teacher prompts, label-swapped preference pairs,
// and the section parser that validates teacher output.

#ifndef VULNPREF_REASONING_HPP
#define VULNPREF_REASONING_HPP

#include <atomic>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/llm_client.hpp"
#include "vulnpref/sample.hpp"

namespace vulnpref::reasoning {

inline constexpr std::string_view kTemplateVersion = "v1";

inline constexpr std::string_view kVulnerableTemplate =
    "The following function has been flagged as vulnerable.\n"
    "\n"
    "Input function:\n"
    "```{lang}\n"
    "{function}\n"
    "```\n"
    "\n"
    "This function contains a vulnerability associated with the following CWE(s): {cwe_list}.\n"
    "Specifically, it is linked to {cve_id}, which is described as follows:\n"
    "{cve_desc}.\n"
    "\n"
    "Given this information, generate a detailed and coherent thought process within the "
    "<thinking> tags. Your reasoning should focus on the following elements:\n"
    "1. **Specific Code Constructs**: Identify the parts of the code that directly contribute "
    "to the vulnerability.\n"
    "2. **Mechanism of the Vulnerability**: Explain how the identified code leads to the "
    "vulnerability (e.g., unsafe function calls, lack of input validation).\n"
    "3. **Potential Impact**: Describe the consequences of exploiting this vulnerability.\n"
    "4. **Contextual Relevance**: Relate your explanation to the provided CWE(s) and CVE "
    "description.\n"
    "Strictly follow these steps in your reasoning. Do not include more steps in your "
    "reasoning.";

inline constexpr std::string_view kNonVulnerableTemplate =
    "The following function has been flagged as non-vulnerable.\n"
    "\n"
    "Input function:\n"
    "```{lang}\n"
    "{function}\n"
    "```\n"
    "\n"
    "This function has been reviewed and determined to not contain any known "
    "vulnerabilities.\n"
    "\n"
    "Given this information, generate a detailed and coherent thought process within the "
    "<thinking> tags. Your reasoning should focus on the following elements:\n"
    "1. **Analysis of Code Safety**: Identify specific aspects of the code that contribute to "
    "its security, such as proper use of safe coding practices or robust validation "
    "mechanisms.\n"
    "2. **Absence of Common Vulnerabilities**: Discuss potential vulnerabilities that could "
    "arise in similar functions and explain why they are not applicable here.\n"
    "3. **Validation of the Non-Vulnerable Label**: Provide evidence-based reasoning to "
    "justify why the function is secure and free of exploitable flaws.\n"
    "Strictly follow these steps in your reasoning. Do not include more steps in your "
    "reasoning.";

inline constexpr std::string_view kDetectionTemplate =
    "Analyze the following function and decide whether it contains a security "
    "vulnerability. Reason step by step inside <thinking> tags, then finish with a single "
    "line \"ANSWER: YES\" if the function is vulnerable or \"ANSWER: NO\" if it is not.\n"
    "\n"
    "```{lang}\n"
    "{function}\n"
    "```";

inline const std::vector<std::string>& vulnerable_headings() {
  static const std::vector<std::string> h = {"Specific Code Constructs",
                                             "Mechanism of the Vulnerability", "Potential Impact",
                                             "Contextual Relevance"};
  return h;
}

inline const std::vector<std::string>& non_vulnerable_headings() {
  static const std::vector<std::string> h = {"Analysis of Code Safety",
                                             "Absence of Common Vulnerabilities",
                                             "Validation of the Non-Vulnerable Label"};
  return h;
}

inline const std::vector<std::string>& headings_for(Label label) {
  return label == Label::kVulnerable ? vulnerable_headings() : non_vulnerable_headings();
}

// Digest over every template the pipeline renders; recorded in dataset manifests.
inline std::string template_hash() {
  return sha256_hex(std::string(kTemplateVersion) + "\n" + std::string(kVulnerableTemplate) +
                    "\n" + std::string(kNonVulnerableTemplate) + "\n" +
                    std::string(kDetectionTemplate));
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

class MissingMetadata : public Error {
 public:
  using Error::Error;
};

struct ReasoningPrompt {
  Label template_id = Label::kVulnerable;
  std::string rendered_text;
  std::map<std::string, std::string> placeholders;

  bool operator==(const ReasoningPrompt&) const = default;
};

namespace detail {

// Single left-to-right pass so substituted values are never rescanned.
inline std::string substitute(std::string_view tmpl,
                              const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string_view::npos) {
        const std::string key(tmpl.substr(i + 1, close - i - 1));
        const auto it = values.find(key);
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

}  // namespace detail

inline ReasoningPrompt build_prompt(const std::string& function_text, Language language,
                                    Label label, const std::vector<std::string>& cwe_ids,
                                    const std::string& cve_id, const std::string& cve_desc) {
  ReasoningPrompt p;
  p.template_id = label;
  p.placeholders["lang"] = std::string(fence_tag(language));
  p.placeholders["function"] = function_text;
  if (label == Label::kVulnerable) {
    if (cwe_ids.empty() || cve_id.empty() || cve_desc.empty()) {
      throw MissingMetadata("vulnerable prompt needs CWE ids, a CVE id and a description");
    }
    p.placeholders["cwe_list"] = join(cwe_ids, ", ");
    p.placeholders["cve_id"] = cve_id;
    p.placeholders["cve_desc"] = cve_desc;
    p.rendered_text = detail::substitute(kVulnerableTemplate, p.placeholders);
  } else {
    p.rendered_text = detail::substitute(kNonVulnerableTemplate, p.placeholders);
  }
  return p;
}

inline constexpr std::string_view kSentinelCwe = "CWE-unknown";
inline constexpr std::string_view kSentinelCve = "CVE-0000-0000";
inline constexpr std::string_view kSentinelDescription =
    "An unspecified weakness that may allow an attacker to compromise the confidentiality, "
    "integrity or availability of the affected software";

// Valid prompt from the true label, flawed prompt from the opposite label on
// the same function. Non-vulnerable samples get sentinel CVE metadata for the
// flawed branch.
inline std::pair<ReasoningPrompt, ReasoningPrompt> make_preference_inputs(
    const LabeledSample& s) {
  const auto vulnerable = [&](bool sentinel) {
    if (sentinel) {
      return build_prompt(s.function_text, s.language, Label::kVulnerable,
                          {std::string(kSentinelCwe)}, std::string(kSentinelCve),
                          std::string(kSentinelDescription));
    }
    return build_prompt(s.function_text, s.language, Label::kVulnerable, s.cwe_ids,
                        s.cve_id.value_or(""), s.cve_description);
  };
  const auto safe = [&] {
    return build_prompt(s.function_text, s.language, Label::kNonVulnerable, {}, "", "");
  };
  if (s.label == Label::kVulnerable) return {vulnerable(false), safe()};
  return {safe(), vulnerable(true)};
}

// Detection-time input: the function and an answer contract, no metadata.
inline std::string detection_input(const std::string& function_text, Language language) {
  return detail::substitute(kDetectionTemplate, {{"lang", std::string(fence_tag(language))},
                                                 {"function", function_text}});
}

// Recovers the function text from a detection input.
inline std::string function_from_input(const std::string& input_x) {
  const auto open = input_x.find("```");
  const auto body = open == std::string::npos ? open : input_x.find('\n', open);
  const auto close = input_x.rfind("\n```");
  if (body == std::string::npos || close == std::string::npos || close < body) return input_x;
  return input_x.substr(body + 1, close - body - 1);
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

class EmptyCompletion : public Error {
 public:
  using Error::Error;
};

struct TeacherConfig {
  std::string model_id = "gpt-4o";
  double temperature = 0.2;
  int max_new_tokens = 2048;
};

inline llm::ChatRequest teacher_request(const ReasoningPrompt& prompt, const TeacherConfig& cfg) {
  llm::ChatRequest req;
  req.model_id = cfg.model_id;
  req.temperature = cfg.temperature;
  req.max_new_tokens = cfg.max_new_tokens;
  req.messages = {{"user", prompt.rendered_text}};
  return req;
}

inline std::string complete_nonempty(llm::ChatClient& client, const llm::ChatRequest& req) {
  std::string text = client.cached_complete(req).text;
  if (trim(text).empty()) throw EmptyCompletion("teacher returned an empty completion");
  return text;
}

inline std::string generate_reasoning(const ReasoningPrompt& prompt, llm::ChatClient& teacher,
                                      const TeacherConfig& cfg = {}) {
  return complete_nonempty(teacher, teacher_request(prompt, cfg));
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

enum class StructureErrorKind { kMissingTag, kMissingSection, kExtraSection, kMisordered };

inline std::string_view to_string(StructureErrorKind k) {
  switch (k) {
    case StructureErrorKind::kMissingTag: return "missing_tag";
    case StructureErrorKind::kMissingSection: return "missing_section";
    case StructureErrorKind::kExtraSection: return "extra_section";
    case StructureErrorKind::kMisordered: return "misordered";
  }
  return "?";
}

class StructureError : public Error {
 public:
  StructureError(StructureErrorKind kind, const std::string& detail)
      : Error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
  StructureErrorKind kind() const { return kind_; }

 private:
  StructureErrorKind kind_;
};

struct Section {
  std::string heading;
  std::string body;
  bool operator==(const Section&) const = default;
};

struct StructuredReasoning {
  std::vector<Section> sections;
  Label conclusion_label = Label::kVulnerable;
  std::string raw_text;
};

namespace detail {

inline std::optional<std::string> known_heading(std::string_view candidate) {
  const std::string c = to_lower(trim(candidate));
  for (Label l : {Label::kVulnerable, Label::kNonVulnerable}) {
    for (const auto& h : headings_for(l)) {
      if (to_lower(h) == c) return h;
    }
  }
  return std::nullopt;
}

struct HeadingLine {
  std::string heading;  // canonical spelling when known
  std::string rest;
  bool known = false;
};

// Recognizes "1. **Heading**: text", "**1. Heading:** text", "### 2) Heading" and
// "3. Heading: text". Plain numbered lines only count when the heading is one
// of the known section names; bold numbered lines always count.
inline std::optional<HeadingLine> match_heading(std::string_view line) {
  std::string_view s = trim(line);
  while (!s.empty() && s.front() == '#') s.remove_prefix(1);
  s = trim(s);
  bool bold = false;
  if (s.starts_with("**")) {
    bold = true;
    s.remove_prefix(2);
  }
  std::size_t d = 0;
  while (d < s.size() && std::isdigit(static_cast<unsigned char>(s[d]))) ++d;
  if (d == 0 || d >= s.size() || (s[d] != '.' && s[d] != ')')) return std::nullopt;
  s = trim(s.substr(d + 1));
  if (s.starts_with("**")) {
    bold = true;
    s.remove_prefix(2);
  }
  std::size_t end = s.size();
  if (bold) {
    end = std::min(s.find("**"), s.find(':'));
  } else {
    end = s.find(':');
  }
  const std::string_view head = trim(s.substr(0, std::min(end, s.size())));
  std::string_view rest = end == std::string_view::npos ? std::string_view{} : s.substr(end);
  while (!rest.empty() && (rest.front() == '*' || rest.front() == ':' || rest.front() == ' ')) {
    rest.remove_prefix(1);
  }
  const auto canon = known_heading(head);
  if (!canon && !bold) return std::nullopt;
  if (head.empty()) return std::nullopt;
  return HeadingLine{canon.value_or(std::string(head)), std::string(trim(rest)), canon.has_value()};
}

}  // namespace detail

inline StructuredReasoning parse_reasoning(const std::string& raw_text, Label expected_label) {
  const auto open = raw_text.find("<thinking>");
  const auto close = open == std::string::npos ? std::string::npos
                                               : raw_text.find("</thinking>", open + 10);
  if (open == std::string::npos || close == std::string::npos) {
    throw StructureError(StructureErrorKind::kMissingTag, "no <thinking>...</thinking> block");
  }
  const std::string body = raw_text.substr(open + 10, close - open - 10);

  std::vector<Section> sections;
  std::vector<bool> known;
  for (const auto& line : split_lines(body)) {
    if (auto h = detail::match_heading(line)) {
      sections.push_back({h->heading, h->rest});
      known.push_back(h->known);
    } else if (!sections.empty()) {
      auto& b = sections.back().body;
      if (!b.empty() || !trim(line).empty()) b += (b.empty() ? "" : "\n") + line;
    }
  }
  for (auto& s : sections) s.body = std::string(trim(s.body));

  const auto& expected = headings_for(expected_label);
  std::map<std::string, int> seen;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const auto& h = sections[i].heading;
    const bool wanted = std::find(expected.begin(), expected.end(), h) != expected.end();
    if (!known[i] || !wanted || ++seen[h] > 1) {
      throw StructureError(StructureErrorKind::kExtraSection, "unexpected section \"" + h + "\"");
    }
  }
  for (const auto& h : expected) {
    if (!seen.count(h)) {
      throw StructureError(StructureErrorKind::kMissingSection, "missing section \"" + h + "\"");
    }
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (sections[i].heading != expected[i]) {
      throw StructureError(StructureErrorKind::kMisordered,
                           "expected \"" + expected[i] + "\" at position " + std::to_string(i + 1));
    }
  }
  return StructuredReasoning{std::move(sections), expected_label, raw_text};
}

inline std::string answer_line(Label label) {
  return label == Label::kVulnerable ? "ANSWER: YES" : "ANSWER: NO";
}

// Training-target serialization: thinking block plus a final answer line.
inline std::string render(const StructuredReasoning& r) {
  std::string out = "<thinking>\n";
  for (std::size_t i = 0; i < r.sections.size(); ++i) {
    if (i) out += "\n";
    out += std::to_string(i + 1) + ". **" + r.sections[i].heading + "**: " + r.sections[i].body +
           "\n";
  }
  out += "</thinking>\n" + answer_line(r.conclusion_label);
  return out;
}

// ---------------------------------------------------------------------------
// Preference samples
// ---------------------------------------------------------------------------

struct PreferenceSample {
  std::string digest;
  Language language = Language::kC;
  std::string cve_id;
  Label true_label = Label::kVulnerable;
  std::string input_x;
  StructuredReasoning valid_y;
  StructuredReasoning flawed_y;

  std::string valid_text() const { return render(valid_y); }
  std::string flawed_text() const { return render(flawed_y); }
};

inline json to_row(const PreferenceSample& p) {
  return json{{"digest", p.digest},         {"language", p.language},
              {"cve_id", p.cve_id},         {"true_label", p.true_label},
              {"input_x", p.input_x},       {"valid_text", p.valid_text()},
              {"flawed_text", p.flawed_text()}};
}

// Rows carry rendered text; re-parsing recovers the sections.
inline PreferenceSample from_row(const json& j) {
  PreferenceSample p;
  j.at("digest").get_to(p.digest);
  j.at("language").get_to(p.language);
  p.cve_id = j.value("cve_id", "");
  j.at("true_label").get_to(p.true_label);
  j.at("input_x").get_to(p.input_x);
  p.valid_y = parse_reasoning(j.at("valid_text").get<std::string>(), p.true_label);
  p.flawed_y = parse_reasoning(j.at("flawed_text").get<std::string>(), opposite(p.true_label));
  return p;
}

inline constexpr std::string_view kStructureReminder =
    "Your previous answer did not follow the required structure ({kind}). Regenerate it: put "
    "the whole reasoning inside <thinking> tags and use exactly the numbered steps requested, "
    "in order, with their headings in bold.";

struct GenerationStats {
  std::size_t requested = 0;
  std::size_t emitted = 0;
  std::size_t retried = 0;
  std::size_t dropped = 0;
};

inline void to_json(json& j, const GenerationStats& s) {
  j = json{{"requested", s.requested},
           {"emitted", s.emitted},
           {"retried", s.retried},
           {"dropped", s.dropped}};
}

struct Rejection {
  std::string digest;
  std::string branch;  // "valid" or "flawed"
  std::string error;
};

inline void to_json(json& j, const Rejection& r) {
  j = json{{"digest", r.digest}, {"branch", r.branch}, {"error", r.error}};
}

namespace detail {

struct BranchOutcome {
  std::optional<StructuredReasoning> parsed;
  bool retried = false;
  std::string error;
};

// One retry with the failed answer and a reminder appended, then give up.
inline BranchOutcome generate_branch(const ReasoningPrompt& prompt, Label expected,
                                     llm::ChatClient& teacher, const TeacherConfig& cfg) {
  BranchOutcome out;
  auto req = teacher_request(prompt, cfg);
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::string raw;
    try {
      raw = complete_nonempty(teacher, req);
      out.parsed = parse_reasoning(raw, expected);
      return out;
    } catch (const StructureError& e) {
      out.error = e.what();
      req.messages.push_back({"assistant", raw});
      req.messages.push_back(
          {"user", replace_all(std::string(kStructureReminder), "{kind}",
                               std::string(to_string(e.kind())))});
    } catch (const EmptyCompletion& e) {
      out.error = e.what();
      req.messages.push_back({"assistant", raw});
      req.messages.push_back({"user", replace_all(std::string(kStructureReminder), "{kind}",
                                                  "empty answer")});
    }
    if (attempt == 0) out.retried = true;
  }
  return out;
}

}  // namespace detail

struct GenerationResult {
  std::vector<PreferenceSample> samples;  // input order, dropped removed
  std::vector<Rejection> rejected;
  GenerationStats stats;
};

inline GenerationResult generate_preference_samples(const std::vector<LabeledSample>& input,
                                                    llm::ChatClient& teacher,
                                                    const TeacherConfig& cfg = {},
                                                    std::size_t workers = 1,
                                                    DiagnosticSink diag = stderr_sink()) {
  std::vector<std::optional<PreferenceSample>> slots(input.size());
  std::vector<std::vector<Rejection>> rejections(input.size());
  std::vector<int> retries(input.size(), 0);
  std::vector<std::exception_ptr> errors(input.size());
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < input.size(); i = next.fetch_add(1)) {
      try {
        const auto& s = input[i];
        const auto [valid_prompt, flawed_prompt] = make_preference_inputs(s);
        auto valid = detail::generate_branch(valid_prompt, s.label, teacher, cfg);
        auto flawed = detail::generate_branch(flawed_prompt, opposite(s.label), teacher, cfg);
        retries[i] = int(valid.retried) + int(flawed.retried);
        if (!valid.parsed) rejections[i].push_back({s.digest, "valid", valid.error});
        if (!flawed.parsed) rejections[i].push_back({s.digest, "flawed", flawed.error});
        if (valid.parsed && flawed.parsed) {
          PreferenceSample p;
          p.digest = s.digest;
          p.language = s.language;
          p.cve_id = s.cve_id.value_or("");
          p.true_label = s.label;
          p.input_x = detection_input(s.function_text, s.language);
          p.valid_y = std::move(*valid.parsed);
          p.flawed_y = std::move(*flawed.parsed);
          slots[i] = std::move(p);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < std::max<std::size_t>(1, workers); ++w) pool.emplace_back(work);
    work();
  }

  GenerationResult out;
  out.stats.requested = input.size();
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.stats.retried += static_cast<std::size_t>(retries[i]);
    for (auto& r : rejections[i]) {
      diag("dropped " + r.digest + " (" + r.branch + "): " + r.error);
      out.rejected.push_back(std::move(r));
    }
    if (slots[i]) {
      out.samples.push_back(std::move(*slots[i]));
    } else {
      ++out.stats.dropped;
    }
  }
  out.stats.emitted = out.samples.size();
  return out;
}

}  // namespace vulnpref::reasoning

#endif  // VULNPREF_REASONING_HPP
