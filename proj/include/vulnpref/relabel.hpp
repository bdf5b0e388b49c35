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

// LLM-assisted relabeling of function pairs on a 0-4 responsibility scale,
// threshold selection, and majority aggregation of human audit votes.

#ifndef VULNPREF_RELABEL_HPP
#define VULNPREF_RELABEL_HPP

#include <array>
#include <atomic>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/corpus.hpp"
#include "vulnpref/llm_client.hpp"

namespace vulnpref::relabel {

struct RelabelScore {
  std::string pair_ref;  // content digest of the pre-commit function
  int score = 0;
  std::string raw_response;
  std::string model_id;

  bool operator==(const RelabelScore&) const = default;
};

inline void to_json(json& j, const RelabelScore& s) {
  j = json{{"pair_ref", s.pair_ref},
           {"score", s.score},
           {"raw_response", s.raw_response},
           {"model_id", s.model_id}};
}
inline void from_json(const json& j, RelabelScore& s) {
  j.at("pair_ref").get_to(s.pair_ref);
  j.at("score").get_to(s.score);
  j.at("raw_response").get_to(s.raw_response);
  j.at("model_id").get_to(s.model_id);
  if (s.score < 0 || s.score > 4) throw InvalidArgument("score out of range");
}

class UnparsableScore : public Error {
 public:
  UnparsableScore(std::string pair_ref, std::string raw, int attempts)
      : Error("no valid SCORE line for " + pair_ref + " after " + std::to_string(attempts) +
              " attempt(s)"),
        pair_ref_(std::move(pair_ref)),
        raw_(std::move(raw)),
        attempts_(attempts) {}

  const std::string& pair_ref() const { return pair_ref_; }
  const std::string& raw_response() const { return raw_; }
  int attempts() const { return attempts_; }

 private:
  std::string pair_ref_;
  std::string raw_;
  int attempts_;
};

struct RelabelConfig {
  std::string model_id = "gpt-4o";
  double temperature = 0.0;
  int max_new_tokens = 1024;
  int parse_retries = 3;
};

inline constexpr std::string_view kRelabelSystemPrompt =
    "You are a software security expert auditing vulnerability-fixing commits.";

inline constexpr std::string_view kRelabelTemplate =
    R"(A commit fixing {cve_id} modified the {lang} function below. Decide how responsible the
pre-commit version of this function is for the vulnerability.

Vulnerability: {cve_id}
Weakness type(s): {cwe_list}
Description: {cve_desc}

Pre-commit version:
```{lang}
{pre_function}
```

Post-commit version:
```{lang}
{post_function}
```

Rate the pre-commit function on this scale:
0 - unrelated to the vulnerability
1 - touched by the fix for unrelated reasons (refactoring, style, logging)
2 - indirectly related (supporting change, caller or callee of the flaw)
3 - likely involved in the vulnerability but not clearly its location
4 - directly responsible: the function itself contains the flaw

Explain briefly, then end your answer with a final line of the exact form
SCORE: <0-4>)";

inline constexpr std::string_view kRelabelRetryReminder =
    "Your previous answer did not end with a valid line of the form \"SCORE: <0-4>\". "
    "Reply again and finish with exactly one such line.";

inline std::string render_relabel_prompt(const corpus::FunctionPair& pair) {
  if (pair.cve_id.empty()) throw InvalidArgument("pair has no cve_id");
  std::string s(kRelabelTemplate);
  // {pre_function}/{post_function} go last so braces in code are never
  // mistaken for placeholders.
  s = replace_all(s, "{lang}", fence_tag(pair.language));
  s = replace_all(s, "{cve_id}", pair.cve_id);
  s = replace_all(s, "{cwe_list}", pair.cwe_ids.empty() ? "unspecified" : join(pair.cwe_ids, ", "));
  s = replace_all(s, "{cve_desc}", pair.cve_description);
  const auto pre_at = s.find("{pre_function}");
  s.replace(pre_at, 14, pair.pre_function);
  const auto post_at = s.find("{post_function}", pre_at + pair.pre_function.size());
  s.replace(post_at, 15, pair.post_function);
  return s;
}

// Last "SCORE: n" occurrence wins. Values outside 0..4 are unparsable rather
// than clamped.
inline std::optional<int> parse_score(std::string_view response) {
  static const std::regex kScore(R"(SCORE:\s*(\d+))", std::regex::icase);
  const std::string text(response);
  std::optional<int> found;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), kScore);
       it != std::sregex_iterator(); ++it) {
    const std::string digits = (*it)[1].str();
    found = digits.size() > 2 ? 99 : std::stoi(digits);
  }
  if (!found || *found < 0 || *found > 4) return std::nullopt;
  return found;
}

inline llm::ChatRequest relabel_request(const corpus::FunctionPair& pair, const RelabelConfig& cfg) {
  llm::ChatRequest req;
  req.model_id = cfg.model_id;
  req.temperature = cfg.temperature;
  req.max_new_tokens = cfg.max_new_tokens;
  req.messages = {{"system", std::string(kRelabelSystemPrompt)},
                  {"user", render_relabel_prompt(pair)}};
  return req;
}

// Re-asks with the previous answer and a reminder when the SCORE line is
// missing or out of range, up to cfg.parse_retries extra times.
inline RelabelScore score_pair(const corpus::FunctionPair& pair, llm::ChatClient& client,
                               const RelabelConfig& cfg = {}) {
  if (pair.cve_id.empty() || pair.cve_description.empty()) {
    throw InvalidArgument("pair lacks CVE metadata: " + pair.content_digest);
  }
  llm::ChatRequest req = relabel_request(pair, cfg);
  std::string raw;
  const int attempts = 1 + std::max(0, cfg.parse_retries);
  for (int a = 1; a <= attempts; ++a) {
    raw = client.cached_complete(req).text;
    if (const auto s = parse_score(raw)) {
      return RelabelScore{pair.content_digest, *s, raw, cfg.model_id};
    }
    req.messages.push_back({"assistant", raw});
    req.messages.push_back({"user", std::string(kRelabelRetryReminder)});
  }
  throw UnparsableScore(pair.content_digest, raw, attempts);
}

struct QuarantinedSample {
  std::string pair_ref;
  std::string raw_response;
  std::string reason;
};

inline void to_json(json& j, const QuarantinedSample& q) {
  j = json{{"pair_ref", q.pair_ref}, {"raw_response", q.raw_response}, {"reason", q.reason}};
}

struct ScoringResult {
  std::vector<RelabelScore> scores;  // input order, quarantined removed
  std::vector<QuarantinedSample> quarantined;
};

// Scores pairs with up to `workers` concurrent calls; output order follows
// input order regardless of completion order.
inline ScoringResult score_pairs(const std::vector<corpus::FunctionPair>& pairs,
                                 llm::ChatClient& client, const RelabelConfig& cfg = {},
                                 std::size_t workers = 1) {
  std::vector<std::optional<RelabelScore>> slots(pairs.size());
  std::vector<std::optional<QuarantinedSample>> bad(pairs.size());
  std::vector<std::exception_ptr> errors(pairs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < pairs.size(); i = next.fetch_add(1)) {
      try {
        slots[i] = score_pair(pairs[i], client, cfg);
      } catch (const UnparsableScore& e) {
        bad[i] = QuarantinedSample{e.pair_ref(), e.raw_response(), "unparsable score"};
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
  ScoringResult out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    if (slots[i]) out.scores.push_back(std::move(*slots[i]));
    if (bad[i]) out.quarantined.push_back(std::move(*bad[i]));
  }
  return out;
}

// Digests with score >= tau (cumulative thresholds).
inline std::set<std::string> select_vulnerable(const std::vector<RelabelScore>& scores, int tau) {
  if (tau < 1 || tau > 4) throw InvalidArgument("tau must be in [1, 4]");
  std::set<std::string> out;
  for (const auto& s : scores) {
    if (s.score >= tau) out.insert(s.pair_ref);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Human audit votes
// ---------------------------------------------------------------------------

enum class Verdict { kAccept, kUncertain, kReject };

NLOHMANN_JSON_SERIALIZE_ENUM(Verdict, {{Verdict::kAccept, "accept"},
                                       {Verdict::kUncertain, "uncertain"},
                                       {Verdict::kReject, "reject"}})

inline std::optional<Verdict> parse_verdict(std::string_view s) {
  if (s == "accept") return Verdict::kAccept;
  if (s == "uncertain") return Verdict::kUncertain;
  if (s == "reject") return Verdict::kReject;
  return std::nullopt;
}

struct AnnotationVote {
  std::string sample_ref;
  std::string annotator_id;
  Verdict verdict = Verdict::kUncertain;
  std::string timestamp;  // ISO-8601 UTC, e.g. 2026-01-02T03:04:05Z

  bool operator==(const AnnotationVote&) const = default;
};

inline void to_json(json& j, const AnnotationVote& v) {
  j = json{{"sample_ref", v.sample_ref},
           {"annotator_id", v.annotator_id},
           {"verdict", v.verdict},
           {"timestamp", v.timestamp}};
}
inline void from_json(const json& j, AnnotationVote& v) {
  j.at("sample_ref").get_to(v.sample_ref);
  j.at("annotator_id").get_to(v.annotator_id);
  v.verdict = parse_verdict(j.at("verdict").get<std::string>()).value();
  v.timestamp = j.value("timestamp", "");
}

struct AnnotationSummary {
  std::size_t n_samples = 0;
  double accept_rate = 0.0;
  double uncertain_rate = 0.0;
  double reject_rate = 0.0;
};

inline void to_json(json& j, const AnnotationSummary& s) {
  j = json{{"n_samples", s.n_samples},
           {"accept_rate", s.accept_rate},
           {"uncertain_rate", s.uncertain_rate},
           {"reject_rate", s.reject_rate}};
}

// One vote per (sample, annotator): the later timestamp wins, and on equal
// timestamps the later entry in the log wins.
inline std::vector<AnnotationVote> latest_votes(const std::vector<AnnotationVote>& log) {
  std::map<std::pair<std::string, std::string>, std::size_t> latest;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto key = std::make_pair(log[i].sample_ref, log[i].annotator_id);
    const auto it = latest.find(key);
    if (it == latest.end() || log[it->second].timestamp <= log[i].timestamp) latest[key] = i;
  }
  std::vector<AnnotationVote> out;
  out.reserve(latest.size());
  for (const auto& [key, idx] : latest) out.push_back(log[idx]);
  return out;
}

// Strict majority of the votes, otherwise uncertain.
inline Verdict majority_vote(const std::vector<Verdict>& votes) {
  if (votes.empty()) throw EmptyInput("majority_vote needs at least one vote");
  std::array<std::size_t, 3> counts{};
  for (Verdict v : votes) ++counts[static_cast<std::size_t>(v)];
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (2 * counts[k] > votes.size()) return static_cast<Verdict>(k);
  }
  return Verdict::kUncertain;
}

// Per-sample majority over the deduplicated vote log, keyed by sample_ref.
inline std::map<std::string, Verdict> majority_by_sample(const std::vector<AnnotationVote>& log) {
  std::map<std::string, std::vector<Verdict>> grouped;
  for (const auto& v : latest_votes(log)) grouped[v.sample_ref].push_back(v.verdict);
  std::map<std::string, Verdict> out;
  for (const auto& [ref, votes] : grouped) out.emplace(ref, majority_vote(votes));
  return out;
}

inline AnnotationSummary summarize_annotations(const std::vector<Verdict>& verdicts) {
  if (verdicts.empty()) throw EmptyInput("summarize_annotations needs at least one verdict");
  std::array<std::size_t, 3> counts{};
  for (Verdict v : verdicts) ++counts[static_cast<std::size_t>(v)];
  const double n = static_cast<double>(verdicts.size());
  AnnotationSummary s;
  s.n_samples = verdicts.size();
  s.accept_rate = static_cast<double>(counts[0]) / n;
  s.uncertain_rate = static_cast<double>(counts[1]) / n;
  s.reject_rate = static_cast<double>(counts[2]) / n;
  return s;
}

inline AnnotationSummary summarize_annotations(const std::map<std::string, Verdict>& by_sample) {
  std::vector<Verdict> v;
  v.reserve(by_sample.size());
  for (const auto& [ref, verdict] : by_sample) v.push_back(verdict);
  return summarize_annotations(v);
}

}  // namespace vulnpref::relabel

#endif  // VULNPREF_RELABEL_HPP
