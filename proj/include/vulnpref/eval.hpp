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

// Detection metrics, bootstrap intervals, imbalance and ID/OOD reports, and
// LLM-as-judge scoring and ranking.

#ifndef VULNPREF_EVAL_HPP
#define VULNPREF_EVAL_HPP

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/datasets.hpp"
#include "vulnpref/llm_client.hpp"

namespace vulnpref::eval {

enum class Predicted { kVulnerable, kNonVulnerable, kUnparsed };

NLOHMANN_JSON_SERIALIZE_ENUM(Predicted, {{Predicted::kVulnerable, "vulnerable"},
                                         {Predicted::kNonVulnerable, "non_vulnerable"},
                                         {Predicted::kUnparsed, "unparsed"}})

inline Predicted from_label(Label l) {
  return l == Label::kVulnerable ? Predicted::kVulnerable : Predicted::kNonVulnerable;
}

// Final "ANSWER: YES|NO" line first; otherwise a single unambiguous YES or NO
// token in the conclusion (text after </thinking>, or the last non-empty line).
inline Predicted extract_label(std::string_view raw_output) {
  static const std::regex kAnswer(R"(^\s*\**\s*ANSWER\s*\**\s*:\s*\**\s*(YES|NO)\b)",
                                  std::regex::icase);
  const auto lines = split_lines(raw_output);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    std::smatch m;
    if (std::regex_search(*it, m, kAnswer)) {
      return to_lower(m[1].str()) == "yes" ? Predicted::kVulnerable : Predicted::kNonVulnerable;
    }
  }
  std::string region;
  const auto close = raw_output.rfind("</thinking>");
  if (close != std::string_view::npos) {
    region = std::string(raw_output.substr(close + 11));
  } else {
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
      if (!trim(*it).empty()) {
        region = *it;
        break;
      }
    }
  }
  static const std::regex kYes(R"(\bYES\b)");
  static const std::regex kNo(R"(\bNO\b)");
  const bool yes = std::regex_search(region, kYes);
  const bool no = std::regex_search(region, kNo);
  if (yes != no) return yes ? Predicted::kVulnerable : Predicted::kNonVulnerable;
  return Predicted::kUnparsed;
}

struct Prediction {
  std::string sample_ref;
  std::string raw_output;
  Predicted predicted_label = Predicted::kUnparsed;
  std::optional<double> latency_ms;
};

inline void to_json(json& j, const Prediction& p) {
  j = json{{"sample_ref", p.sample_ref},
           {"raw_output", p.raw_output},
           {"predicted_label", p.predicted_label}};
  if (p.latency_ms) j["latency_ms"] = *p.latency_ms;
}
inline void from_json(const json& j, Prediction& p) {
  j.at("sample_ref").get_to(p.sample_ref);
  p.raw_output = j.value("raw_output", "");
  p.predicted_label = j.contains("predicted_label") ? j["predicted_label"].get<Predicted>()
                                                    : extract_label(p.raw_output);
  if (j.contains("latency_ms")) p.latency_ms = j["latency_ms"].get<double>();
}

inline Prediction make_prediction(std::string sample_ref, std::string raw_output) {
  Prediction p{std::move(sample_ref), std::move(raw_output), Predicted::kUnparsed, std::nullopt};
  p.predicted_label = extract_label(p.raw_output);
  return p;
}

// ---------------------------------------------------------------------------
// Confusion counts and P/R/F1
// ---------------------------------------------------------------------------

enum class UnparsedPolicy { kAsNonVulnerable, kAsVulnerable };

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t parse_failures = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  void add(Label truth, Predicted pred, UnparsedPolicy policy = UnparsedPolicy::kAsNonVulnerable) {
    if (pred == Predicted::kUnparsed) {
      ++parse_failures;
      pred = policy == UnparsedPolicy::kAsVulnerable ? Predicted::kVulnerable
                                                     : Predicted::kNonVulnerable;
    }
    const bool pos = pred == Predicted::kVulnerable;
    if (truth == Label::kVulnerable) {
      ++(pos ? tp : fn);
    } else {
      ++(pos ? fp : tn);
    }
  }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    parse_failures += o.parse_failures;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline void to_json(json& j, const ConfusionCounts& c) {
  j = json{{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}, {"parse_failures", c.parse_failures}};
}

// Percentage helpers; x/0 is 0.
inline double percent(double num, double den) { return den > 0 ? 100.0 * num / den : 0.0; }

inline double f1_from(double precision, double recall) {
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

struct Prf {
  double precision = 0.0;  // percentages, unrounded
  double recall = 0.0;
  double f1 = 0.0;
};

inline void to_json(json& j, const Prf& m) {
  j = json{{"precision", round2(m.precision)}, {"recall", round2(m.recall)}, {"f1", round2(m.f1)}};
}

struct BootstrapCI {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double half_width = 0.0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;
};

inline void to_json(json& j, const BootstrapCI& b) {
  j = json{{"point", round2(b.point)},         {"lower", round2(b.lower)},
           {"upper", round2(b.upper)},         {"half_width", round2(b.half_width)},
           {"n_resamples", b.n_resamples},     {"seed", b.seed}};
}

struct IdOodReport {
  double recall_id = 0.0;
  double recall_ood = 0.0;
  double delta = 0.0;
  std::size_t hits_id = 0, n_id = 0, hits_ood = 0, n_ood = 0;
};

inline void to_json(json& j, const IdOodReport& r) {
  j = json{{"recall_id", round2(r.recall_id)}, {"recall_ood", round2(r.recall_ood)},
           {"delta", round2(r.delta)},         {"hits_id", r.hits_id},
           {"n_id", r.n_id},                   {"hits_ood", r.hits_ood},
           {"n_ood", r.n_ood}};
}

struct MetricReport {
  Prf overall;
  ConfusionCounts counts;
  std::map<Language, Prf> per_language;
  std::map<Language, ConfusionCounts> per_language_counts;
  std::optional<BootstrapCI> recall_ci;
  std::optional<IdOodReport> id_ood;
};

inline void to_json(json& j, const MetricReport& r) {
  j = json{{"precision", round2(r.overall.precision)},
           {"recall", round2(r.overall.recall)},
           {"f1", round2(r.overall.f1)},
           {"counts", r.counts},
           {"per_language", json::object()}};
  for (const auto& [lang, prf] : r.per_language) {
    json row = prf;
    row["counts"] = r.per_language_counts.at(lang);
    j["per_language"][std::string(to_string(lang))] = row;
  }
  if (r.recall_ci) j["recall_ci"] = *r.recall_ci;
  if (r.id_ood) j["id_ood"] = *r.id_ood;
}

inline Prf compute_prf(const ConfusionCounts& c) {
  Prf m;
  m.precision = percent(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
  m.recall = percent(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
  m.f1 = f1_from(m.precision, m.recall);
  return m;
}

struct ScoredSample {
  std::string digest;
  Language language = Language::kC;
  Label truth = Label::kNonVulnerable;
  Predicted predicted = Predicted::kUnparsed;
};

inline ConfusionCounts count(const std::vector<ScoredSample>& samples,
                             UnparsedPolicy policy = UnparsedPolicy::kAsNonVulnerable) {
  ConfusionCounts c;
  for (const auto& s : samples) c.add(s.truth, s.predicted, policy);
  return c;
}

// Joins predictions to ground truth by digest. Samples without a prediction
// are scored as unparsed.
inline std::vector<ScoredSample> join_predictions(const std::vector<LabeledSample>& truth,
                                                  const std::vector<Prediction>& predictions) {
  std::map<std::string, Predicted> by_ref;
  for (const auto& p : predictions) by_ref[p.sample_ref] = p.predicted_label;
  std::vector<ScoredSample> out;
  out.reserve(truth.size());
  for (const auto& s : truth) {
    const auto it = by_ref.find(s.digest);
    out.push_back({s.digest, s.language, s.label, it == by_ref.end() ? Predicted::kUnparsed : it->second});
  }
  return out;
}

inline MetricReport evaluate(const std::vector<ScoredSample>& samples,
                             UnparsedPolicy policy = UnparsedPolicy::kAsNonVulnerable) {
  MetricReport r;
  for (const auto& s : samples) {
    r.counts.add(s.truth, s.predicted, policy);
    r.per_language_counts[s.language].add(s.truth, s.predicted, policy);
  }
  r.overall = compute_prf(r.counts);
  for (const auto& [lang, c] : r.per_language_counts) r.per_language[lang] = compute_prf(c);
  return r;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

namespace detail {

// Linear interpolation between order statistics at (n - 1) * q.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

// Percentile bootstrap over the positives' hit/miss outcomes. The half-width
// is (upper - lower) / 2 of the 95% interval.
inline BootstrapCI bootstrap_recall(const std::vector<bool>& positive_outcomes,
                                    std::size_t n_resamples = 10000, std::uint64_t seed = 0) {
  if (positive_outcomes.empty()) throw EmptyInput("bootstrap_recall needs at least one positive");
  if (n_resamples == 0) throw InvalidArgument("n_resamples must be positive");
  const std::size_t n = positive_outcomes.size();
  const auto hits = static_cast<std::size_t>(std::count(positive_outcomes.begin(), positive_outcomes.end(), true));
  BootstrapCI ci;
  ci.point = percent(static_cast<double>(hits), static_cast<double>(n));
  ci.n_resamples = n_resamples;
  ci.seed = seed;
  Rng rng(seed);
  std::vector<double> stats(n_resamples);
  for (auto& s : stats) {
    std::size_t h = 0;
    for (std::size_t i = 0; i < n; ++i) h += positive_outcomes[rng.below(n)] ? 1 : 0;
    s = percent(static_cast<double>(h), static_cast<double>(n));
  }
  std::sort(stats.begin(), stats.end());
  ci.lower = detail::quantile_sorted(stats, 0.025);
  ci.upper = detail::quantile_sorted(stats, 0.975);
  ci.half_width = (ci.upper - ci.lower) / 2.0;
  return ci;
}

inline std::vector<bool> outcomes(std::size_t hits, std::size_t n) {
  if (hits > n) throw InvalidArgument("hits > n");
  std::vector<bool> v(n, false);
  std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(hits), true);
  return v;
}

// ---------------------------------------------------------------------------
// Imbalance curve and ID/OOD
// ---------------------------------------------------------------------------

class MismatchedPositives : public Error {
 public:
  using Error::Error;
};

class EmptyPartition : public Error {
 public:
  using Error::Error;
};

struct CurvePoint {
  int ratio_k = 1;
  Prf metrics;
  ConfusionCounts counts;
};

inline void to_json(json& j, const CurvePoint& p) {
  j = json{{"ratio_k", p.ratio_k}, {"f1", round2(p.metrics.f1)},
           {"precision", round2(p.metrics.precision)}, {"recall", round2(p.metrics.recall)},
           {"counts", p.counts}};
}

inline std::vector<CurvePoint> imbalance_curve(const std::map<int, std::vector<ScoredSample>>& by_ratio,
                                               UnparsedPolicy policy = UnparsedPolicy::kAsNonVulnerable) {
  std::vector<CurvePoint> out;
  std::optional<std::set<std::string>> positives;
  for (const auto& [k, samples] : by_ratio) {
    std::set<std::string> pos;
    for (const auto& s : samples) {
      if (s.truth == Label::kVulnerable) pos.insert(s.digest);
    }
    if (positives && *positives != pos) {
      throw MismatchedPositives("positive set at ratio " + std::to_string(k) + " differs");
    }
    positives = pos;
    CurvePoint p;
    p.ratio_k = k;
    p.counts = count(samples, policy);
    p.metrics = compute_prf(p.counts);
    out.push_back(p);
  }
  return out;
}

inline IdOodReport id_ood_report(const std::map<std::string, Predicted>& predictions,
                                 const datasets::IdOodPartition& partition) {
  if (partition.id.empty()) throw EmptyPartition("no in-distribution positives");
  if (partition.ood.empty()) throw EmptyPartition("no out-of-distribution positives");
  const auto hits = [&](const std::vector<LabeledSample>& side) {
    std::size_t h = 0;
    for (const auto& s : side) {
      const auto it = predictions.find(s.digest);
      if (it != predictions.end() && it->second == Predicted::kVulnerable) ++h;
    }
    return h;
  };
  IdOodReport r;
  r.n_id = partition.id.size();
  r.n_ood = partition.ood.size();
  r.hits_id = hits(partition.id);
  r.hits_ood = hits(partition.ood);
  r.recall_id = percent(static_cast<double>(r.hits_id), static_cast<double>(r.n_id));
  r.recall_ood = percent(static_cast<double>(r.hits_ood), static_cast<double>(r.n_ood));
  r.delta = r.recall_ood - r.recall_id;
  return r;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

struct TableRow {
  std::string system;
  std::string method;
  std::map<Language, Prf> per_language;
};

inline std::string fmt2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << round2(v);
  return os.str();
}

// Plain-text table with P/R/F1 per language in C#, JavaScript, Java, Python,
// C order; "--" where a system has no result.
inline std::string render_table(const std::vector<TableRow>& rows) {
  std::size_t w_sys = 6, w_m = 6;
  for (const auto& r : rows) {
    w_sys = std::max(w_sys, r.system.size());
    w_m = std::max(w_m, r.method.size());
  }
  std::ostringstream os;
  const auto pad = [](const std::string& s, std::size_t w, bool right) {
    return right ? std::string(w - std::min(w, s.size()), ' ') + s : s + std::string(w - std::min(w, s.size()), ' ');
  };
  os << pad("System", w_sys, false) << "  " << pad("Method", w_m, false);
  for (Language l : kAllLanguages) os << " | " << pad(std::string(to_string(l)), 20, false);
  os << "\n" << pad("", w_sys, false) << "  " << pad("", w_m, false);
  for (std::size_t i = 0; i < kAllLanguages.size(); ++i) {
    os << " | " << pad("P", 6, true) << " " << pad("R", 6, true) << " " << pad("F1", 6, true);
  }
  os << "\n";
  for (const auto& r : rows) {
    os << pad(r.system, w_sys, false) << "  " << pad(r.method, w_m, false);
    for (Language l : kAllLanguages) {
      const auto it = r.per_language.find(l);
      if (it == r.per_language.end()) {
        os << " | " << pad("--", 6, true) << " " << pad("--", 6, true) << " " << pad("--", 6, true);
      } else {
        os << " | " << pad(fmt2(it->second.precision), 6, true) << " "
           << pad(fmt2(it->second.recall), 6, true) << " " << pad(fmt2(it->second.f1), 6, true);
      }
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// LLM-as-judge
// ---------------------------------------------------------------------------

inline constexpr std::string_view kJudgeRubricVersion = "v1";

inline constexpr std::string_view kJudgeTemplate =
    R"(You are reviewing an explanation of whether a {lang} function is vulnerable.

Function:
```{lang}
{function}
```

Explanation to review:
<<<
{reasoning}
>>>

Score the explanation on three criteria, each an integer from 0 to 5:
- Completeness: does it cover the vulnerability (or the absence of one) fully, including cause and consequences?
- Clarity: is it well organized and easy to follow?
- Actionability: could a developer act on it to fix or confirm the code?
An empty explanation scores 0 on every criterion.

End your answer with exactly one line of the form
COMPLETENESS: n / CLARITY: n / ACTIONABILITY: n)";

inline constexpr std::string_view kJudgeRetryReminder =
    "Your answer did not end with a valid line \"COMPLETENESS: n / CLARITY: n / "
    "ACTIONABILITY: n\" with integers from 0 to 5. Reply again with that line.";

inline std::string judge_rubric_hash() {
  return sha256_hex(std::string(kJudgeRubricVersion) + "\n" + std::string(kJudgeTemplate));
}

class UnparsableVerdict : public Error {
 public:
  UnparsableVerdict(std::string sample_ref, std::string raw)
      : Error("unparsable judge verdict for " + sample_ref), sample_ref_(std::move(sample_ref)),
        raw_(std::move(raw)) {}
  const std::string& sample_ref() const { return sample_ref_; }
  const std::string& raw_response() const { return raw_; }

 private:
  std::string sample_ref_;
  std::string raw_;
};

struct JudgeVerdict {
  std::string sample_ref;
  std::string judge_id;
  int completeness = 0;
  int clarity = 0;
  int actionability = 0;
  std::optional<int> rank;

  bool operator==(const JudgeVerdict&) const = default;
};

inline void to_json(json& j, const JudgeVerdict& v) {
  j = json{{"sample_ref", v.sample_ref},
           {"judge_id", v.judge_id},
           {"completeness", v.completeness},
           {"clarity", v.clarity},
           {"actionability", v.actionability},
           {"rank", v.rank ? json(*v.rank) : json(nullptr)}};
}

struct Scores3 {
  int completeness = 0, clarity = 0, actionability = 0;
  bool operator==(const Scores3&) const = default;
};

inline std::optional<Scores3> parse_verdict(std::string_view text) {
  static const std::regex kTrailer(
      R"(COMPLETENESS\s*:\s*(\d+)[\s/|,;]*CLARITY\s*:\s*(\d+)[\s/|,;]*ACTIONABILITY\s*:\s*(\d+))",
      std::regex::icase);
  const std::string s(text);
  std::optional<Scores3> found;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kTrailer); it != std::sregex_iterator(); ++it) {
    const auto num = [&](int g) {
      const std::string d = (*it)[g].str();
      return d.size() > 2 ? 99 : std::stoi(d);
    };
    found = Scores3{num(1), num(2), num(3)};
  }
  if (!found) return std::nullopt;
  for (int v : {found->completeness, found->clarity, found->actionability}) {
    if (v < 0 || v > 5) return std::nullopt;
  }
  return found;
}

struct JudgeConfig {
  std::string model_id = "gpt-4o";
  double temperature = 0.0;
  int max_new_tokens = 1024;
  int parse_retries = 1;
};

inline llm::ChatRequest judge_request(const std::string& reasoning_text, const std::string& function_text,
                                      Language language, const JudgeConfig& cfg) {
  llm::ChatRequest req;
  req.model_id = cfg.model_id;
  req.temperature = cfg.temperature;
  req.max_new_tokens = cfg.max_new_tokens;
  std::string p = replace_all(std::string(kJudgeTemplate), "{lang}", std::string(fence_tag(language)));
  // Reasoning and function go in last and in one pass each, so their braces
  // are left alone.
  const auto r_at = p.find("{reasoning}");
  p.replace(r_at, 11, reasoning_text);
  const auto f_at = p.find("{function}");
  p.replace(f_at, 10, function_text);
  req.messages = {{"user", p}};
  return req;
}

// Empty reasoning is scored at the rubric floor without a call.
inline JudgeVerdict judge_score(const std::string& sample_ref, const std::string& reasoning_text,
                                const std::string& function_text, Language language,
                                llm::ChatClient& judge, const JudgeConfig& cfg = {}) {
  JudgeVerdict v;
  v.sample_ref = sample_ref;
  v.judge_id = cfg.model_id;
  if (trim(reasoning_text).empty()) return v;
  auto req = judge_request(reasoning_text, function_text, language, cfg);
  std::string raw;
  for (int attempt = 0; attempt <= std::max(0, cfg.parse_retries); ++attempt) {
    raw = judge.cached_complete(req).text;
    if (const auto s = parse_verdict(raw)) {
      v.completeness = s->completeness;
      v.clarity = s->clarity;
      v.actionability = s->actionability;
      return v;
    }
    req.messages.push_back({"assistant", raw});
    req.messages.push_back({"user", std::string(kJudgeRetryReminder)});
  }
  throw UnparsableVerdict(sample_ref, raw);
}

struct JudgeSummary {
  std::size_t n = 0;
  double completeness = 0.0, clarity = 0.0, actionability = 0.0;
};

inline void to_json(json& j, const JudgeSummary& s) {
  j = json{{"n", s.n}, {"completeness", round2(s.completeness)}, {"clarity", round2(s.clarity)},
           {"actionability", round2(s.actionability)}};
}

inline JudgeSummary summarize_verdicts(const std::vector<JudgeVerdict>& verdicts) {
  if (verdicts.empty()) throw EmptyInput("no verdicts");
  JudgeSummary s;
  s.n = verdicts.size();
  for (const auto& v : verdicts) {
    s.completeness += v.completeness;
    s.clarity += v.clarity;
    s.actionability += v.actionability;
  }
  const double n = static_cast<double>(s.n);
  s.completeness /= n;
  s.clarity /= n;
  s.actionability /= n;
  return s;
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

class InconsistentSystems : public Error {
 public:
  using Error::Error;
};

inline constexpr std::string_view kRankingTemplate =
    R"(Below are {n} anonymous explanations of whether the same {lang} function is vulnerable.

Function:
```{lang}
{function}
```

{candidates}
Rank the explanations from best to worst on completeness, clarity and actionability. Ties are
not allowed. End your answer with exactly one line of the form
RANKING: {example})";

struct RankingTask {
  std::string prompt;
  std::vector<std::string> letters;       // display labels, A, B, ...
  std::vector<std::string> hidden_order;  // system shown under letters[i]
};

inline std::string candidate_letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

// Candidates are shown under letters in a seeded random order; system names
// never appear in the prompt.
inline RankingTask build_ranking_task(const std::string& function_text, Language language,
                                      const std::map<std::string, std::string>& candidates, Rng& rng) {
  if (candidates.empty() || candidates.size() > 26) throw InvalidArgument("need 1..26 candidates");
  RankingTask t;
  for (const auto& [system, text] : candidates) t.hidden_order.push_back(system);
  rng.shuffle(t.hidden_order);
  std::string block;
  std::string example;
  for (std::size_t i = 0; i < t.hidden_order.size(); ++i) {
    t.letters.push_back(candidate_letter(i));
    block += "Candidate " + t.letters[i] + ":\n<<<\n" + candidates.at(t.hidden_order[i]) + "\n>>>\n\n";
    example += (i ? " > " : "") + t.letters[i];
  }
  std::string p = std::string(kRankingTemplate);
  p = replace_all(p, "{n}", std::to_string(candidates.size()));
  p = replace_all(p, "{lang}", std::string(fence_tag(language)));
  p = replace_all(p, "{example}", example);
  const auto c_at = p.find("{candidates}");
  p.replace(c_at, 12, block);
  const auto f_at = p.find("{function}");
  p.replace(f_at, 10, function_text);
  t.prompt = std::move(p);
  return t;
}

// Parses "RANKING: B > A > C" into system names, best first. Requires a full
// permutation of the shown letters.
inline std::optional<std::vector<std::string>> parse_ranking(std::string_view text, const RankingTask& task) {
  static const std::regex kLine(R"(RANKING\s*:\s*([A-Z](?:\s*>\s*[A-Z])*))", std::regex::icase);
  const std::string s(text);
  std::optional<std::string> last;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kLine); it != std::sregex_iterator(); ++it) {
    last = (*it)[1].str();
  }
  if (!last) return std::nullopt;
  std::vector<std::string> order;
  std::set<std::size_t> used;
  for (char c : *last) {
    if (!std::isalpha(static_cast<unsigned char>(c))) continue;
    const auto idx = static_cast<std::size_t>(std::toupper(static_cast<unsigned char>(c)) - 'A');
    if (idx >= task.hidden_order.size() || !used.insert(idx).second) return std::nullopt;
    order.push_back(task.hidden_order[idx]);
  }
  if (order.size() != task.hidden_order.size()) return std::nullopt;
  return order;
}

inline std::vector<std::string> judge_rank(const std::string& sample_ref, const std::string& function_text,
                                           Language language,
                                           const std::map<std::string, std::string>& candidates,
                                           llm::ChatClient& judge, Rng& rng, const JudgeConfig& cfg = {}) {
  const auto task = build_ranking_task(function_text, language, candidates, rng);
  llm::ChatRequest req;
  req.model_id = cfg.model_id;
  req.temperature = cfg.temperature;
  req.max_new_tokens = cfg.max_new_tokens;
  req.messages = {{"user", task.prompt}};
  std::string raw;
  for (int attempt = 0; attempt <= std::max(0, cfg.parse_retries); ++attempt) {
    raw = judge.cached_complete(req).text;
    if (auto order = parse_ranking(raw, task)) return *order;
    req.messages.push_back({"assistant", raw});
    req.messages.push_back({"user", "Reply again and end with one line \"RANKING: X > Y > ...\" using every "
                                    "candidate letter exactly once."});
  }
  throw UnparsableVerdict(sample_ref, raw);
}

// Fraction of samples on which each system is ranked first.
inline std::map<std::string, double> aggregate_preferences(const std::vector<std::vector<std::string>>& rankings) {
  if (rankings.empty()) throw EmptyInput("no rankings");
  const std::set<std::string> systems(rankings.front().begin(), rankings.front().end());
  std::map<std::string, double> wins;
  for (const auto& s : systems) wins[s] = 0.0;
  for (const auto& r : rankings) {
    const std::set<std::string> these(r.begin(), r.end());
    if (these != systems || r.size() != systems.size() || r.empty()) {
      throw InconsistentSystems("every ranking must order the same systems exactly once");
    }
    wins[r.front()] += 1.0;
  }
  for (auto& [s, w] : wins) w /= static_cast<double>(rankings.size());
  return wins;
}

}  // namespace vulnpref::eval

#endif  // VULNPREF_EVAL_HPP
