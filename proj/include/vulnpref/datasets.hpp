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

// Balanced assembly, stratified splits, imbalance and ID/OOD test sets, and
// content-addressed dataset manifests.

#ifndef VULNPREF_DATASETS_HPP
#define VULNPREF_DATASETS_HPP

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/sample.hpp"

namespace vulnpref::datasets {

class InsufficientNegatives : public Error {
 public:
  InsufficientNegatives(Language lang, std::size_t need, std::size_t have)
      : Error("not enough negatives for " + std::string(to_string(lang)) + ": need " +
              std::to_string(need) + ", have " + std::to_string(have)),
        language_(lang) {}
  Language language() const { return language_; }

 private:
  Language language_;
};

class MissingCve : public Error {
 public:
  using Error::Error;
};

using DigestSet = std::set<std::string>;

inline DigestSet digests_of(const std::vector<LabeledSample>& v) {
  DigestSet out;
  for (const auto& s : v) out.insert(s.digest);
  return out;
}

inline std::vector<LabeledSample> with_label(const std::vector<LabeledSample>& v, Label label) {
  std::vector<LabeledSample> out;
  for (const auto& s : v) {
    if (s.label == label) out.push_back(s);
  }
  return out;
}

namespace detail {

inline std::map<Language, std::vector<LabeledSample>> by_language(
    const std::vector<LabeledSample>& v) {
  std::map<Language, std::vector<LabeledSample>> out;
  for (const auto& s : v) out[s.language].push_back(s);
  return out;
}

// Pool members per language, deduplicated by digest and minus `excluded`,
// sorted by digest so draws do not depend on pool order.
inline std::vector<LabeledSample> eligible(const std::vector<LabeledSample>& pool, Language lang,
                                           const DigestSet& excluded) {
  std::map<std::string, LabeledSample> unique;
  for (const auto& s : pool) {
    if (s.language == lang && !excluded.count(s.digest)) unique.emplace(s.digest, s);
  }
  std::vector<LabeledSample> out;
  out.reserve(unique.size());
  for (auto& [d, s] : unique) out.push_back(std::move(s));
  return out;
}

inline std::uint64_t language_seed(std::uint64_t seed, Language lang) {
  return seed * 1000003ULL + static_cast<std::uint64_t>(lang) + 1;
}

}  // namespace detail

// Per language, draws |V| negatives uniformly without replacement. Pool entries
// sharing a digest with any vulnerable function or listed in `excluded`
// (post-commit twins) are never drawn.
inline std::vector<LabeledSample> assemble_balanced(const std::vector<LabeledSample>& vulnerable,
                                                    const std::vector<LabeledSample>& nv_pool,
                                                    std::uint64_t seed,
                                                    const DigestSet& excluded = {}) {
  DigestSet blocked = excluded;
  for (const auto& v : vulnerable) blocked.insert(v.digest);
  std::vector<LabeledSample> out;
  for (const auto& [lang, positives] : detail::by_language(vulnerable)) {
    auto candidates = detail::eligible(nv_pool, lang, blocked);
    if (candidates.size() < positives.size()) {
      throw InsufficientNegatives(lang, positives.size(), candidates.size());
    }
    Rng rng(detail::language_seed(seed, lang));
    auto negatives = sample_without_replacement(std::move(candidates), positives.size(), rng);
    for (const auto& p : positives) {
      out.push_back(p);
      out.back().label = Label::kVulnerable;
    }
    for (auto& n : negatives) {
      n.label = Label::kNonVulnerable;
      out.push_back(std::move(n));
    }
  }
  return out;
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;

  void validate() const {
    if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
      throw InvalidArgument("split ratios must be non-negative and sum to 1");
    }
  }
};

inline void to_json(json& j, const SplitRatios& r) {
  j = json::array({r.train, r.val, r.test});
}
inline void from_json(const json& j, SplitRatios& r) {
  r.train = j.at(0).get<double>();
  r.val = j.at(1).get<double>();
  r.test = j.at(2).get<double>();
}

// Largest-remainder apportionment of n over the ratios; ties go to the
// earlier split.
inline std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& r) {
  r.validate();
  const std::array<double, 3> ratio = {r.train, r.val, r.test};
  std::array<std::size_t, 3> out{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double q = static_cast<double>(n) * ratio[i];
    out[i] = static_cast<std::size_t>(std::floor(q + 1e-9));
    frac[i] = q - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b] + 1e-12; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[order[k % 3]];
  return out;
}

struct Splits {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;
  std::vector<LabeledSample> test;
};

// Stratified by language; each language's samples are ordered by digest,
// shuffled with a seeded generator and cut by apportioned counts.
inline Splits split(const std::vector<LabeledSample>& samples, const SplitRatios& ratios = {},
                    std::uint64_t seed = 0) {
  ratios.validate();
  Splits out;
  for (auto& [lang, group] : detail::by_language(samples)) {
    auto pool = detail::eligible(group, lang, {});
    if (pool.size() != group.size()) throw InvalidArgument("duplicate digests in split input");
    Rng rng(detail::language_seed(seed, lang));
    rng.shuffle(pool);
    const auto counts = apportion(pool.size(), ratios);
    const std::array<std::vector<LabeledSample>*, 3> dst = {&out.train, &out.val, &out.test};
    auto it = pool.begin();
    for (std::size_t i = 0; i < 3; ++i) {
      const auto n = static_cast<std::ptrdiff_t>(counts[i]);
      dst[i]->insert(dst[i]->end(), it, it + n);
      it += n;
    }
  }
  return out;
}

struct ImbalanceSpec {
  int ratio_k = 1;
  std::optional<Language> language;  // all languages when absent
  DigestSet exclusion_set;

  void validate() const {
    if (ratio_k < 1) throw InvalidArgument("ratio_k must be >= 1");
  }
};

// Keeps the base positives and the first k x |V| base negatives, then tops
// negatives up to k x |V| per language from the pool. Draws are prefixes of
// one seeded permutation, so the set for k is contained in the set for k + 1.
inline std::vector<LabeledSample> build_imbalance_set(const std::vector<LabeledSample>& base_test,
                                                      const ImbalanceSpec& spec,
                                                      const std::vector<LabeledSample>& nv_pool,
                                                      std::uint64_t seed) {
  spec.validate();
  std::vector<LabeledSample> out;
  for (const auto& [lang, group] : detail::by_language(base_test)) {
    if (spec.language && *spec.language != lang) continue;
    const auto pos = with_label(group, Label::kVulnerable);
    auto neg = with_label(group, Label::kNonVulnerable);
    const std::size_t target = static_cast<std::size_t>(spec.ratio_k) * pos.size();
    if (neg.size() > target) neg.resize(target);
    for (const auto& n : neg) {
      if (spec.exclusion_set.count(n.digest)) {
        throw InvalidArgument("base negative " + n.digest + " is in the exclusion set");
      }
    }
    DigestSet blocked = spec.exclusion_set;
    for (const auto& s : group) blocked.insert(s.digest);
    auto candidates = detail::eligible(nv_pool, lang, blocked);
    const std::size_t need = target - neg.size();
    if (candidates.size() < need) throw InsufficientNegatives(lang, need, candidates.size());
    Rng rng(detail::language_seed(seed, lang));
    rng.shuffle(candidates);
    out.insert(out.end(), pos.begin(), pos.end());
    out.insert(out.end(), neg.begin(), neg.end());
    for (std::size_t i = 0; i < need; ++i) {
      out.push_back(candidates[i]);
      out.back().label = Label::kNonVulnerable;
    }
  }
  return out;
}

struct IdOodPartition {
  std::vector<LabeledSample> id;
  std::vector<LabeledSample> ood;
};

// Positives only: a positive is out-of-distribution when its CVE never
// appears in training.
inline IdOodPartition partition_id_ood(const std::vector<LabeledSample>& test,
                                       const std::set<std::string>& train_cve_ids) {
  IdOodPartition out;
  for (const auto& s : test) {
    if (s.label != Label::kVulnerable) continue;
    if (!s.cve_id || s.cve_id->empty()) throw MissingCve("positive " + s.digest + " has no cve_id");
    (train_cve_ids.count(*s.cve_id) ? out.id : out.ood).push_back(s);
  }
  return out;
}

inline std::set<std::string> cve_ids_of(const std::vector<LabeledSample>& v) {
  std::set<std::string> out;
  for (const auto& s : v) {
    if (s.cve_id && !s.cve_id->empty()) out.insert(*s.cve_id);
  }
  return out;
}

struct ExternalDrop {
  std::string digest;
  std::string reason;
};

struct ExternalFilterResult {
  std::vector<LabeledSample> kept;
  std::vector<ExternalDrop> dropped;
};

// Drops external positives already in the main corpus (by digest) or tied to
// a CVE seen in training.
inline ExternalFilterResult dedupe_external(const std::vector<LabeledSample>& external,
                                            const DigestSet& main_digests,
                                            const std::set<std::string>& train_cve_ids) {
  ExternalFilterResult out;
  DigestSet seen;
  for (const auto& s : external) {
    if (main_digests.count(s.digest)) {
      out.dropped.push_back({s.digest, "digest in main corpus"});
    } else if (s.cve_id && train_cve_ids.count(*s.cve_id)) {
      out.dropped.push_back({s.digest, "cve " + *s.cve_id + " seen in training"});
    } else if (!seen.insert(s.digest).second) {
      out.dropped.push_back({s.digest, "duplicate external digest"});
    } else {
      out.kept.push_back(s);
      out.kept.back().source = SampleSource::kExternal;
      out.kept.back().label = Label::kVulnerable;
    }
  }
  return out;
}

// Balanced external test set: each external positive is matched by a
// same-language negative drawn from the main test split.
inline std::vector<LabeledSample> merge_external(const std::vector<LabeledSample>& external_vulnerable,
                                                 const std::vector<LabeledSample>& main_test_nv,
                                                 std::uint64_t seed) {
  return assemble_balanced(external_vulnerable, with_label(main_test_nv, Label::kNonVulnerable), seed);
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

class ManifestError : public Error {
 public:
  using Error::Error;
};

struct DatasetManifest {
  std::string name;
  SplitRatios split_ratios;
  std::uint64_t seed = 0;
  std::string template_hash;
  std::optional<std::string> parent_manifest;
  json parameters = json::object();
  // file name -> sha256 of its bytes
  std::map<std::string, std::string> files;
  // file -> language -> label -> count
  std::map<std::string, std::map<std::string, std::map<std::string, std::size_t>>> counts;

  json body() const {
    return json{{"name", name},
                {"split_ratios", split_ratios},
                {"seed", seed},
                {"template_hash", template_hash},
                {"parent_manifest", parent_manifest ? json(*parent_manifest) : json(nullptr)},
                {"parameters", parameters},
                {"files", files},
                {"counts", counts}};
  }

  // Digest over the manifest body, which itself covers every content file.
  std::string digest() const { return json_digest(body()); }
};

inline void to_json(json& j, const DatasetManifest& m) {
  j = m.body();
  j["digest"] = m.digest();
}

inline void from_json(const json& j, DatasetManifest& m) {
  j.at("name").get_to(m.name);
  j.at("split_ratios").get_to(m.split_ratios);
  j.at("seed").get_to(m.seed);
  j.at("template_hash").get_to(m.template_hash);
  m.parent_manifest.reset();
  if (!j.at("parent_manifest").is_null()) m.parent_manifest = j["parent_manifest"].get<std::string>();
  m.parameters = j.value("parameters", json::object());
  j.at("files").get_to(m.files);
  j.at("counts").get_to(m.counts);
  if (j.contains("digest") && j["digest"].get<std::string>() != m.digest()) {
    throw ManifestError("manifest digest does not match its body");
  }
}

namespace detail {

inline std::map<std::string, std::map<std::string, std::size_t>> count_rows(const std::vector<json>& rows) {
  std::map<std::string, std::map<std::string, std::size_t>> c;
  for (const auto& r : rows) {
    const std::string lang = r.value("language", "unknown");
    const std::string label = r.contains("label") ? r["label"].get<std::string>()
                                                  : r.value("true_label", "unknown");
    ++c[lang][label];
  }
  return c;
}

}  // namespace detail

inline constexpr std::string_view kManifestFile = "manifest.json";

// Writes each named row set as <dir>/<name>.jsonl and seals a manifest.
inline DatasetManifest write_dataset(const std::filesystem::path& dir,
                                     const std::map<std::string, std::vector<json>>& files,
                                     DatasetManifest manifest) {
  std::filesystem::create_directories(dir);
  manifest.files.clear();
  manifest.counts.clear();
  for (const auto& [name, rows] : files) {
    const std::string file = name + ".jsonl";
    const std::string bytes = to_jsonl(rows);
    write_file_atomic(dir / file, bytes);
    manifest.files[file] = sha256_hex(bytes);
    manifest.counts[file] = detail::count_rows(rows);
  }
  write_file_atomic(dir / kManifestFile, json(manifest).dump(2) + "\n");
  return manifest;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  return json::parse(read_file(dir / kManifestFile)).get<DatasetManifest>();
}

struct VerifyReport {
  bool ok = true;
  std::vector<std::string> problems;
  std::string digest;
};

inline void to_json(json& j, const VerifyReport& r) {
  j = json{{"ok", r.ok}, {"problems", r.problems}, {"digest", r.digest}};
}

// Recomputes file hashes and counts, and checks that the train/val/test files
// (when present) share no digests.
inline VerifyReport verify_dataset(const std::filesystem::path& dir) {
  VerifyReport rep;
  DatasetManifest m;
  try {
    m = load_manifest(dir);
  } catch (const std::exception& e) {
    rep.ok = false;
    rep.problems.push_back(std::string("manifest: ") + e.what());
    return rep;
  }
  rep.digest = m.digest();
  std::map<std::string, DigestSet> split_digests;
  for (const auto& [file, hash] : m.files) {
    const auto path = dir / file;
    if (!std::filesystem::exists(path)) {
      rep.problems.push_back(file + ": missing");
      continue;
    }
    const std::string bytes = read_file(path);
    if (sha256_hex(bytes) != hash) rep.problems.push_back(file + ": content hash mismatch");
    if (!file.ends_with(".jsonl")) continue;
    const auto rows = read_jsonl(path);
    if (detail::count_rows(rows) != m.counts[file]) rep.problems.push_back(file + ": counts mismatch");
    for (const char* s : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
      if (file == s) {
        for (const auto& r : rows) split_digests[file].insert(r.at("digest").get<std::string>());
      }
    }
  }
  for (auto a = split_digests.begin(); a != split_digests.end(); ++a) {
    for (auto b = std::next(a); b != split_digests.end(); ++b) {
      for (const auto& d : a->second) {
        if (b->second.count(d)) {
          rep.problems.push_back(a->first + " and " + b->first + " share digest " + d);
          break;
        }
      }
    }
  }
  rep.ok = rep.problems.empty();
  return rep;
}

}  // namespace vulnpref::datasets

#endif  // VULNPREF_DATASETS_HPP
