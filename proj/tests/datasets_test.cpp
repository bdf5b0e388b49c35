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

#include "vulnpref/datasets.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace vulnpref::datasets {
namespace {

using vulnpref::testing::TempDir;

LabeledSample Make(const std::string& tag, Language lang, Label label,
                   std::optional<std::string> cve = std::nullopt) {
  LabeledSample s;
  s.digest = md5_hex(tag);
  s.function_text = "int " + tag + "() { return 0; }";
  s.language = lang;
  s.label = label;
  if (label == Label::kVulnerable && !cve) cve = "CVE-2020-" + tag;
  s.cve_id = cve;
  return s;
}

std::vector<LabeledSample> Many(const std::string& prefix, std::size_t n, Language lang, Label label) {
  std::vector<LabeledSample> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(Make(prefix + std::to_string(i), lang, label));
  return v;
}

std::size_t Count(const std::vector<LabeledSample>& v, Language lang, Label label) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [&](const auto& s) {
    return s.language == lang && s.label == label;
  }));
}

TEST(AssembleBalanced, DrawsOneNegativePerPositivePerLanguage) {
  auto v = Many("v", 10, Language::kC, Label::kVulnerable);
  auto v2 = Many("w", 4, Language::kPython, Label::kVulnerable);
  v.insert(v.end(), v2.begin(), v2.end());
  auto pool = Many("n", 100, Language::kC, Label::kNonVulnerable);
  auto pool2 = Many("m", 20, Language::kPython, Label::kNonVulnerable);
  pool.insert(pool.end(), pool2.begin(), pool2.end());
  const auto out = assemble_balanced(v, pool, 7);
  EXPECT_EQ(out.size(), 28u);
  EXPECT_EQ(Count(out, Language::kC, Label::kNonVulnerable), 10u);
  EXPECT_EQ(Count(out, Language::kPython, Label::kNonVulnerable), 4u);
  EXPECT_EQ(digests_of(out).size(), out.size());
}

TEST(AssembleBalanced, TwinIsNeverSelected) {
  const auto v = Many("v", 5, Language::kC, Label::kVulnerable);
  auto pool = Many("n", 5, Language::kC, Label::kNonVulnerable);
  auto twin = v[2];
  twin.label = Label::kNonVulnerable;
  pool.push_back(twin);
  auto post = Make("post-of-v3", Language::kC, Label::kNonVulnerable);
  pool.push_back(post);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto out = assemble_balanced(v, pool, seed, {post.digest});
    for (const auto& s : with_label(out, Label::kNonVulnerable)) {
      EXPECT_NE(s.digest, twin.digest);
      EXPECT_NE(s.digest, post.digest);
    }
  }
}

TEST(AssembleBalanced, DeterministicAndOrderIndependent) {
  const auto v = Many("v", 10, Language::kJava, Label::kVulnerable);
  auto pool = Many("n", 50, Language::kJava, Label::kNonVulnerable);
  const auto a = assemble_balanced(v, pool, 3);
  std::reverse(pool.begin(), pool.end());
  EXPECT_EQ(a, assemble_balanced(v, pool, 3));
  EXPECT_NE(digests_of(a), digests_of(assemble_balanced(v, pool, 4)));
}

TEST(AssembleBalanced, InsufficientNegatives) {
  const auto v = Many("v", 10, Language::kCSharp, Label::kVulnerable);
  const auto pool = Many("n", 9, Language::kCSharp, Label::kNonVulnerable);
  try {
    assemble_balanced(v, pool, 1);
    FAIL();
  } catch (const InsufficientNegatives& e) {
    EXPECT_EQ(e.language(), Language::kCSharp);
  }
}

TEST(Split, SingleLanguageThousand) {
  const auto s = split(Many("a", 1000, Language::kC, Label::kVulnerable), {}, 1);
  EXPECT_EQ(s.train.size(), 800u);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.test.size(), 100u);
}

TEST(Split, TwoLanguagesMatchLargestRemainderOracle) {
  auto all = Many("a", 600, Language::kC, Label::kVulnerable);
  auto b = Many("b", 400, Language::kJava, Label::kVulnerable);
  all.insert(all.end(), b.begin(), b.end());
  const auto s = split(all, {}, 9);
  EXPECT_EQ(Count(s.train, Language::kC, Label::kVulnerable), 480u);
  EXPECT_EQ(Count(s.val, Language::kC, Label::kVulnerable), 60u);
  EXPECT_EQ(Count(s.test, Language::kC, Label::kVulnerable), 60u);
  EXPECT_EQ(Count(s.train, Language::kJava, Label::kVulnerable), 320u);
  EXPECT_EQ(Count(s.val, Language::kJava, Label::kVulnerable), 40u);
  EXPECT_EQ(Count(s.test, Language::kJava, Label::kVulnerable), 40u);
}

TEST(Apportion, MatchesHandComputedRemainders) {
  // 7 * (0.8, 0.1, 0.1) = (5.6, 0.7, 0.7): floors (5,0,0), two seats left to
  // the largest fractions, val and test tie above train.
  EXPECT_EQ(apportion(7, {}), (std::array<std::size_t, 3>{5, 1, 1}));
  // 13 -> (10.4, 1.3, 1.3): one seat left, train has the largest remainder.
  EXPECT_EQ(apportion(13, {}), (std::array<std::size_t, 3>{11, 1, 1}));
  EXPECT_EQ(apportion(0, {}), (std::array<std::size_t, 3>{0, 0, 0}));
  EXPECT_THROW(apportion(5, {0.5, 0.5, 0.5}), InvalidArgument);
}

TEST(Split, StratificationBoundAndDisjointnessOnFuzzedSizes) {
  Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<LabeledSample> all;
    std::map<Language, std::size_t> n;
    for (Language lang : kAllLanguages) {
      n[lang] = rng.below(120);
      auto part = Many(std::to_string(trial) + std::string(to_string(lang)), n[lang], lang, Label::kVulnerable);
      all.insert(all.end(), part.begin(), part.end());
    }
    const SplitRatios r{0.7, 0.2, 0.1};
    const auto s = split(all, r, trial);
    EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), all.size());
    const auto dt = digests_of(s.train), dv = digests_of(s.val), ds = digests_of(s.test);
    for (const auto& d : dv) EXPECT_FALSE(dt.count(d) || ds.count(d));
    for (const auto& d : ds) EXPECT_FALSE(dt.count(d));
    for (Language lang : kAllLanguages) {
      if (n[lang] == 0) continue;
      const double nn = static_cast<double>(n[lang]);
      const auto check = [&](const std::vector<LabeledSample>& part, double ratio) {
        const double frac = static_cast<double>(Count(part, lang, Label::kVulnerable)) / nn;
        EXPECT_LE(std::abs(frac - ratio), 1.0 / nn + 1e-12);
      };
      check(s.train, r.train);
      check(s.val, r.val);
      check(s.test, r.test);
    }
  }
}

TEST(Split, SeedDeterminism) {
  const auto all = Many("a", 200, Language::kPython, Label::kNonVulnerable);
  EXPECT_EQ(split(all, {}, 5).test, split(all, {}, 5).test);
}

std::vector<LabeledSample> BaseTest(std::size_t npos) {
  auto base = Many("p", npos, Language::kC, Label::kVulnerable);
  auto neg = Many("q", npos, Language::kC, Label::kNonVulnerable);
  base.insert(base.end(), neg.begin(), neg.end());
  return base;
}

TEST(Imbalance, RatioTenGivesExactCount) {
  const auto base = BaseTest(53);
  const auto pool = Many("pool", 700, Language::kC, Label::kNonVulnerable);
  const auto out = build_imbalance_set(base, {10, Language::kC, {}}, pool, 2);
  EXPECT_EQ(with_label(out, Label::kVulnerable).size(), 53u);
  EXPECT_EQ(with_label(out, Label::kNonVulnerable).size(), 530u);
  EXPECT_EQ(digests_of(with_label(out, Label::kVulnerable)),
            digests_of(with_label(base, Label::kVulnerable)));
}

TEST(Imbalance, RatioOneIsTheBaseSet) {
  const auto base = BaseTest(20);
  const auto pool = Many("pool", 300, Language::kC, Label::kNonVulnerable);
  EXPECT_EQ(build_imbalance_set(base, {1, std::nullopt, {}}, pool, 2), base);
}

TEST(Imbalance, SurplusBaseNegativesAreTrimmed) {
  auto base = BaseTest(4);
  for (const auto& n : Many("extra", 3, Language::kC, Label::kNonVulnerable)) base.push_back(n);
  const auto pool = Many("pool", 40, Language::kC, Label::kNonVulnerable);
  const auto k1 = build_imbalance_set(base, {1, Language::kC, {}}, pool, 5);
  const auto k2 = build_imbalance_set(base, {2, Language::kC, {}}, pool, 5);
  EXPECT_EQ(with_label(k1, Label::kNonVulnerable).size(), 4u);
  EXPECT_EQ(with_label(k2, Label::kNonVulnerable).size(), 8u);
  for (const auto& d : digests_of(k1)) EXPECT_TRUE(digests_of(k2).count(d));
}

TEST(Imbalance, ExclusionsHonoredAndSetsNested) {
  const auto base = BaseTest(10);
  const auto pool = Many("pool", 120, Language::kC, Label::kNonVulnerable);
  DigestSet excluded;
  for (std::size_t i = 0; i < pool.size(); i += 3) excluded.insert(pool[i].digest);
  DigestSet prev;
  for (int k = 1; k <= 8; ++k) {
    const auto out = build_imbalance_set(base, {k, Language::kC, excluded}, pool, 11);
    EXPECT_EQ(with_label(out, Label::kNonVulnerable).size(), static_cast<std::size_t>(10 * k));
    const auto d = digests_of(out);
    for (const auto& e : excluded) EXPECT_FALSE(d.count(e));
    for (const auto& p : prev) EXPECT_TRUE(d.count(p));
    prev = d;
  }
  EXPECT_THROW(build_imbalance_set(base, {10, Language::kC, excluded}, pool, 11), InsufficientNegatives);
  EXPECT_THROW(build_imbalance_set(base, {0, Language::kC, {}}, pool, 11), InvalidArgument);
}

TEST(IdOod, PartitionByTrainingCves) {
  std::vector<LabeledSample> test;
  for (int i = 0; i < 712; ++i) test.push_back(Make("id" + std::to_string(i), Language::kC, Label::kVulnerable, "CVE-A-" + std::to_string(i % 300)));
  for (int i = 0; i < 194; ++i) test.push_back(Make("ood" + std::to_string(i), Language::kC, Label::kVulnerable, "CVE-B-" + std::to_string(i)));
  auto negs = Many("n", 50, Language::kC, Label::kNonVulnerable);
  test.insert(test.end(), negs.begin(), negs.end());
  std::set<std::string> train;
  for (int i = 0; i < 300; ++i) train.insert("CVE-A-" + std::to_string(i));
  const auto p = partition_id_ood(test, train);
  EXPECT_EQ(p.id.size(), 712u);
  EXPECT_EQ(p.ood.size(), 194u);
  EXPECT_EQ(partition_id_ood(test, {}).ood.size(), 906u);
  EXPECT_EQ(partition_id_ood(test, {"CVE-Z"}).id.size(), 0u);
}

TEST(IdOod, PositiveWithoutCveIsAnError) {
  auto s = Make("x", Language::kC, Label::kVulnerable);
  s.cve_id.reset();
  EXPECT_THROW(partition_id_ood({s}, {}), MissingCve);
}

TEST(External, FilterThenMergeBalanced) {
  auto ext = Many("ext", 55, Language::kC, Label::kVulnerable);
  ext[0].cve_id = "CVE-TRAIN";
  const auto main_v = Make("mainv", Language::kC, Label::kVulnerable);
  ext[1].digest = main_v.digest;
  const auto filtered = dedupe_external(ext, {main_v.digest}, {"CVE-TRAIN"});
  EXPECT_EQ(filtered.kept.size(), 53u);
  ASSERT_EQ(filtered.dropped.size(), 2u);
  for (const auto& s : filtered.kept) EXPECT_EQ(s.source, SampleSource::kExternal);
  const auto main_nv = Many("tn", 80, Language::kC, Label::kNonVulnerable);
  const auto merged = merge_external(filtered.kept, main_nv, 4);
  EXPECT_EQ(merged.size(), 106u);
  EXPECT_EQ(with_label(merged, Label::kNonVulnerable).size(), 53u);
  EXPECT_TRUE(merge_external({}, main_nv, 4).empty());
}

TEST(Manifest, WriteVerifyAndDetectTampering) {
  TempDir dir;
  const auto s = split(BaseTest(30), {}, 3);
  std::map<std::string, std::vector<json>> files = {{"train", to_json_rows(s.train)},
                                                    {"val", to_json_rows(s.val)},
                                                    {"test", to_json_rows(s.test)}};
  DatasetManifest m;
  m.name = "balanced";
  m.seed = 3;
  m.template_hash = "t";
  const auto sealed = write_dataset(dir.path(), files, m);
  EXPECT_EQ(load_manifest(dir.path()).digest(), sealed.digest());
  EXPECT_EQ(sealed.counts.at("train.jsonl").at("c").at("vulnerable") +
                sealed.counts.at("val.jsonl").at("c").at("vulnerable") +
                sealed.counts.at("test.jsonl").at("c").at("vulnerable"),
            30u);
  const auto ok = verify_dataset(dir.path());
  EXPECT_TRUE(ok.ok) << json(ok.problems).dump();

  // Same inputs, same digest.
  TempDir dir2;
  EXPECT_EQ(write_dataset(dir2.path(), files, m).digest(), sealed.digest());

  auto rows = read_jsonl(dir / "test.jsonl");
  rows.push_back(read_jsonl(dir / "train.jsonl").front());
  write_file_atomic(dir / "test.jsonl", to_jsonl(rows));
  const auto bad = verify_dataset(dir.path());
  EXPECT_FALSE(bad.ok);
  EXPECT_GE(bad.problems.size(), 2u);  // hash, counts and overlap
}

TEST(Manifest, BodyEditBreaksDigest) {
  TempDir dir;
  DatasetManifest m;
  m.name = "x";
  write_dataset(dir.path(), {{"test", {}}}, m);
  json j = json::parse(read_file(dir / "manifest.json"));
  j["seed"] = 99;
  write_file_atomic(dir / "manifest.json", j.dump());
  EXPECT_FALSE(verify_dataset(dir.path()).ok);
}

}  // namespace
}  // namespace vulnpref::datasets
