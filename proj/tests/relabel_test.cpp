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

#include "vulnpref/relabel.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace vulnpref::relabel {
namespace {

using vulnpref::testing::ScriptedProvider;

corpus::FunctionPair MakePair(const std::string& tag) {
  corpus::FunctionPair p;
  p.pre_function = "int " + tag + "(char *s) { char b[4]; strcpy(b, s); return 0; }";
  p.post_function = "int " + tag + "(char *s) { char b[4]; strncpy(b, s, 3); return 0; }";
  p.language = Language::kC;
  p.path = "src/" + tag + ".c";
  p.function_name = tag;
  p.cve_id = "CVE-2020-0001";
  p.cwe_ids = {"CWE-787"};
  p.cve_description = "Stack buffer overflow in " + tag;
  p.content_digest = corpus::content_digest(p.pre_function);
  return p;
}

TEST(ParseScore, LastValidLineWins) {
  EXPECT_EQ(parse_score("SCORE: 1\nreconsidered...\nSCORE: 3"), 3);
  EXPECT_EQ(parse_score("reasoning\nscore:4"), 4);
  EXPECT_EQ(parse_score("SCORE: 0"), 0);
}

TEST(ParseScore, MissingOrOutOfRangeIsUnparsable) {
  EXPECT_FALSE(parse_score("I think it's a 3.").has_value());
  EXPECT_FALSE(parse_score("SCORE: 5").has_value());
  EXPECT_FALSE(parse_score("SCORE: 12345678901234").has_value());
  EXPECT_FALSE(parse_score("").has_value());
}

TEST(Prompt, CodeBracesAreNotTreatedAsPlaceholders) {
  auto p = MakePair("f");
  p.pre_function = "void f() { log(\"{cve_id}\"); }";
  const auto prompt = render_relabel_prompt(p);
  EXPECT_NE(prompt.find("log(\"{cve_id}\")"), std::string::npos);
  EXPECT_NE(prompt.find("CVE-2020-0001"), std::string::npos);
  EXPECT_NE(prompt.find("SCORE: <0-4>"), std::string::npos);
}

TEST(ScorePair, RetriesWithReminderUntilParsable) {
  auto provider = std::make_shared<ScriptedProvider>([](const llm::ChatRequest& r) {
    return r.messages.size() > 2 ? std::string("better now\nSCORE: 4") : std::string("no idea");
  });
  llm::ChatClient client(provider);
  const auto s = score_pair(MakePair("f"), client);
  EXPECT_EQ(s.score, 4);
  EXPECT_EQ(provider->calls(), 2);
}

TEST(ScorePair, ExhaustedRetriesRaiseUnparsableScore) {
  auto provider = std::make_shared<ScriptedProvider>([](const llm::ChatRequest&) {
    return std::string("SCORE: 9");
  });
  llm::ChatClient client(provider);
  RelabelConfig cfg;
  cfg.parse_retries = 3;
  try {
    score_pair(MakePair("f"), client, cfg);
    FAIL() << "expected UnparsableScore";
  } catch (const UnparsableScore& e) {
    EXPECT_EQ(e.attempts(), 4);
    EXPECT_EQ(e.raw_response(), "SCORE: 9");
  }
  EXPECT_EQ(provider->calls(), 4);
}

TEST(ScorePair, MissingMetadataIsRejected) {
  auto p = MakePair("f");
  p.cve_description.clear();
  llm::ChatClient client(std::make_shared<llm::ReplayProvider>());
  EXPECT_THROW(score_pair(p, client), InvalidArgument);
}

TEST(ScorePairs, KeepsInputOrderAndQuarantinesUnparsable) {
  std::vector<corpus::FunctionPair> pairs;
  for (int i = 0; i < 9; ++i) pairs.push_back(MakePair("fn" + std::to_string(i)));
  auto provider = std::make_shared<ScriptedProvider>([](const llm::ChatRequest& r) {
    const auto& body = r.messages[1].content;
    const auto at = body.find("Stack buffer overflow in fn");
    const int i = body[at + 27] - '0';
    if (i == 4) return std::string("cannot decide");
    return "SCORE: " + std::to_string(i % 5);
  });
  llm::ChatClient client(provider);
  RelabelConfig cfg;
  cfg.parse_retries = 1;
  const auto result = score_pairs(pairs, client, cfg, 3);
  ASSERT_EQ(result.scores.size(), 8u);
  ASSERT_EQ(result.quarantined.size(), 1u);
  EXPECT_EQ(result.quarantined[0].pair_ref, pairs[4].content_digest);
  std::size_t k = 0;
  for (int i = 0; i < 9; ++i) {
    if (i == 4) continue;
    EXPECT_EQ(result.scores[k].pair_ref, pairs[i].content_digest);
    EXPECT_EQ(result.scores[k].score, i % 5);
    ++k;
  }
}

TEST(SelectVulnerable, ThresholdsAreCumulativeAndNested) {
  std::vector<RelabelScore> scores;
  for (int i = 0; i < 25; ++i) scores.push_back({"d" + std::to_string(i), i % 5, "", "m"});
  std::set<std::string> prev;
  for (int tau = 4; tau >= 1; --tau) {
    const auto sel = select_vulnerable(scores, tau);
    EXPECT_EQ(sel.size(), static_cast<std::size_t>(5 * (5 - tau)));
    for (const auto& d : prev) EXPECT_TRUE(sel.count(d));
    prev = sel;
  }
  EXPECT_THROW(select_vulnerable(scores, 0), InvalidArgument);
  EXPECT_THROW(select_vulnerable(scores, 5), InvalidArgument);
}

TEST(MajorityVote, StrictMajorityElseUncertain) {
  using V = Verdict;
  EXPECT_EQ(majority_vote({V::kAccept, V::kAccept, V::kReject}), V::kAccept);
  EXPECT_EQ(majority_vote({V::kReject, V::kReject, V::kAccept}), V::kReject);
  EXPECT_EQ(majority_vote({V::kAccept, V::kUncertain, V::kReject}), V::kUncertain);
  EXPECT_EQ(majority_vote({V::kAccept, V::kAccept, V::kReject, V::kReject}), V::kUncertain);
  EXPECT_EQ(majority_vote({V::kReject}), V::kReject);
  EXPECT_THROW(majority_vote({}), EmptyInput);
}

TEST(MajorityVote, LatestVotePerAnnotatorWins) {
  std::vector<AnnotationVote> log = {
      {"s1", "a", Verdict::kReject, "2026-01-01T00:00:00Z"},
      {"s1", "b", Verdict::kAccept, "2026-01-01T00:00:00Z"},
      {"s1", "c", Verdict::kReject, "2026-01-01T00:00:00Z"},
      {"s1", "a", Verdict::kAccept, "2026-01-02T00:00:00Z"},
      {"s1", "c", Verdict::kUncertain, "2025-12-31T00:00:00Z"},
  };
  const auto m = majority_by_sample(log);
  EXPECT_EQ(m.at("s1"), Verdict::kAccept);
  EXPECT_EQ(latest_votes(log).size(), 3u);
}

TEST(Summary, RatesMatchVoteTable) {
  std::vector<Verdict> v;
  v.insert(v.end(), 93, Verdict::kAccept);
  v.insert(v.end(), 6, Verdict::kUncertain);
  v.insert(v.end(), 1, Verdict::kReject);
  const auto s = summarize_annotations(v);
  EXPECT_EQ(s.n_samples, 100u);
  EXPECT_DOUBLE_EQ(s.accept_rate, 0.93);
  EXPECT_DOUBLE_EQ(s.uncertain_rate, 0.06);
  EXPECT_DOUBLE_EQ(s.reject_rate, 0.01);
  EXPECT_THROW(summarize_annotations(std::vector<Verdict>{}), EmptyInput);
}

TEST(Serialization, ScoreAndVoteRoundTrip) {
  const RelabelScore s{"abc", 3, "SCORE: 3", "gpt-4o"};
  EXPECT_EQ(json(s).get<RelabelScore>(), s);
  const AnnotationVote v{"s", "ann", Verdict::kUncertain, "2026-01-01T00:00:00Z"};
  const json j = v;
  EXPECT_EQ(j.at("verdict"), "uncertain");
  EXPECT_EQ(j.get<AnnotationVote>(), v);
  json bad = s;
  bad["score"] = 7;
  EXPECT_THROW(bad.get<RelabelScore>(), InvalidArgument);
}

}  // namespace
}  // namespace vulnpref::relabel
