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

#include "vulnpref/reasoning.hpp"

#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

namespace vulnpref::reasoning {
namespace {

using vulnpref::testing::ScriptedProvider;
using vulnpref::testing::TempDir;
using vulnpref::testing::fixture;

const std::string& VulnText() {
  static const std::string t = read_file(fixture("reasoning_vulnerable.txt"));
  return t;
}
const std::string& SafeText() {
  static const std::string t = read_file(fixture("reasoning_non_vulnerable.txt"));
  return t;
}

LabeledSample VulnSample() {
  LabeledSample s;
  s.digest = "d-vuln";
  s.function_text = "public boolean authenticate(String u, String p) { logger.info(u + p); }";
  s.language = Language::kJava;
  s.label = Label::kVulnerable;
  s.cve_id = "CVE-2021-1234";
  s.cwe_ids = {"CWE-532"};
  s.cve_description = "Cleartext passwords are written to the server log";
  return s;
}

LabeledSample SafeSample() {
  LabeledSample s;
  s.digest = "d-safe";
  s.function_text = "void g(const char *s) { char b[8]; strncpy(b, s, 7); b[7] = 0; }";
  s.language = Language::kC;
  s.label = Label::kNonVulnerable;
  return s;
}

std::unique_ptr<llm::ChatClient> QuietClient(std::shared_ptr<llm::ChatProvider> p) {
  llm::RetryPolicy policy;
  policy.max_attempts = 3;
  auto c = std::make_unique<llm::ChatClient>(std::move(p), policy);
  c->set_sleeper([](std::chrono::milliseconds) {});
  return c;
}

TEST(BuildPrompt, VulnerableTemplateCarriesMetadataAndSteps) {
  const auto p = build_prompt("int f(){}", Language::kC, Label::kVulnerable, {"CWE-787", "CWE-125"},
                              "CVE-2020-0001", "Out-of-bounds write");
  EXPECT_EQ(p.template_id, Label::kVulnerable);
  EXPECT_NE(p.rendered_text.find("Specific Code Constructs"), std::string::npos);
  EXPECT_NE(p.rendered_text.find("CWE(s): CWE-787, CWE-125."), std::string::npos);
  EXPECT_NE(p.rendered_text.find("linked to CVE-2020-0001"), std::string::npos);
  EXPECT_NE(p.rendered_text.find("```c\nint f(){}\n```"), std::string::npos);
}

TEST(BuildPrompt, NonVulnerableTemplateHasNoCveFields) {
  const auto p = build_prompt("int f(){}", Language::kC, Label::kNonVulnerable, {"CWE-787"},
                              "CVE-2020-0001", "desc");
  EXPECT_NE(p.rendered_text.find("Analysis of Code Safety"), std::string::npos);
  EXPECT_EQ(p.rendered_text.find("CVE-"), std::string::npos);
  EXPECT_EQ(p.rendered_text.find("CWE-"), std::string::npos);
  EXPECT_FALSE(p.placeholders.count("cve_id"));
}

TEST(BuildPrompt, MissingMetadataForVulnerableTemplate) {
  EXPECT_THROW(build_prompt("x", Language::kC, Label::kVulnerable, {}, "CVE-1", "d"),
               MissingMetadata);
  EXPECT_THROW(build_prompt("x", Language::kC, Label::kVulnerable, {"CWE-1"}, "", "d"),
               MissingMetadata);
  EXPECT_THROW(build_prompt("x", Language::kC, Label::kVulnerable, {"CWE-1"}, "CVE-1", ""),
               MissingMetadata);
}

TEST(BuildPrompt, NoPlaceholdersLeftAndCodeBracesKept) {
  const std::string code = "void f() { printf(\"{cve_id} {lang}\"); }";
  for (Label l : {Label::kVulnerable, Label::kNonVulnerable}) {
    const auto p = build_prompt(code, Language::kJavaScript, l, {"CWE-79"}, "CVE-1", "xss");
    EXPECT_NE(p.rendered_text.find(code), std::string::npos);
    std::string without_code = p.rendered_text;
    without_code.erase(without_code.find(code), code.size());
    for (const char* ph : {"{lang}", "{function}", "{cwe_list}", "{cve_id}", "{cve_desc}"}) {
      EXPECT_EQ(without_code.find(ph), std::string::npos) << ph;
    }
  }
}

TEST(BuildPrompt, RenderingIsInjectiveOnFuzzedInputs) {
  Rng rng(5);
  std::set<std::string> inputs;
  std::set<std::string> outputs;
  const std::string alphabet = "ab{}. ";
  auto word = [&] {
    std::string w(1 + rng.below(4), ' ');
    for (auto& c : w) c = alphabet[rng.below(alphabet.size())];
    return w;
  };
  for (int i = 0; i < 3000; ++i) {
    const Label l = rng.below(2) ? Label::kVulnerable : Label::kNonVulnerable;
    const Language lang = kAllLanguages[rng.below(kAllLanguages.size())];
    const std::string fn = word();
    std::vector<std::string> cwes = {"CWE-" + word()};
    const std::string cve = "CVE-" + word();
    const std::string desc = word();
    const auto p = build_prompt(fn, lang, l, cwes, cve, desc);
    json key = {to_string(l), to_string(lang), fn};
    if (l == Label::kVulnerable) key.insert(key.end(), {cwes[0], cve, desc});
    inputs.insert(key.dump());
    outputs.insert(p.rendered_text);
  }
  EXPECT_EQ(inputs.size(), outputs.size());
}

TEST(PreferenceInputs, VulnerableSampleSwapsToSafeTemplate) {
  const auto [valid, flawed] = make_preference_inputs(VulnSample());
  EXPECT_EQ(valid.template_id, Label::kVulnerable);
  EXPECT_EQ(flawed.template_id, Label::kNonVulnerable);
  EXPECT_EQ(flawed.rendered_text.find("CVE-2021-1234"), std::string::npos);
  EXPECT_EQ(flawed.rendered_text.find("CWE-532"), std::string::npos);
  EXPECT_EQ(valid.placeholders.at("function"), flawed.placeholders.at("function"));
}

TEST(PreferenceInputs, SafeSampleGetsSentinelMetadata) {
  const auto [valid, flawed] = make_preference_inputs(SafeSample());
  EXPECT_EQ(valid.template_id, Label::kNonVulnerable);
  EXPECT_EQ(flawed.template_id, Label::kVulnerable);
  EXPECT_EQ(flawed.placeholders.at("cwe_list"), "CWE-unknown");
  EXPECT_EQ(flawed.placeholders.at("cve_id"), "CVE-0000-0000");
  EXPECT_FALSE(flawed.placeholders.at("cve_desc").empty());
}

TEST(PreferenceInputs, Deterministic) {
  EXPECT_EQ(make_preference_inputs(VulnSample()), make_preference_inputs(VulnSample()));
  EXPECT_EQ(make_preference_inputs(SafeSample()), make_preference_inputs(SafeSample()));
}

TEST(DetectionInput, ContainsFunctionButNoLabelHints) {
  const auto s = VulnSample();
  const auto x = detection_input(s.function_text, s.language);
  EXPECT_NE(x.find("```java\n" + s.function_text + "\n```"), std::string::npos);
  EXPECT_EQ(x.find("CVE"), std::string::npos);
  EXPECT_EQ(x.find("CWE"), std::string::npos);
  EXPECT_EQ(x.find("flagged"), std::string::npos);
}

TEST(Generate, ReplayFixtureIsReturnedByteIdentical) {
  const auto [valid, flawed] = make_preference_inputs(VulnSample());
  auto replay = std::make_shared<llm::ReplayProvider>();
  replay->add(teacher_request(valid, {}), VulnText());
  llm::ChatClient client(replay);
  EXPECT_EQ(generate_reasoning(valid, client), VulnText());
}

TEST(Generate, CacheHitIssuesNoProviderCall) {
  TempDir dir;
  auto provider = std::make_shared<ScriptedProvider>([](const llm::ChatRequest&) { return VulnText(); });
  auto client = QuietClient(provider);
  client->set_cache(std::make_shared<llm::ResponseCache>(dir.path(), null_sink()));
  const auto [valid, flawed] = make_preference_inputs(VulnSample());
  generate_reasoning(valid, *client);
  generate_reasoning(valid, *client);
  EXPECT_EQ(provider->calls(), 1);
}

TEST(Generate, TimeoutsSurfaceAsProviderErrorWithLog) {
  auto provider = std::make_shared<ScriptedProvider>([](const llm::ChatRequest&) { return ""; }, 99, 504);
  auto client = QuietClient(provider);
  const auto [valid, flawed] = make_preference_inputs(VulnSample());
  try {
    generate_reasoning(valid, *client);
    FAIL() << "expected ProviderError";
  } catch (const llm::ProviderError& e) {
    EXPECT_EQ(e.attempt_log().size(), 3u);
  }
}

TEST(Generate, EmptyCompletionIsAnError) {
  auto client = QuietClient(std::make_shared<ScriptedProvider>([](const llm::ChatRequest&) { return "  \n"; }));
  const auto [valid, flawed] = make_preference_inputs(VulnSample());
  EXPECT_THROW(generate_reasoning(valid, *client), EmptyCompletion);
}

TEST(Parse, FixtureYieldsFourOrderedSections) {
  const auto r = parse_reasoning(VulnText(), Label::kVulnerable);
  ASSERT_EQ(r.sections.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.sections[i].heading, vulnerable_headings()[i]);
  EXPECT_EQ(r.conclusion_label, Label::kVulnerable);
  EXPECT_TRUE(r.sections[0].body.starts_with("The method `authenticate`"));
  EXPECT_TRUE(r.sections[3].body.ends_with("from the message."));
}

TEST(Parse, PlainNumberedHeadingsAreAccepted) {
  const auto r = parse_reasoning(SafeText(), Label::kNonVulnerable);
  ASSERT_EQ(r.sections.size(), 3u);
  EXPECT_EQ(r.sections[2].heading, "Validation of the Non-Vulnerable Label");
}

TEST(Parse, HeadingVariantsAreEquivalent) {
  const std::string variants[] = {
      "<thinking>\n**1. Analysis of Code Safety:** a\n**2. Absence of Common Vulnerabilities:** b\n"
      "**3. Validation of the Non-Vulnerable Label:** c\n</thinking>",
      "<thinking>\n### 1) analysis of code safety\na\n### 2) Absence of Common Vulnerabilities\nb\n"
      "### 3) Validation of the Non-Vulnerable Label\nc\n</thinking>",
  };
  for (const auto& v : variants) {
    const auto r = parse_reasoning(v, Label::kNonVulnerable);
    ASSERT_EQ(r.sections.size(), 3u);
    EXPECT_EQ(r.sections[0].heading, "Analysis of Code Safety");
    EXPECT_EQ(r.sections[0].body, "a");
    EXPECT_EQ(r.sections[2].body, "c");
  }
}

StructureErrorKind KindOf(const std::string& text, Label label) {
  try {
    parse_reasoning(text, label);
  } catch (const StructureError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no StructureError";
  return StructureErrorKind::kMissingTag;
}

TEST(Parse, StructureErrors) {
  EXPECT_EQ(KindOf("", Label::kVulnerable), StructureErrorKind::kMissingTag);
  EXPECT_EQ(KindOf(replace_all(VulnText(), "</thinking>", ""), Label::kVulnerable),
            StructureErrorKind::kMissingTag);

  std::string no_impact = VulnText();
  const auto a = no_impact.find("3. **Potential Impact**");
  const auto b = no_impact.find("4. **Contextual Relevance**");
  no_impact.erase(a, b - a);
  EXPECT_EQ(KindOf(no_impact, Label::kVulnerable), StructureErrorKind::kMissingSection);

  std::string extra = replace_all(VulnText(), "</thinking>", "5. **Mitigation**: bound it.\n</thinking>");
  EXPECT_EQ(KindOf(extra, Label::kVulnerable), StructureErrorKind::kExtraSection);

  std::string swapped = replace_all(VulnText(), "**Potential Impact**", "**TMP**");
  swapped = replace_all(swapped, "**Mechanism of the Vulnerability**", "**Potential Impact**");
  swapped = replace_all(swapped, "**TMP**", "**Mechanism of the Vulnerability**");
  EXPECT_EQ(KindOf(swapped, Label::kVulnerable), StructureErrorKind::kMisordered);

  // Safe-template headings under a vulnerable expectation are foreign sections.
  EXPECT_EQ(KindOf(SafeText(), Label::kVulnerable), StructureErrorKind::kExtraSection);
}

TEST(Parse, RenderRoundTripIsLosslessOnBodies) {
  for (const auto& [text, label] : {std::pair{VulnText(), Label::kVulnerable},
                                    std::pair{SafeText(), Label::kNonVulnerable}}) {
    const auto r = parse_reasoning(text, label);
    const auto rendered = render(r);
    EXPECT_TRUE(rendered.ends_with(answer_line(label)));
    const auto again = parse_reasoning(rendered, label);
    EXPECT_EQ(again.sections, r.sections);
    EXPECT_EQ(render(again), rendered);
  }
}

std::string FakeTeacher(const llm::ChatRequest& r) {
  const auto& prompt = r.messages.front().content;
  const bool vulnerable_template = prompt.find("flagged as vulnerable") != std::string::npos;
  if (prompt.find("broken()") != std::string::npos) return "no tags at all";
  if (prompt.find("flaky()") != std::string::npos && r.messages.size() == 1) return "<thinking></thinking>";
  return vulnerable_template ? VulnText() : SafeText();
}

TEST(PreferenceSamples, LabelSwapContractRetryAndDrop) {
  auto provider = std::make_shared<ScriptedProvider>(FakeTeacher);
  auto client = QuietClient(provider);
  auto flaky = SafeSample();
  flaky.digest = "d-flaky";
  flaky.function_text = "int flaky() { return 0; }";
  auto broken = SafeSample();
  broken.digest = "d-broken";
  broken.function_text = "int broken() { return 0; }";
  std::vector<std::string> diags;
  const auto result = generate_preference_samples({VulnSample(), flaky, broken, SafeSample()}, *client,
                                                  {}, 2, [&](std::string_view m) { diags.emplace_back(m); });
  ASSERT_EQ(result.samples.size(), 3u);
  EXPECT_EQ(result.samples[0].digest, "d-vuln");
  EXPECT_EQ(result.samples[1].digest, "d-flaky");
  EXPECT_EQ(result.samples[2].digest, "d-safe");
  for (const auto& p : result.samples) {
    EXPECT_EQ(p.valid_y.conclusion_label, p.true_label);
    EXPECT_EQ(p.flawed_y.conclusion_label, opposite(p.true_label));
    EXPECT_NE(p.valid_y.conclusion_label, p.flawed_y.conclusion_label);
  }
  EXPECT_EQ(result.stats.requested, 4u);
  EXPECT_EQ(result.stats.emitted, 3u);
  EXPECT_EQ(result.stats.dropped, 1u);
  EXPECT_EQ(result.stats.retried, 4u);  // both branches of flaky and broken
  EXPECT_EQ(result.rejected.size(), 2u);
  EXPECT_EQ(diags.size(), 2u);
}

TEST(PreferenceSamples, RowRoundTrip) {
  auto client = QuietClient(std::make_shared<ScriptedProvider>(FakeTeacher));
  const auto result = generate_preference_samples({VulnSample()}, *client, {}, 1, null_sink());
  ASSERT_EQ(result.samples.size(), 1u);
  const json row = to_row(result.samples[0]);
  for (const char* k : {"digest", "language", "cve_id", "true_label", "input_x", "valid_text", "flawed_text"}) {
    EXPECT_TRUE(row.contains(k)) << k;
  }
  EXPECT_EQ(row["valid_text"].get<std::string>().substr(row["valid_text"].get<std::string>().size() - 11),
            "ANSWER: YES");
  const auto back = from_row(json::parse(row.dump()));
  EXPECT_EQ(to_row(back), row);
}

TEST(Templates, HashIsStableHex) {
  EXPECT_EQ(template_hash().size(), 64u);
  EXPECT_EQ(template_hash(), template_hash());
}

}  // namespace
}  // namespace vulnpref::reasoning
