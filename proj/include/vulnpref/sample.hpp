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

#ifndef VULNPREF_SAMPLE_HPP
#define VULNPREF_SAMPLE_HPP

#include <optional>
#include <string>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/corpus.hpp"

namespace vulnpref {

enum class SampleSource { kNvdPipeline, kExternal };

NLOHMANN_JSON_SERIALIZE_ENUM(SampleSource, {{SampleSource::kNvdPipeline, "nvd_pipeline"},
                                            {SampleSource::kExternal, "external"}})

// A single labeled function. CWE ids and the CVE description ride along so
// reasoning prompts can be built without going back to the corpus.
struct LabeledSample {
  std::string digest;
  std::string function_text;
  Language language = Language::kC;
  Label label = Label::kNonVulnerable;
  std::optional<std::string> cve_id;
  SampleSource source = SampleSource::kNvdPipeline;
  std::vector<std::string> cwe_ids;
  std::string cve_description;

  bool operator==(const LabeledSample&) const = default;

  void validate() const {
    if (digest.empty()) throw InvalidArgument("sample without digest");
    if (label == Label::kVulnerable && source == SampleSource::kNvdPipeline &&
        (!cve_id || cve_id->empty())) {
      throw InvalidArgument("vulnerable sample " + digest + " has no cve_id");
    }
  }
};

inline void to_json(json& j, const LabeledSample& s) {
  j = json{{"digest", s.digest},
           {"function_text", s.function_text},
           {"language", s.language},
           {"label", s.label},
           {"cve_id", s.cve_id ? json(*s.cve_id) : json(nullptr)},
           {"source", s.source},
           {"cwe_ids", s.cwe_ids},
           {"cve_description", s.cve_description}};
}

inline void from_json(const json& j, LabeledSample& s) {
  j.at("digest").get_to(s.digest);
  j.at("function_text").get_to(s.function_text);
  j.at("language").get_to(s.language);
  j.at("label").get_to(s.label);
  s.cve_id.reset();
  if (j.contains("cve_id") && !j["cve_id"].is_null()) s.cve_id = j["cve_id"].get<std::string>();
  s.source = j.value("source", SampleSource::kNvdPipeline);
  s.cwe_ids = j.value("cwe_ids", std::vector<std::string>{});
  s.cve_description = j.value("cve_description", "");
}

inline LabeledSample vulnerable_sample(const corpus::FunctionPair& p,
                                       SampleSource source = SampleSource::kNvdPipeline) {
  LabeledSample s;
  s.digest = p.content_digest;
  s.function_text = p.pre_function;
  s.language = p.language;
  s.label = Label::kVulnerable;
  if (!p.cve_id.empty()) s.cve_id = p.cve_id;
  s.source = source;
  s.cwe_ids = p.cwe_ids;
  s.cve_description = p.cve_description;
  return s;
}

inline LabeledSample non_vulnerable_sample(const corpus::PoolFunction& f,
                                           SampleSource source = SampleSource::kNvdPipeline) {
  LabeledSample s;
  s.digest = f.content_digest;
  s.function_text = f.text;
  s.language = f.language;
  s.label = Label::kNonVulnerable;
  s.source = source;
  return s;
}

}  // namespace vulnpref

#endif  // VULNPREF_SAMPLE_HPP
