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

// Run configuration and the stage runners behind the command-line tool. Every
// stage writes an immutable, content-addressed directory sealed by a manifest.

#ifndef VULNPREF_PIPELINE_HPP
#define VULNPREF_PIPELINE_HPP

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/corpus.hpp"
#include "vulnpref/datasets.hpp"
#include "vulnpref/eval.hpp"
#include "vulnpref/llm_client.hpp"
#include "vulnpref/llm_http.hpp"
#include "vulnpref/orpo.hpp"
#include "vulnpref/reasoning.hpp"
#include "vulnpref/relabel.hpp"
#include "vulnpref/sample.hpp"
#include "vulnpref/scorer.hpp"

namespace vulnpref::pipeline {

inline constexpr std::string_view kCodeVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Null entries accept any value; train.learning_rate, batch_size and epochs
// fall back to the per-mode defaults when null.
inline json default_config() {
  const corpus::FilterConfig filter;
  return json{
      {"version", kConfigVersion},
      {"paths", {{"work_dir", "runs"}}},
      {"provider",
       {{"mode", "replay"},
        {"recordings", nullptr},
        {"cache_dir", nullptr},
        {"base_url", "https://api.openai.com"},
        {"api_key_env", "OPENAI_API_KEY"},
        {"max_in_flight", 4},
        {"max_attempts", 5}}},
      {"corpus",
       {{"max_tokens", filter.max_tokens},
        {"test_path_markers", filter.test_path_markers},
        {"test_name_prefixes", filter.test_name_prefixes}}},
      {"relabel",
       {{"model_id", "gpt-4o"},
        {"temperature", 0.0},
        {"max_new_tokens", 1024},
        {"parse_retries", 3},
        {"tau", 4},
        {"workers", 4}}},
      {"reasoning", {{"model_id", "gpt-4o"}, {"temperature", 0.2}, {"max_new_tokens", 2048}, {"workers", 4}}},
      {"datasets",
       {{"split_ratios", {0.8, 0.1, 0.1}}, {"seed", 0}, {"imbalance_ratios", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}}}},
      {"train",
       {{"mode", "orpo"},
        {"lambda", 0.3},
        {"learning_rate", nullptr},
        {"batch_size", nullptr},
        {"epochs", nullptr},
        {"seed", 0},
        {"max_prompt_tokens", 96},
        {"max_response_tokens", 160},
        {"scorer", {{"context", 4}, {"embed", 8}, {"hidden", 16}, {"seed", 0}, {"init_scale", 0.1}}}}},
      {"sweep", {{"lambdas", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}}, {"epochs", 5}}},
      {"eval", {{"bootstrap_resamples", 10000}, {"seed", 0}, {"unparsed_as", "non_vulnerable"}}},
      {"judge", {{"model_id", "gpt-4o"}, {"temperature", 0.0}, {"max_new_tokens", 1024}, {"parse_retries", 1}}},
      {"serve",
       {{"host", "127.0.0.1"},
        {"port", 8080},
        {"tasks", nullptr},
        {"vote_log", "review/votes.jsonl"},
        {"annotators", json::array()},
        {"static_dir", nullptr}}}};
}

namespace detail {

inline bool compatible(const json& base, const json& v) {
  if (base.is_null() || v.is_null()) return true;
  if (base.is_number()) return v.is_number();
  return base.type() == v.type();
}

inline void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key: " + path);
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else if (!compatible(slot, value)) {
      throw ConfigError("config key " + path + " expects " + std::string(slot.type_name()) + ", got " +
                        std::string(value.type_name()));
    } else {
      slot = value;
    }
  }
}

}  // namespace detail

struct RunConfig {
  json doc = default_config();

  const json& at(const std::string& section) const { return doc.at(section); }
  std::filesystem::path work_dir() const { return doc["paths"]["work_dir"].get<std::string>(); }

  corpus::FilterConfig filter() const {
    corpus::FilterConfig f;
    const auto& c = doc["corpus"];
    f.max_tokens = c["max_tokens"].get<std::size_t>();
    f.test_path_markers = c["test_path_markers"].get<std::vector<std::string>>();
    f.test_name_prefixes = c["test_name_prefixes"].get<std::vector<std::string>>();
    f.validate();
    return f;
  }

  relabel::RelabelConfig relabel() const {
    const auto& c = doc["relabel"];
    relabel::RelabelConfig r;
    r.model_id = c["model_id"].get<std::string>();
    r.temperature = c["temperature"].get<double>();
    r.max_new_tokens = c["max_new_tokens"].get<int>();
    r.parse_retries = c["parse_retries"].get<int>();
    return r;
  }
  int tau() const { return doc["relabel"]["tau"].get<int>(); }

  reasoning::TeacherConfig teacher() const {
    const auto& c = doc["reasoning"];
    return {c["model_id"].get<std::string>(), c["temperature"].get<double>(), c["max_new_tokens"].get<int>()};
  }

  datasets::SplitRatios split_ratios() const { return doc["datasets"]["split_ratios"].get<datasets::SplitRatios>(); }
  std::uint64_t data_seed() const { return doc["datasets"]["seed"].get<std::uint64_t>(); }

  orpo::OrpoConfig train() const {
    const auto& c = doc["train"];
    auto o = orpo::OrpoConfig::defaults(orpo::parse_mode(c["mode"].get<std::string>()));
    o.lambda = c["lambda"].get<double>();
    if (!c["learning_rate"].is_null()) o.learning_rate = c["learning_rate"].get<double>();
    if (!c["batch_size"].is_null()) o.batch_size = c["batch_size"].get<std::size_t>();
    if (!c["epochs"].is_null()) o.max_epochs = c["epochs"].get<int>();
    o.seed = c["seed"].get<std::uint64_t>();
    o.validate();
    return o;
  }

  scoring::ReferenceScorerConfig scorer() const {
    const auto& c = doc["train"]["scorer"];
    scoring::ReferenceScorerConfig s;
    s.context = c.value("context", s.context);
    s.embed = c.value("embed", s.embed);
    s.hidden = c.value("hidden", s.hidden);
    s.seed = c.value("seed", s.seed);
    s.init_scale = c.value("init_scale", s.init_scale);
    return s;
  }

  eval::UnparsedPolicy unparsed_policy() const {
    const auto s = doc["eval"]["unparsed_as"].get<std::string>();
    if (s == "non_vulnerable") return eval::UnparsedPolicy::kAsNonVulnerable;
    if (s == "vulnerable") return eval::UnparsedPolicy::kAsVulnerable;
    throw InvalidArgument("eval.unparsed_as must be vulnerable or non_vulnerable");
  }

  eval::JudgeConfig judge() const {
    const auto& c = doc["judge"];
    eval::JudgeConfig j;
    j.model_id = c["model_id"].get<std::string>();
    j.temperature = c["temperature"].get<double>();
    j.max_new_tokens = c["max_new_tokens"].get<int>();
    j.parse_retries = c["parse_retries"].get<int>();
    return j;
  }

  // Converts every section once so bad values surface before any stage runs.
  void validate() const {
    try {
      if (doc["version"].get<int>() != kConfigVersion) throw InvalidArgument("unsupported config version");
      filter();
      relabel();
      if (tau() < 1 || tau() > 4) throw InvalidArgument("relabel.tau must be in [1, 4]");
      split_ratios().validate();
      train();
      scorer();
      unparsed_policy();
      judge();
      const auto mode = doc["provider"]["mode"].get<std::string>();
      if (mode != "replay" && mode != "record" && mode != "live") {
        throw InvalidArgument("provider.mode must be replay, record or live");
      }
      for (const auto& k : doc["datasets"]["imbalance_ratios"]) {
        if (k.get<int>() < 1) throw InvalidArgument("imbalance ratios must be >= 1");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("invalid config: ") + e.what());
    }
  }
};

// "0.6" -> number, "sft" -> string, "[1,2]" -> array.
inline json parse_override_value(const std::string& raw) {
  json v = json::parse(raw, nullptr, false);
  return v.is_discarded() ? json(raw) : v;
}

// Applies "section.key" = value with the same unknown-key rules as the file.
inline void apply_override(json& doc, const std::string& dotted, const std::string& raw) {
  json patch = parse_override_value(raw);
  auto parts = std::vector<std::string>{};
  std::size_t start = 0;
  for (std::size_t dot; (dot = dotted.find('.', start)) != std::string::npos; start = dot + 1) {
    parts.push_back(dotted.substr(start, dot - start));
  }
  parts.push_back(dotted.substr(start));
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("malformed override key: " + dotted);
    patch = json{{*it, patch}};
  }
  detail::merge_strict(doc, patch, "");
}

inline RunConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig cfg;
  if (path) {
    json file;
    try {
      file = json::parse(read_file(*path));
    } catch (const std::exception& e) {
      throw ConfigError("cannot read config " + path->string() + ": " + e.what());
    }
    detail::merge_strict(cfg.doc, file, "");
    // Relative provider paths in a file resolve against the file's directory.
    auto& prov = cfg.doc["provider"];
    for (const char* key : {"recordings", "cache_dir"}) {
      if (prov[key].is_string() && std::filesystem::path(prov[key].get<std::string>()).is_relative()) {
        prov[key] = (std::filesystem::absolute(*path).parent_path() / prov[key].get<std::string>()).string();
      }
    }
  }
  for (const auto& [k, v] : overrides) apply_override(cfg.doc, k, v);
  cfg.validate();
  return cfg;
}

// "0.1..1.0" (step 0.1), "0.1..1.0:0.3", or "0.1,0.5,0.9".
inline std::vector<double> parse_lambda_spec(const std::string& spec) {
  std::vector<double> out;
  const auto range = spec.find("..");
  try {
    if (range == std::string::npos) {
      std::size_t start = 0;
      for (std::size_t comma; start <= spec.size(); start = comma + 1) {
        comma = spec.find(',', start);
        if (comma == std::string::npos) comma = spec.size();
        out.push_back(std::stod(spec.substr(start, comma - start)));
      }
    } else {
      const double lo = std::stod(spec.substr(0, range));
      const auto colon = spec.find(':', range);
      const double hi = std::stod(spec.substr(range + 2, colon == std::string::npos ? std::string::npos : colon - range - 2));
      const double step = colon == std::string::npos ? 0.1 : std::stod(spec.substr(colon + 1));
      if (!(step > 0) || hi < lo) throw InvalidArgument("bad range");
      const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
      for (int i = 0; i <= n; ++i) out.push_back(std::round((lo + i * step) * 1e9) / 1e9);
    }
  } catch (const std::exception&) {
    throw ConfigError("cannot parse lambda spec '" + spec + "'");
  }
  for (double l : out) {
    if (l < 0) throw ConfigError("lambda values must be >= 0");
  }
  return out;
}

// ---------------------------------------------------------------------------
// LLM client
// ---------------------------------------------------------------------------

inline std::unique_ptr<llm::ChatClient> make_client(const RunConfig& cfg) {
  const auto& p = cfg.at("provider");
  const auto mode = p["mode"].get<std::string>();
  std::shared_ptr<llm::ChatProvider> provider;
  const auto recordings = p["recordings"].is_null() ? std::optional<std::string>{} : p["recordings"].get<std::string>();
  if (mode == "replay") {
    if (!recordings) throw ConfigError("provider.recordings is required in replay mode");
    if (!std::filesystem::exists(*recordings)) throw ConfigError("recordings file not found: " + *recordings);
    provider = std::make_shared<llm::ReplayProvider>(*recordings);
  } else {
    llm::HttpProviderConfig http;
    http.base_url = p["base_url"].get<std::string>();
    http.api_key_env = p["api_key_env"].get<std::string>();
    provider = std::make_shared<llm::OpenAiCompatibleProvider>(http);
    if (mode == "record") {
      if (!recordings) throw ConfigError("provider.recordings is required in record mode");
      provider = std::make_shared<llm::RecordingProvider>(provider, *recordings);
    }
  }
  llm::RetryPolicy policy;
  policy.max_attempts = p["max_attempts"].get<int>();
  auto client = std::make_unique<llm::ChatClient>(provider, policy, p["max_in_flight"].get<std::size_t>());
  if (!p["cache_dir"].is_null()) {
    client->set_cache(std::make_shared<llm::ResponseCache>(p["cache_dir"].get<std::string>()));
  }
  return client;
}

// ---------------------------------------------------------------------------
// Stage directories
// ---------------------------------------------------------------------------

struct StageInput {
  std::string role;
  std::string digest;  // manifest digest, or sha256 of a raw file
};

struct StageResult {
  std::string stage;
  std::filesystem::path dir;
  datasets::DatasetManifest manifest;
  json stats;
  bool reused = false;
};

inline void to_json(json& j, const StageResult& r) {
  j = json{{"stage", r.stage}, {"dir", r.dir.string()}, {"manifest_digest", r.manifest.digest()},
           {"reused", r.reused}, {"stats", r.stats}};
}

// Directory name hashes the stage, the full config and the inputs, so the
// same request always lands in the same place and anything else gets a new one.
// The run config as recorded in manifests: everything except where the run
// lives and how model calls travel.
inline json recorded_config(const RunConfig& cfg) {
  json out = cfg.doc;
  for (const char* k : {"paths", "provider", "serve"}) out.erase(k);
  return out;
}

inline std::filesystem::path stage_dir(const RunConfig& cfg, const std::string& stage,
                                       const std::vector<StageInput>& inputs) {
  json in = json::array();
  for (const auto& i : inputs) in.push_back({{"role", i.role}, {"digest", i.digest}});
  const std::string key = json_digest(json{{"stage", stage}, {"config", recorded_config(cfg)}, {"inputs", in},
                                           {"code_version", kCodeVersion}});
  std::string name = stage;
  std::replace(name.begin(), name.end(), ' ', '-');
  return cfg.work_dir() / name / key.substr(0, 16);
}

inline StageResult seal_stage(const RunConfig& cfg, const std::string& stage, const std::vector<StageInput>& inputs,
                              const std::map<std::string, std::string>& files, const json& stats) {
  StageResult r;
  r.stage = stage;
  r.stats = stats;
  r.dir = stage_dir(cfg, stage, inputs);
  datasets::DatasetManifest m;
  m.name = stage;
  m.split_ratios = cfg.split_ratios();
  m.seed = cfg.data_seed();
  m.template_hash = reasoning::template_hash();
  if (!inputs.empty()) m.parent_manifest = inputs.front().digest;
  json in = json::array();
  for (const auto& i : inputs) in.push_back({{"role", i.role}, {"digest", i.digest}});
  m.parameters = json{{"stage", stage}, {"code_version", kCodeVersion}, {"config", recorded_config(cfg)},
                      {"inputs", in}, {"stats", stats}};
  for (const auto& [name, bytes] : files) {
    m.files[name] = sha256_hex(bytes);
    if (name.ends_with(".jsonl")) {
      std::vector<json> rows;
      std::istringstream lines(bytes);
      for (std::string line; std::getline(lines, line);) {
        if (!trim(line).empty()) rows.push_back(json::parse(line));
      }
      m.counts[name] = datasets::detail::count_rows(rows);
    }
  }
  const std::string manifest_bytes = json(m).dump(2) + "\n";
  const auto manifest_path = r.dir / datasets::kManifestFile;
  if (std::filesystem::exists(manifest_path) && read_file(manifest_path) == manifest_bytes &&
      datasets::verify_dataset(r.dir).ok) {
    r.manifest = m;
    r.reused = true;
    return r;
  }
  std::filesystem::create_directories(r.dir);
  for (const auto& [name, bytes] : files) write_file_atomic(r.dir / name, bytes);
  write_file_atomic(manifest_path, manifest_bytes);
  r.manifest = m;
  return r;
}

// Verifies an input stage directory before anything reads from it.
inline datasets::DatasetManifest open_stage(const std::string& stage, const std::filesystem::path& dir) {
  const auto rep = datasets::verify_dataset(dir);
  if (!rep.ok) {
    std::string msg = "input " + dir.string() + " failed verification";
    for (const auto& p : rep.problems) msg += "; " + p;
    throw StageError(stage, msg);
  }
  return datasets::load_manifest(dir);
}

template <class T>
std::vector<T> rows_as(const std::filesystem::path& file) {
  std::vector<T> out;
  for (const auto& r : read_jsonl(file)) out.push_back(r.get<T>());
  return out;
}

template <class T>
std::string jsonl_of(const std::vector<T>& items) {
  std::vector<json> rows;
  rows.reserve(items.size());
  for (const auto& i : items) rows.push_back(json(i));
  return to_jsonl(rows);
}

inline std::vector<LabeledSample> optional_rows(const std::filesystem::path& file) {
  return std::filesystem::exists(file) ? rows_as<LabeledSample>(file) : std::vector<LabeledSample>{};
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline StageResult corpus_extract(const RunConfig& cfg, const std::filesystem::path& raw_commits,
                                  const DiagnosticSink& diag = null_sink()) {
  const std::string stage = "corpus extract";
  if (!std::filesystem::exists(raw_commits)) throw StageError(stage, "input not found: " + raw_commits.string());
  const std::string bytes = read_file(raw_commits);
  std::vector<corpus::RawCommitRecord> records;
  for (const auto& row : read_jsonl(raw_commits)) {
    auto r = row.get<corpus::RawCommitRecord>();
    r.validate();
    records.push_back(std::move(r));
  }
  std::size_t diagnostics = 0;
  const auto res = corpus::build_corpus(records, corpus::ExtractorRegistry::with_defaults(),
                                        corpus::ReferenceTokenCounter{}, cfg.filter(),
                                        [&](std::string_view m) {
                                          ++diagnostics;
                                          diag(m);
                                        });
  const json stats{{"records", res.records},         {"pairs", res.pairs.size()},
                   {"pool", res.pool.size()},        {"dropped_test", res.dropped_test},
                   {"dropped_length", res.dropped_length}, {"dropped_duplicate", res.dropped_duplicate},
                   {"diagnostics", diagnostics}};
  return seal_stage(cfg, stage, {{"raw_commits", sha256_hex(bytes)}},
                    {{"pairs.jsonl", jsonl_of(res.pairs)}, {"pool.jsonl", jsonl_of(res.pool)}}, stats);
}

inline StageResult relabel_score(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                                 llm::ChatClient& client) {
  const std::string stage = "relabel score";
  const auto parent = open_stage(stage, corpus_dir);
  const auto pairs = rows_as<corpus::FunctionPair>(corpus_dir / "pairs.jsonl");
  const auto res = relabel::score_pairs(pairs, client, cfg.relabel(), cfg.at("relabel")["workers"].get<std::size_t>());
  json histogram = json::object();
  for (int s = 0; s <= 4; ++s) histogram[std::to_string(s)] = 0;
  for (const auto& s : res.scores) histogram[std::to_string(s.score)] = histogram[std::to_string(s.score)].get<int>() + 1;
  json selected = json::object();
  for (int tau = 1; tau <= 4; ++tau) selected[std::to_string(tau)] = relabel::select_vulnerable(res.scores, tau).size();
  const json stats{{"scored", res.scores.size()}, {"quarantined", res.quarantined.size()},
                   {"histogram", histogram}, {"selected_at_tau", selected}};
  return seal_stage(cfg, stage, {{"corpus", parent.digest()}},
                    {{"scores.jsonl", jsonl_of(res.scores)}, {"quarantined.jsonl", jsonl_of(res.quarantined)}},
                    stats);
}

inline StageResult dataset_build(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                                 const std::filesystem::path& relabel_dir) {
  const std::string stage = "dataset build";
  const auto corpus_m = open_stage(stage, corpus_dir);
  const auto relabel_m = open_stage(stage, relabel_dir);
  const auto pairs = rows_as<corpus::FunctionPair>(corpus_dir / "pairs.jsonl");
  const auto pool_fns = rows_as<corpus::PoolFunction>(corpus_dir / "pool.jsonl");
  const auto scores = rows_as<relabel::RelabelScore>(relabel_dir / "scores.jsonl");
  const auto chosen = relabel::select_vulnerable(scores, cfg.tau());

  std::vector<LabeledSample> vulnerable;
  datasets::DigestSet excluded;
  for (const auto& p : pairs) {
    excluded.insert(corpus::content_digest(p.post_function));
    if (chosen.count(p.content_digest)) {
      vulnerable.push_back(vulnerable_sample(p));
    } else {
      excluded.insert(p.content_digest);
    }
  }
  std::vector<LabeledSample> pool;
  for (const auto& f : pool_fns) pool.push_back(non_vulnerable_sample(f));
  std::vector<LabeledSample> balanced;
  try {
    balanced = datasets::assemble_balanced(vulnerable, pool, cfg.data_seed(), excluded);
  } catch (const datasets::InsufficientNegatives& e) {
    throw StageError(stage, e.what());
  }
  const auto used = datasets::digests_of(balanced);
  std::vector<LabeledSample> rest;
  for (const auto& s : pool) {
    if (!used.count(s.digest) && !excluded.count(s.digest)) rest.push_back(s);
  }
  const json stats{{"tau", cfg.tau()}, {"vulnerable", vulnerable.size()}, {"balanced", balanced.size()},
                   {"pool_remaining", rest.size()}};
  return seal_stage(cfg, stage, {{"corpus", corpus_m.digest()}, {"relabel", relabel_m.digest()}},
                    {{"balanced.jsonl", jsonl_of(balanced)}, {"pool.jsonl", jsonl_of(rest)}}, stats);
}

// Input is a build directory or a plain JSONL file of labeled samples.
inline StageResult dataset_split(const RunConfig& cfg, const std::filesystem::path& input) {
  const std::string stage = "dataset split";
  std::vector<LabeledSample> samples;
  std::vector<LabeledSample> pool;
  StageInput in;
  if (std::filesystem::is_directory(input)) {
    in = {"build", open_stage(stage, input).digest()};
    samples = rows_as<LabeledSample>(input / "balanced.jsonl");
    pool = optional_rows(input / "pool.jsonl");
  } else if (std::filesystem::exists(input)) {
    in = {"samples", sha256_hex(read_file(input))};
    samples = rows_as<LabeledSample>(input);
  } else {
    throw StageError(stage, "input not found: " + input.string());
  }
  datasets::Splits s;
  try {
    s = datasets::split(samples, cfg.split_ratios(), cfg.data_seed());
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
  std::map<std::string, std::string> files{{"train.jsonl", jsonl_of(s.train)},
                                           {"val.jsonl", jsonl_of(s.val)},
                                           {"test.jsonl", jsonl_of(s.test)}};
  if (!pool.empty()) files["pool.jsonl"] = jsonl_of(pool);
  const json stats{{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}};
  return seal_stage(cfg, stage, {in}, files, stats);
}

inline StageResult reason_generate(const RunConfig& cfg, const std::filesystem::path& split_dir,
                                   llm::ChatClient& teacher, const DiagnosticSink& diag = null_sink()) {
  const std::string stage = "reason generate";
  const auto parent = open_stage(stage, split_dir);
  std::map<std::string, std::string> files;
  std::vector<reasoning::Rejection> rejected;
  json stats = json::object();
  for (const char* name : {"train", "val", "test"}) {
    const auto input = rows_as<LabeledSample>(split_dir / (std::string(name) + ".jsonl"));
    const auto res = reasoning::generate_preference_samples(
        input, teacher, cfg.teacher(), cfg.at("reasoning")["workers"].get<std::size_t>(), diag);
    std::vector<json> rows;
    for (const auto& p : res.samples) rows.push_back(reasoning::to_row(p));
    files[std::string(name) + ".jsonl"] = to_jsonl(rows);
    rejected.insert(rejected.end(), res.rejected.begin(), res.rejected.end());
    stats[name] = res.stats;
  }
  files["rejections.jsonl"] = jsonl_of(rejected);
  return seal_stage(cfg, stage, {{"split", parent.digest()}}, files, stats);
}

inline StageResult dataset_imbalance(const RunConfig& cfg, const std::filesystem::path& split_dir) {
  const std::string stage = "dataset imbalance";
  const auto parent = open_stage(stage, split_dir);
  const auto test = rows_as<LabeledSample>(split_dir / "test.jsonl");
  const auto pool = optional_rows(split_dir / "pool.jsonl");
  datasets::DigestSet train_digests = datasets::digests_of(rows_as<LabeledSample>(split_dir / "train.jsonl"));
  for (const auto& d : datasets::digests_of(rows_as<LabeledSample>(split_dir / "val.jsonl"))) train_digests.insert(d);
  std::map<std::string, std::string> files;
  json stats = json::object();
  for (const auto& k : cfg.at("datasets")["imbalance_ratios"]) {
    datasets::ImbalanceSpec spec;
    spec.ratio_k = k.get<int>();
    spec.exclusion_set = train_digests;
    try {
      const auto set = datasets::build_imbalance_set(test, spec, pool, cfg.data_seed());
      const std::string name = "imbalance_k" + std::to_string(spec.ratio_k);
      files[name + ".jsonl"] = jsonl_of(set);
      stats[name] = {{"vulnerable", datasets::with_label(set, Label::kVulnerable).size()},
                     {"non_vulnerable", datasets::with_label(set, Label::kNonVulnerable).size()}};
    } catch (const Error& e) {
      throw StageError(stage, e.what());
    }
  }
  return seal_stage(cfg, stage, {{"split", parent.digest()}}, files, stats);
}

// External positives come either as raw commit records or as labeled samples.
inline StageResult dataset_external(const RunConfig& cfg, const std::filesystem::path& split_dir,
                                    const std::filesystem::path& external) {
  const std::string stage = "dataset external";
  const auto parent = open_stage(stage, split_dir);
  if (!std::filesystem::exists(external)) throw StageError(stage, "input not found: " + external.string());
  std::vector<LabeledSample> positives;
  const auto raw = read_jsonl(external);
  if (!raw.empty() && raw.front().contains("commit_hash")) {
    std::vector<corpus::RawCommitRecord> records;
    for (const auto& r : raw) records.push_back(r.get<corpus::RawCommitRecord>());
    const auto res = corpus::build_corpus(records, corpus::ExtractorRegistry::with_defaults(),
                                          corpus::ReferenceTokenCounter{}, cfg.filter(), null_sink());
    for (const auto& p : res.pairs) positives.push_back(vulnerable_sample(p, SampleSource::kExternal));
  } else {
    for (const auto& r : raw) positives.push_back(r.get<LabeledSample>());
  }
  const auto train = rows_as<LabeledSample>(split_dir / "train.jsonl");
  const auto val = rows_as<LabeledSample>(split_dir / "val.jsonl");
  const auto test = rows_as<LabeledSample>(split_dir / "test.jsonl");
  datasets::DigestSet main;
  for (const auto* part : {&train, &val, &test}) {
    for (const auto& s : *part) main.insert(s.digest);
  }
  for (const auto& s : optional_rows(split_dir / "pool.jsonl")) main.insert(s.digest);
  const auto filtered = datasets::dedupe_external(positives, main, datasets::cve_ids_of(train));
  std::vector<LabeledSample> merged;
  try {
    merged = datasets::merge_external(filtered.kept, test, cfg.data_seed());
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
  std::vector<json> dropped;
  for (const auto& d : filtered.dropped) dropped.push_back({{"digest", d.digest}, {"reason", d.reason}});
  const json stats{{"external_positives", positives.size()}, {"kept", filtered.kept.size()},
                   {"dropped", filtered.dropped.size()}, {"samples", merged.size()}};
  return seal_stage(cfg, stage, {{"split", parent.digest()}, {"external", sha256_hex(read_file(external))}},
                    {{"external.jsonl", jsonl_of(merged)}, {"dropped.jsonl", to_jsonl(dropped)}}, stats);
}

// ---------------------------------------------------------------------------
// Training, sweep, evaluation, judging
// ---------------------------------------------------------------------------

inline orpo::Batch load_preferences(const RunConfig& cfg, const std::filesystem::path& file) {
  const auto& t = cfg.at("train");
  orpo::Batch out;
  for (const auto& row : read_jsonl(file)) {
    out.push_back(orpo::encode_example(reasoning::from_row(row), t["max_prompt_tokens"].get<std::size_t>(),
                                       t["max_response_tokens"].get<std::size_t>()));
  }
  return out;
}

struct TrainedModel {
  std::unique_ptr<scoring::ReferenceScorer> scorer;
  std::optional<orpo::ClassifierHead> head;
};

inline TrainedModel load_model(const std::filesystem::path& train_dir) {
  const auto rows = read_jsonl(train_dir / "model.jsonl");
  if (rows.size() != 1) throw Error("model.jsonl must hold exactly one row");
  const auto& m = rows.front();
  TrainedModel out;
  out.scorer = std::make_unique<scoring::ReferenceScorer>(m.at("scorer_config").get<scoring::ReferenceScorerConfig>());
  const auto params = m.at("parameters").get<std::vector<double>>();
  auto p = out.scorer->parameters();
  if (params.size() != p.size()) throw Error("parameter count does not match the scorer config");
  std::copy(params.begin(), params.end(), p.begin());
  if (m.contains("head")) {
    orpo::ClassifierHead h;
    h.w = m["head"].at("w").get<std::vector<double>>();
    h.b = m["head"].at("b").get<double>();
    out.head = std::move(h);
  }
  return out;
}

inline StageResult train(const RunConfig& cfg, const std::filesystem::path& reason_dir) {
  const std::string stage = "train";
  const auto parent = open_stage(stage, reason_dir);
  const auto tr = load_preferences(cfg, reason_dir / "train.jsonl");
  const auto va = load_preferences(cfg, reason_dir / "val.jsonl");
  if (tr.empty()) throw StageError(stage, "no training samples");
  const auto ocfg = cfg.train();
  scoring::ReferenceScorer scorer(cfg.scorer());
  std::optional<orpo::ClassifierHead> head;
  if (ocfg.mode == orpo::TrainMode::kCls) head.emplace(scorer.hidden_size());
  orpo::CheckpointStore store;
  orpo::TrainHistory h;
  try {
    h = orpo::train(scorer, tr, va, ocfg, &store, head ? &*head : nullptr);
  } catch (const orpo::NonFiniteLoss& e) {
    throw StageError(stage, e.what());
  }
  store.restore(h.best().checkpoint, scorer, head ? &*head : nullptr);
  std::vector<json> epochs;
  for (const auto& e : h.epochs) {
    json row = e;
    row.erase("wall_seconds");
    epochs.push_back(row);
  }
  json model{{"scorer", scorer.name()},
             {"scorer_config", scorer.config()},
             {"mode", ocfg.mode},
             {"epoch", h.best_epoch},
             {"checkpoint", h.best().checkpoint},
             {"parameters", std::vector<double>(scorer.parameters().begin(), scorer.parameters().end())}};
  if (head) model["head"] = {{"w", head->w}, {"b", head->b}};
  const json stats{{"mode", ocfg.mode},
                   {"best_epoch", h.best_epoch},
                   {"steps", h.steps},
                   {"best_val", h.best().val},
                   {"trajectory_digest", h.trajectory_digest()}};
  return seal_stage(cfg, stage, {{"preferences", parent.digest()}},
                    {{"history.jsonl", to_jsonl(epochs)}, {"model.jsonl", to_jsonl({model})}}, stats);
}

inline StageResult sweep(const RunConfig& cfg, const std::filesystem::path& reason_dir) {
  const std::string stage = "sweep";
  const auto parent = open_stage(stage, reason_dir);
  const auto tr = load_preferences(cfg, reason_dir / "train.jsonl");
  const auto va = load_preferences(cfg, reason_dir / "val.jsonl");
  const auto te = load_preferences(cfg, reason_dir / "test.jsonl");
  const auto lambdas = cfg.at("sweep")["lambdas"].get<std::vector<double>>();
  const int epochs = cfg.at("sweep")["epochs"].get<int>();
  auto base = cfg.train();
  if (base.mode != orpo::TrainMode::kOrpo) throw StageError(stage, "sweep runs in orpo mode");
  const auto sc = cfg.scorer();
  std::vector<orpo::SweepRow> rows;
  try {
    rows = orpo::lambda_epoch_sweep([&] { return std::make_unique<scoring::ReferenceScorer>(sc); }, tr, va, te,
                                    lambdas, epochs, base);
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
  const json stats{{"lambdas", lambdas}, {"epochs", epochs}, {"rows", rows.size()}};
  return seal_stage(cfg, stage, {{"preferences", parent.digest()}},
                    {{"sweep.csv", orpo::sweep_csv(rows)}, {"sweep.jsonl", jsonl_of(rows)}}, stats);
}

inline StageResult evaluate(const RunConfig& cfg, const std::filesystem::path& train_dir,
                            const std::filesystem::path& reason_dir) {
  const std::string stage = "eval";
  const auto model_m = open_stage(stage, train_dir);
  const auto data_m = open_stage(stage, reason_dir);
  const auto model = load_model(train_dir);
  const auto& t = cfg.at("train");
  const auto max_prompt = t["max_prompt_tokens"].get<std::size_t>();
  const auto max_response = t["max_response_tokens"].get<std::size_t>();

  std::vector<json> predictions;
  std::vector<eval::ScoredSample> scored;
  std::map<std::string, eval::Predicted> by_digest;
  std::vector<LabeledSample> test_truth;
  for (const auto& row : read_jsonl(reason_dir / "test.jsonl")) {
    const auto p = reasoning::from_row(row);
    const auto e = orpo::encode_example(p, max_prompt, max_response);
    const Label label = orpo::predict(*model.scorer, e, model.head ? &*model.head : nullptr);
    const auto predicted = eval::from_label(label);
    const std::string text = model.head ? reasoning::answer_line(label)
                                        : (label == p.true_label ? p.valid_text() : p.flawed_text());
    predictions.push_back({{"digest", p.digest},
                           {"language", p.language},
                           {"true_label", p.true_label},
                           {"predicted", label},
                           {"cve_id", p.cve_id},
                           {"function_text", reasoning::function_from_input(p.input_x)},
                           {"reasoning", text}});
    scored.push_back({p.digest, p.language, p.true_label, predicted});
    by_digest[p.digest] = predicted;
    LabeledSample s;
    s.digest = p.digest;
    s.language = p.language;
    s.label = p.true_label;
    if (!p.cve_id.empty()) s.cve_id = p.cve_id;
    test_truth.push_back(s);
  }
  if (scored.empty()) throw StageError(stage, "test split is empty");
  auto report = eval::evaluate(scored, cfg.unparsed_policy());
  std::vector<bool> outcomes;
  for (const auto& s : scored) {
    if (s.truth == Label::kVulnerable) outcomes.push_back(s.predicted == eval::Predicted::kVulnerable);
  }
  const auto& e = cfg.at("eval");
  if (!outcomes.empty()) {
    report.recall_ci = eval::bootstrap_recall(outcomes, e["bootstrap_resamples"].get<std::size_t>(),
                                              e["seed"].get<std::uint64_t>());
  }
  std::set<std::string> train_cves;
  for (const auto& row : read_jsonl(reason_dir / "train.jsonl")) {
    const auto c = row.value("cve_id", "");
    if (!c.empty()) train_cves.insert(c);
  }
  try {
    report.id_ood = eval::id_ood_report(by_digest, datasets::partition_id_ood(test_truth, train_cves));
  } catch (const Error&) {
    // one side of the partition is empty on small test sets
  }
  const eval::TableRow row{model.scorer->name(), t["mode"].get<std::string>(), report.per_language};
  const json stats{{"report", report}, {"table", eval::render_table({row})}};
  return seal_stage(cfg, stage, {{"model", model_m.digest()}, {"data", data_m.digest()}},
                    {{"predictions.jsonl", to_jsonl(predictions)}, {"report.json", json(report).dump(2) + "\n"}},
                    stats);
}

// Input is an eval directory or a JSONL file of rows with digest, language,
// function_text and reasoning.
inline StageResult judge(const RunConfig& cfg, const std::filesystem::path& input, llm::ChatClient& client) {
  const std::string stage = "judge";
  StageInput in;
  std::filesystem::path rows_file = input;
  if (std::filesystem::is_directory(input)) {
    in = {"eval", open_stage(stage, input).digest()};
    rows_file = input / "predictions.jsonl";
  } else if (std::filesystem::exists(input)) {
    in = {"samples", sha256_hex(read_file(input))};
  } else {
    throw StageError(stage, "input not found: " + input.string());
  }
  const auto jcfg = cfg.judge();
  std::vector<eval::JudgeVerdict> verdicts;
  std::vector<json> failures;
  for (const auto& row : read_jsonl(rows_file)) {
    const auto ref = row.at("digest").get<std::string>();
    try {
      verdicts.push_back(eval::judge_score(ref, row.at("reasoning").get<std::string>(),
                                           row.at("function_text").get<std::string>(),
                                           row.at("language").get<Language>(), client, jcfg));
    } catch (const eval::UnparsableVerdict& e) {
      failures.push_back({{"digest", ref}, {"error", e.what()}});
    }
  }
  json stats{{"judged", verdicts.size()}, {"unparsable", failures.size()}};
  if (!verdicts.empty()) stats["summary"] = eval::summarize_verdicts(verdicts);
  return seal_stage(cfg, stage, {in},
                    {{"verdicts.jsonl", jsonl_of(verdicts)}, {"unparsable.jsonl", to_jsonl(failures)}}, stats);
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

struct TreeReport {
  bool ok = true;
  std::map<std::string, datasets::VerifyReport> dirs;
};

inline void to_json(json& j, const TreeReport& r) {
  j = json{{"ok", r.ok}, {"dirs", json::object()}};
  for (const auto& [d, rep] : r.dirs) j["dirs"][d] = rep;
}

// Re-validates every manifest-sealed directory under root and, when root holds
// a whole run, that every input manifest is present too.
inline TreeReport verify_tree(const std::filesystem::path& root) {
  TreeReport out;
  if (!std::filesystem::exists(root)) {
    out.ok = false;
    out.dirs[root.string()] = {false, {"not found"}, ""};
    return out;
  }
  std::vector<std::filesystem::path> dirs;
  const bool single = std::filesystem::exists(root / datasets::kManifestFile);
  if (single) dirs.push_back(root);
  if (std::filesystem::is_directory(root)) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() == datasets::kManifestFile && e.path().parent_path() != root) {
        dirs.push_back(e.path().parent_path());
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::set<std::string> known;
  std::map<std::string, std::vector<std::string>> parents;
  for (const auto& d : dirs) {
    auto rep = datasets::verify_dataset(d);
    if (!rep.digest.empty()) {
      known.insert(rep.digest);
      const auto m = datasets::load_manifest(d);
      for (const auto& in : m.parameters.value("inputs", json::array())) {
        const auto role = in.value("role", "");
        if (role != "raw_commits" && role != "samples" && role != "external") {
          parents[d.string()].push_back(in.value("digest", ""));
        }
      }
    }
    out.dirs[d.string()] = rep;
  }
  for (auto& [d, rep] : out.dirs) {
    // A single stage directory has no lineage to check.
    for (const auto& p : single ? std::vector<std::string>{} : parents[d]) {
      if (!known.count(p)) rep.problems.push_back("input manifest " + p + " not found under " + root.string());
    }
    rep.ok = rep.problems.empty();
    out.ok = out.ok && rep.ok;
  }
  if (dirs.empty()) {
    out.ok = false;
    out.dirs[root.string()] = {false, {"no manifests found"}, ""};
  }
  return out;
}

}  // namespace vulnpref::pipeline

#endif  // VULNPREF_PIPELINE_HPP
