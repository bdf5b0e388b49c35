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

// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures.

#include <chrono>
#include <cmath>
#include <iostream>

#include "pipeline_support.hpp"
#include "vulnpref/review_service.hpp"

namespace vp = vulnpref;
using vp::json;
using vp::testing::fixture;
using vp::testing::TempDir;

namespace {

// Reference values, computed independently at 30 digits.
constexpr double kF1Oracle = 67.6460856;        // P 51.11, R 100
constexpr double kRecall606of712 = 85.1123596;
constexpr double kRecall167of194 = 86.0824742;
constexpr double kOrOracle = 0.3202997852375365;  // log-probs -0.5 / -1.0

class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
      failures_.push_back(what + ": got " + std::to_string(got) + ", want " + std::to_string(want) + " +/- " +
                          std::to_string(tol));
    }
  }
  const std::vector<std::string>& failures() const { return failures_; }

 private:
  std::vector<std::string> failures_;
};

using Body = void (*)(Check&);

int run(const std::string& name, double limit_seconds, Body body) {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(secs < limit_seconds, "runtime " + std::to_string(secs) + "s over " + std::to_string(limit_seconds) + "s");
  const bool ok = c.failures().empty();
  std::cout << (ok ? "PASS " : "FAIL ") << name << " (" << std::fixed << std::setprecision(2) << secs << "s)";
  for (const auto& f : c.failures()) std::cout << "\n     " << f;
  std::cout << std::endl;
  return ok ? 0 : 1;
}

void metric_reproduction(Check& c) {
  namespace ev = vp::eval;
  c.near(ev::f1_from(51.11, 100.0), kF1Oracle, 1e-6, "F1 oracle");
  c.near(vp::round2(ev::f1_from(51.11, 100.0)), 67.65, 0.01, "F1 rounded");
  ev::ConfusionCounts a, b;
  a.tp = 606;
  a.fn = 106;
  b.tp = 167;
  b.fn = 27;
  const double ra = ev::compute_prf(a).recall;
  const double rb = ev::compute_prf(b).recall;
  c.near(ra, kRecall606of712, 1e-6, "recall 606/712");
  c.near(vp::round2(ra), 85.11, 0.01, "recall 606/712 rounded");
  c.near(rb - ra, kRecall167of194 - kRecall606of712, 1e-6, "recall delta");
  c.near(vp::round2(rb - ra), 0.97, 0.01, "recall delta rounded");
}

void bootstrap(Check& c) {
  namespace ev = vp::eval;
  const auto strong = ev::bootstrap_recall(ev::outcomes(50, 53), 10000, 1);
  c.expect(vp::round2(strong.point) == 94.34, "50/53 point recall " + std::to_string(strong.point));
  c.near(strong.half_width, 5.7, 1.0, "50/53 half-width");
  const auto weak = ev::bootstrap_recall(ev::outcomes(32, 53), 10000, 1);
  c.expect(vp::round2(weak.point) == 60.38, "32/53 point recall " + std::to_string(weak.point));
  c.near(weak.half_width, 13.6, 2.0, "32/53 half-width");
  c.expect(strong.n_resamples == 10000, "resample count");
}

void orpo_math(Check& c) {
  namespace o = vp::orpo;
  vp::scoring::ReferenceScorerConfig sc;
  sc.seed = 7;
  vp::scoring::ReferenceScorer s(sc);
  auto batch = o::synthetic_preferences(4, 3, 6);
  for (auto& e : batch) {
    e.y_pos.resize(6);
    e.y_neg.resize(6);
  }
  const auto l0 = o::loss_orpo(s, batch, 0.0);
  c.near(l0.l_total, l0.l_sft, 1e-9, "lambda 0 collapse");
  c.near(l0.l_total, o::loss_sft(s, batch), 1e-9, "lambda 0 equals sft loss");

  auto equal = batch;
  for (auto& e : equal) e.y_neg = e.y_pos;
  c.near(o::loss_or(s, equal), std::log(2.0), 1e-9, "equal odds gives ln 2");
  c.near(o::odds_ratio_term(-0.5, -1.0), kOrOracle, 1e-6, "odds-ratio oracle");

  o::GradCheckOptions opt;
  opt.coordinates = 96;
  for (double lambda : {0.0, 0.3, 1.0}) {
    const auto r = o::grad_check(s, batch, o::TrainMode::kOrpo, lambda, nullptr, opt);
    c.expect(r.max_rel_error < 1e-4 && r.checked > 20,
             "orpo grad_check lambda " + std::to_string(lambda) + ": " + std::to_string(r.max_rel_error));
  }
  const auto rs = o::grad_check(s, batch, o::TrainMode::kSft, 0.0, nullptr, opt);
  c.expect(rs.max_rel_error < 1e-4 && rs.checked > 20, "sft grad_check " + std::to_string(rs.max_rel_error));
  o::ClassifierHead head(s.hidden_size());
  vp::Rng rng(5);
  for (auto& w : head.w) w = 0.5 * rng.normal();
  head.b = 0.1;
  opt.coordinates = 4000;
  const auto rc = o::grad_check(s, batch, o::TrainMode::kCls, 0.0, &head, opt);
  c.expect(rc.max_rel_error < 1e-4 && rc.checked > 20, "cls grad_check " + std::to_string(rc.max_rel_error));
}

void desk_learning(Check& c) {
  namespace o = vp::orpo;
  const auto tr = o::synthetic_preferences(64, 1);
  const auto va = o::synthetic_preferences(16, 2);
  const auto te = o::synthetic_preferences(16, 3);
  o::OrpoConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.seed = 11;
  vp::scoring::ReferenceScorerConfig sc;
  sc.seed = 7;
  vp::scoring::ReferenceScorer s(sc);
  const auto h = o::train(s, tr, va, cfg);
  c.expect(h.epochs.back().val.reward_accuracy >= 0.99,
           "reward accuracy " + std::to_string(h.epochs.back().val.reward_accuracy));
  int run = 0, longest = 0;
  for (std::size_t i = 1; i < h.epochs.size(); ++i) {
    run = h.epochs[i].val.l_total < h.epochs[i - 1].val.l_total ? run + 1 : 0;
    longest = std::max(longest, run);
  }
  c.expect(longest >= 2, "longest strictly decreasing val l_total run " + std::to_string(longest));

  const std::vector<double> lambdas = vp::pipeline::parse_lambda_spec("0.1..1.0");
  const int epochs = 5;
  const auto rows = o::lambda_epoch_sweep([&] { return std::make_unique<vp::scoring::ReferenceScorer>(sc); }, tr,
                                          va, te, lambdas, epochs, cfg);
  const auto csv = o::sweep_csv(rows);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  c.expect(line == "lambda,epoch,val_loss,reward_acc,test_f1", "csv header " + line);
  std::set<std::pair<std::string, std::string>> cells;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    cells.emplace(line.substr(0, a), line.substr(a + 1, b - a - 1));
    c.expect(std::count(line.begin(), line.end(), ',') == 4, "csv row width: " + line);
  }
  c.expect(n == lambdas.size() * epochs && cells.size() == n, "csv grid has " + std::to_string(n) + " rows");
}

std::vector<vp::LabeledSample> synthetic_samples(const std::string& tag, int per_language, vp::Label label) {
  std::vector<vp::LabeledSample> out;
  for (vp::Language lang : vp::kAllLanguages) {
    for (int i = 0; i < per_language; ++i) {
      vp::LabeledSample s;
      s.function_text = tag + " " + std::string(vp::to_string(lang)) + " " + std::to_string(i);
      s.digest = vp::md5_hex(s.function_text);
      s.language = lang;
      s.label = label;
      if (label == vp::Label::kVulnerable) s.cve_id = "CVE-" + tag + "-" + std::to_string(out.size());
      out.push_back(s);
    }
  }
  return out;
}

void dataset_properties(Check& c) {
  namespace ds = vp::datasets;
  // Uneven language sizes so apportionment has remainders.
  std::vector<vp::LabeledSample> all;
  for (int i = 0; i < 5; ++i) {
    auto v = synthetic_samples("v" + std::to_string(i), 37 + 11 * i, vp::Label::kVulnerable);
    auto n = synthetic_samples("n" + std::to_string(i), 37 + 11 * i, vp::Label::kNonVulnerable);
    for (auto* part : {&v, &n}) {
      for (auto& s : *part) {
        if (s.language == vp::kAllLanguages[static_cast<std::size_t>(i)]) all.push_back(s);
      }
    }
  }
  const auto sp = ds::split(all, {}, 3);
  const auto by_lang = [](const std::vector<vp::LabeledSample>& v) {
    std::map<vp::Language, double> m;
    for (const auto& s : v) m[s.language] += 1;
    return m;
  };
  const auto total = by_lang(all), tr = by_lang(sp.train), va = by_lang(sp.val), te = by_lang(sp.test);
  for (const auto& [lang, n] : total) {
    for (const auto& [got, ratio] : {std::pair{tr, 0.8}, std::pair{va, 0.1}, std::pair{te, 0.1}}) {
      const double have = got.count(lang) ? got.at(lang) : 0.0;
      c.expect(std::abs(have - ratio * n) <= 1.0, "split deviation for " + std::string(vp::to_string(lang)));
    }
  }
  const auto dtr = ds::digests_of(sp.train), dva = ds::digests_of(sp.val), dte = ds::digests_of(sp.test);
  c.expect(dtr.size() + dva.size() + dte.size() == all.size(), "split covers input");
  for (const auto& d : dte) c.expect(!dtr.count(d) && !dva.count(d), "test digest leaks");
  for (const auto& d : dva) c.expect(!dtr.count(d), "val digest leaks");

  // Imbalance: base test set of 55 V / 55 NV; the pool also holds training digests.
  const auto base_v = synthetic_samples("tv", 11, vp::Label::kVulnerable);
  const auto base_n = synthetic_samples("tn", 11, vp::Label::kNonVulnerable);
  std::vector<vp::LabeledSample> base(base_v.begin(), base_v.end());
  base.insert(base.end(), base_n.begin(), base_n.end());
  auto pool = synthetic_samples("pool", 140, vp::Label::kNonVulnerable);
  const auto train_like = synthetic_samples("train", 20, vp::Label::kNonVulnerable);
  pool.insert(pool.end(), train_like.begin(), train_like.end());
  ds::DigestSet train_digests = ds::digests_of(train_like);
  for (int k = 1; k <= 10; ++k) {
    const auto set = ds::build_imbalance_set(base, {k, std::nullopt, train_digests}, pool, 5);
    const auto nv = ds::with_label(set, vp::Label::kNonVulnerable).size();
    const auto v = ds::with_label(set, vp::Label::kVulnerable).size();
    c.expect(nv == static_cast<std::size_t>(k) * v, "|NV| != k|V| at k=" + std::to_string(k));
    for (const auto& s : set) c.expect(!train_digests.count(s.digest), "training digest in imbalance set");
    std::vector<vp::eval::ScoredSample> scored;
    for (const auto& s : set) scored.push_back({s.digest, s.language, s.label, vp::eval::Predicted::kVulnerable});
    const double f1 = vp::eval::compute_prf(vp::eval::count(scored)).f1;
    c.near(f1, 200.0 / (k + 2), 0.01, "all-positive F1 at k=" + std::to_string(k));
  }

  // 53 external positives against a test split with enough negatives.
  std::vector<vp::LabeledSample> external;
  for (const auto& s : synthetic_samples("ext", 11, vp::Label::kVulnerable)) {
    if (external.size() < 53) external.push_back(s);
  }
  const auto kept = ds::dedupe_external(external, ds::digests_of(all), ds::cve_ids_of(sp.train)).kept;
  const auto merged = ds::merge_external(kept, base, 9);
  c.expect(kept.size() == 53, "external kept " + std::to_string(kept.size()));
  c.expect(merged.size() == 106, "external merge gives " + std::to_string(merged.size()));
}

void pipeline_determinism(Check& c) {
  TempDir dir;
  const auto cfg = vp::testing::fixture_config(dir.path());
  const auto first_run = vp::testing::run_fixture_pipeline(cfg);
  const auto first = vp::testing::manifest_bytes(dir.path());
  std::filesystem::remove_all(dir.path());
  vp::testing::run_fixture_pipeline(cfg);
  const auto second = vp::testing::manifest_bytes(dir.path());
  c.expect(first.size() == first_run.stages.size(), "one manifest per stage");
  c.expect(first == second, "manifests differ between runs");

  const auto scores = vp::pipeline::rows_as<vp::relabel::RelabelScore>(first_run["relabel score"].dir / "scores.jsonl");
  for (int tau = 2; tau <= 4; ++tau) {
    const auto hi = vp::relabel::select_vulnerable(scores, tau);
    const auto lo = vp::relabel::select_vulnerable(scores, tau - 1);
    bool subset = true;
    for (const auto& d : hi) subset = subset && lo.count(d);
    c.expect(subset && hi.size() <= lo.size(), "selection not monotone at tau " + std::to_string(tau));
  }
}

void reasoning_contracts(Check& c) {
  namespace r = vp::reasoning;
  const std::string text = vp::read_file(fixture("reasoning_vulnerable.txt"));
  const auto parsed = r::parse_reasoning(text, vp::Label::kVulnerable);
  c.expect(parsed.sections.size() == 4, "fixture sections " + std::to_string(parsed.sections.size()));
  for (std::size_t i = 0; i < parsed.sections.size() && i < 4; ++i) {
    c.expect(parsed.sections[i].heading == r::vulnerable_headings()[i], "heading " + std::to_string(i + 1));
  }

  // Label swap over every preference sample generated from the fixture corpus.
  TempDir dir;
  const auto cfg = vp::testing::fixture_config(dir.path());
  auto client = vp::pipeline::make_client(cfg);
  namespace pl = vp::pipeline;
  const auto corpus = pl::corpus_extract(cfg, fixture("pipeline/raw_commits.jsonl"));
  const auto scores = pl::relabel_score(cfg, corpus.dir, *client);
  const auto split = pl::dataset_split(cfg, pl::dataset_build(cfg, corpus.dir, scores.dir).dir);
  const auto prefs = pl::reason_generate(cfg, split.dir, *client);
  std::size_t n = 0;
  for (const char* part : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    for (const auto& row : vp::read_jsonl(prefs.dir / part)) {
      const auto p = r::from_row(row);
      ++n;
      c.expect(p.valid_y.conclusion_label == p.true_label, "valid label mismatch " + p.digest);
      c.expect(p.flawed_y.conclusion_label == vp::opposite(p.true_label), "flawed label not swapped " + p.digest);
    }
  }
  c.expect(n == split.stats["train"].get<std::size_t>() + split.stats["val"].get<std::size_t>() +
                    split.stats["test"].get<std::size_t>(),
           "preference rows " + std::to_string(n));

  const auto kind_of = [&](const std::string& t) -> std::optional<r::StructureErrorKind> {
    try {
      r::parse_reasoning(t, vp::Label::kVulnerable);
    } catch (const r::StructureError& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  std::string missing = text;
  const auto a = missing.find("3. **Potential Impact**");
  missing.erase(a, missing.find("4. **Contextual Relevance**") - a);
  std::string swapped = vp::replace_all(text, "**Potential Impact**", "**TMP**");
  swapped = vp::replace_all(swapped, "**Mechanism of the Vulnerability**", "**Potential Impact**");
  swapped = vp::replace_all(swapped, "**TMP**", "**Mechanism of the Vulnerability**");
  const std::vector<std::pair<std::string, r::StructureErrorKind>> mutants = {
      {vp::replace_all(text, "</thinking>", ""), r::StructureErrorKind::kMissingTag},
      {missing, r::StructureErrorKind::kMissingSection},
      {vp::replace_all(text, "</thinking>", "5. **Mitigation**: bound it.\n</thinking>"),
       r::StructureErrorKind::kExtraSection},
      {swapped, r::StructureErrorKind::kMisordered},
  };
  for (std::size_t i = 0; i < mutants.size(); ++i) {
    c.expect(kind_of(mutants[i].first) == mutants[i].second, "mutant " + std::to_string(i) + " error kind");
  }
}

void review_backend(Check& c) {
  namespace rv = vp::review;
  TempDir dir;
  auto tasks = rv::ReviewStore::load_tasks(fixture("review/audit_tasks.jsonl"));
  for (int i = 0; i < 6; ++i) {
    tasks.push_back(rv::make_rank_task(500 + i, "rank-" + std::to_string(i), "int f(void) { return 0; }",
                                       vp::Language::kC, {{"sys-a", "a"}, {"sys-b", "b"}, {"sys-c", "c"}},
                                       static_cast<std::uint64_t>(i)));
  }
  rv::ReviewStore store(tasks, {"ann1", "ann2", "ann3"}, dir / "votes.jsonl");
  rv::ReviewService service(store);
  httplib::Client http("127.0.0.1", service.start());

  for (const auto& row : vp::read_jsonl(fixture("review/votes_93_6_1.jsonl"))) {
    const json body{{"task_id", row["task_id"]}, {"annotator", row["annotator"]}, {"verdict", row["verdict"]}};
    const auto res = http.Post("/votes", body.dump(), "application/json");
    c.expect(res && res->status == 201, "vote rejected");
  }
  for (int i = 0; i < 6; ++i) {
    const json body{{"task_id", 500 + i}, {"annotator", "ann" + std::to_string(1 + i % 3)},
                    {"ranking", i % 2 ? std::vector<int>{1, 2, 3} : std::vector<int>{3, 1, 2}}};
    c.expect(http.Post("/votes", body.dump(), "application/json")->status == 201, "ranking rejected");
  }
  const auto stats_res = http.Get("/stats");
  c.expect(stats_res && stats_res->status == 200, "/stats status");
  const auto stats = json::parse(stats_res->body);
  c.near(stats["annotations"]["accept_rate"].get<double>(), 0.93, 1e-9, "accept rate");
  c.near(stats["annotations"]["uncertain_rate"].get<double>(), 0.06, 1e-9, "uncertain rate");
  c.near(stats["annotations"]["reject_rate"].get<double>(), 0.01, 1e-9, "reject rate");

  // Library-side aggregation over the exported log.
  std::map<int, rv::ReviewTask> by_id;
  for (const auto& t : tasks) by_id[t.task_id] = t;
  std::vector<vp::relabel::AnnotationVote> votes;
  std::vector<std::vector<std::string>> rankings;
  std::istringstream exported(http.Get("/export")->body);
  for (std::string line; std::getline(exported, line);) {
    const auto e = json::parse(line).get<rv::LogEntry>();
    const auto& task = by_id.at(e.task_id);
    if (e.verdict) {
      votes.push_back({task.sample_ref, e.annotator, *e.verdict, e.timestamp});
    } else {
      std::vector<std::string> order;
      for (int r : e.ranking) order.push_back(task.hidden_order.at(static_cast<std::size_t>(r - 1)));
      rankings.push_back(order);
    }
  }
  const json majority = vp::relabel::summarize_annotations(vp::relabel::majority_by_sample(votes));
  const json prefs = vp::eval::aggregate_preferences(rankings);
  c.expect(stats["annotations"] == majority, "/stats annotations differ from majority vote");
  c.expect(stats["first_place_rates"] == prefs, "/stats first-place rates differ from aggregate_preferences");
}

}  // namespace

int main() {
  int failed = 0;
  failed += run("metric reproduction", 1, metric_reproduction);
  failed += run("bootstrap", 5, bootstrap);
  failed += run("orpo math", 30, orpo_math);
  failed += run("desk-scale learning", 120, desk_learning);
  failed += run("dataset properties", 10, dataset_properties);
  failed += run("pipeline determinism", 60, pipeline_determinism);
  failed += run("reasoning contracts", 5, reasoning_contracts);
  failed += run("review backend", 5, review_backend);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed;
}
