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

// HTTP backend for human label audits and blind reasoning rankings.

#ifndef VULNPREF_REVIEW_SERVICE_HPP
#define VULNPREF_REVIEW_SERVICE_HPP

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "vulnpref/common.hpp"
#include "vulnpref/corpus.hpp"
#include "vulnpref/eval.hpp"
#include "vulnpref/relabel.hpp"

namespace vulnpref::review {

enum class TaskKind { kLabelAudit, kReasoningRank };

NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::kLabelAudit, "label_audit"},
                                        {TaskKind::kReasoningRank, "reasoning_rank"}})

inline std::optional<TaskKind> parse_kind(std::string_view s) {
  if (s == "label_audit") return TaskKind::kLabelAudit;
  if (s == "reasoning_rank") return TaskKind::kReasoningRank;
  return std::nullopt;
}

// hidden_order and shuffle_seed stay on the server; public_view() drops them.
struct ReviewTask {
  int task_id = 0;
  TaskKind kind = TaskKind::kLabelAudit;
  std::string sample_ref;
  json payload = json::object();
  std::vector<std::string> hidden_order;  // system behind candidate i+1
  std::uint64_t shuffle_seed = 0;

  json public_view() const { return json{{"task_id", task_id}, {"kind", kind}, {"payload", payload}}; }
};

inline void to_json(json& j, const ReviewTask& t) {
  j = json{{"task_id", t.task_id},           {"kind", t.kind},
           {"sample_ref", t.sample_ref},     {"payload", t.payload},
           {"hidden_order", t.hidden_order}, {"shuffle_seed", t.shuffle_seed}};
}
inline void from_json(const json& j, ReviewTask& t) {
  j.at("task_id").get_to(t.task_id);
  j.at("kind").get_to(t.kind);
  j.at("sample_ref").get_to(t.sample_ref);
  t.payload = j.value("payload", json::object());
  t.hidden_order = j.value("hidden_order", std::vector<std::string>{});
  t.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0});
}

inline ReviewTask make_audit_task(int task_id, const corpus::FunctionPair& pair, Label proposed) {
  ReviewTask t;
  t.task_id = task_id;
  t.kind = TaskKind::kLabelAudit;
  t.sample_ref = pair.content_digest;
  t.payload = json{{"sample_ref", pair.content_digest},
                   {"language", pair.language},
                   {"path", pair.path},
                   {"function_name", pair.function_name},
                   {"pre_function", pair.pre_function},
                   {"post_function", pair.post_function},
                   {"proposed_label", proposed},
                   {"metadata", {{"cve_id", pair.cve_id},
                                 {"cwe_ids", pair.cwe_ids},
                                 {"cve_description", pair.cve_description}}}};
  return t;
}

// Case-insensitive removal of every system name from a candidate text.
inline std::string scrub_system_names(std::string text, const std::vector<std::string>& systems) {
  for (const auto& name : systems) {
    if (name.empty()) continue;
    std::string escaped;
    for (char c : name) {
      if (std::string_view(R"(\^$.|?*+()[]{})").find(c) != std::string_view::npos) escaped.push_back('\\');
      escaped.push_back(c);
    }
    text = std::regex_replace(text, std::regex(escaped, std::regex::icase), "[system]");
  }
  return text;
}

inline ReviewTask make_rank_task(int task_id, const std::string& sample_ref, const std::string& function_text,
                                 Language language, const std::map<std::string, std::string>& candidates,
                                 std::uint64_t seed) {
  if (candidates.size() < 2) throw InvalidArgument("a ranking task needs at least two candidates");
  ReviewTask t;
  t.task_id = task_id;
  t.kind = TaskKind::kReasoningRank;
  t.sample_ref = sample_ref;
  t.shuffle_seed = seed;
  for (const auto& [system, text] : candidates) t.hidden_order.push_back(system);
  Rng rng(seed);
  rng.shuffle(t.hidden_order);
  json shown = json::array();
  for (std::size_t i = 0; i < t.hidden_order.size(); ++i) {
    shown.push_back({{"index", i + 1}, {"text", scrub_system_names(candidates.at(t.hidden_order[i]), t.hidden_order)}});
  }
  t.payload = json{{"sample_ref", sample_ref}, {"language", language}, {"function", function_text},
                   {"candidates", shown}};
  return t;
}

inline std::size_t candidate_count(const ReviewTask& t) { return t.hidden_order.size(); }

// One line of the vote log. ranking holds 1-based candidate indices, best first.
struct LogEntry {
  std::size_t seq = 0;
  int task_id = 0;
  std::string annotator;
  std::optional<relabel::Verdict> verdict;
  std::vector<int> ranking;
  std::string timestamp;
};

inline void to_json(json& j, const LogEntry& e) {
  j = json{{"seq", e.seq}, {"task_id", e.task_id}, {"annotator", e.annotator}, {"timestamp", e.timestamp}};
  if (e.verdict) j["verdict"] = *e.verdict;
  if (!e.ranking.empty()) j["ranking"] = e.ranking;
}
inline void from_json(const json& j, LogEntry& e) {
  j.at("seq").get_to(e.seq);
  j.at("task_id").get_to(e.task_id);
  j.at("annotator").get_to(e.annotator);
  e.timestamp = j.value("timestamp", "");
  if (j.contains("verdict")) e.verdict = relabel::parse_verdict(j.at("verdict").get<std::string>()).value();
  e.ranking = j.value("ranking", std::vector<int>{});
}

class VoteRejected : public Error {
 public:
  VoteRejected(int status, const std::string& what) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

inline bool is_permutation_of(const std::vector<int>& ranking, std::size_t n) {
  if (ranking.size() != n) return false;
  std::vector<bool> seen(n + 1, false);
  for (int r : ranking) {
    if (r < 1 || static_cast<std::size_t>(r) > n || seen[static_cast<std::size_t>(r)]) return false;
    seen[static_cast<std::size_t>(r)] = true;
  }
  return true;
}

// Latest entry per (task, annotator) by log order.
inline std::vector<LogEntry> effective_entries(const std::vector<LogEntry>& log) {
  std::map<std::pair<int, std::string>, const LogEntry*> latest;
  for (const auto& e : log) latest[{e.task_id, e.annotator}] = &e;
  std::vector<LogEntry> out;
  for (const auto& [key, e] : latest) out.push_back(*e);
  return out;
}

// Pure function of the task set and the log.
inline json compute_stats(const std::map<int, ReviewTask>& tasks, const std::vector<LogEntry>& log) {
  std::vector<relabel::AnnotationVote> votes;
  std::vector<std::vector<std::string>> rankings;
  for (const auto& e : effective_entries(log)) {
    const auto& task = tasks.at(e.task_id);
    if (e.verdict) {
      votes.push_back({task.sample_ref, e.annotator, *e.verdict, e.timestamp});
    } else {
      std::vector<std::string> order;
      for (int r : e.ranking) order.push_back(task.hidden_order.at(static_cast<std::size_t>(r - 1)));
      rankings.push_back(std::move(order));
    }
  }
  json out{{"n_votes", log.size()}, {"annotations", nullptr}, {"first_place_rates", nullptr}};
  if (!votes.empty()) out["annotations"] = relabel::summarize_annotations(relabel::majority_by_sample(votes));
  if (!rankings.empty()) {
    out["first_place_rates"] = eval::aggregate_preferences(rankings);
    out["n_rankings"] = rankings.size();
  }
  return out;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Task set plus the append-only vote log. Appends are serialized; readers
// take an immutable snapshot of the log.
class ReviewStore {
 public:
  ReviewStore(std::vector<ReviewTask> tasks, std::set<std::string> annotators, std::filesystem::path log_path)
      : annotators_(std::move(annotators)), log_path_(std::move(log_path)) {
    for (auto& t : tasks) {
      const int id = t.task_id;
      if (!tasks_.emplace(id, std::move(t)).second) throw InvalidArgument("duplicate task id " + std::to_string(id));
    }
    auto log = std::make_shared<std::vector<LogEntry>>();
    if (std::filesystem::exists(log_path_)) {
      for (const auto& row : read_jsonl(log_path_)) log->push_back(row.get<LogEntry>());
    } else if (log_path_.has_parent_path()) {
      std::filesystem::create_directories(log_path_.parent_path());
    }
    snapshot_ = std::move(log);
  }

  static std::vector<ReviewTask> load_tasks(const std::filesystem::path& path) {
    std::vector<ReviewTask> out;
    for (const auto& row : read_jsonl(path)) out.push_back(row.get<ReviewTask>());
    return out;
  }

  const std::map<int, ReviewTask>& tasks() const { return tasks_; }
  bool has_annotator(const std::string& a) const { return annotators_.count(a) > 0; }

  std::shared_ptr<const std::vector<LogEntry>> snapshot() const {
    std::lock_guard lock(mu_);
    return snapshot_;
  }

  std::optional<int> next_task(TaskKind kind, const std::string& annotator) const {
    const auto log = snapshot();
    std::set<int> done;
    for (const auto& e : *log) {
      if (e.annotator == annotator) done.insert(e.task_id);
    }
    for (const auto& [id, t] : tasks_) {
      if (t.kind == kind && !done.count(id)) return id;
    }
    return std::nullopt;
  }

  LogEntry append(const json& body) {
    LogEntry e;
    if (!body.is_object() || !body.contains("task_id") || !body["task_id"].is_number_integer()) {
      throw VoteRejected(422, "task_id must be an integer");
    }
    e.task_id = body["task_id"].get<int>();
    const auto it = tasks_.find(e.task_id);
    if (it == tasks_.end()) throw VoteRejected(404, "unknown task " + std::to_string(e.task_id));
    if (!body.contains("annotator") || !body["annotator"].is_string() ||
        !has_annotator(body["annotator"].get<std::string>())) {
      throw VoteRejected(401, "unknown annotator");
    }
    e.annotator = body["annotator"].get<std::string>();
    const ReviewTask& task = it->second;
    if (task.kind == TaskKind::kLabelAudit) {
      if (!body.contains("verdict") || !body["verdict"].is_string() || body.contains("ranking")) {
        throw VoteRejected(422, "label_audit votes need a verdict");
      }
      e.verdict = relabel::parse_verdict(body["verdict"].get<std::string>());
      if (!e.verdict) throw VoteRejected(422, "verdict must be accept, uncertain or reject");
    } else {
      if (!body.contains("ranking") || !body["ranking"].is_array() || body.contains("verdict")) {
        throw VoteRejected(422, "reasoning_rank votes need a ranking");
      }
      for (const auto& r : body["ranking"]) {
        if (!r.is_number_integer()) throw VoteRejected(422, "ranking entries must be integers");
        e.ranking.push_back(r.get<int>());
      }
      if (!is_permutation_of(e.ranking, candidate_count(task))) {
        throw VoteRejected(422, "ranking must be a permutation of 1.." + std::to_string(candidate_count(task)));
      }
    }
    e.timestamp = utc_now();

    std::lock_guard lock(mu_);
    e.seq = snapshot_->size() + 1;
    std::ofstream out(log_path_, std::ios::app | std::ios::binary);
    out << json(e).dump() << '\n';
    out.flush();
    if (!out) throw Error("cannot append to vote log " + log_path_.string());
    auto next = std::make_shared<std::vector<LogEntry>>(*snapshot_);
    next->push_back(e);
    snapshot_ = std::move(next);
    return e;
  }

  json stats() const { return compute_stats(tasks_, *snapshot()); }

 private:
  std::map<int, ReviewTask> tasks_;
  std::set<std::string> annotators_;
  std::filesystem::path log_path_;
  mutable std::mutex mu_;
  std::shared_ptr<const std::vector<LogEntry>> snapshot_;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  std::optional<std::filesystem::path> static_dir;
};

class ReviewService {
 public:
  ReviewService(ReviewStore& store, ServiceOptions opt = {}) : store_(store), opt_(std::move(opt)) { routes(); }
  ~ReviewService() { stop(); }
  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start() {
    port_ = opt_.port == 0 ? server_.bind_to_any_port(opt_.host) : (server_.bind_to_port(opt_.host, opt_.port) ? opt_.port : -1);
    if (port_ < 0) throw Error("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Serves on the calling thread until stop() is called elsewhere.
  void run() {
    if (!server_.listen(opt_.host, opt_.port)) throw Error("cannot listen on " + opt_.host);
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void fail(httplib::Response& res, int status, const std::string& msg) {
    reply(res, status, json{{"error", msg}});
  }

  void routes() {
    server_.Get("/tasks", [this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = parse_kind(req.get_param_value("kind"));
      if (!kind) return fail(res, 400, "kind must be label_audit or reasoning_rank");
      const auto annotator = req.get_param_value("annotator");
      if (!store_.has_annotator(annotator)) return fail(res, 401, "unknown annotator");
      const auto id = store_.next_task(*kind, annotator);
      if (!id) {
        res.status = 204;
        return;
      }
      reply(res, 200, store_.tasks().at(*id).public_view());
    });

    server_.Get(R"(/tasks/(-?\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto it = store_.tasks().find(std::stoi(req.matches[1].str()));
      if (it == store_.tasks().end()) return fail(res, 404, "unknown task");
      reply(res, 200, it->second.public_view());
    });

    server_.Post("/votes", [this](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded()) return fail(res, 422, "body is not JSON");
      try {
        reply(res, 201, store_.append(body));
      } catch (const VoteRejected& e) {
        fail(res, e.status(), e.what());
      }
    });

    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      if (store_.snapshot()->empty()) {
        res.status = 204;
        return;
      }
      reply(res, 200, store_.stats());
    });

    server_.Get("/export", [this](const httplib::Request&, httplib::Response& res) {
      std::string out;
      for (const auto& e : *store_.snapshot()) out += json(e).dump() + "\n";
      res.set_content(out, "application/x-ndjson");
    });

    if (opt_.static_dir) server_.set_mount_point("/", opt_.static_dir->string());
  }

  ReviewStore& store_;
  ServiceOptions opt_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace vulnpref::review

#endif  // VULNPREF_REVIEW_SERVICE_HPP
