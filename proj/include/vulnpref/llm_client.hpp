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

// Provider-agnostic chat completion client: content-addressed response cache,
// retries with exponential backoff, bounded in-flight requests, and JSONL
// record/replay so that every test runs without a network.

#ifndef VULNPREF_LLM_CLIENT_HPP
#define VULNPREF_LLM_CLIENT_HPP

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "vulnpref/common.hpp"

namespace vulnpref::llm {

struct ChatMessage {
  std::string role;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.2;
  int max_new_tokens = 2048;
  std::optional<std::int64_t> seed;
  // Provider default when unset; never part of the cache key.
  std::optional<double> top_p;

  void validate() const {
    if (temperature < 0.0) throw InvalidArgument("temperature must be >= 0");
    if (max_new_tokens <= 0) throw InvalidArgument("max_new_tokens must be > 0");
    if (messages.empty()) throw InvalidArgument("request has no messages");
  }
};

inline void to_json(json& j, const ChatMessage& m) {
  j = json{{"role", m.role}, {"content", m.content}};
}
inline void from_json(const json& j, ChatMessage& m) {
  j.at("role").get_to(m.role);
  j.at("content").get_to(m.content);
}

inline void to_json(json& j, const ChatRequest& r) {
  j = json{{"model_id", r.model_id},
           {"messages", r.messages},
           {"temperature", r.temperature},
           {"max_new_tokens", r.max_new_tokens}};
  if (r.seed) j["seed"] = *r.seed;
  if (r.top_p) j["top_p"] = *r.top_p;
}
inline void from_json(const json& j, ChatRequest& r) {
  j.at("model_id").get_to(r.model_id);
  j.at("messages").get_to(r.messages);
  r.temperature = j.value("temperature", 0.2);
  r.max_new_tokens = j.value("max_new_tokens", 2048);
  if (j.contains("seed")) r.seed = j.at("seed").get<std::int64_t>();
  if (j.contains("top_p")) r.top_p = j.at("top_p").get<double>();
}

// Digest over (model_id, messages, temperature, max_new_tokens).
inline std::string cache_key(const ChatRequest& r) {
  const json keyed = {{"model_id", r.model_id},
                      {"messages", r.messages},
                      {"temperature", r.temperature},
                      {"max_new_tokens", r.max_new_tokens}};
  return json_digest(keyed);
}

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
  int attempts = 0;
  bool from_cache = false;
  std::optional<double> top_p;
};

struct ChatResponse {
  std::string text;
  Usage usage;
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Retryable transport failure (timeout, 429, 5xx).
class TransientError : public Error {
 public:
  TransientError(int status, const std::string& what) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class AuthError : public Error {
 public:
  using Error::Error;
};

class ProviderError : public Error {
 public:
  ProviderError(int status, int attempts, std::vector<std::string> log)
      : Error("provider request failed after " + std::to_string(attempts) +
              " attempt(s), last status " + std::to_string(status)),
        status_(status),
        attempts_(attempts),
        log_(std::move(log)) {}

  int status() const { return status_; }
  int attempts() const { return attempts_; }
  const std::vector<std::string>& attempt_log() const { return log_; }

 private:
  int status_;
  int attempts_;
  std::vector<std::string> log_;
};

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

class ChatProvider {
 public:
  virtual ~ChatProvider() = default;
  // One attempt. Throws TransientError, AuthError or ProviderError.
  virtual ChatResponse send(const ChatRequest& request) = 0;
};

struct Recording {
  std::string digest;
  ChatRequest request;
  std::string response;
};

inline json recording_row(const Recording& r) {
  return json{{"digest", r.digest}, {"request", r.request}, {"response", r.response}};
}

// Serves recorded responses by request digest; never touches the network.
class ReplayProvider : public ChatProvider {
 public:
  ReplayProvider() = default;

  explicit ReplayProvider(const std::filesystem::path& recordings) {
    if (std::filesystem::exists(recordings)) {
      for (const auto& row : read_jsonl(recordings)) {
        add(row.at("request").get<ChatRequest>(), row.at("response").get<std::string>());
      }
    }
  }

  void add(const ChatRequest& request, std::string response) {
    responses_[cache_key(request)] = std::move(response);
  }

  ChatResponse send(const ChatRequest& request) override {
    calls_.fetch_add(1);
    const auto it = responses_.find(cache_key(request));
    if (it == responses_.end()) {
      throw ProviderError(404, 1, {"no recording for request " + cache_key(request)});
    }
    ChatResponse r;
    r.text = it->second;
    r.usage.top_p = request.top_p;
    return r;
  }

  std::size_t size() const { return responses_.size(); }
  int calls() const { return calls_.load(); }

 private:
  std::unordered_map<std::string, std::string> responses_;
  std::atomic<int> calls_{0};
};

// Forwards to an inner provider and appends every successful exchange to a
// JSONL recording suitable for committing as a test fixture.
class RecordingProvider : public ChatProvider {
 public:
  RecordingProvider(std::shared_ptr<ChatProvider> inner, std::filesystem::path out)
      : inner_(std::move(inner)), out_(std::move(out)) {}

  ChatResponse send(const ChatRequest& request) override {
    ChatResponse r = inner_->send(request);
    const std::lock_guard<std::mutex> lock(mu_);
    if (out_.has_parent_path()) std::filesystem::create_directories(out_.parent_path());
    std::ofstream f(out_, std::ios::app | std::ios::binary);
    f << recording_row({cache_key(request), request, r.text}).dump() << '\n';
    return r;
  }

 private:
  std::shared_ptr<ChatProvider> inner_;
  std::filesystem::path out_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

// One file per key under <dir>/<key[0:2]>/<key>.json. Entries carry a
// checksum of the response; an entry that fails to verify counts as a miss.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir, DiagnosticSink diag = stderr_sink())
      : dir_(std::move(dir)), diag_(std::move(diag)) {}

  std::filesystem::path path_for(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".json");
  }

  std::optional<std::string> load(const ChatRequest& request) const {
    const std::string key = cache_key(request);
    const auto p = path_for(key);
    if (!std::filesystem::exists(p)) return std::nullopt;
    try {
      const json entry = json::parse(read_file(p));
      const std::string text = entry.at("response").get<std::string>();
      if (entry.at("key").get<std::string>() != key ||
          entry.at("checksum").get<std::string>() != sha256_hex(text)) {
        diag_("corrupted cache entry " + p.string() + " (digest mismatch); refetching");
        return std::nullopt;
      }
      return text;
    } catch (const std::exception& e) {
      diag_("corrupted cache entry " + p.string() + ": " + e.what() + "; refetching");
      return std::nullopt;
    }
  }

  void store(const ChatRequest& request, const std::string& response) const {
    const std::string key = cache_key(request);
    const json entry = {{"key", key},
                        {"request", request},
                        {"response", response},
                        {"checksum", sha256_hex(response)}};
    write_file_atomic(path_for(key), entry.dump(2));
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  DiagnosticSink diag_;
};

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  std::chrono::milliseconds max_delay{30000};
  bool jitter = true;
};

class ChatClient {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  ChatClient(std::shared_ptr<ChatProvider> provider, RetryPolicy policy = {},
             std::size_t max_in_flight = 4, std::uint64_t jitter_seed = 0x5eed)
      : provider_(std::move(provider)),
        policy_(policy),
        slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, max_in_flight))),
        jitter_rng_(jitter_seed),
        sleep_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
    if (policy_.max_attempts < 1) throw InvalidArgument("max_attempts must be >= 1");
  }

  void set_sleeper(Sleeper s) { sleep_ = std::move(s); }
  void set_cache(std::shared_ptr<ResponseCache> cache) { cache_ = std::move(cache); }
  const std::shared_ptr<ResponseCache>& cache() const { return cache_; }

  // Sends with retries on transient failures. AuthError is never retried.
  ChatResponse complete(const ChatRequest& request) {
    request.validate();
    std::vector<std::string> log;
    int last_status = 0;
    for (int attempt = 1; attempt <= policy_.max_attempts; ++attempt) {
      try {
        ChatResponse r = send_bounded(request);
        r.usage.attempts = attempt;
        if (!r.usage.top_p) r.usage.top_p = request.top_p;
        return r;
      } catch (const TransientError& e) {
        last_status = e.status();
        log.push_back("attempt " + std::to_string(attempt) + ": " + e.what());
        if (attempt < policy_.max_attempts) sleep_(backoff(attempt));
      }
    }
    throw ProviderError(last_status, policy_.max_attempts, std::move(log));
  }

  ChatResponse cached_complete(const ChatRequest& request, const ResponseCache& cache) {
    if (auto hit = cache.load(request)) {
      ChatResponse r;
      r.text = std::move(*hit);
      r.usage.from_cache = true;
      r.usage.top_p = request.top_p;
      return r;
    }
    ChatResponse r = complete(request);
    cache.store(request, r.text);
    return r;
  }

  // Uses the attached cache when there is one.
  ChatResponse cached_complete(const ChatRequest& request) {
    return cache_ ? cached_complete(request, *cache_) : complete(request);
  }

  std::chrono::milliseconds backoff(int attempt) {
    double ms = static_cast<double>(policy_.base_delay.count()) * std::pow(2.0, attempt - 1);
    ms = std::min(ms, static_cast<double>(policy_.max_delay.count()));
    if (policy_.jitter) {
      const std::lock_guard<std::mutex> lock(rng_mu_);
      ms *= 0.5 + 0.5 * jitter_rng_.uniform();
    }
    return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
  }

  int peak_in_flight() const { return peak_.load(); }

 private:
  ChatResponse send_bounded(const ChatRequest& request) {
    slots_.acquire();
    const int now = in_flight_.fetch_add(1) + 1;
    int prev = peak_.load();
    while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
    }
    struct Release {
      ChatClient* c;
      ~Release() {
        c->in_flight_.fetch_sub(1);
        c->slots_.release();
      }
    } release{this};
    return provider_->send(request);
  }

  std::shared_ptr<ChatProvider> provider_;
  RetryPolicy policy_;
  std::counting_semaphore<4096> slots_;
  std::atomic<int> in_flight_{0};
  std::atomic<int> peak_{0};
  std::mutex rng_mu_;
  Rng jitter_rng_;
  Sleeper sleep_;
  std::shared_ptr<ResponseCache> cache_;
};

}  // namespace vulnpref::llm

#endif  // VULNPREF_LLM_CLIENT_HPP
