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

// Test doubles shared by the unit and acceptance suites.

#ifndef VULNPREF_TESTS_TEST_SUPPORT_HPP
#define VULNPREF_TESTS_TEST_SUPPORT_HPP

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

#include <unistd.h>

#include "vulnpref/llm_client.hpp"

namespace vulnpref::testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(VULNPREF_FIXTURES) / name;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> n{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vulnpref-test-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Answers every request through a function of the request; counts calls and
// can fail the first N attempts with a transient error.
class ScriptedProvider : public llm::ChatProvider {
 public:
  using Fn = std::function<std::string(const llm::ChatRequest&)>;

  explicit ScriptedProvider(Fn fn, int fail_first = 0, int fail_status = 503)
      : fn_(std::move(fn)), fail_first_(fail_first), fail_status_(fail_status) {}

  llm::ChatResponse send(const llm::ChatRequest& request) override {
    const int n = calls_.fetch_add(1) + 1;
    if (n <= fail_first_) {
      throw llm::TransientError(fail_status_, "injected failure " + std::to_string(n));
    }
    llm::ChatResponse r;
    r.text = fn_(request);
    return r;
  }

  int calls() const { return calls_.load(); }

 private:
  Fn fn_;
  int fail_first_;
  int fail_status_;
  std::atomic<int> calls_{0};
};

// Holds each request for a while and records the maximum number of
// concurrently active sends.
class SlowProvider : public llm::ChatProvider {
 public:
  explicit SlowProvider(std::chrono::milliseconds hold) : hold_(hold) {}

  llm::ChatResponse send(const llm::ChatRequest& request) override {
    const int now = active_.fetch_add(1) + 1;
    {
      const std::lock_guard<std::mutex> lock(mu_);
      max_active_ = std::max(max_active_, now);
    }
    std::this_thread::sleep_for(hold_);
    active_.fetch_sub(1);
    llm::ChatResponse r;
    r.text = "ok:" + request.messages.back().content;
    return r;
  }

  int max_active() const {
    const std::lock_guard<std::mutex> lock(mu_);
    return max_active_;
  }

 private:
  std::chrono::milliseconds hold_;
  std::atomic<int> active_{0};
  mutable std::mutex mu_;
  int max_active_ = 0;
};

inline llm::ChatRequest simple_request(std::string content, double temperature = 0.2) {
  llm::ChatRequest r;
  r.model_id = "teacher-test";
  r.messages = {{"user", std::move(content)}};
  r.temperature = temperature;
  return r;
}

}  // namespace vulnpref::testing

#endif  // VULNPREF_TESTS_TEST_SUPPORT_HPP
