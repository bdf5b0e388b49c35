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

// Live transport for OpenAI-compatible /v1/chat/completions endpoints.

#ifndef VULNPREF_LLM_HTTP_HPP
#define VULNPREF_LLM_HTTP_HPP

#include <cstdlib>
#include <string>

#include "httplib.h"
#include "vulnpref/llm_client.hpp"

namespace vulnpref::llm {

struct HttpProviderConfig {
  std::string base_url = "https://api.openai.com";
  std::string api_key_env = "OPENAI_API_KEY";
  std::string path = "/v1/chat/completions";
  int timeout_seconds = 120;
};

class OpenAiCompatibleProvider : public ChatProvider {
 public:
  // Reads the credential up front; a missing key fails before any request.
  explicit OpenAiCompatibleProvider(HttpProviderConfig cfg) : cfg_(std::move(cfg)) {
    const char* key = std::getenv(cfg_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw AuthError("missing credentials: environment variable " + cfg_.api_key_env +
                      " is not set");
    }
    api_key_ = key;
  }

  ChatResponse send(const ChatRequest& request) override {
    httplib::Client cli(cfg_.base_url);
    cli.set_read_timeout(cfg_.timeout_seconds, 0);
    cli.set_connection_timeout(30, 0);
    json body = {{"model", request.model_id},
                 {"messages", json::array()},
                 {"temperature", request.temperature},
                 {"max_tokens", request.max_new_tokens}};
    for (const auto& m : request.messages) {
      body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    }
    if (request.seed) body["seed"] = *request.seed;
    if (request.top_p) body["top_p"] = *request.top_p;

    const httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
    auto res = cli.Post(cfg_.path, headers, body.dump(), "application/json");
    if (!res) {
      throw TransientError(0, "transport error: " + httplib::to_string(res.error()));
    }
    if (res->status == 401 || res->status == 403) {
      throw AuthError("credentials rejected (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status == 429 || res->status >= 500) {
      throw TransientError(res->status, "HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw ProviderError(res->status, 1, {res->body.substr(0, 512)});
    }
    const json j = json::parse(res->body);
    ChatResponse out;
    out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
    if (j.contains("usage")) {
      out.usage.prompt_tokens = j["usage"].value("prompt_tokens", 0);
      out.usage.completion_tokens = j["usage"].value("completion_tokens", 0);
    }
    out.usage.top_p = request.top_p;
    return out;
  }

 private:
  HttpProviderConfig cfg_;
  std::string api_key_;
};

}  // namespace vulnpref::llm

#endif  // VULNPREF_LLM_HTTP_HPP
