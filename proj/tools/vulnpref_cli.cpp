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

// vulnpref: one entry point for every pipeline stage.
//
// Exit status: 0 success, 2 configuration or usage error, 3 stage failure.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "vulnpref/pipeline.hpp"
#include "vulnpref/review_service.hpp"

namespace vp = vulnpref;
namespace pl = vulnpref::pipeline;

namespace {

constexpr int kConfigExit = 2;
constexpr int kStageExit = 3;

struct Overrides {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<std::string> rest;
};

// Pulls "--section.key value" and "--section.key=value" out of argv.
Overrides split_overrides(int argc, char** argv) {
  Overrides out;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    const auto eq = a.find('=');
    const std::string name = a.substr(0, eq);
    if (!a.starts_with("--") || name.find('.') == std::string::npos) {
      out.rest.push_back(a);
      continue;
    }
    if (eq != std::string::npos) {
      out.pairs.emplace_back(name.substr(2), a.substr(eq + 1));
    } else if (i + 1 < argc) {
      out.pairs.emplace_back(name.substr(2), argv[++i]);
    } else {
      throw pl::ConfigError("missing value for " + name);
    }
  }
  return out;
}

void print_result(const pl::StageResult& r, bool as_json) {
  if (as_json) {
    std::cout << vp::json(r).dump(2) << "\n";
    return;
  }
  std::cout << r.stage << (r.reused ? " (reused)" : "") << ": " << r.dir.string() << "\n";
  std::cout << "  manifest " << r.manifest.digest() << "\n";
  vp::json stats = r.stats;
  if (stats.contains("table")) {
    std::cout << stats["table"].get<std::string>();
    stats.erase("table");
  }
  std::cout << stats.dump(2) << "\n";
}

int serve(const pl::RunConfig& cfg) {
  const auto& s = cfg.at("serve");
  if (s["tasks"].is_null()) throw pl::ConfigError("serve.tasks is required");
  const auto annotators = s["annotators"].get<std::set<std::string>>();
  if (annotators.empty()) throw pl::ConfigError("serve.annotators must list at least one annotator");
  vp::review::ReviewStore store(vp::review::ReviewStore::load_tasks(s["tasks"].get<std::string>()), annotators,
                                s["vote_log"].get<std::string>());
  vp::review::ServiceOptions opt;
  opt.host = s["host"].get<std::string>();
  opt.port = s["port"].get<int>();
  if (!s["static_dir"].is_null()) opt.static_dir = s["static_dir"].get<std::string>();

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  vp::review::ReviewService service(store, opt);
  const int port = service.start();
  std::cout << "listening on " << opt.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  service.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Overrides ov;
  try {
    ov = split_overrides(argc, argv);
  } catch (const pl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigExit;
  }

  CLI::App app{"vulnpref: vulnerability preference-tuning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::string> config_path;
  bool as_json = false;
  app.add_option("--config", config_path, "JSON run config");
  app.add_flag("--json", as_json, "machine-readable output");

  std::string in_a, in_b, lambda_spec;
  std::optional<int> sweep_epochs;

  auto* corpus = app.add_subcommand("corpus", "function-pair corpus");
  corpus->require_subcommand(1);
  auto* extract = corpus->add_subcommand("extract", "extract function pairs from raw commits");
  extract->add_option("--input", in_a, "raw commit JSONL")->required();

  auto* relabel = app.add_subcommand("relabel", "LLM relabeling");
  relabel->require_subcommand(1);
  auto* score = relabel->add_subcommand("score", "score every pair");
  score->add_option("--corpus", in_a, "corpus extract directory")->required();

  auto* reason = app.add_subcommand("reason", "structured reasoning");
  reason->require_subcommand(1);
  auto* generate = reason->add_subcommand("generate", "generate preference samples");
  generate->add_option("--split", in_a, "dataset split directory")->required();

  auto* dataset = app.add_subcommand("dataset", "dataset assembly");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "balanced dataset from relabeled pairs");
  build->add_option("--corpus", in_a, "corpus extract directory")->required();
  build->add_option("--relabel", in_b, "relabel score directory")->required();
  auto* split = dataset->add_subcommand("split", "stratified train/val/test split");
  split->add_option("--input", in_a, "dataset build directory or labeled sample JSONL")->required();
  auto* imbalance = dataset->add_subcommand("imbalance", "imbalanced test sets");
  imbalance->add_option("--split", in_a, "dataset split directory")->required();
  auto* external = dataset->add_subcommand("external", "external test set");
  external->add_option("--split", in_a, "dataset split directory")->required();
  external->add_option("--input", in_b, "external commits or labeled samples JSONL")->required();

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--preferences", in_a, "reason generate directory")->required();

  auto* sweep = app.add_subcommand("sweep", "lambda x epoch grid");
  sweep->add_option("--preferences", in_a, "reason generate directory")->required();
  sweep->add_option("--lambda", lambda_spec, "lambda values: 0.1..1.0, 0.1..1.0:0.3 or 0.1,0.5");
  sweep->add_option("--epochs", sweep_epochs, "epochs per lambda");

  auto* eval = app.add_subcommand("eval", "evaluate a trained model");
  eval->add_option("--model", in_a, "train directory")->required();
  eval->add_option("--preferences", in_b, "reason generate directory")->required();

  auto* judge = app.add_subcommand("judge", "score explanations with a judge model");
  judge->add_option("--input", in_a, "eval directory or reasoning JSONL")->required();

  auto* serve_cmd = app.add_subcommand("serve", "run the review backend");

  auto* verify = app.add_subcommand("verify", "re-validate manifests and digests");
  verify->add_option("path", in_a, "stage directory or run root")->required();

  std::vector<std::string> rest(ov.rest.rbegin(), ov.rest.rend());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }

  pl::RunConfig cfg;
  try {
    if (!lambda_spec.empty()) {
      ov.pairs.emplace_back("sweep.lambdas", vp::json(pl::parse_lambda_spec(lambda_spec)).dump());
    }
    if (sweep_epochs) ov.pairs.emplace_back("sweep.epochs", std::to_string(*sweep_epochs));
    cfg = pl::load_config(config_path ? std::optional<std::filesystem::path>(*config_path) : std::nullopt,
                          ov.pairs);
  } catch (const pl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigExit;
  }

  std::string stage = "?";
  auto diag = [](std::string_view m) { std::cerr << "warning: " << m << "\n"; };
  try {
    if (*extract) {
      stage = "corpus extract";
      print_result(pl::corpus_extract(cfg, in_a, diag), as_json);
    } else if (*score) {
      stage = "relabel score";
      print_result(pl::relabel_score(cfg, in_a, *pl::make_client(cfg)), as_json);
    } else if (*generate) {
      stage = "reason generate";
      print_result(pl::reason_generate(cfg, in_a, *pl::make_client(cfg), diag), as_json);
    } else if (*build) {
      stage = "dataset build";
      print_result(pl::dataset_build(cfg, in_a, in_b), as_json);
    } else if (*split) {
      stage = "dataset split";
      print_result(pl::dataset_split(cfg, in_a), as_json);
    } else if (*imbalance) {
      stage = "dataset imbalance";
      print_result(pl::dataset_imbalance(cfg, in_a), as_json);
    } else if (*external) {
      stage = "dataset external";
      print_result(pl::dataset_external(cfg, in_a, in_b), as_json);
    } else if (*train) {
      stage = "train";
      print_result(pl::train(cfg, in_a), as_json);
    } else if (*sweep) {
      stage = "sweep";
      print_result(pl::sweep(cfg, in_a), as_json);
    } else if (*eval) {
      stage = "eval";
      print_result(pl::evaluate(cfg, in_a, in_b), as_json);
    } else if (*judge) {
      stage = "judge";
      print_result(pl::judge(cfg, in_a, *pl::make_client(cfg)), as_json);
    } else if (*serve_cmd) {
      stage = "serve";
      return serve(cfg);
    } else if (*verify) {
      stage = "verify";
      const auto rep = pl::verify_tree(in_a);
      if (as_json) {
        std::cout << vp::json(rep).dump(2) << "\n";
      } else {
        for (const auto& [dir, r] : rep.dirs) {
          std::cout << (r.ok ? "ok   " : "FAIL ") << dir << "\n";
          for (const auto& p : r.problems) std::cout << "     " << p << "\n";
        }
      }
      if (!rep.ok) {
        std::cerr << "error: stage verify: verification failed\n";
        return kStageExit;
      }
    }
  } catch (const pl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const pl::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageExit;
  } catch (const std::exception& e) {
    std::cerr << "error: stage " << stage << ": " << e.what() << "\n";
    return kStageExit;
  }
  return 0;
}
