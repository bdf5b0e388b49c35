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

// Odds-ratio preference objective, its SFT and classifier-head baselines,
// gradient checking, and a deterministic Adam training loop.

#ifndef VULNPREF_ORPO_HPP
#define VULNPREF_ORPO_HPP

#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vulnpref/common.hpp"
#include "vulnpref/eval.hpp"
#include "vulnpref/reasoning.hpp"
#include "vulnpref/scorer.hpp"

namespace vulnpref::orpo {

using scoring::SequenceScorer;
using scoring::Tokens;

class EmptySequence : public Error {
 public:
  using Error::Error;
};

class EmptyBatch : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::string batch_id)
      : Error("non-finite loss in batch " + batch_id), batch_id_(std::move(batch_id)) {}
  const std::string& batch_id() const { return batch_id_; }

 private:
  std::string batch_id_;
};

struct PreferenceExample {
  Tokens x;
  Tokens y_pos;
  Tokens y_neg;
  Label label = Label::kVulnerable;  // true label of x

  // The candidate whose conclusion is "vulnerable".
  const Tokens& y_vulnerable() const { return label == Label::kVulnerable ? y_pos : y_neg; }
  const Tokens& y_safe() const { return label == Label::kVulnerable ? y_neg : y_pos; }
};

using Batch = std::vector<PreferenceExample>;

// Keeps the tail of the prompt and the head of each response.
inline PreferenceExample encode_example(const reasoning::PreferenceSample& s,
                                        std::size_t max_prompt = 0, std::size_t max_response = 0) {
  PreferenceExample e;
  e.x = scoring::encode(s.input_x);
  e.y_pos = scoring::encode(s.valid_text());
  e.y_neg = scoring::encode(s.flawed_text());
  e.label = s.true_label;
  if (max_prompt && e.x.size() > max_prompt) {
    e.x.erase(e.x.begin(), e.x.end() - static_cast<std::ptrdiff_t>(max_prompt));
  }
  if (max_response) {
    if (e.y_pos.size() > max_response) e.y_pos.resize(max_response);
    if (e.y_neg.size() > max_response) e.y_neg.resize(max_response);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Scalar pieces
// ---------------------------------------------------------------------------

// Upper clamp on the length-normalized sequence probability.
inline constexpr double kMaxProb = 1.0 - 1e-7;

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double log_sigmoid(double z) {
  return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

inline double clamp_log_prob(double avg_lp) { return std::min(avg_lp, std::log(kMaxProb)); }

// log(p / (1 - p)) with p = exp(avg_lp), clamped.
inline double log_odds(double avg_lp) {
  const double lp = clamp_log_prob(avg_lp);
  return lp - std::log(-std::expm1(lp));
}

inline double odds_from_log_prob(double avg_lp) { return std::exp(log_odds(avg_lp)); }

// d log_odds / d avg_lp = 1 / (1 - p); zero where the clamp is active.
inline double d_log_odds(double avg_lp) {
  if (avg_lp >= std::log(kMaxProb)) return 0.0;
  return -1.0 / std::expm1(avg_lp);
}

inline double odds_ratio_term(double lp_pos, double lp_neg) {
  return -log_sigmoid(log_odds(lp_pos) - log_odds(lp_neg));
}

// ---------------------------------------------------------------------------
// Scorer-level quantities
// ---------------------------------------------------------------------------

inline double avg_log_prob(const SequenceScorer& scorer, const Tokens& x, const Tokens& y) {
  if (y.empty()) throw EmptySequence("response has no tokens");
  const auto lps = scorer.token_log_probs(x, y);
  double sum = 0.0;
  for (double v : lps) sum += v;
  return sum / static_cast<double>(lps.size());
}

inline double odds(const SequenceScorer& scorer, const Tokens& x, const Tokens& y) {
  return odds_from_log_prob(avg_log_prob(scorer, x, y));
}

inline void require_batch(const Batch& batch) {
  if (batch.empty()) throw EmptyBatch("batch is empty");
}

inline double loss_or(const SequenceScorer& scorer, const Batch& batch) {
  require_batch(batch);
  double sum = 0.0;
  for (const auto& e : batch) {
    sum += odds_ratio_term(avg_log_prob(scorer, e.x, e.y_pos), avg_log_prob(scorer, e.x, e.y_neg));
  }
  return sum / static_cast<double>(batch.size());
}

inline double loss_sft(const SequenceScorer& scorer, const Batch& batch) {
  require_batch(batch);
  double sum = 0.0;
  for (const auto& e : batch) sum -= avg_log_prob(scorer, e.x, e.y_pos);
  return sum / static_cast<double>(batch.size());
}

// Ties count as failures.
inline double reward_accuracy(const SequenceScorer& scorer, const Batch& batch) {
  require_batch(batch);
  std::size_t wins = 0;
  for (const auto& e : batch) {
    if (log_odds(avg_log_prob(scorer, e.x, e.y_pos)) > log_odds(avg_log_prob(scorer, e.x, e.y_neg))) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(batch.size());
}

// For the classifier baseline l_sft holds the binary cross-entropy, l_or is 0
// and reward_accuracy is classification accuracy.
struct LossBreakdown {
  double l_sft = 0.0;
  double l_or = 0.0;
  double l_total = 0.0;
  double reward_accuracy = 0.0;
  bool operator==(const LossBreakdown&) const = default;
};

inline void to_json(json& j, const LossBreakdown& l) {
  j = json{{"l_sft", l.l_sft}, {"l_or", l.l_or}, {"l_total", l.l_total}, {"reward_accuracy", l.reward_accuracy}};
}
inline void from_json(const json& j, LossBreakdown& l) {
  j.at("l_sft").get_to(l.l_sft);
  j.at("l_or").get_to(l.l_or);
  j.at("l_total").get_to(l.l_total);
  j.at("reward_accuracy").get_to(l.reward_accuracy);
}

inline LossBreakdown loss_orpo(const SequenceScorer& scorer, const Batch& batch, double lambda) {
  require_batch(batch);
  if (lambda < 0) throw InvalidArgument("lambda must be >= 0");
  LossBreakdown l;
  std::size_t wins = 0;
  for (const auto& e : batch) {
    const double lp = avg_log_prob(scorer, e.x, e.y_pos);
    const double ln = avg_log_prob(scorer, e.x, e.y_neg);
    l.l_sft -= lp;
    l.l_or += odds_ratio_term(lp, ln);
    if (log_odds(lp) > log_odds(ln)) ++wins;
  }
  const double n = static_cast<double>(batch.size());
  l.l_sft /= n;
  l.l_or /= n;
  l.l_total = l.l_sft + lambda * l.l_or;
  l.reward_accuracy = static_cast<double>(wins) / n;
  return l;
}

// ---------------------------------------------------------------------------
// Classifier head
// ---------------------------------------------------------------------------

struct ClassifierHead {
  std::vector<double> w;
  double b = 0.0;

  explicit ClassifierHead(std::size_t hidden = 0) : w(hidden, 0.0) {}
  std::size_t size() const { return w.size() + 1; }

  double logit(const std::vector<double>& pooled) const {
    double z = b;
    for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * pooled[i];
    return z;
  }
};

inline double cls_probability(const SequenceScorer& scorer, const ClassifierHead& head, const Tokens& x) {
  return sigmoid(head.logit(scorer.pooled(x)));
}

inline LossBreakdown loss_cls(const SequenceScorer& scorer, const ClassifierHead& head, const Batch& batch) {
  require_batch(batch);
  LossBreakdown l;
  std::size_t correct = 0;
  for (const auto& e : batch) {
    const double z = head.logit(scorer.pooled(e.x));
    const double y = e.label == Label::kVulnerable ? 1.0 : 0.0;
    l.l_sft += -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z));
    if ((z > 0) == (y > 0.5)) ++correct;
  }
  const double n = static_cast<double>(batch.size());
  l.l_sft /= n;
  l.l_total = l.l_sft;
  l.reward_accuracy = static_cast<double>(correct) / n;
  return l;
}

// ---------------------------------------------------------------------------
// Objective with gradient
// ---------------------------------------------------------------------------

enum class TrainMode { kOrpo, kSft, kCls };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainMode, {{TrainMode::kOrpo, "orpo"}, {TrainMode::kSft, "sft"}, {TrainMode::kCls, "cls"}})

inline TrainMode parse_mode(std::string_view s) {
  if (s == "orpo") return TrainMode::kOrpo;
  if (s == "sft") return TrainMode::kSft;
  if (s == "cls") return TrainMode::kCls;
  throw InvalidArgument("unknown training mode: " + std::string(s));
}

inline std::size_t trainable_size(const SequenceScorer& scorer, TrainMode mode, const ClassifierHead* head) {
  return scorer.parameters().size() + (mode == TrainMode::kCls && head ? head->size() : 0);
}

// Loss and gradient over [scorer parameters, head parameters (cls only)].
inline LossBreakdown loss_and_grad(const SequenceScorer& scorer, const Batch& batch, TrainMode mode,
                                   double lambda, const ClassifierHead* head, std::span<double> grad) {
  require_batch(batch);
  const double n = static_cast<double>(batch.size());
  std::fill(grad.begin(), grad.end(), 0.0);
  if (mode == TrainMode::kCls) {
    if (!head) throw InvalidArgument("cls mode needs a classifier head");
    const std::size_t np = scorer.parameters().size();
    if (grad.size() < np + head->size()) throw InvalidArgument("gradient buffer too small");
    std::vector<double> d_pooled(head->w.size());
    for (const auto& e : batch) {
      const auto h = scorer.pooled(e.x);
      const double y = e.label == Label::kVulnerable ? 1.0 : 0.0;
      const double dz = (sigmoid(head->logit(h)) - y) / n;
      for (std::size_t i = 0; i < h.size(); ++i) {
        grad[np + i] += dz * h[i];
        d_pooled[i] = dz * head->w[i];
      }
      grad[np + h.size()] += dz;
      scorer.accumulate_pooled_grad(e.x, d_pooled, grad);
    }
    return loss_cls(scorer, *head, batch);
  }

  LossBreakdown l;
  std::size_t wins = 0;
  for (const auto& e : batch) {
    if (e.y_pos.empty() || e.y_neg.empty()) throw EmptySequence("response has no tokens");
    const double lp = avg_log_prob(scorer, e.x, e.y_pos);
    const double Tp = static_cast<double>(e.y_pos.size());
    l.l_sft -= lp;
    double coef_pos = -1.0 / n;  // d l_sft / d lp
    if (mode == TrainMode::kOrpo) {
      const double ln = avg_log_prob(scorer, e.x, e.y_neg);
      const double z = log_odds(lp) - log_odds(ln);
      l.l_or += -log_sigmoid(z);
      if (z > 0) ++wins;
      const double dz = -sigmoid(-z) / n;  // d l_or / d z
      coef_pos += lambda * dz * d_log_odds(lp);
      const double coef_neg = -lambda * dz * d_log_odds(ln);
      scorer.accumulate_log_prob_grad(e.x, e.y_neg, coef_neg / static_cast<double>(e.y_neg.size()), grad);
    } else {
      const double ln = avg_log_prob(scorer, e.x, e.y_neg);
      l.l_or += odds_ratio_term(lp, ln);
      if (log_odds(lp) > log_odds(ln)) ++wins;
    }
    scorer.accumulate_log_prob_grad(e.x, e.y_pos, coef_pos / Tp, grad);
  }
  l.l_sft /= n;
  l.l_or /= n;
  l.l_total = mode == TrainMode::kOrpo ? l.l_sft + lambda * l.l_or : l.l_sft;
  l.reward_accuracy = static_cast<double>(wins) / n;
  return l;
}

inline LossBreakdown evaluate_loss(const SequenceScorer& scorer, const Batch& batch, TrainMode mode, double lambda,
                                   const ClassifierHead* head) {
  if (mode == TrainMode::kCls) {
    if (!head) throw InvalidArgument("cls mode needs a classifier head");
    return loss_cls(scorer, *head, batch);
  }
  LossBreakdown l = loss_orpo(scorer, batch, lambda);
  if (mode == TrainMode::kSft) l.l_total = l.l_sft;
  return l;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // frozen coordinates: both derivatives ~0
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  std::size_t coordinates = 64;
  std::uint64_t seed = 0;
  double frozen_below = 1e-9;
  std::function<void(std::span<double>)> grad_hook;  // tampers with the analytic gradient
};

// Central differences of the objective on a random coordinate subset.
// Relative error is |a - n| / max(|a|, |n|).
inline GradCheckResult grad_check(SequenceScorer& scorer, const Batch& batch, TrainMode mode, double lambda,
                                  ClassifierHead* head = nullptr, const GradCheckOptions& opt = {}) {
  const std::size_t np = scorer.parameters().size();
  const std::size_t total = trainable_size(scorer, mode, head);
  std::vector<double> analytic(total, 0.0);
  loss_and_grad(scorer, batch, mode, lambda, head, analytic);
  if (opt.grad_hook) opt.grad_hook(analytic);

  const auto coordinate = [&](std::size_t i) -> double& {
    if (i < np) return scorer.parameters()[i];
    return i - np < head->w.size() ? head->w[i - np] : head->b;
  };
  const auto objective = [&] { return evaluate_loss(scorer, batch, mode, lambda, head).l_total; };

  Rng rng(opt.seed);
  std::vector<std::size_t> all(total);
  for (std::size_t i = 0; i < total; ++i) all[i] = i;
  const auto picks = sample_without_replacement(all, std::min(opt.coordinates, total), rng);

  GradCheckResult r;
  for (std::size_t i : picks) {
    double& p = coordinate(i);
    const double saved = p;
    p = saved + opt.epsilon;
    const double up = objective();
    p = saved - opt.epsilon;
    const double down = objective();
    p = saved;
    const double numeric = (up - down) / (2.0 * opt.epsilon);
    const double a = analytic[i];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    if (scale < opt.frozen_below) {
      ++r.skipped;
      continue;
    }
    ++r.checked;
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / scale);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct OrpoConfig {
  TrainMode mode = TrainMode::kOrpo;
  double lambda = 0.3;
  double learning_rate = 3e-4;
  std::size_t batch_size = 2;
  int max_epochs = 5;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  static OrpoConfig defaults(TrainMode mode) {
    OrpoConfig c;
    c.mode = mode;
    if (mode == TrainMode::kCls) {
      c.learning_rate = 5e-5;
      c.batch_size = 16;
      c.max_epochs = 10;
    }
    return c;
  }

  void validate() const {
    if (lambda < 0) throw InvalidArgument("lambda must be >= 0");
    if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be positive");
    if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
    if (max_epochs <= 0) throw InvalidArgument("max_epochs must be positive");
  }
};

inline void to_json(json& j, const OrpoConfig& c) {
  j = json{{"mode", c.mode},
           {"lambda", c.lambda},
           {"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"seed", c.seed},
           {"scheduler", "linear_decay_no_warmup"},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps}};
}
inline void from_json(const json& j, OrpoConfig& c) {
  c = OrpoConfig::defaults(j.value("mode", TrainMode::kOrpo));
  c.lambda = j.value("lambda", c.lambda);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
}

// Content-addressed parameter snapshots, in memory and optionally on disk.
class CheckpointStore {
 public:
  CheckpointStore() = default;
  explicit CheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(*dir_);
  }

  std::string put(std::span<const double> scorer_params, const ClassifierHead* head) {
    std::string bytes;
    const auto append = [&](double v) {
      char buf[sizeof(double)];
      std::memcpy(buf, &v, sizeof v);
      bytes.append(buf, sizeof buf);
    };
    for (double v : scorer_params) append(v);
    if (head) {
      for (double v : head->w) append(v);
      append(head->b);
    }
    const std::string digest = sha256_hex(bytes);
    if (dir_) {
      const auto path = *dir_ / (digest + ".bin");
      if (!std::filesystem::exists(path)) write_file_atomic(path, bytes);
    }
    blobs_[digest] = std::move(bytes);
    return digest;
  }

  std::vector<double> get(const std::string& digest) const {
    std::string bytes;
    if (const auto it = blobs_.find(digest); it != blobs_.end()) {
      bytes = it->second;
    } else if (dir_ && std::filesystem::exists(*dir_ / (digest + ".bin"))) {
      bytes = read_file(*dir_ / (digest + ".bin"));
    } else {
      throw InvalidArgument("unknown checkpoint " + digest);
    }
    if (sha256_hex(bytes) != digest) throw Error("checkpoint " + digest + " is corrupted");
    std::vector<double> v(bytes.size() / sizeof(double));
    std::memcpy(v.data(), bytes.data(), v.size() * sizeof(double));
    return v;
  }

  // Loads a snapshot back into the scorer (and head, when present).
  void restore(const std::string& digest, SequenceScorer& scorer, ClassifierHead* head = nullptr) const {
    const auto v = get(digest);
    auto p = scorer.parameters();
    const std::size_t need = p.size() + (head ? head->size() : 0);
    if (v.size() != need) throw InvalidArgument("checkpoint size does not match the model");
    std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(p.size()), p.begin());
    if (head) {
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(p.size()), v.end() - 1, head->w.begin());
      head->b = v.back();
    }
  }

  std::size_t size() const { return blobs_.size(); }

 private:
  std::optional<std::filesystem::path> dir_;
  std::map<std::string, std::string> blobs_;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  LossBreakdown val;
  double wall_seconds = 0.0;
  std::string checkpoint;
};

inline void to_json(json& j, const EpochRecord& e) {
  j = json{{"epoch", e.epoch},
           {"train_loss", e.train_loss},
           {"val", e.val},
           {"wall_seconds", e.wall_seconds},
           {"checkpoint", e.checkpoint}};
}
inline void from_json(const json& j, EpochRecord& e) {
  j.at("epoch").get_to(e.epoch);
  j.at("train_loss").get_to(e.train_loss);
  j.at("val").get_to(e.val);
  e.wall_seconds = j.value("wall_seconds", 0.0);
  j.at("checkpoint").get_to(e.checkpoint);
}

struct TrainHistory {
  OrpoConfig config;
  std::string scorer;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // lowest validation l_total
  std::size_t steps = 0;

  const EpochRecord& best() const { return epochs.at(static_cast<std::size_t>(best_epoch - 1)); }

  // Everything but wall-clock time; equal for identical seed, config and data.
  std::string trajectory_digest() const {
    json j = json::array();
    for (const auto& e : epochs) {
      json row = e;
      row.erase("wall_seconds");
      j.push_back(row);
    }
    return json_digest(json{{"config", config}, {"epochs", j}, {"best_epoch", best_epoch}});
  }
};

inline void to_json(json& j, const TrainHistory& h) {
  j = json{{"config", h.config},
           {"scorer", h.scorer},
           {"epochs", h.epochs},
           {"best_epoch", h.best_epoch},
           {"steps", h.steps},
           {"trajectory_digest", h.trajectory_digest()}};
}
inline void from_json(const json& j, TrainHistory& h) {
  j.at("config").get_to(h.config);
  h.scorer = j.value("scorer", "");
  j.at("epochs").get_to(h.epochs);
  j.at("best_epoch").get_to(h.best_epoch);
  h.steps = j.value("steps", std::size_t{0});
}

using EpochCallback = std::function<void(int epoch, const SequenceScorer&, const ClassifierHead*)>;

namespace detail {

struct Adam {
  std::vector<double> m, v;
  std::size_t t = 0;

  void step(std::span<double> params, std::span<const double> grad, double lr, const OrpoConfig& c) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
    }
  }
};

inline bool finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace detail

// Seeded mini-batch Adam with linear decay to zero and no warmup. Validation
// losses are recorded after every epoch, each epoch's parameters are
// checkpointed, and best_epoch marks the lowest validation l_total. The
// scorer is left at the final epoch's parameters.
inline TrainHistory train(SequenceScorer& scorer, const Batch& train_set, const Batch& val_set,
                          const OrpoConfig& config, CheckpointStore* store = nullptr,
                          ClassifierHead* head = nullptr, const EpochCallback& on_epoch = {}) {
  config.validate();
  require_batch(train_set);
  if (config.mode == TrainMode::kCls && !head) throw InvalidArgument("cls mode needs a classifier head");
  if (config.mode == TrainMode::kCls && head->w.size() != scorer.hidden_size()) {
    throw InvalidArgument("classifier head does not match the scorer's hidden size");
  }
  ClassifierHead* used_head = config.mode == TrainMode::kCls ? head : nullptr;
  CheckpointStore local;
  CheckpointStore& ckpt = store ? *store : local;

  const std::size_t np = scorer.parameters().size();
  const std::size_t total = trainable_size(scorer, config.mode, used_head);
  const std::size_t per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(config.max_epochs);

  std::vector<double> params(total);
  std::vector<double> grad(total);
  const auto gather = [&] {
    auto p = scorer.parameters();
    std::copy(p.begin(), p.end(), params.begin());
    if (used_head) {
      std::copy(used_head->w.begin(), used_head->w.end(), params.begin() + static_cast<std::ptrdiff_t>(np));
      params[total - 1] = used_head->b;
    }
  };
  const auto scatter = [&] {
    auto p = scorer.parameters();
    std::copy(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(np), p.begin());
    if (used_head) {
      std::copy(params.begin() + static_cast<std::ptrdiff_t>(np), params.end() - 1, used_head->w.begin());
      used_head->b = params[total - 1];
    }
  };

  TrainHistory h;
  h.config = config;
  h.scorer = scorer.name();
  detail::Adam adam;
  Rng rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double best = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      Batch batch;
      for (std::size_t k = b * config.batch_size; k < std::min(order.size(), (b + 1) * config.batch_size); ++k) {
        batch.push_back(train_set[order[k]]);
      }
      const auto l = loss_and_grad(scorer, batch, config.mode, config.lambda, used_head, grad);
      if (!std::isfinite(l.l_total) || !detail::finite(grad)) {
        throw NonFiniteLoss(std::to_string(epoch) + ":" + std::to_string(b));
      }
      loss_sum += l.l_total;
      const double lr = config.learning_rate *
                        (1.0 - static_cast<double>(h.steps) / static_cast<double>(total_steps));
      gather();
      adam.step(params, grad, lr, config);
      scatter();
      ++h.steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(per_epoch);
    if (!val_set.empty()) rec.val = evaluate_loss(scorer, val_set, config.mode, config.lambda, used_head);
    rec.checkpoint = ckpt.put(scorer.parameters(), used_head);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double key = val_set.empty() ? rec.train_loss : rec.val.l_total;
    if (key < best) {
      best = key;
      h.best_epoch = epoch;
    }
    h.epochs.push_back(rec);
    if (on_epoch) on_epoch(epoch, scorer, used_head);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Prediction and the lambda x epoch sweep
// ---------------------------------------------------------------------------

// Generation-style systems pick the label whose reasoning is more likely;
// the classifier baseline thresholds its head at 0.5.
inline Label predict(const SequenceScorer& scorer, const PreferenceExample& e, const ClassifierHead* head = nullptr) {
  if (head) return cls_probability(scorer, *head, e.x) > 0.5 ? Label::kVulnerable : Label::kNonVulnerable;
  return avg_log_prob(scorer, e.x, e.y_vulnerable()) > avg_log_prob(scorer, e.x, e.y_safe()) ? Label::kVulnerable
                                                                                          : Label::kNonVulnerable;
}

inline eval::ConfusionCounts confusion(const SequenceScorer& scorer, const Batch& test, const ClassifierHead* head = nullptr) {
  eval::ConfusionCounts c;
  for (const auto& e : test) c.add(e.label, eval::from_label(predict(scorer, e, head)));
  return c;
}

struct SweepRow {
  double lambda = 0.0;
  int epoch = 0;
  double val_loss = 0.0;
  double reward_acc = 0.0;
  double test_f1 = 0.0;
};

inline void to_json(json& j, const SweepRow& r) {
  j = json{{"lambda", r.lambda}, {"epoch", r.epoch}, {"val_loss", r.val_loss},
           {"reward_acc", r.reward_acc}, {"test_f1", r.test_f1}};
}

using ScorerFactory = std::function<std::unique_ptr<SequenceScorer>()>;

// One ORPO run per lambda; every epoch contributes a row evaluated on the
// parameters at the end of that epoch.
inline std::vector<SweepRow> lambda_epoch_sweep(const ScorerFactory& make_scorer, const Batch& train_set,
                                                const Batch& val_set, const Batch& test_set,
                                                const std::vector<double>& lambdas, int epochs,
                                                OrpoConfig base = OrpoConfig::defaults(TrainMode::kOrpo)) {
  if (lambdas.empty() || epochs <= 0) throw InvalidArgument("sweep needs lambdas and epochs");
  require_batch(val_set);
  require_batch(test_set);
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    auto scorer = make_scorer();
    OrpoConfig cfg = base;
    cfg.mode = TrainMode::kOrpo;
    cfg.lambda = lambda;
    cfg.max_epochs = epochs;
    train(*scorer, train_set, val_set, cfg, nullptr, nullptr, [&](int epoch, const SequenceScorer& s, const ClassifierHead*) {
      const auto v = loss_orpo(s, val_set, lambda);
      rows.push_back({lambda, epoch, v.l_total, v.reward_accuracy, eval::compute_prf(confusion(s, test_set)).f1});
    });
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "lambda,epoch,val_loss,reward_acc,test_f1\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.lambda << "," << r.epoch << "," << r.val_loss << "," << r.reward_acc << "," << r.test_f1 << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

// Separable preference set: x ends with a class marker and every preferred
// response opens with a marker token that agrees with it.
inline Batch synthetic_preferences(std::size_t n, std::uint64_t seed, std::size_t prompt_len = 10) {
  Rng rng(seed);
  Batch out;
  for (std::size_t i = 0; i < n; ++i) {
    PreferenceExample e;
    e.label = (i % 2 == 0) ? Label::kVulnerable : Label::kNonVulnerable;
    std::string x;
    for (std::size_t k = 0; k < prompt_len; ++k) x.push_back(static_cast<char>('a' + rng.below(26)));
    x += e.label == Label::kVulnerable ? " V>" : " S>";
    const std::string vuln = "#flaw\nYES";
    const std::string safe = "~safe\nNO";
    e.x = scoring::encode(x);
    e.y_pos = scoring::encode(e.label == Label::kVulnerable ? vuln : safe);
    e.y_neg = scoring::encode(e.label == Label::kVulnerable ? safe : vuln);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace vulnpref::orpo

#endif  // VULNPREF_ORPO_HPP
