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

// Differentiable sequence scorers: the interface the trainer optimizes and a
// small byte-level reference model with hand-written gradients.

#ifndef VULNPREF_SCORER_HPP
#define VULNPREF_SCORER_HPP

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vulnpref/common.hpp"

namespace vulnpref::scoring {

using Tokens = std::vector<int>;

// Byte-level tokenization; the reference scorer's vocabulary is 0..255.
inline Tokens encode(std::string_view text) {
  Tokens t;
  t.reserve(text.size());
  for (unsigned char c : text) t.push_back(c);
  return t;
}

inline std::string decode(const Tokens& tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (int t : tokens) s.push_back(static_cast<char>(t));
  return s;
}

class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;

  virtual std::string name() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t hidden_size() const = 0;
  virtual std::span<double> parameters() = 0;
  virtual std::span<const double> parameters() const = 0;

  // log P(y_t | x, y_<t) for every position of y.
  virtual std::vector<double> token_log_probs(const Tokens& x, const Tokens& y) const = 0;

  // grad += weight * d/dθ sum_t log P(y_t | x, y_<t).
  virtual void accumulate_log_prob_grad(const Tokens& x, const Tokens& y, double weight,
                                        std::span<double> grad) const = 0;

  // Representation of x at its last position, used by the classifier head.
  virtual std::vector<double> pooled(const Tokens& x) const = 0;

  // grad += (d pooled(x) / dθ)^T d_pooled.
  virtual void accumulate_pooled_grad(const Tokens& x, std::span<const double> d_pooled,
                                      std::span<double> grad) const = 0;

  virtual std::unique_ptr<SequenceScorer> clone() const = 0;
};

struct ReferenceScorerConfig {
  std::size_t context = 4;
  std::size_t embed = 8;
  std::size_t hidden = 16;
  std::size_t vocab = 256;
  int pad_id = 0;
  std::uint64_t seed = 0;
  double init_scale = 0.1;
};

inline void to_json(json& j, const ReferenceScorerConfig& c) {
  j = json{{"context", c.context}, {"embed", c.embed},   {"hidden", c.hidden},
           {"vocab", c.vocab},     {"pad_id", c.pad_id}, {"seed", c.seed},
           {"init_scale", c.init_scale}};
}
inline void from_json(const json& j, ReferenceScorerConfig& c) {
  c.context = j.value("context", c.context);
  c.embed = j.value("embed", c.embed);
  c.hidden = j.value("hidden", c.hidden);
  c.vocab = j.value("vocab", c.vocab);
  c.pad_id = j.value("pad_id", c.pad_id);
  c.seed = j.value("seed", c.seed);
  c.init_scale = j.value("init_scale", c.init_scale);
}

// Fixed-window neural language model:
//   a = [E[t-1]; ...; E[t-C]],  h = tanh(W a + b),  logits = U h + c.
// Positions before the start of x read the pad token.
class ReferenceScorer final : public SequenceScorer {
 public:
  explicit ReferenceScorer(ReferenceScorerConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.context == 0 || cfg_.embed == 0 || cfg_.hidden == 0 || cfg_.vocab < 2) {
      throw InvalidArgument("reference scorer dimensions must be positive");
    }
    in_ = cfg_.context * cfg_.embed;
    off_w_ = cfg_.vocab * cfg_.embed;
    off_b_ = off_w_ + cfg_.hidden * in_;
    off_u_ = off_b_ + cfg_.hidden;
    off_c_ = off_u_ + cfg_.vocab * cfg_.hidden;
    theta_.assign(off_c_ + cfg_.vocab, 0.0);
    Rng rng(cfg_.seed);
    for (std::size_t i = 0; i < off_b_; ++i) theta_[i] = cfg_.init_scale * rng.normal();
    for (std::size_t i = off_u_; i < off_c_; ++i) theta_[i] = cfg_.init_scale * rng.normal();
  }

  std::string name() const override { return "reference-byte-mlp"; }
  std::size_t vocab_size() const override { return cfg_.vocab; }
  std::size_t hidden_size() const override { return cfg_.hidden; }
  std::span<double> parameters() override { return theta_; }
  std::span<const double> parameters() const override { return theta_; }
  const ReferenceScorerConfig& config() const { return cfg_; }

  std::vector<double> token_log_probs(const Tokens& x, const Tokens& y) const override {
    const Tokens s = concat(x, y);
    std::vector<double> out;
    out.reserve(y.size());
    Work w(*this);
    for (std::size_t t = 0; t < y.size(); ++t) {
      forward(s, x.size() + t, w);
      out.push_back(w.logits[static_cast<std::size_t>(check(y[t]))] - w.lse);
    }
    return out;
  }

  void accumulate_log_prob_grad(const Tokens& x, const Tokens& y, double weight,
                                std::span<double> grad) const override {
    check_grad(grad);
    const Tokens s = concat(x, y);
    Work w(*this);
    std::vector<double> dlogits(cfg_.vocab);
    for (std::size_t t = 0; t < y.size(); ++t) {
      forward(s, x.size() + t, w);
      const auto target = static_cast<std::size_t>(check(y[t]));
      for (std::size_t v = 0; v < cfg_.vocab; ++v) {
        dlogits[v] = -weight * std::exp(w.logits[v] - w.lse);
      }
      dlogits[target] += weight;
      backward_from_logits(w, dlogits, grad);
    }
  }

  std::vector<double> pooled(const Tokens& x) const override {
    Work w(*this);
    hidden_at(x, x.size(), w);
    return w.h;
  }

  void accumulate_pooled_grad(const Tokens& x, std::span<const double> d_pooled,
                              std::span<double> grad) const override {
    check_grad(grad);
    if (d_pooled.size() != cfg_.hidden) throw InvalidArgument("pooled gradient size mismatch");
    Work w(*this);
    hidden_at(x, x.size(), w);
    std::vector<double> dh(d_pooled.begin(), d_pooled.end());
    backward_from_hidden(w, dh, grad);
  }

  std::unique_ptr<SequenceScorer> clone() const override {
    return std::make_unique<ReferenceScorer>(*this);
  }

 private:
  struct Work {
    explicit Work(const ReferenceScorer& s)
        : ctx(s.cfg_.context), a(s.in_), h(s.cfg_.hidden), logits(s.cfg_.vocab) {}
    std::vector<int> ctx;
    std::vector<double> a;
    std::vector<double> h;
    std::vector<double> logits;
    double lse = 0.0;
  };

  static Tokens concat(const Tokens& x, const Tokens& y) {
    Tokens s;
    s.reserve(x.size() + y.size());
    s.insert(s.end(), x.begin(), x.end());
    s.insert(s.end(), y.begin(), y.end());
    return s;
  }

  int check(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab) {
      throw InvalidArgument("token id out of vocabulary: " + std::to_string(token));
    }
    return token;
  }

  void check_grad(std::span<double> grad) const {
    if (grad.size() < theta_.size()) throw InvalidArgument("gradient buffer too small");
  }

  // Hidden state for predicting s[pos] from s[pos-1..pos-C].
  void hidden_at(const Tokens& s, std::size_t pos, Work& w) const {
    const std::size_t C = cfg_.context, D = cfg_.embed, H = cfg_.hidden;
    for (std::size_t k = 0; k < C; ++k) {
      w.ctx[k] = pos >= k + 1 ? check(s[pos - k - 1]) : cfg_.pad_id;
      const double* e = &theta_[static_cast<std::size_t>(w.ctx[k]) * D];
      std::copy(e, e + D, w.a.begin() + static_cast<std::ptrdiff_t>(k * D));
    }
    for (std::size_t i = 0; i < H; ++i) {
      const double* row = &theta_[off_w_ + i * in_];
      double z = theta_[off_b_ + i];
      for (std::size_t j = 0; j < in_; ++j) z += row[j] * w.a[j];
      w.h[i] = std::tanh(z);
    }
  }

  void forward(const Tokens& s, std::size_t pos, Work& w) const {
    hidden_at(s, pos, w);
    const std::size_t H = cfg_.hidden;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < cfg_.vocab; ++v) {
      const double* row = &theta_[off_u_ + v * H];
      double l = theta_[off_c_ + v];
      for (std::size_t i = 0; i < H; ++i) l += row[i] * w.h[i];
      w.logits[v] = l;
      mx = std::max(mx, l);
    }
    double sum = 0.0;
    for (double l : w.logits) sum += std::exp(l - mx);
    w.lse = mx + std::log(sum);
  }

  void backward_from_logits(const Work& w, const std::vector<double>& dlogits,
                            std::span<double> grad) const {
    const std::size_t H = cfg_.hidden;
    std::vector<double> dh(H, 0.0);
    for (std::size_t v = 0; v < cfg_.vocab; ++v) {
      const double g = dlogits[v];
      grad[off_c_ + v] += g;
      const double* row = &theta_[off_u_ + v * H];
      double* grow = &grad[off_u_ + v * H];
      for (std::size_t i = 0; i < H; ++i) {
        grow[i] += g * w.h[i];
        dh[i] += g * row[i];
      }
    }
    backward_from_hidden(w, dh, grad);
  }

  void backward_from_hidden(const Work& w, const std::vector<double>& dh,
                            std::span<double> grad) const {
    const std::size_t D = cfg_.embed, H = cfg_.hidden;
    std::vector<double> da(in_, 0.0);
    for (std::size_t i = 0; i < H; ++i) {
      const double dz = dh[i] * (1.0 - w.h[i] * w.h[i]);
      grad[off_b_ + i] += dz;
      const double* row = &theta_[off_w_ + i * in_];
      double* grow = &grad[off_w_ + i * in_];
      for (std::size_t j = 0; j < in_; ++j) {
        grow[j] += dz * w.a[j];
        da[j] += dz * row[j];
      }
    }
    for (std::size_t k = 0; k < cfg_.context; ++k) {
      double* ge = &grad[static_cast<std::size_t>(w.ctx[k]) * D];
      for (std::size_t d = 0; d < D; ++d) ge[d] += da[k * D + d];
    }
  }

  ReferenceScorerConfig cfg_;
  std::size_t in_ = 0;
  std::size_t off_w_ = 0, off_b_ = 0, off_u_ = 0, off_c_ = 0;
  std::vector<double> theta_;
};

// Every position predicts the uniform distribution; no parameters.
class UniformScorer final : public SequenceScorer {
 public:
  explicit UniformScorer(std::size_t vocab = 256) : vocab_(vocab) {}
  std::string name() const override { return "uniform"; }
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t hidden_size() const override { return 1; }
  std::span<double> parameters() override { return {}; }
  std::span<const double> parameters() const override { return {}; }
  std::vector<double> token_log_probs(const Tokens&, const Tokens& y) const override {
    return std::vector<double>(y.size(), -std::log(static_cast<double>(vocab_)));
  }
  void accumulate_log_prob_grad(const Tokens&, const Tokens&, double, std::span<double>) const override {}
  std::vector<double> pooled(const Tokens&) const override { return {0.0}; }
  void accumulate_pooled_grad(const Tokens&, std::span<const double>, std::span<double>) const override {}
  std::unique_ptr<SequenceScorer> clone() const override { return std::make_unique<UniformScorer>(*this); }

 private:
  std::size_t vocab_;
};

}  // namespace vulnpref::scoring

#endif  // VULNPREF_SCORER_HPP
