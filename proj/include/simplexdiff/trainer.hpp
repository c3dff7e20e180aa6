#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "simplexdiff/corpus.hpp"
#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/ops.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/schedule.hpp"
#include "simplexdiff/simplex.hpp"
#include "simplexdiff/tensor.hpp"

namespace simplexdiff {

enum class SelfCondMode { none, original, averaged };

inline std::string to_string(SelfCondMode m) {
  switch (m) {
    case SelfCondMode::none: return "none";
    case SelfCondMode::original: return "original";
    case SelfCondMode::averaged: return "averaged";
  }
  return "?";
}

inline SelfCondMode parse_self_cond_mode(const std::string& s) {
  if (s == "none") return SelfCondMode::none;
  if (s == "original") return SelfCondMode::original;
  if (s == "averaged") return SelfCondMode::averaged;
  fail(ErrorKind::configuration, "unknown self_cond_mode '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 3e-5;
  int warmup_steps = 500;
  int total_steps = 20000;
  int batch_size = 32;
  double rho = 0.5;
  SelfCondMode self_cond_mode = SelfCondMode::averaged;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int log_every = 100;
  /// 0 disables periodic checkpoints.
  int checkpoint_every = 0;

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::configuration, what); };
    if (!(rho >= 0.0 && rho <= 1.0)) bad("train.rho must lie in [0,1]");
    if (total_steps < 1) bad("train.total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps > total_steps) {
      bad("train.warmup_steps must lie in [0, total_steps]");
    }
    if (batch_size < 1) bad("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) bad("train.learning_rate must be positive");
    if (weight_decay < 0.0) bad("train.weight_decay must be >= 0");
    if (grad_clip < 0.0) bad("train.grad_clip must be >= 0 (0 disables)");
    if (log_every < 1) bad("train.log_every must be >= 1");
    if (checkpoint_every < 0) bad("train.checkpoint_every must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) fail(ErrorKind::range, "lr_at: negative step");
  if (step >= cfg.total_steps && step > cfg.warmup_steps) return 0.0;
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.learning_rate;
    return cfg.learning_rate * static_cast<double>(step) / cfg.warmup_steps;
  }
  return cfg.learning_rate * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
NamedParams<T> named_params(ModelParams<T>& params) {
  NamedParams<T> out;
  params.for_each([&out](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <class T>
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> m, v;

  bool initialized() const { return !names.empty(); }

  void init(const NamedParams<T>& params) {
    names.clear();
    m.clear();
    v.clear();
    for (const auto& [name, t] : params) {
      names.push_back(name);
      m.emplace_back(t->shape, T(0));
      v.emplace_back(t->shape, T(0));
    }
  }
};

/// Decoupled weight decay then the bias-corrected Adam step. Decay applies to
/// rank-2 tensors only.
template <class T>
void adamw_update(const NamedParams<T>& params, OptimizerState<T>& st, double lr) {
  if (!st.initialized()) st.init(params);
  if (st.names.size() != params.size()) {
    fail(ErrorKind::compatibility, "optimizer state holds " + std::to_string(st.names.size()) +
                                       " tensors for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = *params[i].second;
    if (p.grad.size() != p.size()) {
      fail(ErrorKind::usage, "adamw_update: missing gradient for " + params[i].first);
    }
    if (st.m[i].shape != p.shape) {
      fail(ErrorKind::compatibility, "optimizer moment shape mismatch for " + params[i].first);
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(st.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    std::vector<T>& m = st.m[i].values;
    std::vector<T>& v = st.v[i].values;
    const T decay = p.rank() == 2 ? static_cast<T>(1.0 - lr * st.weight_decay) : T(1);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T g = p.grad[j];
      p.values[j] *= decay;
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      p.values[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const NamedParams<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    for (T g : t->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& [name, t] : params) {
      for (T& g : t->grad) g *= s;
    }
  }
  return norm;
}

struct PaddedTargets {
  std::size_t fixed_len = 0;
  /// batch * fixed_len ids, row-major by example.
  std::vector<int> tokens;
  /// Loss mask over the target span; pads are included, so it is all true.
  std::vector<bool> mask;
};

inline PaddedTargets pad_targets(const std::vector<const PairExample*>& examples, std::size_t fixed_len,
                                 int pad_id = token::pad) {
  PaddedTargets out;
  out.fixed_len = fixed_len;
  out.tokens.reserve(examples.size() * fixed_len);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto& tgt = examples[b]->target;
    if (tgt.size() > fixed_len) {
      fail(ErrorKind::truncation, "target of example " + std::to_string(b) + " has " +
                                      std::to_string(tgt.size()) + " tokens, fixed length is " +
                                      std::to_string(fixed_len));
    }
    out.tokens.insert(out.tokens.end(), tgt.begin(), tgt.end());
    out.tokens.insert(out.tokens.end(), fixed_len - tgt.size(), pad_id);
  }
  out.mask.assign(out.tokens.size(), true);
  return out;
}

inline PaddedTargets pad_targets(const std::vector<PairExample>& examples, std::size_t fixed_len,
                                 int pad_id = token::pad) {
  std::vector<const PairExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return pad_targets(ptrs, fixed_len, pad_id);
}

/// Everything the loss of one step depends on, fixed before any tracked work.
template <class T>
struct PreparedStep {
  ModelBatch<T> batch;
  PaddedTargets targets;
  std::vector<int> timesteps;
  bool self_cond = false;
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool self_cond = false;
};

/// Training loop. All randomness of step k is drawn from streams keyed by
/// (seed, k), so resuming at step k replays exactly what an uninterrupted
/// run would have done.
template <class T>
class Trainer {
 public:
  Trainer(Encoder<T>& model, TrainConfig cfg, NoiseSchedule schedule, std::size_t target_len)
      : model_(model), cfg_(cfg), schedule_(std::move(schedule)), target_len_(target_len) {
    cfg_.validate();
    opt_.weight_decay = cfg_.weight_decay;
    if (target_len_ == 0 || target_len_ > static_cast<std::size_t>(model_.config().max_target_len())) {
      fail(ErrorKind::sequence_length, "target length " + std::to_string(target_len_) +
                                           " outside (0, " +
                                           std::to_string(model_.config().max_target_len()) + "]");
    }
    if ((cfg_.self_cond_mode == SelfCondMode::original) != model_.config().concat_self_cond) {
      fail(ErrorKind::configuration,
           "self_cond_mode=original requires model.concat_self_cond and vice versa");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::size_t target_len() const { return target_len_; }
  std::int64_t step() const { return opt_.step; }
  OptimizerState<T>& optimizer() { return opt_; }
  const OptimizerState<T>& optimizer() const { return opt_; }
  Encoder<T>& model() { return model_; }

  /// Number of steps where the self-conditioning branch fired.
  std::size_t self_cond_steps() const { return self_cond_steps_; }

  /// Draws timesteps, noise and the self-conditioning coin for step `k`
  /// (1-based) and, if the coin fires, runs the detached t+1 pass.
  PreparedStep<T> prepare(const std::vector<const PairExample*>& examples, std::int64_t k) const {
    if (examples.empty()) fail(ErrorKind::usage, "training batch is empty");
    const std::size_t B = examples.size(), L = target_len_;
    const auto V = static_cast<std::size_t>(model_.config().vocab_size);
    const T kk = static_cast<T>(schedule_.simplex_scale());
    const int TT = schedule_.train_steps();
    Rng rng(derive_seed(derive_seed(cfg_.seed, Stream::diffusion), static_cast<std::uint64_t>(k)));

    PreparedStep<T> out;
    out.targets = pad_targets(examples, L);
    out.batch.target_len = L;
    out.batch.target_probs = Tensor<T>(Shape{B * L, V});
    std::vector<LogitSimplexSeq<T>> noisy;
    noisy.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      out.batch.sources.push_back(examples[b]->source);
      const int t = static_cast<int>(rng.integer(1, TT));
      out.timesteps.push_back(t);
      out.batch.time.push_back(static_cast<T>(schedule_.scaled_time(t)));
      std::span<const int> tgt(out.targets.tokens.data() + b * L, L);
      noisy.push_back(add_noise(encode_tokens<T>(tgt, kk, V), t, schedule_, rng));
    }

    out.self_cond = cfg_.self_cond_mode != SelfCondMode::none && rng.bernoulli(cfg_.rho);
    std::vector<std::optional<LogitSimplexSeq<T>>> prev(B);
    if (out.self_cond) {
      ModelBatch<T> sc;
      sc.sources = out.batch.sources;
      sc.target_len = L;
      sc.target_probs = Tensor<T>(Shape{B * L, V});
      for (std::size_t b = 0; b < B; ++b) {
        const int t1 = std::min(out.timesteps[b] + 1, TT);
        sc.time.push_back(static_cast<T>(schedule_.scaled_time(t1)));
        std::span<const int> tgt(out.targets.tokens.data() + b * L, L);
        auto s1 = add_noise(encode_tokens<T>(tgt, kk, V), t1, schedule_, rng);
        const Tensor<T> p = softmax_rows(s1);
        std::copy(p.values.begin(), p.values.end(), sc.target_probs.values.begin() + b * L * V);
      }
      const Tensor<T> logits = model_.predict(sc);
      for (std::size_t b = 0; b < B; ++b) {
        LogitSimplexSeq<T> s(L, V, kk);
        std::copy_n(logits.values.begin() + b * L * V, L * V, s.logits.begin());
        prev[b] = project_argmax(s);
      }
    }

    const bool concat = cfg_.self_cond_mode == SelfCondMode::original;
    if (concat && out.self_cond) out.batch.prev_probs = Tensor<T>(Shape{B * L, V});
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor<T> p = concat ? softmax_rows(noisy[b]) : self_cond_average(noisy[b], prev[b]);
      std::copy(p.values.begin(), p.values.end(), out.batch.target_probs.values.begin() + b * L * V);
      if (concat && prev[b]) {
        const Tensor<T> q = softmax_rows(*prev[b]);
        std::copy(q.values.begin(), q.values.end(), out.batch.prev_probs->values.begin() + b * L * V);
      }
    }
    return out;
  }

  /// Forward and backward on a prepared step. Parameter grads are overwritten.
  double gradients(const PreparedStep<T>& prep, std::int64_t k) {
    model_.params().set_requires_grad(true);
    model_.params().zero_grad();
    Rng drop(derive_seed(derive_seed(cfg_.seed, Stream::dropout), static_cast<std::uint64_t>(k)));
    const bool use_dropout = model_.config().dropout > 0.0;
    Tape<T> tape;
    Var<T> logits = model_.forward_tracked(tape, prep.batch, use_dropout ? &drop : nullptr);
    Var<T> loss = cross_entropy(logits, prep.targets.tokens, prep.targets.mask);
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) {
      fail(ErrorKind::divergence, "training diverged at step " + std::to_string(k) +
                                      ": loss=" + std::to_string(value));
    }
    tape.backward(loss);
    return value;
  }

  /// One full optimizer step on `examples`.
  StepResult train_step(const std::vector<const PairExample*>& examples) {
    const std::int64_t k = opt_.step + 1;
    PreparedStep<T> prep = prepare(examples, k);
    StepResult r;
    r.self_cond = prep.self_cond;
    if (prep.self_cond) ++self_cond_steps_;
    r.loss = gradients(prep, k);
    auto params = named_params(model_.params());
    r.grad_norm = clip_grad_norm(params, cfg_.grad_clip);
    if (!std::isfinite(r.grad_norm)) {
      fail(ErrorKind::divergence, "training diverged at step " + std::to_string(k) +
                                      ": non-finite gradient norm");
    }
    r.lr = lr_at(k, cfg_);
    adamw_update(params, opt_, r.lr);
    return r;
  }

  /// Examples for step k: consecutive slices of per-epoch shuffles.
  std::vector<const PairExample*> batch_for_step(const std::vector<PairExample>& data,
                                                 std::int64_t k) {
    if (data.empty()) fail(ErrorKind::usage, "training set is empty");
    std::vector<const PairExample*> out;
    const auto B = static_cast<std::uint64_t>(cfg_.batch_size);
    const std::uint64_t n = data.size();
    for (std::uint64_t i = 0; i < B; ++i) {
      const std::uint64_t flat = static_cast<std::uint64_t>(k - 1) * B + i;
      const std::uint64_t epoch = flat / n;
      if (epoch != order_epoch_ || order_.size() != n) {
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng(derive_seed(derive_seed(cfg_.seed, Stream::data_order), epoch));
        std::shuffle(order_.begin(), order_.end(), rng.engine());
        order_epoch_ = epoch;
      }
      out.push_back(&data[order_[flat % n]]);
    }
    return out;
  }

  using Hook = std::function<void(Trainer&)>;

  /// Runs from the current step to total_steps. `log` receives one
  /// "step<TAB>loss<TAB>lr<TAB>wall_s" line per log interval (mean loss over
  /// the interval); `on_checkpoint` fires every checkpoint_every steps.
  void fit(const std::vector<PairExample>& data, std::ostream* log = nullptr,
           const Hook& on_checkpoint = {}) {
    for (const auto& e : data) {
      if (e.target.size() > target_len_) {
        fail(ErrorKind::truncation, "training target of " + std::to_string(e.target.size()) +
                                        " tokens exceeds fixed length " + std::to_string(target_len_));
      }
    }
    const auto start = std::chrono::steady_clock::now();
    double acc = 0.0;
    int count = 0;
    while (opt_.step < cfg_.total_steps) {
      StepResult r = train_step(batch_for_step(data, opt_.step + 1));
      acc += r.loss;
      ++count;
      if (log && (opt_.step % cfg_.log_every == 0 || opt_.step == cfg_.total_steps)) {
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        *log << opt_.step << '\t' << acc / count << '\t' << r.lr << '\t' << wall << '\n';
        log->flush();
        acc = 0.0;
        count = 0;
      }
      if (on_checkpoint && cfg_.checkpoint_every > 0 && opt_.step % cfg_.checkpoint_every == 0) {
        on_checkpoint(*this);
      }
    }
  }

 private:
  Encoder<T>& model_;
  TrainConfig cfg_;
  NoiseSchedule schedule_;
  std::size_t target_len_;
  OptimizerState<T> opt_;
  std::size_t self_cond_steps_ = 0;
  std::vector<std::size_t> order_;
  std::uint64_t order_epoch_ = ~std::uint64_t{0};
};

}  // namespace simplexdiff
