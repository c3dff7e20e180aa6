#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/schedule.hpp"
#include "simplexdiff/simplex.hpp"
#include "simplexdiff/tensor.hpp"

namespace simplexdiff {

enum class DecodeMode { full_nar, block };

inline std::string to_string(DecodeMode m) { return m == DecodeMode::block ? "block" : "full_nar"; }

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "full_nar") return DecodeMode::full_nar;
  if (s == "block") return DecodeMode::block;
  fail(ErrorKind::configuration, "unknown decoding mode '" + s + "'");
}

struct GenerationConfig {
  int num_steps = 1000;
  /// Length of the diffused target span.
  int max_target_len = 0;
  bool self_conditioning = true;
  DecodeMode mode = DecodeMode::full_nar;
  int block_size = 25;
  std::uint64_t seed = 0;
  /// Block mode stops once a block contains EOS or PAD.
  bool stop_at_end = true;

  void validate(const NoiseSchedule& schedule) const {
    if (num_steps < 1 || num_steps > schedule.train_steps()) {
      fail(ErrorKind::configuration, "generate.num_steps must lie in [1, " +
                                         std::to_string(schedule.train_steps()) + "]");
    }
    if (max_target_len < 1) fail(ErrorKind::configuration, "generate.max_target_len must be >= 1");
    if (mode == DecodeMode::block && block_size < 1) {
      fail(ErrorKind::configuration, "generate.block_size must be >= 1");
    }
  }

  friend bool operator==(const GenerationConfig&, const GenerationConfig&) = default;
};

/// Seed of the rng owned by the index-th sequence of a generation run.
inline std::uint64_t sequence_seed(std::uint64_t seed, std::uint64_t index) {
  return derive_seed(derive_seed(seed, Stream::generation), index);
}

/// sqrt(alpha_bar_{t_prev}) * S_hat + sqrt(1 - alpha_bar_{t_prev}) * eps.
template <class T>
LogitSimplexSeq<T> reverse_step(const LogitSimplexSeq<T>& s_hat, int t_prev,
                                const NoiseSchedule& schedule, Rng& rng) {
  return renoise(s_hat, schedule.alpha_bar(t_prev), rng);
}

/// eps such that s_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <class T>
LogitSimplexSeq<T> recover_noise(const LogitSimplexSeq<T>& s_t, const LogitSimplexSeq<T>& x0, int t,
                                 const NoiseSchedule& schedule) {
  if (t < 1) fail(ErrorKind::range, "recover_noise: t must be >= 1");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  LogitSimplexSeq<T> eps = s_t;
  for (std::size_t i = 0; i < eps.logits.size(); ++i) {
    eps.logits[i] = static_cast<T>((static_cast<double>(s_t.logits[i]) -
                                    a * static_cast<double>(x0.logits[i])) / b);
  }
  return eps;
}

/// (alpha_t - alpha_bar_t) / (sqrt(alpha_t) sqrt(1 - alpha_bar_t)), the
/// noise weight of the deterministic posterior step.
inline double exact_noise_coefficient(int t, const NoiseSchedule& schedule) {
  if (t < 1) fail(ErrorKind::range, "exact noise coefficient needs t >= 1");
  const double a = schedule.alpha(t), ab = schedule.alpha_bar(t);
  return (a - ab) / (std::sqrt(a) * std::sqrt(1.0 - ab));
}

namespace detail {

template <class T>
LogitSimplexSeq<T> combine(const LogitSimplexSeq<T>& x0, double cx, const LogitSimplexSeq<T>& eps,
                           double ce) {
  if (x0.logits.size() != eps.logits.size()) {
    fail(ErrorKind::dimension, "reverse step: x0 and eps differ in shape");
  }
  LogitSimplexSeq<T> out = x0;
  for (std::size_t i = 0; i < out.logits.size(); ++i) {
    out.logits[i] = static_cast<T>(cx * static_cast<double>(x0.logits[i]) -
                                   ce * static_cast<double>(eps.logits[i]));
  }
  return out;
}

}  // namespace detail

/// Deterministic posterior step from t to t-1:
/// sqrt(alpha_bar_{t-1}) x0 - c_t sqrt(1 - alpha_bar_{t-1}) eps, with
/// c_t = approx_coefficient(t). Bitwise equal to reverse_step_approx
/// wherever c_t == 1.
template <class T>
LogitSimplexSeq<T> reverse_step_exact(const LogitSimplexSeq<T>& x0, const LogitSimplexSeq<T>& eps,
                                      int t, const NoiseSchedule& schedule) {
  if (t < 1) fail(ErrorKind::range, "reverse_step_exact: t must be >= 1");
  const double ab_prev = schedule.alpha_bar(t - 1);
  const double c = schedule.approx_coefficient(t);
  const double noise = c == 1.0 ? std::sqrt(1.0 - ab_prev) : c * std::sqrt(1.0 - ab_prev);
  return detail::combine(x0, std::sqrt(ab_prev), eps, noise);
}

/// The same step with the noise weight taken literally from
/// exact_noise_coefficient; used to cross-check the factored form.
template <class T>
LogitSimplexSeq<T> reverse_step_exact_literal(const LogitSimplexSeq<T>& x0,
                                              const LogitSimplexSeq<T>& eps, int t,
                                              const NoiseSchedule& schedule) {
  if (t < 1) fail(ErrorKind::range, "reverse_step_exact: t must be >= 1");
  return detail::combine(x0, std::sqrt(schedule.alpha_bar(t - 1)), eps,
                         exact_noise_coefficient(t, schedule));
}

/// Deterministic part of the approximate step with the same eps:
/// sqrt(alpha_bar_{t-1}) x0 - sqrt(1 - alpha_bar_{t-1}) eps.
template <class T>
LogitSimplexSeq<T> reverse_step_approx(const LogitSimplexSeq<T>& x0, const LogitSimplexSeq<T>& eps,
                                       int t, const NoiseSchedule& schedule) {
  if (t < 1) fail(ErrorKind::range, "reverse_step_approx: t must be >= 1");
  const double ab_prev = schedule.alpha_bar(t - 1);
  return detail::combine(x0, std::sqrt(ab_prev), eps, std::sqrt(1.0 - ab_prev));
}

/// Truncates at the first EOS, then drops PAD.
inline std::vector<int> decode_output(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == token::eos) break;
    if (t != token::pad) out.push_back(t);
  }
  return out;
}

/// Full-sequence reverse process for a batch of sources sharing one target
/// window. Sequence b draws from `rngs[b]`. Returns raw (undecoded) tokens.
template <class T>
std::vector<std::vector<int>> generate_raw_batch(const Encoder<T>& model,
                                                 const NoiseSchedule& schedule,
                                                 const std::vector<std::vector<int>>& sources,
                                                 std::size_t window, int num_steps,
                                                 bool self_conditioning, std::vector<Rng>& rngs) {
  const std::size_t B = sources.size(), L = window;
  if (B == 0) return {};
  if (rngs.size() != B) fail(ErrorKind::usage, "generate: one rng per sequence required");
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  const T k = static_cast<T>(schedule.simplex_scale());
  const bool concat = model.config().concat_self_cond;
  const std::vector<int> grid = timestep_grid(num_steps, schedule.train_steps());

  std::vector<LogitSimplexSeq<T>> state;
  state.reserve(B);
  for (std::size_t b = 0; b < B; ++b) state.push_back(sample_prior<T>(L, V, k, rngs[b]));
  std::vector<std::optional<LogitSimplexSeq<T>>> prev(B);
  std::vector<std::vector<int>> out(B);

  ModelBatch<T> batch;
  batch.sources = sources;
  batch.target_len = L;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int t = grid[i];
    batch.time.assign(B, static_cast<T>(schedule.scaled_time(t)));
    batch.target_probs = Tensor<T>(Shape{B * L, V});
    batch.prev_probs.reset();
    if (concat && prev[0]) batch.prev_probs = Tensor<T>(Shape{B * L, V});
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor<T> p = concat ? softmax_rows(state[b]) : self_cond_average(state[b], prev[b]);
      std::copy(p.values.begin(), p.values.end(), batch.target_probs.values.begin() + b * L * V);
      if (batch.prev_probs) {
        const Tensor<T> q = softmax_rows(*prev[b]);
        std::copy(q.values.begin(), q.values.end(), batch.prev_probs->values.begin() + b * L * V);
      }
    }
    const Tensor<T> logits = model.predict(batch);
    const bool last = i + 1 == grid.size();
    for (std::size_t b = 0; b < B; ++b) {
      LogitSimplexSeq<T> pred(L, V, k);
      std::copy_n(logits.values.begin() + b * L * V, L * V, pred.logits.begin());
      LogitSimplexSeq<T> s_hat = project_argmax(pred);
      if (last) {
        out[b] = argmax_tokens(s_hat);
      } else {
        state[b] = reverse_step(s_hat, grid[i + 1], schedule, rngs[b]);
        if (self_conditioning) prev[b] = std::move(s_hat);
      }
    }
  }
  return out;
}

/// Raw tokens of one sequence in full_nar mode.
template <class T>
std::vector<int> generate_raw(const Encoder<T>& model, const NoiseSchedule& schedule,
                              const std::vector<int>& source, const GenerationConfig& cfg, Rng& rng) {
  cfg.validate(schedule);
  std::vector<Rng> rngs{rng};
  auto out = generate_raw_batch(model, schedule, {source}, static_cast<std::size_t>(cfg.max_target_len),
                                cfg.num_steps, cfg.self_conditioning, rngs);
  rng = rngs[0];
  return out[0];
}

/// Left-to-right block decoding: each block runs the whole reverse process on
/// a block_size window, then joins the context as clean (frozen) tokens.
template <class T>
std::vector<int> generate_block_raw(const Encoder<T>& model, const NoiseSchedule& schedule,
                                    const std::vector<int>& source, const GenerationConfig& cfg,
                                    Rng& rng) {
  cfg.validate(schedule);
  const auto total = static_cast<std::size_t>(cfg.max_target_len);
  const auto w = static_cast<std::size_t>(cfg.block_size);
  const auto ctx_budget = static_cast<std::size_t>(model.config().max_source_len);
  std::vector<int> context = source, out;
  std::vector<Rng> rngs{rng};
  while (out.size() < total) {
    if (context.size() > ctx_budget) {
      fail(ErrorKind::sequence_length, "block decoding context of " + std::to_string(context.size()) +
                                           " tokens exceeds budget " + std::to_string(ctx_budget));
    }
    const std::size_t window = std::min(w, total - out.size());
    auto block = generate_raw_batch(model, schedule, {context}, window, cfg.num_steps,
                                    cfg.self_conditioning, rngs)[0];
    out.insert(out.end(), block.begin(), block.end());
    context.insert(context.end(), block.begin(), block.end());
    if (cfg.stop_at_end && std::any_of(block.begin(), block.end(), [](int t) {
          return t == token::eos || t == token::pad;
        })) {
      break;
    }
  }
  rng = rngs[0];
  return out;
}

template <class T>
std::vector<int> generate(const Encoder<T>& model, const NoiseSchedule& schedule,
                          const std::vector<int>& source, const GenerationConfig& cfg, Rng& rng) {
  return decode_output(generate_raw(model, schedule, source, cfg, rng));
}

template <class T>
std::vector<int> generate_block(const Encoder<T>& model, const NoiseSchedule& schedule,
                                const std::vector<int>& source, const GenerationConfig& cfg, Rng& rng) {
  return decode_output(generate_block_raw(model, schedule, source, cfg, rng));
}

/// Decoded outputs for many sources. Sequence i uses sequence_seed(cfg.seed,
/// first_index + i). Full-NAR sources are processed `batch_size` at a time.
template <class T>
std::vector<std::vector<int>> generate_all(const Encoder<T>& model, const NoiseSchedule& schedule,
                                           const std::vector<std::vector<int>>& sources,
                                           const GenerationConfig& cfg, std::size_t batch_size = 64,
                                           std::uint64_t first_index = 0) {
  cfg.validate(schedule);
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  if (cfg.mode == DecodeMode::block) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      Rng rng(sequence_seed(cfg.seed, first_index + i));
      out.push_back(generate_block(model, schedule, sources[i], cfg, rng));
    }
    return out;
  }
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t lo = 0; lo < sources.size(); lo += batch_size) {
    const std::size_t hi = std::min(sources.size(), lo + batch_size);
    std::vector<std::vector<int>> chunk(sources.begin() + static_cast<std::ptrdiff_t>(lo),
                                        sources.begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<Rng> rngs;
    for (std::size_t i = lo; i < hi; ++i) rngs.emplace_back(sequence_seed(cfg.seed, first_index + i));
    auto raw = generate_raw_batch(model, schedule, chunk, static_cast<std::size_t>(cfg.max_target_len),
                                  cfg.num_steps, cfg.self_conditioning, rngs);
    for (auto& r : raw) out.push_back(decode_output(r));
  }
  return out;
}

}  // namespace simplexdiff
