#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/ops.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/schedule.hpp"
#include "simplexdiff/tensor.hpp"

namespace simplexdiff {

/// A length x vocab matrix of scaled logits. Clean sequences hold +k at the
/// token and -k elsewhere on every row; noised sequences are unconstrained.
template <class T>
struct LogitSimplexSeq {
  std::size_t length = 0;
  std::size_t vocab = 0;
  T scale = T(5);
  std::vector<T> logits;

  LogitSimplexSeq() = default;
  LogitSimplexSeq(std::size_t l, std::size_t v, T k)
      : length(l), vocab(v), scale(k), logits(l * v, T(0)) {}

  T& at(std::size_t pos, std::size_t tok) { return logits[pos * vocab + tok]; }
  const T& at(std::size_t pos, std::size_t tok) const { return logits[pos * vocab + tok]; }
  std::span<const T> row(std::size_t pos) const {
    return {logits.data() + pos * vocab, vocab};
  }

  bool is_clean() const {
    for (std::size_t i = 0; i < length; ++i) {
      std::size_t hot = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        const T v = at(i, j);
        if (v == scale) {
          ++hot;
        } else if (v != -scale) {
          return false;
        }
      }
      if (hot != 1) return false;
    }
    return true;
  }

  friend bool operator==(const LogitSimplexSeq&, const LogitSimplexSeq&) = default;
};

template <class T>
LogitSimplexSeq<T> encode_tokens(std::span<const int> tokens, T k, std::size_t vocab) {
  LogitSimplexSeq<T> s(tokens.size(), vocab, k);
  std::fill(s.logits.begin(), s.logits.end(), -k);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab) {
      fail(ErrorKind::vocabulary, "token id " + std::to_string(tokens[i]) + " at position " +
                                      std::to_string(i) + " outside [0," +
                                      std::to_string(vocab) + ")");
    }
    s.at(i, static_cast<std::size_t>(tokens[i])) = k;
  }
  return s;
}

template <class T>
LogitSimplexSeq<T> encode_tokens(const std::vector<int>& tokens, T k, std::size_t vocab) {
  return encode_tokens<T>(std::span<const int>(tokens), k, vocab);
}

/// sqrt(alpha_bar) * S + sqrt(1 - alpha_bar) * eps with eps ~ N(0, k^2 I).
/// This single map serves both forward noising and the approximate reverse
/// step, which differ only in which alpha_bar they are handed.
template <class T>
LogitSimplexSeq<T> renoise(const LogitSimplexSeq<T>& s, double alpha_bar, Rng& rng) {
  LogitSimplexSeq<T> out = s;
  const double signal = std::sqrt(alpha_bar);
  const double noise = std::sqrt(1.0 - alpha_bar) * static_cast<double>(s.scale);
  if (noise == 0.0) return out;
  for (auto& v : out.logits) {
    v = static_cast<T>(signal * static_cast<double>(v) + noise * rng.normal());
  }
  return out;
}

template <class T>
LogitSimplexSeq<T> add_noise(const LogitSimplexSeq<T>& s0, int t, const NoiseSchedule& schedule,
                             Rng& rng) {
  return renoise(s0, schedule.alpha_bar(t), rng);
}

/// Per-row argmax; ties go to the lowest index.
template <class T>
std::vector<int> argmax_tokens(const LogitSimplexSeq<T>& s) {
  std::vector<int> out(s.length, 0);
  for (std::size_t i = 0; i < s.length; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < s.vocab; ++j) {
      if (s.at(i, j) > s.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <class T>
LogitSimplexSeq<T> project_argmax(const LogitSimplexSeq<T>& s) {
  return encode_tokens<T>(argmax_tokens(s), s.scale, s.vocab);
}

/// Rowwise softmax of a logit matrix, as a [length, vocab] tensor.
template <class T>
Tensor<T> softmax_rows(const LogitSimplexSeq<T>& s) {
  Tensor<T> p(Shape{s.length, s.vocab}, s.logits);
  for (std::size_t i = 0; i < s.length; ++i) softmax_inplace(p.values.data() + i * s.vocab, s.vocab);
  return p;
}

/// h = p . E for a [L, |V|] distribution matrix and a [|V|, d] embedding.
template <class T>
Tensor<T> probs_to_embedding(const Tensor<T>& probs, const Tensor<T>& embedding,
                             double tolerance = 1e-5) {
  if (probs.rank() != 2 || embedding.rank() != 2 || probs.dim(1) != embedding.dim(0)) {
    fail(ErrorKind::dimension, "probs_to_embedding: " + shape_str(probs.shape) + " x " +
                                   shape_str(embedding.shape));
  }
  const std::size_t l = probs.dim(0), v = probs.dim(1), d = embedding.dim(1);
  for (std::size_t i = 0; i < l; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += static_cast<double>(probs.at(i, j));
    if (std::abs(total - 1.0) > tolerance) {
      fail(ErrorKind::normalization, "probs_to_embedding: row " + std::to_string(i) +
                                         " sums to " + std::to_string(total));
    }
  }
  Tensor<T> h(Shape{l, d});
  detail::as_matrix(h.values, l, d).noalias() =
      detail::as_matrix(probs.values, l, v) * detail::as_matrix(embedding.values, v, d);
  return h;
}

/// Averaged self-conditioning: 0.5 * (softmax(S_t) + softmax(S_prev)). A
/// zeroed self-condition is passed as nullopt and leaves softmax(S_t) alone.
template <class T>
Tensor<T> self_cond_average(const LogitSimplexSeq<T>& st,
                            const std::optional<LogitSimplexSeq<T>>& prev) {
  Tensor<T> p = softmax_rows(st);
  if (!prev) return p;
  if (prev->length != st.length || prev->vocab != st.vocab) {
    fail(ErrorKind::dimension, "self_cond_average: [" + std::to_string(st.length) + "x" +
                                   std::to_string(st.vocab) + "] vs [" +
                                   std::to_string(prev->length) + "x" +
                                   std::to_string(prev->vocab) + "]");
  }
  const Tensor<T> q = softmax_rows(*prev);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = T(0.5) * (p[i] + q[i]);
  return p;
}

template <class T>
LogitSimplexSeq<T> sample_prior(std::size_t length, std::size_t vocab, T k, Rng& rng) {
  if (length == 0 || vocab == 0) fail(ErrorKind::range, "sample_prior: empty shape");
  LogitSimplexSeq<T> s(length, vocab, k);
  for (auto& v : s.logits) v = static_cast<T>(static_cast<double>(k) * rng.normal());
  return s;
}

}  // namespace simplexdiff
