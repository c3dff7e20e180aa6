#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/tensor.hpp"

namespace simplexdiff {

template <class T>
using MatrixR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatrixR<T>>;
template <class T>
using ConstMapR = Eigen::Map<const MatrixR<T>>;
template <class T>
using StridedMap = Eigen::Map<MatrixR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const MatrixR<T>, 0, Eigen::OuterStride<>>;

namespace detail {

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) fail(ErrorKind::usage, "operands recorded on different tapes");
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    fail(ErrorKind::dimension,
         std::string(op) + " expects a matrix, got " + shape_str(t.shape));
  }
}

template <class T>
ConstMapR<T> as_matrix(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return ConstMapR<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class T>
MapR<T> as_matrix(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MapR<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    fail(ErrorKind::dimension,
         "matmul shape mismatch: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  }
  Tensor<T> out(Shape{m, n});
  detail::as_matrix(out.values, m, n).noalias() =
      detail::as_matrix(av.values, m, k) * detail::as_matrix(bv.values, k, n);
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ai = a.id, bi = b.id;
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [ai, bi, oi, m, k, n](Tape<T>& tp) {
    auto g = detail::as_matrix(tp.upstream(oi), m, n);
    if (tp.requires_grad(ai)) {
      detail::as_matrix(tp.grad_buffer(ai), m, k).noalias() +=
          g * detail::as_matrix(tp.value(bi).values, k, n).transpose();
    }
    if (tp.requires_grad(bi)) {
      detail::as_matrix(tp.grad_buffer(bi), k, n).noalias() +=
          detail::as_matrix(tp.value(ai).values, m, k).transpose() * g;
    }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape != bv.shape) {
    fail(ErrorKind::dimension,
         "add shape mismatch: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ai = a.id, bi = b.id;
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [ai, bi, oi](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    for (std::size_t id : {ai, bi}) {
      if (!tp.requires_grad(id)) continue;
      auto& ga = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape != bv.shape) {
    fail(ErrorKind::dimension,
         "mul shape mismatch: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ai = a.id, bi = b.id;
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [ai, bi, oi](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      const auto& bv = tp.value(bi).values;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      const auto& av = tp.value(ai).values;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ai = a.id;
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), a.requires_grad(), [ai, oi, factor](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  T total = T(0);
  for (const T& v : av.values) total += v;
  Tensor<T> out(Shape{}, std::vector<T>{total});
  const std::size_t ai = a.id;
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), a.requires_grad(), [ai, oi](Tape<T>& tp) {
    const T g = tp.upstream(oi)[0];
    for (auto& v : tp.grad_buffer(ai)) v += g;
  });
}

/// x[R,n] + bias[n], broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t n = bv.size();
  if (xv.rank() == 0 || xv.shape.back() != n) {
    fail(ErrorKind::dimension,
         "add_bias shape mismatch: " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
  }
  const std::size_t rows = xv.size() / n;
  Tensor<T> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + bv[c];
  }
  const bool rg = x.requires_grad() || bias.requires_grad();
  const std::size_t xi = x.id, bi = bias.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [xi, bi, oi, rows, n](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    if (tp.requires_grad(xi)) {
      auto& gx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      }
    }
  });
}

/// x·W + b with W stored [in, out].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(x, weight), bias);
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T a = T(0.044715);
  const Tensor<T>& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  Eigen::Map<const Arr> xa(xv.values.data(), n);
  auto th = std::make_shared<Arr>(n);
  Arr& ta = *th;
  ta = (c * (xa + a * xa.cube())).tanh();
  Tensor<T> out(xv.shape);
  Eigen::Map<Arr>(out.values.data(), n) = T(0.5) * xa * (T(1) + ta);
  const std::size_t xi = x.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), x.requires_grad(), [xi, oi, n, th](Tape<T>& tp) {
    Eigen::Map<const Arr> g(tp.upstream(oi).data(), n);
    Eigen::Map<const Arr> xa(tp.value(xi).values.data(), n);
    const Arr& ta = *th;
    Eigen::Map<Arr> gx(tp.grad_buffer(xi).data(), n);
    gx += g * (T(0.5) * (T(1) + ta) +
               T(0.5) * xa * (T(1) - ta.square()) * (c * (T(1) + T(3) * a * xa.square())));
  });
}

/// Normalizes each row of the last dimension, then applies gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = gain.value().size();
  if (d == 0 || xv.rank() == 0 || xv.shape.back() != d || bias.value().size() != d) {
    fail(ErrorKind::dimension, "layer_norm shape mismatch: " + shape_str(xv.shape) +
                                   " with gain " + shape_str(gain.shape()));
  }
  const std::size_t rows = xv.size() / d;
  const auto& gv = gain.value().values;
  const auto& bv = bias.value().values;
  Tensor<T> out(xv.shape);
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.values.data() + r * d;
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [=](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    const auto& gv = tp.value(gi).values;
    if (tp.requires_grad(gi)) {
      auto& gg = tp.grad_buffer(gi);
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
    if (tp.requires_grad(xi)) {
      auto& gx = tp.grad_buffer(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = g[r * d + c] * gv[c];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + c];
        }
        mean_dh /= T(d);
        mean_dh_h /= T(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = g[r * d + c] * gv[c];
          gx[r * d + c] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
        }
      }
    }
  });
}

namespace detail {

/// (outer, n, inner) decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    fail(ErrorKind::dimension,
         "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Max-subtracted softmax over a contiguous buffer of length n.
template <class T>
void softmax_inplace(T* row, std::size_t n, std::size_t stride = 1) {
  if (stride == 1) {
    thread_local Eigen::Array<T, Eigen::Dynamic, 1> buf;
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> r(row, static_cast<Eigen::Index>(n));
    buf = r;
    buf = (buf - buf.maxCoeff()).exp();
    buf *= T(1) / buf.sum();
    r = buf;
    return;
  }
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, row[i * stride]);
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T e = std::exp(row[i * stride] - m);
    row[i * stride] = e;
    z += e;
  }
  const T inv = T(1) / z;
  for (std::size_t i = 0; i < n; ++i) row[i * stride] *= inv;
}

template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  const auto s = detail::split_axis(xv.shape, axis);
  Tensor<T> out = xv;
  out.clear_grad();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      softmax_inplace(out.values.data() + o * s.n * s.inner + in, s.n, s.inner);
    }
  }
  const std::size_t xi = x.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), x.requires_grad(), [xi, oi, s](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    const auto& y = tp.value(oi).values;
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T dot = T(0);
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t j = base + i * s.inner;
          dot += g[j] * y[j];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t j = base + i * s.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

/// Softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> x) {
  return softmax(x, x.shape().size() - 1);
}

/// Mean over masked rows of -log softmax(logits)[target].
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets,
                     const std::vector<bool>& mask) {
  const Tensor<T>& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy");
  const std::size_t rows = lv.dim(0), v = lv.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    fail(ErrorKind::dimension, "cross_entropy: logits " + shape_str(lv.shape) + " with " +
                                   std::to_string(targets.size()) + " targets and " +
                                   std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (bool m : mask) count += m ? 1 : 0;
  if (count == 0) fail(ErrorKind::empty_loss, "cross_entropy: mask selects no positions");

  auto probs = std::make_shared<std::vector<T>>(lv.values);
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
      fail(ErrorKind::vocabulary, "cross_entropy: target id " + std::to_string(tgt) +
                                      " outside [0," + std::to_string(v) + ")");
    }
    const T* row = lv.values.data() + r * v;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < v; ++c) m = std::max(m, row[c]);
    T z = T(0);
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - m);
    total += (m + std::log(z)) - row[tgt];
    softmax_inplace(probs->data() + r * v, v);
  }
  const T inv_count = T(1) / T(count);
  Tensor<T> out(Shape{}, std::vector<T>{total * inv_count});
  const std::size_t li = logits.id;
  Tape<T>& tape = *logits.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), logits.requires_grad(),
                     [=](Tape<T>& tp) {
                       const T g = tp.upstream(oi)[0] * inv_count;
                       auto& gl = tp.grad_buffer(li);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!mask[r]) continue;
                         for (std::size_t c = 0; c < v; ++c) {
                           gl[r * v + c] += g * (*probs)[r * v + c];
                         }
                         gl[r * v + static_cast<std::size_t>(targets[r])] -= g;
                       }
                     });
}

/// out[i] = x[index[i]] (rows of a matrix). Backward scatter-adds.
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index) {
  const Tensor<T>& xv = x.value();
  detail::require_rank2(xv, "gather_rows");
  const std::size_t n = xv.dim(1), m = xv.dim(0);
  Tensor<T> out(Shape{index.size(), n});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= m) {
      fail(ErrorKind::range, "gather_rows: row " + std::to_string(index[i]) +
                                 " outside " + shape_str(xv.shape));
    }
    std::copy_n(xv.values.data() + index[i] * n, n, out.values.data() + i * n);
  }
  const std::size_t xi = x.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), x.requires_grad(),
                     [xi, oi, n, index = std::move(index)](Tape<T>& tp) {
                       const auto& g = tp.upstream(oi);
                       auto& gx = tp.grad_buffer(xi);
                       for (std::size_t i = 0; i < index.size(); ++i) {
                         for (std::size_t c = 0; c < n; ++c) gx[index[i] * n + c] += g[i * n + c];
                       }
                     });
}

/// Stacks the rows of a on top of the rows of b.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_rank2(av, "concat_rows");
  detail::require_rank2(bv, "concat_rows");
  if (av.dim(1) != bv.dim(1)) {
    fail(ErrorKind::dimension,
         "concat_rows width mismatch: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Tensor<T> out(Shape{av.dim(0) + bv.dim(0), av.dim(1)});
  std::copy(av.values.begin(), av.values.end(), out.values.begin());
  std::copy(bv.values.begin(), bv.values.end(), out.values.begin() + av.size());
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ai = a.id, bi = b.id, na = av.size();
  Tape<T>& tape = *a.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), rg, [ai, bi, oi, na](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

/// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) fail(ErrorKind::range, "dropout rate must be < 1");
  const Tensor<T>& xv = x.value();
  auto keep = std::make_shared<std::vector<T>>(xv.size());
  const T s = T(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*keep)[i] = rng.uniform() < p ? T(0) : s;
    out[i] = xv[i] * (*keep)[i];
  }
  const std::size_t xi = x.id;
  Tape<T>& tape = *x.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), x.requires_grad(), [xi, oi, keep](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
  });
}

/// Layout of a batch of equal-length sequences for multi-head attention.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  /// batch*seq flags; false excludes that position as a key. Empty = all keys.
  std::vector<bool> key_mask;
};

/// Scaled dot-product multi-head self-attention on packed projections.
/// `qkv` is [batch*seq, 3d] holding Q | K | V; the result is [batch*seq, d].
template <class T>
Var<T> attention(Var<T> qkv, const AttentionLayout& layout) {
  const Tensor<T>& in = qkv.value();
  detail::require_rank2(in, "attention");
  const std::size_t B = layout.batch, N = layout.seq, H = layout.heads;
  if (in.dim(0) != B * N || in.dim(1) % (3 * H) != 0) {
    fail(ErrorKind::dimension, "attention: packed input " + shape_str(in.shape) +
                                   " incompatible with batch " + std::to_string(B) +
                                   ", seq " + std::to_string(N) + ", heads " +
                                   std::to_string(H));
  }
  if (!layout.key_mask.empty() && layout.key_mask.size() != B * N) {
    fail(ErrorKind::dimension, "attention: key mask length mismatch");
  }
  const std::size_t d = in.dim(1) / 3, dh = d / H;
  const auto ld = static_cast<Eigen::Index>(3 * d);
  const auto ldo = static_cast<Eigen::Index>(d);
  const auto en = static_cast<Eigen::Index>(N), edh = static_cast<Eigen::Index>(dh);
  const T inv_sqrt = T(1) / std::sqrt(T(dh));

  auto probs = std::make_shared<std::vector<T>>(B * H * N * N);
  Tensor<T> out(Shape{B * N, d});
  MatrixR<T> scores(en, en);
  for (std::size_t b = 0; b < B; ++b) {
    const T* base = in.values.data() + b * N * 3 * d;
    for (std::size_t h = 0; h < H; ++h) {
      ConstStridedMap<T> q(base + h * dh, en, edh, Eigen::OuterStride<>(ld));
      ConstStridedMap<T> k(base + d + h * dh, en, edh, Eigen::OuterStride<>(ld));
      ConstStridedMap<T> v(base + 2 * d + h * dh, en, edh, Eigen::OuterStride<>(ld));
      scores.noalias() = (q * k.transpose()) * inv_sqrt;
      if (!layout.key_mask.empty()) {
        for (std::size_t j = 0; j < N; ++j) {
          if (!layout.key_mask[b * N + j]) {
            scores.col(static_cast<Eigen::Index>(j)).setConstant(-std::numeric_limits<T>::infinity());
          }
        }
      }
      for (std::size_t i = 0; i < N; ++i) softmax_inplace(scores.data() + i * N, N);
      MapR<T>(probs->data() + (b * H + h) * N * N, en, en) = scores;
      StridedMap<T> o(out.values.data() + b * N * d + h * dh, en, edh, Eigen::OuterStride<>(ldo));
      o.noalias() = scores * v;
    }
  }

  const std::size_t xi = qkv.id;
  Tape<T>& tape = *qkv.tape;
  const std::size_t oi = tape.size();
  return tape.record(std::move(out), qkv.requires_grad(), [=](Tape<T>& tp) {
    const auto& g = tp.upstream(oi);
    const auto& xv = tp.value(xi).values;
    auto& gx = tp.grad_buffer(xi);
    MatrixR<T> da(en, en), ds(en, en);
    for (std::size_t b = 0; b < B; ++b) {
      const T* base = xv.data() + b * N * 3 * d;
      T* gbase = gx.data() + b * N * 3 * d;
      for (std::size_t h = 0; h < H; ++h) {
        ConstStridedMap<T> q(base + h * dh, en, edh, Eigen::OuterStride<>(ld));
        ConstStridedMap<T> k(base + d + h * dh, en, edh, Eigen::OuterStride<>(ld));
        ConstStridedMap<T> v(base + 2 * d + h * dh, en, edh, Eigen::OuterStride<>(ld));
        StridedMap<T> gq(gbase + h * dh, en, edh, Eigen::OuterStride<>(ld));
        StridedMap<T> gk(gbase + d + h * dh, en, edh, Eigen::OuterStride<>(ld));
        StridedMap<T> gv(gbase + 2 * d + h * dh, en, edh, Eigen::OuterStride<>(ld));
        ConstStridedMap<T> go(g.data() + b * N * d + h * dh, en, edh, Eigen::OuterStride<>(ldo));
        ConstMapR<T> a(probs->data() + (b * H + h) * N * N, en, en);
        gv.noalias() += a.transpose() * go;
        da.noalias() = go * v.transpose();
        for (Eigen::Index i = 0; i < en; ++i) {
          T dot = T(0);
          for (Eigen::Index j = 0; j < en; ++j) dot += da(i, j) * a(i, j);
          ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
        }
        ds *= inv_sqrt;
        gq.noalias() += ds * k;
        gk.noalias() += ds.transpose() * q;
      }
    }
  });
}

}  // namespace simplexdiff
