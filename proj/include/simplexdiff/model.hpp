#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/ops.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/tensor.hpp"

namespace simplexdiff {

/// Reserved token ids shared by the model and the vocabulary.
namespace token {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int sep = 3;
inline constexpr int unk = 4;
inline constexpr int num_reserved = 5;
}  // namespace token

struct EncoderConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 128;
  int d_ff = 512;
  /// Size of the learned position table.
  int max_len = 128;
  /// Source context budget. The separator sits at this position and target
  /// position i at max_source_len + 1 + i, whatever the actual source length.
  int max_source_len = 63;
  int vocab_size = 0;
  double dropout = 0.1;
  /// Adds a [2|V|, d] input projection for concatenation-style self-conditioning.
  bool concat_self_cond = false;

  int max_target_len() const { return max_len - max_source_len - 1; }

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::configuration, what); };
    if (layers < 1) bad("model.layers must be >= 1");
    if (heads < 1) bad("model.heads must be >= 1");
    if (d_model < 1 || d_model % heads != 0) bad("model.d_model must be a positive multiple of model.heads");
    if (d_ff < 1) bad("model.d_ff must be >= 1");
    if (vocab_size < token::num_reserved + 1) bad("model.vocab_size must exceed the reserved ids");
    if (max_source_len < 0 || max_target_len() < 1) {
      bad("model.max_len must be >= model.max_source_len + 2");
    }
    if (dropout < 0.0 || dropout >= 1.0) bad("model.dropout must be in [0,1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <class T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;
  Tensor<T> out_weight, out_bias;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ff1_weight, ff1_bias;
  Tensor<T> ff2_weight, ff2_bias;
};

template <class T>
struct ModelParams {
  Tensor<T> token_embedding;     // [|V|, d]
  Tensor<T> position_embedding;  // [max_len, d]
  Tensor<T> time_weight;         // [1, d]
  Tensor<T> time_bias;           // [d]
  Tensor<T> self_cond_weight;    // [2|V|, d], empty unless concat_self_cond
  std::vector<LayerParams<T>> blocks;
  Tensor<T> final_gain, final_bias;
  Tensor<T> vocab_weight;  // [d, |V|]
  Tensor<T> vocab_bias;    // [|V|]

  template <class F>
  void for_each(F&& fn) {
    visit(*this, fn);
  }
  template <class F>
  void for_each(F&& fn) const {
    visit(*this, fn);
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  void set_requires_grad(bool on) {
    for_each([on](const std::string&, Tensor<T>& t) { t.requires_grad = on; });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& fn) {
    fn("embed.token", self.token_embedding);
    fn("embed.position", self.position_embedding);
    fn("embed.time.weight", self.time_weight);
    fn("embed.time.bias", self.time_bias);
    if (!self.self_cond_weight.values.empty()) fn("embed.self_cond.weight", self.self_cond_weight);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      fn(p + "ln1.gain", b.ln1_gain);
      fn(p + "ln1.bias", b.ln1_bias);
      fn(p + "attn.qkv.weight", b.qkv_weight);
      fn(p + "attn.qkv.bias", b.qkv_bias);
      fn(p + "attn.out.weight", b.out_weight);
      fn(p + "attn.out.bias", b.out_bias);
      fn(p + "ln2.gain", b.ln2_gain);
      fn(p + "ln2.bias", b.ln2_bias);
      fn(p + "ff1.weight", b.ff1_weight);
      fn(p + "ff1.bias", b.ff1_bias);
      fn(p + "ff2.weight", b.ff2_weight);
      fn(p + "ff2.bias", b.ff2_bias);
    }
    fn("final.gain", self.final_gain);
    fn("final.bias", self.final_bias);
    fn("vocab.weight", self.vocab_weight);
    fn("vocab.bias", self.vocab_bias);
  }
};

/// Allocates parameters with the documented shapes: matrices ~ N(0, 0.02),
/// biases zero, layer-norm gains one.
template <class T>
ModelParams<T> init_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  auto normal = [&rng](Shape s) {
    Tensor<T> t(std::move(s));
    for (auto& x : t.values) x = static_cast<T>(0.02 * rng.normal());
    return t;
  };
  auto zeros = [](std::size_t n) { return Tensor<T>(Shape{n}, T(0)); };
  auto ones = [](std::size_t n) { return Tensor<T>(Shape{n}, T(1)); };

  ModelParams<T> p;
  p.token_embedding = normal({v, d});
  p.position_embedding = normal({static_cast<std::size_t>(cfg.max_len), d});
  p.time_weight = normal({1, d});
  p.time_bias = zeros(d);
  if (cfg.concat_self_cond) p.self_cond_weight = normal({2 * v, d});
  for (int i = 0; i < cfg.layers; ++i) {
    LayerParams<T> b;
    b.ln1_gain = ones(d);
    b.ln1_bias = zeros(d);
    b.qkv_weight = normal({d, 3 * d});
    b.qkv_bias = zeros(3 * d);
    b.out_weight = normal({d, d});
    b.out_bias = zeros(d);
    b.ln2_gain = ones(d);
    b.ln2_bias = zeros(d);
    b.ff1_weight = normal({d, ff});
    b.ff1_bias = zeros(ff);
    b.ff2_weight = normal({ff, d});
    b.ff2_bias = zeros(d);
    p.blocks.push_back(std::move(b));
  }
  p.final_gain = ones(d);
  p.final_bias = zeros(d);
  p.vocab_weight = normal({d, v});
  p.vocab_bias = zeros(v);
  return p;
}

/// One forward batch. Every example shares the target length.
template <class T>
struct ModelBatch {
  std::vector<std::vector<int>> sources;
  std::size_t target_len = 0;
  /// [batch * target_len, |V|] rows of probabilities for the diffused span.
  Tensor<T> target_probs;
  /// Previous-prediction probabilities for the concatenation path; absent
  /// means the zero self-condition.
  std::optional<Tensor<T>> prev_probs;
  /// t / T per example.
  std::vector<T> time;

  std::size_t size() const { return sources.size(); }
};

template <class T>
struct EncoderInput {
  Var<T> hidden;
  AttentionLayout layout;
  /// Physical rows of the target span, in (example, position) order.
  std::vector<std::size_t> target_rows;
};

/// Transformer encoder over (source || separator || diffused target).
/// Pre-norm residual blocks, learned absolute positions, linear time
/// embedding added to the diffused positions only.
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig cfg, ModelParams<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }
  Encoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)), params_(init_params<T>(cfg_, rng)) {}

  const EncoderConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  std::size_t forward_passes() const { return forward_passes_; }
  void reset_forward_passes() { forward_passes_ = 0; }

  /// weight * t + bias.
  Tensor<T> time_embed(double t_scaled) const {
    check_time(t_scaled);
    Tensor<T> out = params_.time_bias;
    out.clear_grad();
    out.requires_grad = false;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += static_cast<T>(t_scaled) * params_.time_weight[i];
    }
    return out;
  }

  /// Embeds a batch into the joint sequence (untracked parameters).
  EncoderInput<T> build_input(Tape<T>& tape, const ModelBatch<T>& batch) const {
    return build_input_impl(tape, batch, false);
  }

  /// Logits over the target span, [batch*L, |V|], with parameters read-only.
  Var<T> forward(Tape<T>& tape, const ModelBatch<T>& batch) const {
    return forward_impl(tape, batch, false, nullptr);
  }

  /// Same, recording parameters so backward accumulates into their grads.
  /// Dropout is active only when `dropout_rng` is given.
  Var<T> forward_tracked(Tape<T>& tape, const ModelBatch<T>& batch, Rng* dropout_rng = nullptr) {
    return forward_impl(tape, batch, true, dropout_rng);
  }

  /// Untracked forward returning plain logits.
  Tensor<T> predict(const ModelBatch<T>& batch) const {
    Tape<T> tape;
    Var<T> out = forward(tape, batch);
    Tensor<T> logits = out.value();
    return logits;
  }

 private:
  // `track` is only ever true when reached from a non-const entry point.
  EncoderInput<T> build_input_impl(Tape<T>& tape, const ModelBatch<T>& batch, bool track) const {
    const std::size_t B = batch.size();
    const std::size_t L = batch.target_len;
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    if (B == 0) fail(ErrorKind::usage, "empty model batch");
    if (L == 0) fail(ErrorKind::sequence_length, "target length must be >= 1");
    if (L > static_cast<std::size_t>(cfg_.max_target_len())) {
      fail(ErrorKind::sequence_length, "target length " + std::to_string(L) + " exceeds budget " +
                                           std::to_string(cfg_.max_target_len()));
    }
    if (batch.time.size() != B) fail(ErrorKind::dimension, "one time value per example required");
    if (batch.target_probs.shape != Shape{B * L, V}) {
      fail(ErrorKind::dimension, "target_probs must be " + shape_str(Shape{B * L, V}) + ", got " +
                                     shape_str(batch.target_probs.shape));
    }
    check_normalized(batch.target_probs);
    std::size_t S = 0;
    for (const auto& src : batch.sources) {
      if (src.size() > static_cast<std::size_t>(cfg_.max_source_len)) {
        fail(ErrorKind::sequence_length, "source length " + std::to_string(src.size()) +
                                             " exceeds budget " + std::to_string(cfg_.max_source_len));
      }
      for (int id : src) {
        if (id < 0 || static_cast<std::size_t>(id) >= V) {
          fail(ErrorKind::vocabulary, "source token " + std::to_string(id) + " outside vocabulary");
        }
      }
      S = std::max(S, src.size());
    }
    for (T t : batch.time) check_time(static_cast<double>(t));

    const std::size_t N = S + 1 + L;
    const auto src_budget = static_cast<std::size_t>(cfg_.max_source_len);

    std::vector<std::size_t> ctx_ids;
    ctx_ids.reserve(B * (S + 1));
    std::vector<std::size_t> order(B * N), positions(B * N);
    AttentionLayout layout{B, N, static_cast<std::size_t>(cfg_.heads), std::vector<bool>(B * N, true)};
    std::vector<std::size_t> target_rows;
    target_rows.reserve(B * L);
    const std::size_t ctx_rows = B * (S + 1);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& src = batch.sources[b];
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t row = b * N + j;
        if (j < S) {
          const bool real = j < src.size();
          ctx_ids.push_back(static_cast<std::size_t>(real ? src[j] : token::pad));
          layout.key_mask[row] = real;
          order[row] = ctx_ids.size() - 1;
          positions[row] = j;
        } else if (j == S) {
          ctx_ids.push_back(static_cast<std::size_t>(token::sep));
          order[row] = ctx_ids.size() - 1;
          positions[row] = src_budget;
        } else {
          const std::size_t i = j - S - 1;
          order[row] = ctx_rows + b * L + i;
          positions[row] = src_budget + 1 + i;
          target_rows.push_back(row);
        }
      }
    }

    auto p = [&](const Tensor<T>& t) { return track ? tape.param(const_cast<Tensor<T>&>(t)) : tape.param(t); };
    Var<T> embed = p(params_.token_embedding);
    Var<T> ctx = gather_rows(embed, std::move(ctx_ids));

    Var<T> tgt;
    if (cfg_.concat_self_cond) {
      Tensor<T> joint(Shape{B * L, 2 * V}, T(0));
      for (std::size_t r = 0; r < B * L; ++r) {
        std::copy_n(batch.target_probs.values.data() + r * V, V, joint.values.data() + r * 2 * V);
        if (batch.prev_probs) {
          std::copy_n(batch.prev_probs->values.data() + r * V, V, joint.values.data() + r * 2 * V + V);
        }
      }
      tgt = matmul(tape.constant(std::move(joint)), p(params_.self_cond_weight));
    } else {
      tgt = matmul(tape.constant(batch.target_probs), embed);
    }
    Tensor<T> tcol(Shape{B * L, 1});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < L; ++i) tcol[b * L + i] = batch.time[b];
    }
    Var<T> temb = linear(tape.constant(std::move(tcol)), p(params_.time_weight), p(params_.time_bias));
    tgt = add(tgt, temb);

    Var<T> hidden = gather_rows(concat_rows(ctx, tgt), std::move(order));
    hidden = add(hidden, gather_rows(p(params_.position_embedding), std::move(positions)));
    return {hidden, std::move(layout), std::move(target_rows)};
  }

  Var<T> forward_impl(Tape<T>& tape, const ModelBatch<T>& batch, bool track,
                      Rng* dropout_rng) const {
    ++forward_passes_;
    auto p = [&](const Tensor<T>& t) { return track ? tape.param(const_cast<Tensor<T>&>(t)) : tape.param(t); };
    auto drop = [&](Var<T> x) { return dropout_rng ? dropout(x, cfg_.dropout, *dropout_rng) : x; };

    EncoderInput<T> in = build_input_impl(tape, batch, track);
    Var<T> h = drop(in.hidden);
    for (std::size_t l = 0; l < params_.blocks.size(); ++l) {
      const auto& blk = params_.blocks[l];
      Var<T> a = layer_norm(h, p(blk.ln1_gain), p(blk.ln1_bias));
      a = linear(a, p(blk.qkv_weight), p(blk.qkv_bias));
      a = attention(a, in.layout);
      if (l + 1 == params_.blocks.size()) {
        a = gather_rows(a, in.target_rows);
        h = gather_rows(h, std::move(in.target_rows));
      }
      a = linear(a, p(blk.out_weight), p(blk.out_bias));
      h = add(h, drop(a));
      Var<T> f = layer_norm(h, p(blk.ln2_gain), p(blk.ln2_bias));
      f = gelu(linear(f, p(blk.ff1_weight), p(blk.ff1_bias)));
      f = linear(f, p(blk.ff2_weight), p(blk.ff2_bias));
      h = add(h, drop(f));
    }
    if (params_.blocks.empty()) h = gather_rows(h, std::move(in.target_rows));
    h = layer_norm(h, p(params_.final_gain), p(params_.final_bias));
    return linear(h, p(params_.vocab_weight), p(params_.vocab_bias));
  }

  static void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
      fail(ErrorKind::range, "scaled time " + std::to_string(t) + " outside [0,1]");
    }
  }

  static void check_normalized(const Tensor<T>& probs) {
    const std::size_t v = probs.dim(1);
    for (std::size_t r = 0; r < probs.dim(0); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < v; ++c) total += static_cast<double>(probs.at(r, c));
      if (std::abs(total - 1.0) > 1e-4) {
        fail(ErrorKind::normalization, "target distribution row " + std::to_string(r) +
                                           " sums to " + std::to_string(total));
      }
    }
  }

  EncoderConfig cfg_;
  ModelParams<T> params_;
  mutable std::size_t forward_passes_ = 0;
};

}  // namespace simplexdiff
