#include <gtest/gtest.h>

#include <cmath>

#include "simplexdiff/model.hpp"
#include "simplexdiff/simplex.hpp"
#include "simplexdiff/trainer.hpp"
#include "test_support.hpp"

using namespace simplexdiff;

namespace {

EncoderConfig tiny_config(int layers = 2) {
  EncoderConfig c;
  c.layers = layers;
  c.heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_len = 12;
  c.max_source_len = 6;
  c.vocab_size = 11;
  c.dropout = 0.0;
  return c;
}

ModelBatch<double> noisy_batch(const EncoderConfig& c, std::size_t B, std::size_t L, Rng& rng) {
  ModelBatch<double> batch;
  batch.target_len = L;
  const auto V = static_cast<std::size_t>(c.vocab_size);
  batch.target_probs = Tensor<double>(Shape{B * L, V});
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<int> src(1 + b % 4);
    for (auto& t : src) t = static_cast<int>(rng.integer(token::num_reserved, c.vocab_size - 1));
    batch.sources.push_back(src);
    batch.time.push_back(rng.uniform());
    const auto p = softmax_rows(sample_prior<double>(L, V, 5.0, rng));
    std::copy(p.values.begin(), p.values.end(), batch.target_probs.values.begin() + b * L * V);
  }
  return batch;
}

}  // namespace

TEST(TimeEmbed, ZeroIsBias) {
  Rng rng(1);
  Encoder<double> m(tiny_config(), rng);
  EXPECT_EQ(m.time_embed(0.0).values, m.params().time_bias.values);
}

TEST(TimeEmbed, DifferenceIsWeight) {
  Rng rng(2);
  Encoder<double> m(tiny_config(), rng);
  m.params().time_bias.values.assign(16, 0.0);
  const auto one = m.time_embed(1.0), zero = m.time_embed(0.0);
  ASSERT_EQ(one.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(one[i] - zero[i], m.params().time_weight[i]);
}

TEST(TimeEmbed, OutOfRange) {
  Rng rng(3);
  Encoder<double> m(tiny_config(), rng);
  try {
    m.time_embed(1.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::range);
  }
  EXPECT_THROW(m.time_embed(-0.1), Error);
}

TEST(EncoderConfig, Validation) {
  auto c = tiny_config();
  c.d_model = 15;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.max_len = c.max_source_len + 1;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(BuildInput, OneHotTargetIsTokenPlusTimePlusPosition) {
  Rng rng(4);
  const auto c = tiny_config();
  Encoder<double> m(c, rng);
  ModelBatch<double> batch;
  batch.sources = {{5, 6}};
  batch.target_len = 2;
  batch.time = {0.25};
  const std::vector<int> tgt{7, 9};
  batch.target_probs = softmax_rows(encode_tokens<double>(tgt, 1000.0, 11));
  Tape<double> tape;
  const auto in = m.build_input(tape, batch);
  const auto& h = in.hidden.value();
  ASSERT_EQ(h.dim(1), 16u);
  const auto temb = m.time_embed(0.25);
  const auto& P = m.params();
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t row = in.target_rows[i];
    const auto pos = static_cast<std::size_t>(c.max_source_len) + 1 + i;
    for (std::size_t d = 0; d < 16; ++d) {
      const double want = P.token_embedding.at(static_cast<std::size_t>(tgt[i]), d) + temb[d] +
                          P.position_embedding.at(pos, d);
      EXPECT_NEAR(h.at(row, d), want, 1e-12);
    }
  }
}

TEST(BuildInput, SourceRowsIgnoreTime) {
  Rng rng(5);
  Encoder<double> m(tiny_config(), rng);
  Rng data(6);
  auto batch = noisy_batch(m.config(), 1, 3, data);
  Tape<double> ta, tb;
  batch.time = {0.1};
  const auto a = m.build_input(ta, batch);
  batch.time = {0.9};
  const auto b = m.build_input(tb, batch);
  const std::size_t S = batch.sources[0].size();
  for (std::size_t r = 0; r <= S; ++r) {
    for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(a.hidden.value().at(r, d), b.hidden.value().at(r, d));
  }
  bool target_changed = false;
  for (std::size_t r : a.target_rows) {
    for (std::size_t d = 0; d < 16; ++d) target_changed |= a.hidden.value().at(r, d) != b.hidden.value().at(r, d);
  }
  EXPECT_TRUE(target_changed);
}

TEST(BuildInput, Errors) {
  Rng rng(7);
  Encoder<double> m(tiny_config(), rng);
  Rng data(8);
  auto batch = noisy_batch(m.config(), 1, 3, data);
  Tape<double> tape;

  auto longsrc = batch;
  longsrc.sources[0].assign(7, 5);
  try {
    m.build_input(tape, longsrc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::sequence_length);
  }

  auto longtgt = noisy_batch(m.config(), 1, 6, data);
  EXPECT_THROW(m.build_input(tape, longtgt), Error);

  auto unnorm = batch;
  unnorm.target_probs[0] += 0.5;
  try {
    m.build_input(tape, unnorm);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::normalization);
  }
}

TEST(Forward, OutputShape) {
  Rng rng(9);
  Encoder<double> m(tiny_config(), rng);
  Rng data(10);
  const auto batch = noisy_batch(m.config(), 3, 4, data);
  const auto logits = m.predict(batch);
  EXPECT_EQ(logits.shape, (Shape{12, 11}));
  EXPECT_TRUE(logits.all_finite());
}

TEST(Forward, SourcePerturbationChangesLogits) {
  Rng rng(11);
  Encoder<double> m(tiny_config(), rng);
  Rng data(12);
  auto batch = noisy_batch(m.config(), 1, 4, data);
  batch.sources[0] = {5, 6, 7};
  const auto a = m.predict(batch);
  batch.sources[0][1] = 8;
  const auto b = m.predict(batch);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Forward, BatchRowsAreIndependent) {
  Rng rng(13);
  Encoder<double> m(tiny_config(), rng);
  Rng data(14);
  const auto batch = noisy_batch(m.config(), 3, 4, data);
  const auto full = m.predict(batch);
  for (std::size_t b = 0; b < 3; ++b) {
    ModelBatch<double> one;
    one.sources = {batch.sources[b]};
    one.target_len = 4;
    one.time = {batch.time[b]};
    one.target_probs = Tensor<double>(Shape{4, 11});
    std::copy_n(batch.target_probs.values.begin() + b * 44, 44, one.target_probs.values.begin());
    const auto single = m.predict(one);
    for (std::size_t i = 0; i < 44; ++i) EXPECT_NEAR(single[i], full[b * 44 + i], 1e-12);
  }
}

TEST(Forward, Deterministic) {
  Rng rng(15);
  auto c = tiny_config();
  c.dropout = 0.3;
  Encoder<double> m(c, rng);
  Rng data(16);
  const auto batch = noisy_batch(c, 2, 4, data);
  EXPECT_EQ(m.predict(batch).values, m.predict(batch).values);
}

TEST(Forward, CountsPasses) {
  Rng rng(17);
  Encoder<double> m(tiny_config(), rng);
  Rng data(18);
  const auto batch = noisy_batch(m.config(), 2, 2, data);
  m.reset_forward_passes();
  m.predict(batch);
  m.predict(batch);
  EXPECT_EQ(m.forward_passes(), 2u);
}

TEST(Forward, ConcatSelfCondUsesPrevious) {
  Rng rng(19);
  auto c = tiny_config();
  c.concat_self_cond = true;
  Encoder<double> m(c, rng);
  EXPECT_EQ(m.params().self_cond_weight.shape, (Shape{22, 16}));
  Rng data(20);
  auto batch = noisy_batch(c, 1, 3, data);
  const auto a = m.predict(batch);
  batch.prev_probs = softmax_rows(sample_prior<double>(3, 11, 5.0, data));
  const auto b = m.predict(batch);
  EXPECT_NE(a.values, b.values);
}

TEST(Forward, StableForLargeInputs) {
  Rng rng(21);
  auto c = tiny_config(10);
  Encoder<float> m(c, rng);
  m.params().time_weight.values.assign(16, 1e4f);
  for (auto& v : m.params().token_embedding.values) v *= 5e5f;
  ModelBatch<float> batch;
  batch.sources = {{5, 6, 7}};
  batch.target_len = 3;
  batch.time = {1.0f};
  batch.target_probs = softmax_rows(encode_tokens<float>(std::vector<int>{8, 9, 10}, 1e4f, 11));
  EXPECT_TRUE(m.predict(batch).all_finite());
}

// Full composite: noised inputs from a training step, forward, cross-entropy.
TEST(Forward, GradientMatchesFiniteDifferences) {
  Rng rng(22);
  const auto c = tiny_config();
  Encoder<double> m(c, rng);
  TrainConfig tc;
  tc.rho = 0.0;
  tc.seed = 3;
  Trainer<double> trainer(m, tc, NoiseSchedule(), 4);
  std::vector<PairExample> ex(2);
  ex[0].source = {5, 6, 7};
  ex[0].target = {8, 9, 2};
  ex[1].source = {10};
  ex[1].target = {6, 7, 8, 9};
  const auto prep = trainer.prepare({&ex[0], &ex[1]}, 1);
  trainer.gradients(prep, 1);

  auto loss = [&]() {
    Tape<double> tape;
    return cross_entropy(m.forward(tape, prep.batch), prep.targets.tokens, prep.targets.mask)
        .value()
        .item();
  };
  const double h = 1e-5;
  for (auto& [name, t] : named_params(m.params())) {
    std::vector<double> numeric(t->size());
    for (std::size_t j = 0; j < t->size(); ++j) {
      const double orig = t->values[j];
      t->values[j] = orig + h;
      const double up = loss();
      t->values[j] = orig - h;
      const double down = loss();
      t->values[j] = orig;
      numeric[j] = (up - down) / (2 * h);
    }
    EXPECT_LE(simplexdiff::testing::relative_error(t->grad, numeric), 1e-5) << name;
  }
}
