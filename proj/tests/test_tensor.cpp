#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "simplexdiff/ops.hpp"
#include "simplexdiff/tensor.hpp"
#include "test_support.hpp"

using namespace simplexdiff;
using simplexdiff::testing::grad_check;
using simplexdiff::testing::random_tensor;

namespace {

/// sum(x * w) for a fixed random weight, turning any op into a scalar loss
/// with a dense upstream gradient.
Var<double> weighted_sum(Var<double> x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, x.tape->constant(random_tensor(x.shape(), rng))));
}

}  // namespace

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), Error);
  Tensor<double> t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<double> tape;
  auto i2 = tape.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(i2, m).value().values, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{1, 2}, {1, 2}));
  auto b = tape.constant(Tensor<double>(Shape{2, 1}, {3, 4}));
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c.value()[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  auto b = tape.constant(Tensor<double>(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected a dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const double err = grad_check({random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)},
                                [](Tape<double>&, const std::vector<Var<double>>& v) {
                                  return weighted_sum(matmul(v[0], v[1]), 1);
                                });
  EXPECT_LE(err, 1e-5);
}

TEST(Matmul, Associative) {
  Rng rng(3);
  Tape<double> tape;
  auto a = tape.constant(random_tensor({4, 4}, rng));
  auto b = tape.constant(random_tensor({4, 4}, rng));
  auto c = tape.constant(random_tensor({4, 4}, rng));
  const auto& l = matmul(matmul(a, b), c).value().values;
  const auto& r = matmul(a, matmul(b, c)).value().values;
  EXPECT_LE(simplexdiff::testing::relative_error(l, r), 1e-5);
}

TEST(Softmax, UniformOnZeros) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>(Shape{4}, 0.0)));
  for (double v : p.value().values) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ScaledOneHotRow) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>(Shape{1, 4}, {5, -5, -5, -5})));
  EXPECT_NEAR(p.value()[0], 0.9998638187585689, 1e-12);
  for (int j = 1; j < 4; ++j) EXPECT_NEAR(p.value()[j], 4.5393747143688915e-05, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(5);
  Tape<double> tape;
  Tensor<double> x = random_tensor({3, 6}, rng, 3.0);
  Tensor<double> shifted = x;
  for (auto& v : shifted.values) v += 17.25;
  const auto& a = softmax(tape.constant(x)).value().values;
  const auto& b = softmax(tape.constant(shifted)).value().values;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> tape;
    Tensor<float> x(Shape{5, 33});
    for (auto& v : x.values) v = static_cast<float>(50.0 * rng.normal());
    const Tensor<float>& p = softmax(tape.constant(x)).value();
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 33; ++c) {
        EXPECT_GE(p.at(r, c), 0.0f);
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  Tape<double> tape;
  Tensor<double> x = random_tensor({4, 9}, rng, 5.0);
  for (double v : softmax(tape.constant(x)).value().values) EXPECT_GT(v, 0.0);
}

TEST(Softmax, AlongLeadingAxis) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>(Shape{2, 3}, {0, 1, 2, 0, 1, 2})), 0);
  for (double v : p.value().values) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  for (std::size_t axis : {0u, 1u}) {
    const double err = grad_check({random_tensor({3, 5}, rng)},
                                  [axis](Tape<double>&, const std::vector<Var<double>>& v) {
                                    return weighted_sum(softmax(v[0], axis), 2);
                                  });
    EXPECT_LE(err, 1e-5) << "axis " << axis;
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape<double> tape;
  auto y = layer_norm(tape.constant(Tensor<double>(Shape{1, 4}, 3.5)),
                      tape.constant(Tensor<double>(Shape{4}, 1.0)), tape.constant(Tensor<double>(Shape{4}, 0.0)));
  for (double v : y.value().values) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, PlusMinusOne) {
  Tape<double> tape;
  auto y = layer_norm(tape.constant(Tensor<double>(Shape{1, 2}, {1, -1})),
                      tape.constant(Tensor<double>(Shape{2}, 1.0)), tape.constant(Tensor<double>(Shape{2}, 0.0)));
  // 1 / sqrt(1 + 1e-5)
  EXPECT_NEAR(y.value()[0], 0.9999950000374997, 1e-12);
  EXPECT_NEAR(y.value()[1], -0.9999950000374997, 1e-12);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  const double err = grad_check(
      {random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
      [](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(layer_norm(v[0], v[1], v[2]), 3); });
  EXPECT_LE(err, 1e-5);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>(Shape{3, 4}, 0.7));
  const double loss = cross_entropy(logits, {0, 2, 3}, {true, true, true}).value().item();
  EXPECT_DOUBLE_EQ(loss, std::log(4.0));
}

TEST(CrossEntropy, ScaledOneHotAtTarget) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>(Shape{1, 4}, {5, -5, -5, -5}));
  EXPECT_NEAR(cross_entropy(logits, {0}, {true}).value().item(), 0.00013619051493829723, 1e-15);
}

TEST(CrossEntropy, EmptyMaskIsAnError) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>(Shape{2, 4}));
  try {
    cross_entropy(logits, {0, 1}, {false, false});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty_loss);
  }
}

TEST(CrossEntropy, MaskedRowsAreIgnored) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>(Shape{2, 4}, {0, 0, 0, 0, 9, -3, 2, 1}));
  EXPECT_DOUBLE_EQ(cross_entropy(logits, {1, 2}, {true, false}).value().item(), std::log(4.0));
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Rng rng(14);
  Tape<double> tape;
  Tensor<double> x = random_tensor({3, 5}, rng);
  auto logits = tape.leaf(x, true);
  const std::vector<int> targets{4, 0, 2};
  tape.backward(cross_entropy(logits, targets, {true, true, true}));
  Tape<double> ref;
  const Tensor<double> p = softmax(ref.constant(x)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const double expect = (p.at(r, c) - (static_cast<int>(c) == targets[r] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(tape.grad(logits)[r * 5 + c], expect, 1e-12);
    }
  }
  const double err = grad_check({x}, [&](Tape<double>&, const std::vector<Var<double>>& v) {
    return cross_entropy(v[0], targets, {true, true, true});
  });
  EXPECT_LE(err, 1e-5);
}

TEST(CrossEntropy, NonNegative) {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    auto logits = tape.constant(random_tensor({2, 7}, rng, 10.0));
    EXPECT_GE(cross_entropy(logits, {static_cast<int>(trial % 7), 3}, {true, true}).value().item(), 0.0);
  }
}

TEST(CrossEntropy, TargetOutsideVocabulary) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>(Shape{1, 4}));
  EXPECT_THROW(cross_entropy(logits, {4}, {true}), Error);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, {1, 2, 3}), true);
  tape.backward(sum(x));
  EXPECT_EQ(tape.grad(x), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}), true);
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(tape.grad(x), (std::vector<double>{2, 4}));
}

TEST(Backward, TwiceWithoutResetIsAnError) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}), true);
  auto loss = sum(x);
  tape.backward(loss);
  try {
    tape.backward(loss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
  tape.reset();
  auto y = tape.leaf(Tensor<double>(Shape{2}, {1, 2}), true);
  EXPECT_NO_THROW(tape.backward(sum(y)));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}), true);
  EXPECT_THROW(tape.backward(x), Error);
}

TEST(Backward, ParametersAccumulateAcrossTapes) {
  Tensor<double> w(Shape{2}, {3, 4});
  w.requires_grad = true;
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(mul(tape.param(w), tape.param(w))));
  }
  EXPECT_EQ(w.grad, (std::vector<double>{12, 16}));
}

TEST(Backward, ReadOnlyParameterGetsNoGradient) {
  Tensor<double> w(Shape{2}, {3, 4});
  w.requires_grad = true;
  const Tensor<double>& cw = w;
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 1}), true);
  tape.backward(sum(mul(x, tape.param(cw))));
  EXPECT_FALSE(w.has_grad());
  EXPECT_EQ(tape.grad(x), (std::vector<double>{3, 4}));
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(16);
  const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_LE(grad_check({a, b}, [](Tape<double>&, const std::vector<Var<double>>& v) {
              return weighted_sum(add(v[0], v[1]), 4);
            }), 1e-5);
  EXPECT_LE(grad_check({a, b}, [](Tape<double>&, const std::vector<Var<double>>& v) {
              return weighted_sum(mul(v[0], v[1]), 5);
            }), 1e-5);
  EXPECT_LE(grad_check({a}, [](Tape<double>&, const std::vector<Var<double>>& v) {
              return weighted_sum(scale(v[0], -2.5), 6);
            }), 1e-5);
  EXPECT_LE(grad_check({a}, [](Tape<double>&, const std::vector<Var<double>>& v) {
              return weighted_sum(gelu(v[0]), 7);
            }), 1e-5);
}

TEST(Ops, LinearAndBiasGradients) {
  Rng rng(17);
  const double err = grad_check(
      {random_tensor({5, 3}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)},
      [](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(linear(v[0], v[1], v[2]), 8); });
  EXPECT_LE(err, 1e-5);
}

TEST(Ops, GatherAndConcatGradients) {
  Rng rng(18);
  const double err = grad_check(
      {random_tensor({4, 3}, rng), random_tensor({2, 3}, rng)},
      [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto joint = concat_rows(v[0], v[1]);
        return weighted_sum(gather_rows(joint, {5, 0, 0, 3, 4, 1}), 9);
      });
  EXPECT_LE(err, 1e-5);
}

TEST(Ops, GeluTanhApproximation) {
  Tape<double> tape;
  auto y = gelu(tape.constant(Tensor<double>(Shape{3}, {-1.0, 0.0, 2.0})));
  auto ref = [](double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  };
  EXPECT_NEAR(y.value()[0], ref(-1.0), 1e-12);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
  EXPECT_NEAR(y.value()[2], ref(2.0), 1e-12);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(19);
  AttentionLayout layout{2, 3, 2, {true, true, false, true, true, true}};
  const double err = grad_check({random_tensor({6, 12}, rng)}, [&](Tape<double>&, const std::vector<Var<double>>& v) {
    return weighted_sum(attention(v[0], layout), 10);
  });
  EXPECT_LE(err, 1e-5);
}

TEST(Attention, MaskedKeysHaveNoInfluence) {
  Rng rng(20);
  Tensor<double> qkv = random_tensor({3, 6}, rng);
  AttentionLayout layout{1, 3, 1, {true, true, false}};
  Tape<double> tape;
  const Tensor<double> a = attention(tape.constant(qkv), layout).value();
  for (std::size_t c = 2; c < 6; ++c) qkv.at(2, c) += 10.0;  // key and value of the masked slot
  const Tensor<double> b = attention(tape.constant(qkv), layout).value();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-12);
  }
}

TEST(Dropout, InvertedScalingAndIdentityAtZero) {
  Rng rng(21);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{10000}, 1.0));
  EXPECT_EQ(dropout(x, 0.0, rng).id, x.id);
  const auto& y = dropout(x, 0.25, rng).value().values;
  double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  EXPECT_NEAR(mean, 1.0, 0.05);
  for (double v : y) EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
}

TEST(Tape, NodesAreTopologicallyOrdered) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}), true);
  auto y = mul(x, x);
  auto z = sum(y);
  EXPECT_LT(x.id, y.id);
  EXPECT_LT(y.id, z.id);
  EXPECT_EQ(tape.op_count(), 2u);
}
