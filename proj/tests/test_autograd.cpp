#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support.hpp"

using namespace xlt;
using xlt::testing::project;
using xlt::testing::random_tensor;

namespace {

constexpr int kPoints = 100;
constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

// Runs check(rng, seed) over kPoints random points and returns the worst error.
template <typename F>
double worst_over_points(std::uint64_t base, F check) {
  double worst = 0.0;
  for (int i = 0; i < kPoints; ++i) {
    Rng rng(base * 1000 + i);
    worst = std::max(worst, check(rng, base * 1000 + i));
  }
  return worst;
}

double fd(std::vector<Parameter*> params, const std::function<Var(Tape&)>& fn) {
  return finite_difference_check(fn, std::span<Parameter* const>(params), kEps);
}

}  // namespace

TEST(Gradients, MatmulBothLayouts) {
  const double worst = worst_over_points(1, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({3, 4}, rng)), b("b", random_tensor({4, 2}, rng)), bt("bt", random_tensor({5, 4}, rng));
    const double e1 = fd({&a, &b}, [&](Tape& t) { return project(t, matmul(t.param(a), t.param(b)), s); });
    const double e2 = fd({&a, &bt}, [&](Tape& t) {
      return project(t, matmul(t.param(a), t.param(bt), Transpose::kSecond), s);
    });
    return std::max(e1, e2);
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, AddSameShapeAndRowBroadcast) {
  const double worst = worst_over_points(2, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({3, 4}, rng)), b("b", random_tensor({3, 4}, rng)), row("row", random_tensor({4}, rng));
    const double e1 = fd({&a, &b}, [&](Tape& t) { return project(t, add(t.param(a), t.param(b)), s); });
    const double e2 = fd({&a, &row}, [&](Tape& t) { return project(t, add(t.param(a), t.param(row)), s); });
    return std::max(e1, e2);
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, ScaleAndSum) {
  const double worst = worst_over_points(3, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({2, 5}, rng));
    const double e1 = fd({&a}, [&](Tape& t) { return project(t, scale(t.param(a), -1.7), s); });
    const double e2 = fd({&a}, [&](Tape& t) { return sum(t.param(a)); });
    return std::max(e1, e2);
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, GeluAndTanh) {
  const double worst = worst_over_points(4, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({3, 4}, rng, -3.0, 3.0));
    const double e1 = fd({&a}, [&](Tape& t) { return project(t, gelu(t.param(a)), s); });
    const double e2 = fd({&a}, [&](Tape& t) { return project(t, xlt::tanh(t.param(a)), s); });
    return std::max(e1, e2);
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, Softmax) {
  const double worst = worst_over_points(5, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({3, 5}, rng, -2.0, 2.0));
    return fd({&a}, [&](Tape& t) { return project(t, softmax(t.param(a)), s); });
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, LayerNormInputGainBias) {
  const double worst = worst_over_points(6, [](Rng& rng, std::uint64_t s) {
    Parameter x("x", random_tensor({3, 6}, rng, -2.0, 2.0)), g("g", random_tensor({6}, rng, 0.5, 1.5)),
        b("b", random_tensor({6}, rng));
    return fd({&x, &g, &b}, [&](Tape& t) { return project(t, layer_norm(t.param(x), t.param(g), t.param(b)), s); });
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, EmbeddingAndSelectRows) {
  const double worst = worst_over_points(7, [](Rng& rng, std::uint64_t s) {
    Parameter table("table", random_tensor({6, 4}, rng)), x("x", random_tensor({5, 3}, rng));
    const std::vector<std::int32_t> ids{3, 0, 3, 5};
    const std::vector<std::size_t> rows{4, 1, 1};
    const double e1 = fd({&table}, [&](Tape& t) { return project(t, embedding(t.param(table), ids), s); });
    const double e2 = fd({&x}, [&](Tape& t) { return project(t, select_rows(t.param(x), rows), s); });
    return std::max(e1, e2);
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, DropoutTrainMode) {
  const double worst = worst_over_points(8, [](Rng& rng, std::uint64_t s) {
    Parameter a("a", random_tensor({4, 4}, rng));
    return fd({&a}, [&](Tape& t) { return project(t, dropout(t.param(a), 0.3, {s, 1, 2}, true), s); });
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, AttentionWithKeyMask) {
  const double worst = worst_over_points(9, [](Rng& rng, std::uint64_t s) {
    Parameter q("q", random_tensor({4, 6}, rng)), k("k", random_tensor({4, 6}, rng)), v("v", random_tensor({4, 6}, rng));
    const std::vector<std::uint8_t> mask{1, 1, 1, 0};
    return fd({&q, &k, &v}, [&](Tape& t) { return project(t, attention(t.param(q), t.param(k), t.param(v), 2, mask), s); });
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, CrossEntropy) {
  const double worst = worst_over_points(10, [](Rng& rng, std::uint64_t) {
    Parameter z("z", random_tensor({3, 4}, rng, -2.0, 2.0));
    const std::vector<std::int32_t> labels{2, 0, 3};
    return fd({&z}, [&](Tape& t) { return cross_entropy(t.param(z), labels); });
  });
  EXPECT_LT(worst, kTol);
}

TEST(Gradients, CrossEntropyGradientIsProbabilitiesMinusOneHot) {
  Rng rng(11);
  Parameter z("z", random_tensor({1, 5}, rng));
  Tape tape;
  const std::int32_t label = 3;
  auto grads = tape.backward(cross_entropy(tape.param(z), {&label, 1}));
  std::vector<double> p(5);
  softmax_row(z.value.data, p);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(grads.at(&z).data[c], p[c] - (c == 3 ? 1.0 : 0.0), 1e-15);
}

TEST(Gradients, LinearFunctionIsExact) {
  Rng rng(12);
  const Tensor w = random_tensor({1, 6}, rng);
  const Tensor point = random_tensor({6, 1}, rng);
  const double err =
      finite_difference_check([&](Tape& t, Var x) { return sum(matmul(t.constant(w), x)); }, point, 1e-5);
  EXPECT_LT(err, 1e-10);
}

TEST(Gradients, ConstantFunctionHasZeroError) {
  const double err =
      finite_difference_check([](Tape& t, Var) { return t.constant(Tensor::scalar(3.0)); }, Tensor({3}, 1.0), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(Gradients, RejectsNonScalarFunctionAndBadEpsilon) {
  auto identity = [](Tape&, Var x) { return x; };
  EXPECT_THROW(finite_difference_check(identity, Tensor({3}, 1.0), 1e-5), ShapeError);
  auto total = [](Tape&, Var x) { return sum(x); };
  EXPECT_THROW(finite_difference_check(total, Tensor({3}, 1.0), 1e-2), std::invalid_argument);
  EXPECT_THROW(finite_difference_check(total, Tensor({3}, 1.0), 1e-9), std::invalid_argument);
}

TEST(Primitives, UniformCrossEntropyIsLogC) {
  Tape tape;
  const std::int32_t label = 2;
  Var loss = cross_entropy(tape.constant(Tensor({1, 4}, 0.0)), {&label, 1});
  EXPECT_NEAR(loss.value().item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(loss.value().item(), 1.3863, 5e-5);
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Tape tape;
  Var p = softmax(tape.constant(Tensor({1, 3}, 0.0)));
  for (double v : p.value().data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    Tape tape;
    Var p = softmax(tape.constant(random_tensor({4, 7}, rng, -30.0, 30.0)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (double v : p.value().row(r)) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Primitives, LayerNormHandExample) {
  Tape tape;
  Var y = layer_norm(tape.constant(Tensor({1, 3}, {1.0, 2.0, 3.0})), tape.constant(Tensor({3}, 1.0)),
                     tape.constant(Tensor({3}, 0.0)));
  const double s = std::sqrt(1.5);  // (x - 2) / sqrt(2/3)
  EXPECT_NEAR(y.value().data[0], -s, 1e-9);
  EXPECT_NEAR(y.value().data[1], 0.0, 1e-12);
  EXPECT_NEAR(y.value().data[2], s, 1e-9);
  EXPECT_NEAR(y.value().data[2], 1.2247, 5e-5);
}

TEST(Primitives, DropoutIsIdentityInEvalMode) {
  Rng rng(14);
  Tape tape;
  Var x = tape.constant(random_tensor({3, 3}, rng));
  Var y = dropout(x, 0.5, {1, 2, 3}, false);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Primitives, DropoutMaskDependsOnlyOnKey) {
  Tape tape;
  Var x = tape.constant(Tensor({8, 8}, 1.0));
  auto a = dropout(x, 0.5, {1, 2, 3}, true).value();
  auto b = dropout(x, 0.5, {1, 2, 3}, true).value();
  auto c = dropout(x, 0.5, {1, 2, 4}, true).value();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (double v : a.data) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Primitives, ShapeMismatchNamesOperationAndShapes) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}, 1.0));
  Var b = tape.constant(Tensor({2, 3}, 1.0));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, tape.constant(Tensor({4}, 1.0))), ShapeError);
}

TEST(Primitives, NonFiniteOutputIsRejected) {
  Tape tape;
  Var a = tape.constant(Tensor({1, 2}, {1e308, 1e308}));
  EXPECT_THROW(scale(a, 10.0), std::domain_error);
}

TEST(Backward, SumGivesAllOnes) {
  Parameter x("x", Tensor({2, 2}, {1.0, -2.0, 3.5, 0.0}));
  Tape tape;
  auto grads = tape.backward(sum(tape.param(x)));
  EXPECT_EQ(grads.at(&x), Tensor({2, 2}, 1.0));
}

TEST(Backward, AbsentParameterGetsZeros) {
  Parameter used("used", Tensor({2}, 1.0)), unused("unused", Tensor({3}, 2.0));
  Tape tape;
  tape.param(unused);
  auto grads = tape.backward(sum(tape.param(used)));
  EXPECT_EQ(grads.at(&unused), Tensor({3}, 0.0));
}

TEST(Backward, NonScalarLossIsRejected) {
  Parameter x("x", Tensor({2}, 1.0));
  Tape tape;
  EXPECT_THROW(tape.backward(tape.param(x)), ShapeError);
}

TEST(Backward, IsBitwiseDeterministic) {
  Rng rng(15);
  Parameter q("q", random_tensor({5, 8}, rng)), w("w", random_tensor({8, 8}, rng));
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0};
  auto run = [&] {
    Tape tape;
    Var h = matmul(tape.param(q), tape.param(w));
    Var a = attention(h, h, h, 4, mask);
    return tape.backward(project(tape, gelu(a), 99));
  };
  auto g1 = run(), g2 = run();
  EXPECT_EQ(g1.at(&q), g2.at(&q));
  EXPECT_EQ(g1.at(&w), g2.at(&w));
}

TEST(Backward, TopologicalOrderOnTape) {
  Tape tape;
  Var a = tape.constant(Tensor({2}, 1.0));
  Var b = scale(a, 2.0);
  Var c = add(a, b);
  EXPECT_LT(a.id(), b.id());
  EXPECT_LT(b.id(), c.id());
}
