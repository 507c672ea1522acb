// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "atd/autodiff.hpp"

using namespace atd;

namespace {

void expect_values(const Tensor& t, std::initializer_list<double> expected, double tol = 0.0) {
  ASSERT_EQ(t.numel(), expected.size());
  std::size_t i = 0;
  for (double e : expected) {
    if (tol == 0.0) {
      EXPECT_EQ(t[i], e) << "entry " << i;
    } else {
      EXPECT_NEAR(t[i], e, tol) << "entry " << i;
    }
    ++i;
  }
}

}  // namespace

// --- creation ---------------------------------------------------------------

TEST(TensorCreate, ZerosAndConstant) {
  const auto z = Tensor::zeros({2, 2});
  EXPECT_EQ(z.shape(), (Shape{2, 2}));
  expect_values(z, {0, 0, 0, 0});
  expect_values(Tensor::constant({3}, 1.5), {1.5, 1.5, 1.5});
  EXPECT_FALSE(z.requires_grad());
}

TEST(TensorCreate, RejectsNonPositiveDimensions) {
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  EXPECT_THROW(make_shape({3, -1}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(TensorCreate, SeededFillsAreBitIdentical) {
  Rng r1(7), r2(7);
  const auto a = Tensor::uniform({2}, r1, 0, 1);
  const auto b = Tensor::uniform({2}, r2, 0, 1);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), 2 * sizeof(double)), 0);
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (std::uint64_t seed : {1ull, 99ull, 123456789ull}) {
    Rng g1(seed), g2(seed);
    const auto x = Tensor::gaussian({4, 5}, g1, 0, 1);
    const auto y = Tensor::gaussian({4, 5}, g2, 0, 1);
    EXPECT_EQ(std::memcmp(x.data().data(), y.data().data(), 20 * sizeof(double)), 0);
  }
}

TEST(Rng, PermutationIsAPermutation) {
  Rng rng(3);
  auto p = rng.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

// --- matmul -------------------------------------------------------------------

TEST(MatMul, Examples) {
  Tape t;
  const auto id = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const auto b = t.constant(Tensor::matrix({{3, 4}, {5, 6}}));
  expect_values(matmul(id, b).value(), {3, 4, 5, 6});
  const auto row = t.constant(Tensor::matrix({{1, 2}}));
  const auto col = t.constant(Tensor::matrix({{3}, {4}}));
  expect_values(matmul(row, col).value(), {11});
  const auto zeros = t.constant(Tensor::zeros({3, 2}));
  const auto out = matmul(zeros, b);
  EXPECT_EQ(out.shape(), (Shape{3, 2}));
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(MatMul, MismatchNamesBothShapes) {
  Tape t;
  const auto a = t.constant(Tensor::zeros({2, 3}));
  const auto b = t.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] and [2,3]"), std::string::npos) << e.what();
  }
}

TEST(MatMul, ShapeAlgebraProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
    Tape t;
    const auto c = matmul(t.constant(Tensor::gaussian({m, k}, rng, 0, 1)), t.constant(Tensor::gaussian({k, n}, rng, 0, 1)));
    EXPECT_EQ(c.shape(), (Shape{m, n}));
  }
}

// --- elementwise --------------------------------------------------------------

TEST(Elementwise, Examples) {
  Tape t;
  expect_values(sigmoid(t.constant(Tensor::zeros({2, 2}))).value(), {0.5, 0.5, 0.5, 0.5});
  expect_values(tanh(t.constant(Tensor::vector({0, 1}))).value(), {0.0, 0.7615941559557649}, 1e-15);
  const auto a = t.constant(Tensor::vector({1, 2, 3}));
  const auto b = t.constant(Tensor::vector({4, 5, 6}));
  expect_values(mul(a, b).value(), {4, 10, 18});
  expect_values(elementwise(Elementwise::Add, a, &b).value(), {5, 7, 9});
  expect_values(elementwise(Elementwise::Sub, a, &b).value(), {-3, -3, -3});
  expect_values(elementwise(Elementwise::Scale, a, nullptr, 2.0).value(), {2, 4, 6});
}

TEST(Elementwise, BinaryShapeMismatch) {
  Tape t;
  const auto a = t.constant(Tensor::zeros({3}));
  const auto b = t.constant(Tensor::zeros({1, 3}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(elementwise(Elementwise::Mul, a), ContractError);
}

// --- softmax ------------------------------------------------------------------

TEST(SoftmaxRows, Examples) {
  Tape t;
  expect_values(softmax_rows(t.constant(Tensor::matrix({{0, 0, 0}}))).value(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  expect_values(softmax_rows(t.constant(Tensor::matrix({{0, std::log(2.0)}}))).value(), {1.0 / 3, 2.0 / 3}, 1e-15);
}

TEST(SoftmaxRows, RejectsNonFinite) {
  Tape t;
  EXPECT_THROW(softmax_rows(t.constant(Tensor::matrix({{0, NAN}}))), NumericDomainError);
  EXPECT_THROW(softmax_rows(t.constant(Tensor::matrix({{INFINITY, 0}}))), NumericDomainError);
}

TEST(SoftmaxRows, RowSumsPositivityAndShiftInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(7);
    Tensor a = Tensor::gaussian({m, n}, rng, 0, 3);
    Tensor shifted = a;
    for (std::size_t i = 0; i < m; ++i) {
      const double c = rng.uniform(-50, 50);
      for (std::size_t j = 0; j < n; ++j) shifted.at(i, j) += c;
    }
    Tape t;
    const auto y = softmax_rows(t.constant(a)).value();
    const auto ys = softmax_rows(t.constant(shifted)).value();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GT(y.at(i, j), 0.0);
        EXPECT_LE(y.at(i, j), 1.0);
        EXPECT_NEAR(y.at(i, j), ys.at(i, j), 1e-12);
        s += y.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

// --- backward -----------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::constant({2, 3}, 0.25);
  x.set_requires_grad(true);
  Tape t;
  backward(sum(t.variable(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape t;
  const auto v = t.variable(x);
  backward(sum(mul(v, v)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape t;
  const auto v = t.variable(x);
  EXPECT_THROW(backward(v), ContractError);
}

TEST(Backward, AccumulatesAcrossUses) {
  // f(x) = sum(tanh(x)) + sum(x ⊙ x): two separate graphs give each path's gradient.
  Rng rng(2);
  const Tensor x0 = Tensor::gaussian({3}, rng, 0, 1);

  Tensor a = x0, b = x0, both = x0;
  for (Tensor* p : {&a, &b, &both}) p->set_requires_grad(true);
  {
    Tape t;
    backward(sum(tanh(t.variable(a))));
  }
  {
    Tape t;
    const auto v = t.variable(b);
    backward(sum(mul(v, v)));
  }
  {
    Tape t;
    const auto v = t.variable(both);
    backward(add(sum(tanh(v)), sum(mul(v, v))));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(both.grad()[i], a.grad()[i] + b.grad()[i], 1e-15);

  // Repeated backward on fresh tapes keeps adding into the slot.
  Tensor c = x0;
  c.set_requires_grad(true);
  for (int k = 0; k < 2; ++k) {
    Tape t;
    backward(sum(t.variable(c)));
  }
  for (double g : c.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, RandomChainMatchesGradCheck) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const Tensor x0 = Tensor::gaussian({2, 3}, rng, 0, 1);
    const Tensor w = Tensor::gaussian({3, 2}, rng, 0, 1);
    const double err = grad_check(
        [&](Tape& t, const Var& x) { return sum(sigmoid(matmul(tanh(x), t.constant(w)))); }, x0);
    EXPECT_LT(err, 1e-6) << "seed " << seed;
  }
}

// --- grad_check ---------------------------------------------------------------

TEST(GradCheck, ParabolaAndLinear) {
  const auto square = [](Tape&, const Var& x) { return sum(mul(x, x)); };
  EXPECT_LT(grad_check(square, Tensor::vector({3})), 1e-8);
  EXPECT_LT(grad_check([](Tape&, const Var& x) { return sum(x); }, Tensor::vector({1, -2, 5})), 1e-10);
}

TEST(GradCheck, RejectsBadStepAndNonFinite) {
  const auto f = [](Tape&, const Var& x) { return sum(x); };
  EXPECT_THROW(grad_check(f, Tensor::vector({1}), 0.0), ContractError);
  const auto blowup = [](Tape& t, const Var& x) {
    return sum(mul(x, t.constant(Tensor::vector({INFINITY}))));
  };
  EXPECT_THROW(grad_check(blowup, Tensor::vector({1})), NumericDomainError);
}

TEST(GradCheck, DetectsWrongBackwardRule) {
  debug::backward_fault() = "tanh";
  const double err = grad_check([](Tape&, const Var& x) { return sum(tanh(x)); }, Tensor::vector({0.3, -0.7}));
  debug::backward_fault().clear();
  EXPECT_GT(err, 1e-2);
}

// Every primitive, h = 1e-5, 10 seeds, < 1e-6 relative.
TEST(GradCheck, EveryPrimitive) {
  using Build = std::function<Var(Tape&, const Var&, Rng&)>;
  const std::vector<std::pair<const char*, Build>> ops = {
      {"matmul_left", [](Tape& t, const Var& x, Rng& r) { return matmul(x, t.constant(Tensor::gaussian({4, 2}, r, 0, 1))); }},
      {"matmul_right", [](Tape& t, const Var& x, Rng& r) { return matmul(t.constant(Tensor::gaussian({2, 3}, r, 0, 1)), x); }},
      {"transpose", [](Tape&, const Var& x, Rng&) { return transpose(x); }},
      {"add", [](Tape& t, const Var& x, Rng& r) { return add(x, t.constant(Tensor::gaussian({3, 4}, r, 0, 1))); }},
      {"sub", [](Tape& t, const Var& x, Rng& r) { return sub(t.constant(Tensor::gaussian({3, 4}, r, 0, 1)), x); }},
      {"mul", [](Tape& t, const Var& x, Rng& r) { return mul(x, t.constant(Tensor::gaussian({3, 4}, r, 0, 1))); }},
      {"self_mul", [](Tape&, const Var& x, Rng&) { return mul(x, x); }},
      {"scale", [](Tape&, const Var& x, Rng&) { return scale(x, -1.7); }},
      {"add_constant", [](Tape&, const Var& x, Rng&) { return add_constant(x, 2.5); }},
      {"tanh", [](Tape&, const Var& x, Rng&) { return tanh(x); }},
      {"sigmoid", [](Tape&, const Var& x, Rng&) { return sigmoid(x); }},
      {"softmax_rows", [](Tape&, const Var& x, Rng&) { return softmax_rows(x); }},
      {"sub_row_max", [](Tape&, const Var& x, Rng&) { return sub_row_max(x); }},
      {"normalize_rows", [](Tape&, const Var& x, Rng&) { return normalize_rows(x, 1e-5); }},
      {"scalar_mul", [](Tape& t, const Var& x, Rng& r) {
         return scalar_mul(reshape(sum(x), {1}), t.constant(Tensor::gaussian({2, 2}, r, 0, 1)));
       }},
      {"reshape", [](Tape&, const Var& x, Rng&) { return reshape(x, {4, 3}); }},
      {"concat_rows", [](Tape& t, const Var& x, Rng& r) { return concat_rows(x, t.constant(Tensor::gaussian({2, 4}, r, 0, 1))); }},
      {"tile_rows", [](Tape&, const Var& x, Rng&) { return tile_rows(reshape(x, {1, 12}), 3); }},
      {"mean", [](Tape&, const Var& x, Rng&) { return mean(x); }},
      {"spatial_mean", [](Tape&, const Var& x, Rng&) { return spatial_mean(reshape(x, {3, 2, 2})); }},
      {"conv2d", [](Tape& t, const Var& x, Rng& r) {
         return conv2d(reshape(x, {1, 3, 4}), t.constant(Tensor::gaussian({2, 1, 3, 3}, r, 0, 1)),
                       t.constant(Tensor::gaussian({2}, r, 0, 1)), 1, 1);
       }},
      {"cross_entropy", [](Tape&, const Var& x, Rng&) { return cross_entropy(reshape(x, {1, 12}), 5); }},
  };
  for (const auto& [name, build] : ops) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Rng rng(seed);
      const Tensor x0 = Tensor::gaussian({3, 4}, rng, 0, 1);
      const std::uint64_t op_seed = rng.next_u64();
      const double err = grad_check(
          [&](Tape& t, const Var& x) {
            Rng r(op_seed);
            const Var y = build(t, x, r);
            const Tensor w = Tensor::gaussian(y.shape(), r, 0, 1);
            return sum(mul(y, t.constant(w)));
          },
          x0);
      EXPECT_LT(err, 1e-6) << name << " seed " << seed;
    }
  }
}

TEST(Tape, ValuesWithoutGradRecordNoClosures) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t(false);
  const auto v = t.variable(w);
  const auto s = sum(mul(v, v));
  EXPECT_EQ(s.value()[0], 5.0);
  EXPECT_THROW(t.backward(s), ContractError);
}

TEST(Tape, RecordIsTopologicallyOrdered) {
  Tape t;
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  const auto v = t.variable(x);
  const auto y = sum(tanh(mul(v, t.constant(Tensor::vector({3, 4})))));
  backward(y);
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (auto in : t.entry(i).inputs) EXPECT_LT(in, i);
  }
}

TEST(Tape, RebindsTensorWhoseContentsChanged) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t;
  const auto first = t.variable(w);
  EXPECT_EQ(t.variable(w).id, first.id);
  w[0] = 5;
  const auto second = t.variable(w);
  EXPECT_NE(second.id, first.id);
  EXPECT_EQ(second.value()[0], 5.0);
  EXPECT_EQ(first.value()[0], 1.0);
  // Both snapshots feed the same gradient slot.
  t.backward(sum(add(first, second)));
  for (double g : w.grad()) EXPECT_EQ(g, 2.0);
}
