#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bdl/autodiff.hpp"
#include "bdl/models.hpp"
#include "bdl/optim.hpp"
#include "support.hpp"

using namespace bdl;
using ad::Tape;
using ad::Var;
using Leaves = std::map<std::string, Var>;

namespace {

std::vector<double> values(const Array& a) { return {a.values().begin(), a.values().end()}; }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  const Var out = ad::matmul(t.constant(Array::identity(2)), t.constant(Array::matrix({{1, 2}, {3, 4}})));
  EXPECT_EQ(out.value(), Array::matrix({{1, 2}, {3, 4}}));
}

TEST(Matmul, OrthogonalVectorsGiveZero) {
  Tape t;
  const Var out = ad::matmul(t.constant(Array::matrix({{1, 0}})), t.constant(Array::matrix({{0}, {1}})));
  EXPECT_EQ(out.value(), Array::matrix({{0}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ad::matmul(t.constant(Array({2, 3})), t.constant(Array({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(SegmentSum, HandSum) {
  Tape t;
  const std::vector<std::size_t> ids{0, 0, 1};
  const Var out = ad::segment_sum(t.constant(Array::matrix({{1}, {2}, {3}})), ids, 2);
  EXPECT_EQ(out.value(), Array::matrix({{3}, {3}}));
}

TEST(SegmentSum, EmptyEdgeSetGivesZeros) {
  Tape t;
  const Var out = ad::segment_sum(t.constant(Array({0, 1})), std::vector<std::size_t>{}, 3);
  EXPECT_EQ(out.value(), Array::matrix({{0}, {0}, {0}}));
}

TEST(SegmentSum, OneRowPerSegmentIsIdentity) {
  Tape t;
  const std::vector<std::size_t> ids{0, 1, 2};
  EXPECT_EQ(ad::segment_sum(t.constant(Array::identity(3)), ids, 3).value(), Array::identity(3));
}

TEST(SegmentSum, OutOfRangeIdIsIndexError) {
  Tape t;
  const std::vector<std::size_t> ids{0, 3};
  EXPECT_THROW(ad::segment_sum(t.constant(Array({2, 1})), ids, 3), IndexError);
}

TEST(SegmentSum, IsLinear) {
  std::mt19937_64 rng(11);
  const std::vector<std::size_t> ids{0, 2, 2, 1, 0, 4};
  for (int trial = 0; trial < 20; ++trial) {
    const Array a = test::random_array({6, 3}, rng);
    const Array b = test::random_array({6, 3}, rng);
    Tape t;
    const Array lhs = ad::segment_sum(ad::add(t.constant(a), t.constant(b)), ids, 5).value();
    const Array sa = ad::segment_sum(t.constant(a), ids, 5).value();
    const Array sb = ad::segment_sum(t.constant(b), ids, 5).value();
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], sa[i] + sb[i], 1e-12);
  }
}

TEST(Squareplus, ValueAtZeroIsOne) { EXPECT_DOUBLE_EQ(ad::squareplus(0.0), 1.0); }

TEST(Squareplus, ApproachesIdentityForLargeInputs) {
  EXPECT_NEAR(ad::squareplus(1000.0), 1000.000999999, 1e-6);
  for (double x = 100.0; x < 1e5; x *= 1.7) EXPECT_LT(std::abs(ad::squareplus(x) - x), 1e-2);
}

TEST(Squareplus, DerivativeAtZeroIsHalf) {
  EXPECT_DOUBLE_EQ(ad::squareplus_grad(0.0), 0.5);
  Tape t;
  const Var x = t.leaf(Array::scalar(0.0));
  t.backward(ad::sum(ad::squareplus(x)));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.5);
}

TEST(Squareplus, BoundsAndMonotonicity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng);
    EXPECT_GT(ad::squareplus(x), std::max(x, 0.0));
    EXPECT_GT(ad::squareplus(x + 1e-3), ad::squareplus(x));
  }
}

TEST(Mlp, ZeroNetworkOutputsSquareplusOfZero) {
  ParamTree p;
  p["m.0.w"] = Array({3, 4});
  p["m.0.b"] = Array({4});
  p["m.1.w"] = Array({4, 1});
  p["m.1.b"] = Array({1});
  const Array out = mlp_forward(p, "m", Array::matrix({{0.3, -2.0, 7.0}}), 1, true);
  EXPECT_EQ(values(out), std::vector<double>{1.0});
}

TEST(Mlp, IdentityLinearLayerPassesInputThrough) {
  ParamTree p;
  p["m.0.w"] = Array::identity(3);
  p["m.0.b"] = Array({3});
  const Array x = Array::matrix({{0.3, -2.0, 7.0}});
  EXPECT_EQ(mlp_forward(p, "m", x, 0, false), x);
}

TEST(Mlp, WidthMismatchIsDimensionError) {
  ParamTree p;
  p["m.0.w"] = Array({3, 2});
  p["m.0.b"] = Array({2});
  EXPECT_THROW(mlp_forward(p, "m", Array({1, 4}), 0, false), DimensionError);
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  ParamTree params{{"w", Array::matrix({{1.5, -2.0}})}};
  const ParamTree before = params;
  AdamState s = AdamState::zeros_like(params);
  adam_step(params, {{"w", Array({1, 2})}}, s, 1e-3);
  EXPECT_EQ(params, before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradient) {
  ParamTree params{{"w", Array::matrix({{1.0, 1.0, 1.0}})}};
  AdamState s = AdamState::zeros_like(params);
  adam_step(params, {{"w", Array::matrix({{0.5, -3.0, 1e-2}})}}, s, 1e-3);
  EXPECT_NEAR(params["w"][0], 1.0 - 1e-3, 1e-8);
  EXPECT_NEAR(params["w"][1], 1.0 + 1e-3, 1e-8);
  EXPECT_NEAR(params["w"][2], 1.0 - 1e-3, 1e-8);
}

TEST(Adam, TreeMismatchIsStructureError) {
  ParamTree params{{"w", Array({2})}};
  AdamState s = AdamState::zeros_like(params);
  EXPECT_THROW(adam_step(params, {{"v", Array({2})}}, s, 1e-3), StructureError);
  EXPECT_THROW(adam_step(params, {{"w", Array({3})}}, s, 1e-3), StructureError);
}

TEST(Adam, IdenticalParamsStayIdentical) {
  ParamTree params{{"a", Array::scalar(0.7)}, {"b", Array::scalar(0.7)}};
  AdamState s = AdamState::zeros_like(params);
  for (int i = 0; i < 50; ++i) {
    const double g = std::sin(i);
    adam_step(params, {{"a", Array::scalar(g)}, {"b", Array::scalar(g)}}, s, 1e-2);
  }
  EXPECT_EQ(params["a"][0], params["b"][0]);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for every primitive

namespace {

using Builder = std::function<Var(Tape&, const Leaves&)>;

void expect_gradient_matches(const Builder& build, const ParamTree& inputs, double tol = 1e-5) {
  const ParamTree analytic = test::tape_gradient(build, inputs);
  const ParamTree numeric = test::numeric_gradient([&](const ParamTree& p) { return test::tape_value(build, p); }, inputs);
  EXPECT_LT(test::relative_error(analytic, numeric), tol);
}

// Projects onto fixed random weights so every output entry matters.
Var project(Tape& t, Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(v, t.constant(test::random_array(v.shape(), rng))));
}

}  // namespace

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  const ParamTree in{{"a", test::random_array({4, 3}, rng)},
                     {"b", test::random_array({3, 2}, rng)},
                     {"c", test::random_array({4, 3}, rng)},
                     {"bias", test::random_array({2}, rng)},
                     {"s", test::random_array({4, 1}, rng, 0.2, 1.0)}};
  const std::vector<std::size_t> ids{1, 0, 1, 2};
  const std::vector<std::size_t> rows{3, 0, 0, 2, 1};

  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::matmul(l.at("a"), l.at("b")), 1); }, in);
  expect_gradient_matches(
      [](Tape& t, const Leaves& l) { return project(t, ad::affine(l.at("a"), l.at("b"), l.at("bias")), 2); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::squareplus(l.at("a")), 3); }, in);
  expect_gradient_matches(
      [&](Tape& t, const Leaves& l) { return project(t, ad::segment_sum(l.at("a"), ids, 3), 4); }, in);
  expect_gradient_matches(
      [&](Tape& t, const Leaves& l) { return project(t, ad::gather_rows(l.at("a"), rows), 5); }, in);
  expect_gradient_matches(
      [](Tape& t, const Leaves& l) { return project(t, ad::concat_cols({l.at("a"), l.at("s"), l.at("c")}), 6); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::slice_cols(l.at("a"), 1, 3), 7); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::reshape(l.at("a"), {2, 6}), 8); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::add(l.at("a"), l.at("c")), 9); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::sub(l.at("a"), l.at("c")), 10); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::mul(l.at("a"), l.at("c")), 11); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::scale(l.at("a"), -2.5), 12); }, in);
  expect_gradient_matches([](Tape&, const Leaves& l) { return ad::sum(l.at("a")); }, in);
  expect_gradient_matches(
      [](Tape& t, const Leaves& l) { return project(t, ad::scale_rows(l.at("a"), l.at("s")), 13); }, in);
  expect_gradient_matches(
      [](Tape& t, const Leaves& l) { return project(t, ad::reciprocal_clamped(l.at("s"), 1e-6), 14); }, in);
  expect_gradient_matches([](Tape& t, const Leaves& l) { return project(t, ad::sqrt(l.at("s")), 15); }, in);
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, PrimitiveGradient, ::testing::Range(0, 5));

TEST(Tape, ReciprocalClampHasZeroGradientBelowFloor) {
  Tape t;
  const Var x = t.leaf(Array::matrix({{1e-9}, {2.0}}));
  t.backward(ad::sum(ad::reciprocal_clamped(x, 1e-6)));
  EXPECT_EQ(t.grad(x)[0], 0.0);
  EXPECT_DOUBLE_EQ(t.grad(x)[1], -0.25);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape t;
  const Var c = t.constant(Array::matrix({{2.0}}));
  const Var x = t.leaf(Array::matrix({{3.0}}));
  t.backward(ad::sum(ad::mul(c, x)));
  EXPECT_FALSE(t.requires_grad(c.id));
  EXPECT_EQ(t.grad(x)[0], 2.0);
}

TEST(Tape, BackwardIsDeterministic) {
  std::mt19937_64 rng(8);
  const Array a = test::random_array({5, 4}, rng);
  auto run = [&] {
    Tape t;
    const Var x = t.leaf(a);
    t.backward(ad::sum(ad::squareplus(ad::matmul(x, ad::reshape(x, {4, 5})))));
    return t.grad(x);
  };
  EXPECT_EQ(run(), run());
}
