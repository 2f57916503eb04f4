#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bdl/io.hpp"
#include "bdl/systems.hpp"
#include "support.hpp"

using namespace bdl;

TEST(DefaultSpec, LinearFiveMatchesReferenceTable) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  EXPECT_EQ(s.n_particles, 5u);
  EXPECT_EQ(s.bonds.size(), 5u);
  EXPECT_EQ(s.directed_edges().size(), 10u);  // each spring stored in both directions
  EXPECT_EQ(s.stiffness, 1.0);
  EXPECT_EQ(s.equilibrium_length, 1.0);
  EXPECT_EQ(s.gamma_per_type, std::vector<double>{1.0});
  EXPECT_EQ(s.kbt, 1.0);
  EXPECT_EQ(s.dt, 1e-3);
  EXPECT_EQ(s.force_law, ForceLaw::linear);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(s.bonds[i].i, i);
    EXPECT_EQ(s.bonds[i].j, (i + 1) % 5);
  }
}

TEST(DefaultSpec, BinaryTenHasThreeToSevenTypes) {
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  EXPECT_EQ(s.particle_types, (std::vector<std::size_t>{0, 0, 0, 1, 1, 1, 1, 1, 1, 1}));
  EXPECT_EQ(s.gamma_per_type, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(s.n_types(), 2u);
}

TEST(DefaultSpec, NonlinearTwoIsSmallestRing) {
  const SystemSpec s = default_spec(SystemKind::nonlinear, 2);
  EXPECT_EQ(s.force_law, ForceLaw::cubic);
  const auto edges = s.directed_edges();
  ASSERT_EQ(edges.size(), 2u);
  EXPECT_EQ(edges[0], (DirectedEdge{0, 1}));
  EXPECT_EQ(edges[1], (DirectedEdge{1, 0}));
}

TEST(DefaultSpec, InvalidSizesAreParameterErrors) {
  EXPECT_THROW(default_spec(SystemKind::linear, 1), ParameterError);
  EXPECT_THROW(default_spec(SystemKind::binary, 7), ParameterError);
}

TEST(SystemSpec, ValidateRejectsBadFields) {
  auto bad = [](auto mutate) {
    SystemSpec s = default_spec(SystemKind::linear, 5);
    mutate(s);
    return s;
  };
  EXPECT_THROW(bad([](SystemSpec& s) { s.gamma_per_type = {0.0}; }).validate(), ParameterError);
  EXPECT_THROW(bad([](SystemSpec& s) { s.kbt = -1.0; }).validate(), ParameterError);
  EXPECT_THROW(bad([](SystemSpec& s) { s.dt = 0.0; }).validate(), ParameterError);
  EXPECT_THROW(bad([](SystemSpec& s) { s.bonds.push_back({0, 0}); }).validate(), ParameterError);
  EXPECT_THROW(bad([](SystemSpec& s) { s.bonds.push_back({1, 0}); }).validate(), ParameterError);
  EXPECT_THROW(bad([](SystemSpec& s) { s.particle_types[2] = 1; }).validate(), ParameterError);
}

TEST(SpringForce, EquilibriumRingIsForceFree) {
  for (std::size_t n : {2u, 5u, 12u}) {
    const SystemSpec s = default_spec(SystemKind::linear, n);
    const double radius = 1.0 / (2.0 * std::sin(std::numbers::pi / static_cast<double>(n)));
    Array x({n, 3});
    for (std::size_t i = 0; i < n; ++i) {
      const double phi = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
      x(i, 0) = radius * std::cos(phi);
      x(i, 1) = radius * std::sin(phi);
    }
    const Array f = spring_force(s, x);
    for (double v : f.values()) EXPECT_NEAR(v, 0.0, 1e-12);
  }
}

TEST(SpringForce, LinearStretchedPair) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  const Array f = spring_force(s, Array::matrix({{0, 0, 0}, {2, 0, 0}}));
  EXPECT_EQ(f, Array::matrix({{1, 0, 0}, {-1, 0, 0}}));
}

TEST(SpringForce, CubicStretchedPair) {
  const SystemSpec s = default_spec(SystemKind::nonlinear, 2);
  const Array f = spring_force(s, Array::matrix({{0, 0, 0}, {1.5, 0, 0}}));
  EXPECT_DOUBLE_EQ(f(0, 0), 0.125);
  EXPECT_DOUBLE_EQ(f(1, 0), -0.125);
}

TEST(SpringForce, CoincidentParticlesNameTheBond) {
  const SystemSpec s = default_spec(SystemKind::linear, 3);
  try {
    spring_force(s, Array::matrix({{0, 0, 0}, {1, 0, 0}, {1, 0, 0}}));
    FAIL() << "expected SingularityError";
  } catch (const SingularityError& e) {
    EXPECT_NE(std::string(e.what()).find("1 and 2"), std::string::npos) << e.what();
  }
}

TEST(SpringForce, ThirdLawAndTranslationInvariance) {
  std::mt19937_64 rng(5);
  for (SystemKind kind : {SystemKind::linear, SystemKind::nonlinear, SystemKind::binary}) {
    const SystemSpec s = default_spec(kind, 10);
    for (int trial = 0; trial < 50; ++trial) {
      const Array x = test::random_array({10, 3}, rng, -2.0, 2.0);
      const Array f = spring_force(s, x);
      for (std::size_t c = 0; c < 3; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < 10; ++i) total += f(i, c);
        EXPECT_NEAR(total, 0.0, 1e-10);
      }
      Array shifted = x;
      const Array c = test::random_array({3}, rng, -100.0, 100.0);
      for (std::size_t i = 0; i < 10; ++i) {
        for (std::size_t k = 0; k < 3; ++k) shifted(i, k) += c[k];
      }
      const Array g = spring_force(s, shifted);
      for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], g[i], 1e-10);
    }
  }
}

namespace {

double potential(const SystemSpec& s, const Array& x) {
  double u = 0.0;
  for (const Bond& b : s.bonds) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) d2 += (x(b.i, c) - x(b.j, c)) * (x(b.i, c) - x(b.j, c));
    const double ext = std::sqrt(d2) - s.equilibrium_length;
    u += s.force_law == ForceLaw::linear ? s.stiffness * ext * ext / 2.0 : s.stiffness * std::pow(ext, 4) / 4.0;
  }
  return u;
}

}  // namespace

TEST(SpringForce, IsNegativePotentialGradient) {
  std::mt19937_64 rng(9);
  for (SystemKind kind : {SystemKind::linear, SystemKind::nonlinear}) {
    const SystemSpec s = default_spec(kind, 5);
    for (int trial = 0; trial < 20; ++trial) {
      const ParamTree x{{"x", test::random_array({5, 3}, rng, -1.5, 1.5)}};
      const ParamTree grad = test::numeric_gradient([&](const ParamTree& p) { return potential(s, p.at("x")); }, x);
      Array neg_f = spring_force(s, x.at("x"));
      for (double& v : neg_f.values()) v = -v;
      EXPECT_LT(test::relative_error({{"x", neg_f}}, grad), 1e-5);
    }
  }
}

TEST(GroundTruthSigma, ClosedForms) {
  SystemSpec s = default_spec(SystemKind::binary, 10);
  EXPECT_NEAR(ground_truth_sigma(s, 0), std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(ground_truth_sigma(s, 9), 2.0);
  s.kbt = 0.0;
  EXPECT_EQ(ground_truth_sigma(s, 0), 0.0);
  EXPECT_THROW(ground_truth_sigma(s, 10), IndexError);
}

TEST(SystemSpec, KeyValueRoundTrip) {
  for (SystemKind kind : {SystemKind::linear, SystemKind::nonlinear, SystemKind::binary}) {
    SystemSpec s = default_spec(kind, 20);
    s.kbt = 0.1 + 1e-17;
    s.dt = 1.0 / 3.0;
    KvDocument doc;
    io::write_spec(doc, s);
    EXPECT_EQ(io::read_spec(KvDocument::parse(doc.str())), s);
  }
}

TEST(SystemSpec, ReadRejectsInvalidSpecs) {
  KvDocument doc;
  io::write_spec(doc, default_spec(SystemKind::linear, 5));
  doc.set("system", "gamma_per_type", "-1");
  EXPECT_THROW(io::read_spec(doc), ParameterError);
  doc.set("system", "gamma_per_type", "abc");
  EXPECT_THROW(io::read_spec(doc), ConfigError);
}
