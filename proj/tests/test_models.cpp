#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "bdl/io.hpp"
#include "bdl/models.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace bdl;

namespace {

constexpr ModelFamily kSde[] = {ModelFamily::brognet, ModelFamily::bdgnn, ModelFamily::bfgn, ModelFamily::bnn};
constexpr ModelFamily kAll[] = {ModelFamily::brognet, ModelFamily::bdgnn, ModelFamily::bfgn, ModelFamily::bnn,
                                ModelFamily::nn};

ParticleGraph single_node_graph(std::size_t n_types = 1) {
  ParticleGraph g;
  g.n_nodes = 1;
  g.node_types = Array({1, n_types});
  g.node_types(0, 0) = 1.0;
  g.edge_features = Array({0, 3});
  return g;
}

}  // namespace

TEST(BuildGraph, TwoParticleEdgeFeatures) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  const ParticleGraph g = build_graph(s, Array::matrix({{0, 0, 0}, {1, 2, 3}}));
  EXPECT_EQ(g.n_nodes, 2u);
  ASSERT_EQ(g.n_edges(), 2u);
  EXPECT_EQ(g.senders, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(g.receivers, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(g.edge_features, Array::matrix({{-1, -2, -3}, {1, 2, 3}}));
  EXPECT_EQ(g.node_types, Array::matrix({{1}, {1}}));
}

TEST(BuildGraph, BinaryOneHotAndStackedCopies) {
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  std::mt19937_64 rng(1);
  const Array x = test::random_array({30, 3}, rng);
  const ParticleGraph g = build_graph(s, x);
  EXPECT_EQ(g.node_types.shape(), (Shape{30, 2}));
  for (std::size_t r = 0; r < 30; ++r) {
    const std::size_t t = s.particle_types[r % 10];
    EXPECT_EQ(g.node_types(r, t), 1.0);
    EXPECT_EQ(g.node_types(r, 1 - t), 0.0);
  }
  ASSERT_EQ(g.n_edges(), 60u);
  for (std::size_t e = 0; e < g.n_edges(); ++e) {
    EXPECT_EQ(g.senders[e] / 10, g.receivers[e] / 10) << "edge crosses copies";
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(g.edge_features(e, c), x(g.senders[e], c) - x(g.receivers[e], c));
    }
  }
  EXPECT_THROW(build_graph(s, Array({11, 3})), DimensionError);
}

TEST(InitParams, DeterministicAndSeedSensitive) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  for (ModelFamily f : kAll) {
    EXPECT_EQ(init_params(f, s, 3), init_params(f, s, 3));
    EXPECT_NE(init_params(f, s, 3), init_params(f, s, 4));
  }
}

TEST(InitParams, WeightBoundsAndZeroBiases) {
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  for (ModelFamily f : kAll) {
    const ModelParams p = init_params(f, s, 0);
    for (const auto& [name, t] : p.tensors) {
      if (name.ends_with(".b")) {
        for (double v : t.values()) EXPECT_EQ(v, 0.0) << name;
      } else {
        const double limit = std::sqrt(3.0 / static_cast<double>(t.rows()));
        for (double v : t.values()) EXPECT_LE(std::abs(v), limit) << name;
      }
    }
  }
}

TEST(InitParams, ParameterCountClosedForm) {
  // MLP in -> h -> h -> out with biases.
  auto mlp = [](std::size_t in, std::size_t h, std::size_t out) { return (in + 1) * h + (h + 1) * h + (h + 1) * out; };
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  const std::size_t t = 1, ne = 5, ee = 5, h = 5;
  const std::size_t graph_common = mlp(t, h, ne) + mlp(3, h, ee) + (ne + 2 * ee + 1) * ne +
                                   (ee + 2 * ne + 1) * ee + mlp(t, h, 1);
  EXPECT_EQ(parameter_count(init_params(ModelFamily::brognet, s, 0)), graph_common + mlp(ee, h, 3));
  EXPECT_EQ(parameter_count(init_params(ModelFamily::bdgnn, s, 0)), graph_common + mlp(ne, h, 3));
  EXPECT_EQ(parameter_count(init_params(ModelFamily::bnn, s, 0)), mlp(15, 16, 20));
  EXPECT_EQ(parameter_count(init_params(ModelFamily::nn, s, 0)), mlp(30, 16, 15));
  // BroGNet size does not depend on n.
  EXPECT_EQ(parameter_count(init_params(ModelFamily::brognet, default_spec(SystemKind::linear, 500), 0)),
            graph_common + mlp(ee, h, 3));
}

TEST(InitParams, NonInductiveNeedsParticleCount) {
  Architecture a;
  a.family = ModelFamily::nn;
  EXPECT_THROW(init_params(a, 0), ParameterError);
}

TEST(BroGNet, NoEdgesMeansNoForce) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  const ModelParams p = oracle::random_params(ModelFamily::brognet, s, 2);
  const Prediction out = brognet_forward(p, single_node_graph());
  EXPECT_EQ(out.forces, Array({1, 3}));
  EXPECT_GT(out.gamma[0], 0.0);
}

TEST(BroGNet, TwoBodyForcesAreExactlyOpposite) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ModelParams p = oracle::random_params(ModelFamily::brognet, s, seed);
    const Prediction out = predict(p, s, test::random_array({2, 3}, rng, -2, 2), Array({2, 3}));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.forces(0, c), -out.forces(1, c));
  }
}

TEST(BroGNet, ConservesMomentumForRandomWeights) {
  std::mt19937_64 rng(4);
  for (std::size_t n : {2u, 5u, 50u}) {
    for (SystemKind kind : {SystemKind::linear, SystemKind::binary}) {
      if (kind == SystemKind::binary && n % 10 != 0) continue;
      const SystemSpec s = default_spec(kind, n);
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const ModelParams p = oracle::random_params(ModelFamily::brognet, s, seed);
        EXPECT_LT(oracle::momentum_residual(p, s, oracle::random_positions(s, rng)), 1e-9) << "n=" << n;
      }
    }
  }
}

TEST(BDGNN, DoesNotConserveMomentumInGeneral) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  std::mt19937_64 rng(5);
  const ModelParams p = oracle::random_params(ModelFamily::bdgnn, s, 1);
  const Prediction out = predict(p, s, oracle::random_positions(s, rng), Array({5, 3}));
  double worst = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) sum += out.forces(i, c);
    worst = std::max(worst, std::abs(sum));
  }
  EXPECT_GT(worst, 1e-6);
}

TEST(GraphModels, TranslationInvariance) {
  std::mt19937_64 rng(6);
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  for (ModelFamily f : {ModelFamily::brognet, ModelFamily::bdgnn}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ModelParams p = oracle::random_params(f, s, seed);
      const Array x = oracle::random_positions(s, rng);
      EXPECT_LT(oracle::translation_deviation(p, s, x, Array({10, 3}), {0.5, -3.0, 7.25}), 1e-12) << to_string(f);
    }
  }
  // BFGN sees absolute positions.
  const ModelParams p = oracle::random_params(ModelFamily::bfgn, s, 0);
  EXPECT_GT(oracle::translation_deviation(p, s, oracle::random_positions(s, rng), Array({10, 3}), {1, 1, 1}),
            1e-6);
}

TEST(GraphModels, PermutationEquivariance) {
  std::mt19937_64 rng(7);
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (ModelFamily f : {ModelFamily::brognet, ModelFamily::bdgnn, ModelFamily::bfgn}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::shuffle(perm.begin(), perm.end(), rng);
      const ModelParams p = oracle::random_params(f, s, seed);
      const Array x = oracle::random_positions(s, rng);
      const Array v = test::random_array({10, 3}, rng);
      // Segment sums see each node's two edges in the same relative order
      // only up to reassociation, so allow rounding.
      EXPECT_LT(oracle::permutation_deviation(p, s, x, v, perm), 1e-12) << to_string(f);
    }
  }
}

TEST(Models, OutputShapesAndPositiveGamma) {
  std::mt19937_64 rng(8);
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  for (ModelFamily f : kSde) {
    const ModelParams p = oracle::random_params(f, s, 0);
    const Prediction out = predict(p, s, oracle::random_positions(s, rng), test::random_array({5, 3}, rng));
    EXPECT_EQ(out.forces.shape(), (Shape{5, 3})) << to_string(f);
    EXPECT_EQ(out.gamma.shape(), (Shape{5})) << to_string(f);
    for (double g : out.gamma.values()) EXPECT_GT(g, 0.0) << to_string(f);
  }
  const ModelParams nn = init_params(ModelFamily::nn, s, 0);
  EXPECT_EQ(nn_forward(nn, Array({2, 30})).shape(), (Shape{2, 15}));
  EXPECT_THROW(predict(nn, s, Array({5, 3}), Array({5, 3})), CapabilityError);
}

TEST(BFGN, SingleNodeDependsOnlyOnItsOwnState) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  const ModelParams p = oracle::random_params(ModelFamily::bfgn, s, 3);
  const Array x = Array::matrix({{0.1, 0.2, 0.3}});
  const Prediction a = bfgn_forward(p, x, Array({1, 3}), single_node_graph());
  const Prediction b = bfgn_forward(p, x, Array({1, 3}), single_node_graph());
  EXPECT_EQ(a.forces, b.forces);
  EXPECT_THROW(bfgn_forward(p, Array({2, 3}), Array({2, 3}), single_node_graph()), DimensionError);
}

TEST(BNN, RejectsWrongWidth) {
  const SystemSpec s = default_spec(SystemKind::linear, 5);
  const ModelParams p = init_params(ModelFamily::bnn, s, 0);
  EXPECT_EQ(bnn_forward(p, Array({15})).forces.shape(), (Shape{5, 3}));
  EXPECT_EQ(bnn_forward(p, Array({4, 15})).forces.shape(), (Shape{20, 3}));
  EXPECT_THROW(bnn_forward(p, Array({18})), DimensionError);
}

TEST(NN, ZeroWeightsOutputLastBias) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  ModelParams p = init_params(ModelFamily::nn, s, 0);
  for (auto& [name, t] : p.tensors) std::fill(t.values().begin(), t.values().end(), 0.0);
  Array& bias = p.tensors.at("mlp.2.b");
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = static_cast<double>(i) - 2.5;
  std::mt19937_64 rng(9);
  const Array out = nn_forward(p, test::random_array({12}, rng));
  EXPECT_EQ(out, bias.reshaped({1, 6}));
  EXPECT_THROW(nn_forward(p, Array({6})), DimensionError);
}

TEST(Models, WrongFamilyOrTypesAreErrors) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  const ModelParams bro = init_params(ModelFamily::brognet, s, 0);
  const ParticleGraph g = build_graph(s, Array({2, 3}));
  EXPECT_THROW(bdgnn_forward(bro, g), StructureError);
  EXPECT_THROW(brognet_forward(bro, single_node_graph(2)), DimensionError);
  ModelParams missing = bro;
  missing.tensors.erase("force_head.0.w");
  EXPECT_THROW(brognet_forward(missing, g), StructureError);
}

TEST(Models, CapabilityChecks) {
  const SystemSpec five = default_spec(SystemKind::linear, 5);
  const SystemSpec fifty = default_spec(SystemKind::linear, 50);
  const SystemSpec binary = default_spec(SystemKind::binary, 10);
  EXPECT_NO_THROW(check_model_fits(init_params(ModelFamily::brognet, five, 0), fifty));
  EXPECT_THROW(check_model_fits(init_params(ModelFamily::bnn, five, 0), fifty), CapabilityError);
  EXPECT_THROW(check_model_fits(init_params(ModelFamily::nn, five, 0), fifty), CapabilityError);
  EXPECT_THROW(check_model_fits(init_params(ModelFamily::brognet, five, 0), binary), CapabilityError);
  EXPECT_THROW(model_stepper(init_params(ModelFamily::bnn, five, 0), fifty), CapabilityError);
}

TEST(ModelStepper, NonFiniteOutputsBecomeNaNPositions) {
  const SystemSpec s = default_spec(SystemKind::linear, 2);
  ModelParams p = init_params(ModelFamily::brognet, s, 0);
  p.tensors.at("force_head.2.b")[0] = std::numeric_limits<double>::infinity();
  const BatchStepper step = model_stepper(p, s);
  const Array x = Array::matrix({{0, 0, 0}, {1, 0, 0}});
  const Array next = step(x, x, Array({2, 3}));
  for (double v : next.values()) EXPECT_TRUE(std::isnan(v));
}

TEST(ParamsContainer, BitExactRoundTrip) {
  std::mt19937_64 rng(10);
  const SystemSpec s = default_spec(SystemKind::binary, 10);
  for (ModelFamily f : kAll) {
    ModelParams p = oracle::random_params(f, s, 5);
    // Awkward values survive unchanged.
    Array& w = p.tensors.begin()->second;
    w[0] = 4.9406564584124654e-324;
    w[1] = -0.0;
    w[2] = 1.0 / 3.0;
    const std::string bytes = io::encode_params(p);
    const ModelParams q = io::decode_params(bytes);
    EXPECT_EQ(q.arch, p.arch);
    ASSERT_EQ(q.tensors.size(), p.tensors.size());
    for (const auto& [name, t] : p.tensors) {
      const Array& u = q.tensors.at(name);
      ASSERT_EQ(u.shape(), t.shape());
      EXPECT_EQ(std::memcmp(u.data(), t.data(), t.size() * sizeof(double)), 0) << name;
    }
    EXPECT_EQ(io::encode_params(q), bytes);
  }
}

TEST(ParamsContainer, SaveAndLoadFile) {
  test::TempDir dir;
  const ModelParams p = oracle::random_params(ModelFamily::brognet, default_spec(SystemKind::linear, 5), 1);
  io::save_params(dir / "m.params", p);
  EXPECT_EQ(io::load_params(dir / "m.params"), p);
  EXPECT_THROW(io::load_params(dir / "absent.params"), IoError);
}

TEST(ParamsContainer, CorruptionIsDetected) {
  const ModelParams p = init_params(ModelFamily::brognet, default_spec(SystemKind::linear, 5), 1);
  const std::string bytes = io::encode_params(p);
  EXPECT_THROW(io::decode_params(bytes.substr(0, bytes.size() - 8)), IoError);
  EXPECT_THROW(io::decode_params(bytes + "x"), IoError);
  EXPECT_THROW(io::decode_params("not a container"), IoError);
  std::string wrong_kind = bytes;
  wrong_kind.replace(wrong_kind.find("model-params"), 12, "model-paramz");
  EXPECT_THROW(io::decode_params(wrong_kind), IoError);
  std::string wrong_family = bytes;
  wrong_family.replace(wrong_family.find("brognet"), 7, "bfgn   ");
  EXPECT_ANY_THROW(io::decode_params(wrong_family));
}
