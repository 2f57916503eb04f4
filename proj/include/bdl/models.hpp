#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bdl/array.hpp"
#include "bdl/autodiff.hpp"
#include "bdl/errors.hpp"
#include "bdl/integrator.hpp"
#include "bdl/optim.hpp"
#include "bdl/random.hpp"
#include "bdl/systems.hpp"

namespace bdl {

enum class ModelFamily { brognet, bdgnn, bfgn, bnn, nn };

inline std::string to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::brognet: return "brognet";
    case ModelFamily::bdgnn: return "bdgnn";
    case ModelFamily::bfgn: return "bfgn";
    case ModelFamily::bnn: return "bnn";
    case ModelFamily::nn: return "nn";
  }
  return "?";
}

inline ModelFamily parse_model_family(std::string_view s) {
  if (s == "brognet") return ModelFamily::brognet;
  if (s == "bdgnn") return ModelFamily::bdgnn;
  if (s == "bfgn") return ModelFamily::bfgn;
  if (s == "bnn") return ModelFamily::bnn;
  if (s == "nn") return ModelFamily::nn;
  throw ParameterError("unknown model family '" + std::string(s) +
                       "' (expected brognet, bdgnn, bfgn, bnn or nn)");
}

/// Graph families work on any system size; NN/BNN bake n into their shapes.
inline bool is_inductive(ModelFamily f) {
  return f == ModelFamily::brognet || f == ModelFamily::bdgnn || f == ModelFamily::bfgn;
}

/// NN predicts the next positions directly; the others predict (force, gamma).
inline bool is_stochastic(ModelFamily f) { return f != ModelFamily::nn; }

struct Architecture {
  ModelFamily family = ModelFamily::brognet;
  std::size_t n_types = 1;
  std::size_t n_particles = 0;  // only meaningful for bnn / nn
  std::size_t node_embed = 5;
  std::size_t edge_embed = 5;
  std::size_t hidden = 5;
  std::size_t hidden_layers = 2;
  std::size_t mp_layers = 1;
  bool force_head_linear = false;

  bool operator==(const Architecture&) const = default;
};

inline Architecture default_architecture(ModelFamily family, const SystemSpec& spec) {
  Architecture a;
  a.family = family;
  a.n_types = spec.n_types();
  switch (family) {
    case ModelFamily::brognet:
    case ModelFamily::bdgnn:
      break;
    case ModelFamily::bfgn:
      a.node_embed = 8;
      a.edge_embed = 8;
      a.hidden = 16;
      break;
    case ModelFamily::bnn:
    case ModelFamily::nn:
      a.n_particles = spec.n_particles;
      a.node_embed = 0;
      a.edge_embed = 0;
      a.hidden = 16;
      a.mp_layers = 0;
      break;
  }
  return a;
}

struct ModelParams {
  Architecture arch;
  ParamTree tensors;

  bool operator==(const ModelParams&) const = default;
};

// ---------------------------------------------------------------------------
// Graph

/// Directed graph snapshot. Edge e runs senders[e] -> receivers[e] and
/// carries w = X_sender - X_receiver. Several systems may be stacked into one
/// disconnected graph.
struct ParticleGraph {
  std::size_t n_nodes = 0;
  std::vector<std::size_t> senders;
  std::vector<std::size_t> receivers;
  Array node_types;     // one-hot [n, n_types]
  Array edge_features;  // [E, 3]

  std::size_t n_edges() const noexcept { return senders.size(); }
};

inline Array one_hot_types(const SystemSpec& spec, std::size_t copies = 1) {
  const std::size_t n = spec.n_particles;
  const std::size_t t = spec.n_types();
  Array out({copies * n, t});
  for (std::size_t b = 0; b < copies; ++b) {
    for (std::size_t i = 0; i < n; ++i) out(b * n + i, spec.particle_types[i]) = 1.0;
  }
  return out;
}

/// Graph over `x`, which holds one or more stacked copies ([B*n, 3]) of the
/// system described by `spec`.
inline ParticleGraph build_graph(const SystemSpec& spec, const Array& x) {
  const std::size_t n = spec.n_particles;
  if (x.cols() != 3 || n == 0 || x.rows() % n != 0) {
    throw DimensionError("build_graph: positions " + shape_str(x.shape()) + " for " +
                         std::to_string(n) + "-particle system");
  }
  const std::size_t copies = x.rows() / n;
  const std::vector<DirectedEdge> edges = spec.directed_edges();
  ParticleGraph g;
  g.n_nodes = x.rows();
  g.node_types = one_hot_types(spec, copies);
  g.senders.reserve(copies * edges.size());
  g.receivers.reserve(copies * edges.size());
  g.edge_features = Array({copies * edges.size(), 3});
  std::size_t e = 0;
  for (std::size_t b = 0; b < copies; ++b) {
    for (const DirectedEdge& edge : edges) {
      const std::size_t s = b * n + edge.sender;
      const std::size_t r = b * n + edge.receiver;
      g.senders.push_back(s);
      g.receivers.push_back(r);
      for (std::size_t c = 0; c < 3; ++c) g.edge_features(e, c) = x(s, c) - x(r, c);
      ++e;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Parameters

using Bindings = std::map<std::string, ad::Var>;

inline Bindings bind(ad::Tape& tape, const ParamTree& params, bool trainable) {
  Bindings b;
  for (const auto& [name, value] : params) b.emplace(name, tape.leaf(value, trainable));
  return b;
}

inline const ad::Var& lookup(const Bindings& b, const std::string& name) {
  auto it = b.find(name);
  if (it == b.end()) throw StructureError("missing parameter '" + name + "'");
  return it->second;
}

namespace detail {

struct LayerShape {
  std::string name;
  std::size_t fan_in;
  std::size_t fan_out;
};

inline void add_mlp(std::vector<LayerShape>& layers, const std::string& prefix, std::size_t in,
                    std::size_t hidden, std::size_t hidden_layers, std::size_t out) {
  std::size_t width = in;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    layers.push_back({prefix + "." + std::to_string(l), width, hidden});
    width = hidden;
  }
  layers.push_back({prefix + "." + std::to_string(hidden_layers), width, out});
}

}  // namespace detail

/// Every affine layer of a model, in declaration order.
inline std::vector<detail::LayerShape> layer_shapes(const Architecture& a) {
  std::vector<detail::LayerShape> layers;
  const std::size_t t = a.n_types;
  switch (a.family) {
    case ModelFamily::brognet:
    case ModelFamily::bdgnn:
      detail::add_mlp(layers, "node_embed", t, a.hidden, a.hidden_layers, a.node_embed);
      detail::add_mlp(layers, "edge_embed", 3, a.hidden, a.hidden_layers, a.edge_embed);
      for (std::size_t l = 0; l < a.mp_layers; ++l) {
        const std::string p = "mp" + std::to_string(l);
        layers.push_back({p + ".node", a.node_embed + 2 * a.edge_embed, a.node_embed});
        layers.push_back({p + ".edge", a.edge_embed + 2 * a.node_embed, a.edge_embed});
      }
      detail::add_mlp(layers, "force_head",
                      a.family == ModelFamily::brognet ? a.edge_embed : a.node_embed, a.hidden,
                      a.hidden_layers, 3);
      detail::add_mlp(layers, "gamma_head", t, a.hidden, a.hidden_layers, 1);
      break;
    case ModelFamily::bfgn:
      detail::add_mlp(layers, "node_embed", t + 6, a.hidden, a.hidden_layers, a.node_embed);
      detail::add_mlp(layers, "edge_embed", 3, a.hidden, a.hidden_layers, a.edge_embed);
      for (std::size_t l = 0; l < a.mp_layers; ++l) {
        const std::string p = "mp" + std::to_string(l);
        detail::add_mlp(layers, p + ".edge", a.edge_embed + 2 * a.node_embed, a.hidden,
                        a.hidden_layers, a.edge_embed);
        detail::add_mlp(layers, p + ".node", a.node_embed + a.edge_embed, a.hidden,
                        a.hidden_layers, a.node_embed);
      }
      detail::add_mlp(layers, "decoder", a.node_embed, a.hidden, a.hidden_layers, 4);
      break;
    case ModelFamily::bnn:
      detail::add_mlp(layers, "mlp", 3 * a.n_particles, a.hidden, a.hidden_layers,
                      4 * a.n_particles);
      break;
    case ModelFamily::nn:
      detail::add_mlp(layers, "mlp", 6 * a.n_particles, a.hidden, a.hidden_layers,
                      3 * a.n_particles);
      break;
  }
  return layers;
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t count = 0;
  for (const auto& [name, value] : p.tensors) count += value.size();
  return count;
}

/// Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)) (unit variance scaling by
/// fan-in), biases zero. Layers are filled in declaration order from one
/// seeded engine.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  if (!is_inductive(arch.family) && arch.n_particles == 0) {
    throw ParameterError(to_string(arch.family) + " needs a fixed particle count");
  }
  ModelParams p{arch, {}};
  std::mt19937_64 engine(derive_seed(seed, "init-params"));
  for (const auto& layer : layer_shapes(arch)) {
    const double limit = std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(layer.fan_in, 1)));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    Array w({layer.fan_in, layer.fan_out});
    for (double& v : w.values()) v = uniform(engine);
    p.tensors.emplace(layer.name + ".w", std::move(w));
    p.tensors.emplace(layer.name + ".b", Array({layer.fan_out}));
  }
  return p;
}

inline ModelParams init_params(ModelFamily family, const SystemSpec& spec, std::uint64_t seed) {
  return init_params(default_architecture(family, spec), seed);
}

// ---------------------------------------------------------------------------
// Building blocks

inline ad::Var affine_layer(const Bindings& b, const std::string& name, ad::Var x) {
  return ad::affine(x, lookup(b, name + ".w"), lookup(b, name + ".b"));
}

/// Affine layers `prefix.0 .. prefix.<layers>`, squareplus between them;
/// the last layer is activated only when `activate_output` is set.
inline ad::Var mlp_forward(const Bindings& b, const std::string& prefix, ad::Var x,
                           std::size_t hidden_layers, bool activate_output) {
  for (std::size_t l = 0; l <= hidden_layers; ++l) {
    x = affine_layer(b, prefix + "." + std::to_string(l), x);
    if (l < hidden_layers || activate_output) x = ad::squareplus(x);
  }
  return x;
}

/// Value-level MLP evaluation for a parameter subtree.
inline Array mlp_forward(const ParamTree& params, const std::string& prefix, const Array& input,
                         std::size_t hidden_layers, bool activate_output) {
  ad::Tape tape;
  const Bindings b = bind(tape, params, false);
  return mlp_forward(b, prefix, tape.constant(input), hidden_layers, activate_output).value();
}

/// Per-particle outputs of an SDE family on tape: forces [m,3], gamma [m,1].
struct SdeOutputs {
  ad::Var forces;
  ad::Var gamma;
};

namespace detail {

struct Embeddings {
  ad::Var nodes;
  ad::Var edges;
};

// Shared by BroGNet and BDGNN: separate embedding MLPs, then L rounds of node
// and edge updates, both computed from the previous round's values.
inline Embeddings message_passing(const Bindings& b, const Architecture& a, ad::Tape& tape,
                                  const ParticleGraph& g) {
  ad::Var h = mlp_forward(b, "node_embed", tape.constant(g.node_types), a.hidden_layers, true);
  ad::Var e = mlp_forward(b, "edge_embed", tape.constant(g.edge_features), a.hidden_layers, true);
  for (std::size_t l = 0; l < a.mp_layers; ++l) {
    const std::string p = "mp" + std::to_string(l);
    ad::Var incoming = ad::segment_sum(e, g.receivers, g.n_nodes);
    ad::Var outgoing = ad::segment_sum(e, g.senders, g.n_nodes);
    ad::Var h_next = ad::squareplus(affine_layer(b, p + ".node", ad::concat_cols({h, incoming, outgoing})));
    ad::Var e_next = ad::squareplus(affine_layer(
        b, p + ".edge",
        ad::concat_cols({e, ad::gather_rows(h, g.senders), ad::gather_rows(h, g.receivers)})));
    h = h_next;
    e = e_next;
  }
  return {h, e};
}

inline ad::Var gamma_head(const Bindings& b, const Architecture& a, ad::Tape& tape,
                          const ParticleGraph& g) {
  return mlp_forward(b, "gamma_head", tape.constant(g.node_types), a.hidden_layers, true);
}

inline void require_family(const ModelParams& p, ModelFamily f) {
  if (p.arch.family != f) {
    throw StructureError("parameters are for " + to_string(p.arch.family) + ", expected " +
                         to_string(f));
  }
}

inline void require_types(const ModelParams& p, const ParticleGraph& g) {
  if (g.node_types.cols() != p.arch.n_types || g.node_types.rows() != g.n_nodes) {
    throw DimensionError("graph node types " + shape_str(g.node_types.shape()) + " for a model with " +
                         std::to_string(p.arch.n_types) + " types");
  }
}

}  // namespace detail

/// Momentum-conserving interaction network: per-edge pairwise forces from
/// final edge embeddings, aggregated as incoming minus outgoing.
inline SdeOutputs brognet_forward(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                                  const ParticleGraph& g) {
  detail::require_family(p, ModelFamily::brognet);
  detail::require_types(p, g);
  const Architecture& a = p.arch;
  const detail::Embeddings z = detail::message_passing(b, a, tape, g);
  ad::Var pair_force = mlp_forward(b, "force_head", z.edges, a.hidden_layers, !a.force_head_linear);
  ad::Var forces = ad::sub(ad::segment_sum(pair_force, g.receivers, g.n_nodes),
                           ad::segment_sum(pair_force, g.senders, g.n_nodes));
  return {forces, detail::gamma_head(b, a, tape, g)};
}

/// Same network, force read directly off the node embeddings.
inline SdeOutputs bdgnn_forward(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                                const ParticleGraph& g) {
  detail::require_family(p, ModelFamily::bdgnn);
  detail::require_types(p, g);
  const Architecture& a = p.arch;
  const detail::Embeddings z = detail::message_passing(b, a, tape, g);
  ad::Var forces = mlp_forward(b, "force_head", z.nodes, a.hidden_layers, !a.force_head_linear);
  return {forces, detail::gamma_head(b, a, tape, g)};
}

/// Encode-process-decode graph network over absolute positions and
/// velocities; incoming-edge aggregation only.
inline SdeOutputs bfgn_forward(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                               const Array& x, const Array& xdot, const ParticleGraph& g) {
  detail::require_family(p, ModelFamily::bfgn);
  detail::require_types(p, g);
  if (x.rows() != g.n_nodes || x.cols() != 3 || xdot.shape() != x.shape()) {
    throw DimensionError("bfgn: positions " + shape_str(x.shape()) + ", velocities " +
                         shape_str(xdot.shape()) + " for " + std::to_string(g.n_nodes) + " nodes");
  }
  const Architecture& a = p.arch;
  ad::Var node_in = ad::concat_cols({tape.constant(g.node_types), tape.constant(x), tape.constant(xdot)});
  ad::Var h = mlp_forward(b, "node_embed", node_in, a.hidden_layers, true);
  ad::Var e = mlp_forward(b, "edge_embed", tape.constant(g.edge_features), a.hidden_layers, true);
  for (std::size_t l = 0; l < a.mp_layers; ++l) {
    const std::string pre = "mp" + std::to_string(l);
    e = mlp_forward(b, pre + ".edge",
                    ad::concat_cols({e, ad::gather_rows(h, g.senders), ad::gather_rows(h, g.receivers)}),
                    a.hidden_layers, true);
    h = mlp_forward(b, pre + ".node", ad::concat_cols({h, ad::segment_sum(e, g.receivers, g.n_nodes)}),
                    a.hidden_layers, true);
  }
  ad::Var out = mlp_forward(b, "decoder", h, a.hidden_layers, false);
  return {ad::slice_cols(out, 0, 3), ad::squareplus(ad::slice_cols(out, 3, 4))};
}

namespace detail {

inline void require_flat(const ModelParams& p, const Array& x_flat, std::size_t per_particle) {
  const std::size_t n = p.arch.n_particles;
  if (x_flat.rank() != 2 || x_flat.cols() != per_particle * n) {
    throw DimensionError(to_string(p.arch.family) + " expects inputs of width " +
                         std::to_string(per_particle * n) + " (n=" + std::to_string(n) + "), got " +
                         shape_str(x_flat.shape()));
  }
}

}  // namespace detail

/// Fully connected SDE baseline: flattened positions [B, 3n] -> forces and
/// gammas for every particle ([B*n, 3] and [B*n, 1]).
inline SdeOutputs bnn_forward(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                              const Array& x_flat) {
  detail::require_family(p, ModelFamily::bnn);
  detail::require_flat(p, x_flat, 3);
  const std::size_t n = p.arch.n_particles;
  const std::size_t batch = x_flat.rows();
  ad::Var out = mlp_forward(b, "mlp", tape.constant(x_flat), p.arch.hidden_layers, false);
  ad::Var forces = ad::reshape(ad::slice_cols(out, 0, 3 * n), {batch * n, 3});
  ad::Var gamma = ad::reshape(ad::squareplus(ad::slice_cols(out, 3 * n, 4 * n)), {batch * n, 1});
  return {forces, gamma};
}

/// Direct next-position regressor: [B, 6n] (positions then velocities) ->
/// [B, 3n], linear output.
inline ad::Var nn_forward(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                          const Array& x_flat) {
  detail::require_family(p, ModelFamily::nn);
  detail::require_flat(p, x_flat, 6);
  return mlp_forward(b, "mlp", tape.constant(x_flat), p.arch.hidden_layers, false);
}

// ---------------------------------------------------------------------------
// Value-level predictions

constexpr double kGammaFloor = 1e-6;

struct Prediction {
  Array forces;  // [n, 3]
  Array gamma;   // [n]

  /// Per-step positional std sqrt(2 kBT dt / gamma).
  Array sigma_step(double kbt, double dt) const {
    Array s(gamma.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(2.0 * kbt * dt / std::max(gamma[i], kGammaFloor));
    return s;
  }
  /// Noise amplitude sqrt(2 gamma kBT).
  Array sigma_report(double kbt) const {
    Array s(gamma.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(2.0 * gamma[i] * kbt);
    return s;
  }
};

namespace detail {

inline Prediction to_prediction(const SdeOutputs& out) {
  const Array& g = out.gamma.value();
  return {out.forces.value(), g.reshaped({g.size()})};
}

}  // namespace detail

inline Prediction brognet_forward(const ModelParams& p, const ParticleGraph& g) {
  ad::Tape tape;
  return detail::to_prediction(brognet_forward(p, bind(tape, p.tensors, false), tape, g));
}

inline Prediction bdgnn_forward(const ModelParams& p, const ParticleGraph& g) {
  ad::Tape tape;
  return detail::to_prediction(bdgnn_forward(p, bind(tape, p.tensors, false), tape, g));
}

inline Prediction bfgn_forward(const ModelParams& p, const Array& x, const Array& xdot,
                               const ParticleGraph& g) {
  ad::Tape tape;
  return detail::to_prediction(bfgn_forward(p, bind(tape, p.tensors, false), tape, x, xdot, g));
}

/// `x_flat` is [3n] for one configuration or [B, 3n] for a batch.
inline Prediction bnn_forward(const ModelParams& p, const Array& x_flat) {
  ad::Tape tape;
  const Array in = x_flat.rank() == 1 ? x_flat.reshaped({1, x_flat.size()}) : x_flat;
  return detail::to_prediction(bnn_forward(p, bind(tape, p.tensors, false), tape, in));
}

/// `x_flat` is [6n] ([positions, velocities]) or [B, 6n]; returns [B, 3n].
inline Array nn_forward(const ModelParams& p, const Array& x_flat) {
  ad::Tape tape;
  const Array in = x_flat.rank() == 1 ? x_flat.reshaped({1, x_flat.size()}) : x_flat;
  return nn_forward(p, bind(tape, p.tensors, false), tape, in).value();
}

// ---------------------------------------------------------------------------
// Family-agnostic one-step prediction

/// Stacked batch of configurations of one system: positions and velocities
/// are [B*n, 3].
struct StepInputs {
  const SystemSpec* spec;
  Array positions;
  Array velocities;
};

struct StepOutputs {
  ad::Var mean;                  // predicted E[X_{t+dt}], [B*n, 3]
  std::optional<ad::Var> gamma;  // [B*n, 1]; absent for NN
};

inline void check_model_fits(const ModelParams& p, const SystemSpec& spec) {
  if (p.arch.n_types != spec.n_types()) {
    throw CapabilityError("model has " + std::to_string(p.arch.n_types) +
                          " particle types, system has " + std::to_string(spec.n_types()));
  }
  if (!is_inductive(p.arch.family) && p.arch.n_particles != spec.n_particles) {
    throw CapabilityError(to_string(p.arch.family) + " is not inductive: trained for n=" +
                          std::to_string(p.arch.n_particles) + ", asked for n=" +
                          std::to_string(spec.n_particles));
  }
}

/// Raw (force, gamma) outputs of an SDE family on tape.
inline SdeOutputs sde_outputs(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                              const StepInputs& in) {
  const SystemSpec& spec = *in.spec;
  const std::size_t n = spec.n_particles;
  const std::size_t batch = in.positions.rows() / n;
  switch (p.arch.family) {
    case ModelFamily::brognet: return brognet_forward(p, b, tape, build_graph(spec, in.positions));
    case ModelFamily::bdgnn: return bdgnn_forward(p, b, tape, build_graph(spec, in.positions));
    case ModelFamily::bfgn:
      return bfgn_forward(p, b, tape, in.positions, in.velocities, build_graph(spec, in.positions));
    case ModelFamily::bnn: return bnn_forward(p, b, tape, in.positions.reshaped({batch, 3 * n}));
    case ModelFamily::nn: break;
  }
  throw CapabilityError("nn does not predict forces");
}

/// Euler-Maruyama mean X + F dt / gamma (SDE families) or the direct
/// prediction (NN).
inline StepOutputs predict_step(const ModelParams& p, const Bindings& b, ad::Tape& tape,
                                const StepInputs& in) {
  const SystemSpec& spec = *in.spec;
  check_model_fits(p, spec);
  const std::size_t n = spec.n_particles;
  const std::size_t batch = in.positions.rows() / n;
  if (p.arch.family == ModelFamily::nn) {
    const std::size_t w = 3 * n;
    Array flat({batch, 2 * w});
    for (std::size_t r = 0; r < batch; ++r) {
      std::copy_n(in.positions.data() + r * w, w, flat.data() + r * 2 * w);
      std::copy_n(in.velocities.data() + r * w, w, flat.data() + r * 2 * w + w);
    }
    return {ad::reshape(nn_forward(p, b, tape, flat), {batch * n, 3}), std::nullopt};
  }
  const SdeOutputs out = sde_outputs(p, b, tape, in);
  ad::Var mobility = ad::scale(ad::reciprocal_clamped(out.gamma, kGammaFloor), spec.dt);
  ad::Var mean = ad::add(tape.constant(in.positions), ad::scale_rows(out.forces, mobility));
  return {mean, out.gamma};
}

/// Forces and gammas for a single configuration of `spec`.
inline Prediction predict(const ModelParams& p, const SystemSpec& spec, const Array& x,
                          const Array& xdot) {
  check_model_fits(p, spec);
  ad::Tape tape;
  const Bindings b = bind(tape, p.tensors, false);
  return detail::to_prediction(sde_outputs(p, b, tape, StepInputs{&spec, x, xdot}));
}

/// Stepper that advances stacked trajectories with a learned model. SDE
/// families sample the Euler-Maruyama noise with their predicted gamma; NN
/// is deterministic.
inline BatchStepper model_stepper(const ModelParams& params, const SystemSpec& spec) {
  check_model_fits(params, spec);
  return [params, spec](const Array& current, const Array& previous, const Array& noise) {
    Array velocity(current.shape());
    for (std::size_t i = 0; i < current.size(); ++i) velocity[i] = (current[i] - previous[i]) / spec.dt;
    ad::Tape tape;
    const Bindings b = bind(tape, params.tensors, false);
    const StepInputs in{&spec, current, std::move(velocity)};
    if (params.arch.family == ModelFamily::nn) return predict_step(params, b, tape, in).mean.value();
    const SdeOutputs out = sde_outputs(params, b, tape, in);
    const Array& g = out.gamma.value();
    Array forces = out.forces.value();
    std::vector<double> gamma(g.size());
    std::vector<std::size_t> broken;
    for (std::size_t i = 0; i < gamma.size(); ++i) {
      gamma[i] = std::isfinite(g[i]) ? std::max(g[i], kGammaFloor) : 1.0;
      bool ok = std::isfinite(g[i]);
      for (std::size_t c = 0; c < 3; ++c) ok = ok && std::isfinite(forces(i, c));
      if (!ok) {
        broken.push_back(i);
        for (std::size_t c = 0; c < 3; ++c) forces(i, c) = 0.0;
      }
    }
    // Non-finite model outputs become non-finite positions so the rollout's
    // divergence handling sees them.
    Array next = em_step(spec, current, forces, gamma, noise);
    for (std::size_t i : broken) {
      for (std::size_t c = 0; c < 3; ++c) next(i, c) = std::numeric_limits<double>::quiet_NaN();
    }
    return next;
  };
}

}  // namespace bdl
