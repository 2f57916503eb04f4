#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bdl/array.hpp"
#include "bdl/errors.hpp"

namespace bdl {

enum class SystemKind { linear, nonlinear, binary };
enum class ForceLaw { linear, cubic };

inline std::string to_string(SystemKind k) {
  switch (k) {
    case SystemKind::linear: return "linear";
    case SystemKind::nonlinear: return "nonlinear";
    case SystemKind::binary: return "binary";
  }
  return "?";
}

inline SystemKind parse_system_kind(std::string_view s) {
  if (s == "linear") return SystemKind::linear;
  if (s == "nonlinear") return SystemKind::nonlinear;
  if (s == "binary") return SystemKind::binary;
  throw ParameterError("unknown system kind '" + std::string(s) +
                       "' (expected linear, nonlinear or binary)");
}

inline std::string to_string(ForceLaw f) { return f == ForceLaw::linear ? "linear" : "cubic"; }

inline ForceLaw parse_force_law(std::string_view s) {
  if (s == "linear") return ForceLaw::linear;
  if (s == "cubic") return ForceLaw::cubic;
  throw ParameterError("unknown force law '" + std::string(s) + "' (expected linear or cubic)");
}

struct Bond {
  std::size_t i;
  std::size_t j;
  bool operator==(const Bond&) const = default;
};

struct DirectedEdge {
  std::size_t sender;
  std::size_t receiver;
  bool operator==(const DirectedEdge&) const = default;
};

/// Physical description of a spring system under overdamped Langevin
/// dynamics. Each undirected spring is a Bond; the graph view carries it as
/// two directed edges.
struct SystemSpec {
  SystemKind kind = SystemKind::linear;
  std::size_t n_particles = 0;
  std::vector<Bond> bonds;
  ForceLaw force_law = ForceLaw::linear;
  double stiffness = 1.0;
  double equilibrium_length = 1.0;
  double mass = 1.0;  // unused by the overdamped equations
  std::vector<std::size_t> particle_types;
  std::vector<double> gamma_per_type;
  double kbt = 1.0;
  double dt = 1e-3;

  std::size_t n_types() const noexcept { return gamma_per_type.size(); }

  double gamma(std::size_t particle) const { return gamma_per_type.at(particle_types.at(particle)); }

  std::vector<DirectedEdge> directed_edges() const {
    std::vector<DirectedEdge> edges;
    edges.reserve(2 * bonds.size());
    for (const Bond& b : bonds) {
      edges.push_back({b.i, b.j});
      edges.push_back({b.j, b.i});
    }
    return edges;
  }

  void validate() const {
    if (n_particles < 2) {
      throw ParameterError("system needs at least 2 particles, got " + std::to_string(n_particles));
    }
    if (particle_types.size() != n_particles) {
      throw ParameterError("particle_types has " + std::to_string(particle_types.size()) +
                           " entries for " + std::to_string(n_particles) + " particles");
    }
    const std::size_t expected_types = kind == SystemKind::binary ? 2 : 1;
    if (gamma_per_type.size() != expected_types) {
      throw ParameterError(to_string(kind) + " system needs exactly " +
                           std::to_string(expected_types) + " particle type(s), got " +
                           std::to_string(gamma_per_type.size()));
    }
    for (double g : gamma_per_type) {
      if (!(g > 0.0) || !std::isfinite(g)) throw ParameterError("every gamma must be positive");
    }
    for (std::size_t t : particle_types) {
      if (t >= gamma_per_type.size()) {
        throw ParameterError("particle type " + std::to_string(t) + " has no gamma");
      }
    }
    if (!(kbt >= 0.0) || !std::isfinite(kbt)) throw ParameterError("kBT must be >= 0");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ParameterError("dt must be > 0");
    if (!(stiffness >= 0.0)) throw ParameterError("stiffness must be >= 0");
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const Bond& b : bonds) {
      if (b.i >= n_particles || b.j >= n_particles || b.i == b.j) {
        throw ParameterError("bond (" + std::to_string(b.i) + "," + std::to_string(b.j) +
                             ") does not join two distinct particles of " +
                             std::to_string(n_particles));
      }
      if (!seen.insert(std::minmax(b.i, b.j)).second) {
        throw ParameterError("duplicate bond (" + std::to_string(b.i) + "," +
                             std::to_string(b.j) + ")");
      }
    }
  }

  bool operator==(const SystemSpec&) const = default;
};

/// Closed ring: bonds {i, i+1 mod n}, each stored once (n = 2 has one bond).
inline std::vector<Bond> ring_bonds(std::size_t n) {
  std::vector<Bond> bonds;
  if (n == 2) {
    bonds.push_back({0, 1});
    return bonds;
  }
  for (std::size_t i = 0; i < n; ++i) bonds.push_back({i, (i + 1) % n});
  return bonds;
}

/// Benchmark defaults: unit mass, stiffness, rest length, kBT; dt = 1e-3;
/// binary systems mix type 0 (gamma 1) and type 1 (gamma 2) at 3:7.
inline SystemSpec default_spec(SystemKind kind, std::size_t n) {
  if (n < 2) throw ParameterError("system needs at least 2 particles, got " + std::to_string(n));
  if (kind == SystemKind::binary && n % 10 != 0) {
    throw ParameterError("binary system needs n divisible by 10 for the 3:7 type ratio, got " +
                         std::to_string(n));
  }
  SystemSpec spec;
  spec.kind = kind;
  spec.n_particles = n;
  spec.bonds = ring_bonds(n);
  spec.force_law = kind == SystemKind::nonlinear ? ForceLaw::cubic : ForceLaw::linear;
  if (kind == SystemKind::binary) {
    const std::size_t n_first = 3 * n / 10;
    spec.particle_types.assign(n, 1);
    for (std::size_t i = 0; i < n_first; ++i) spec.particle_types[i] = 0;
    spec.gamma_per_type = {1.0, 2.0};
  } else {
    spec.particle_types.assign(n, 0);
    spec.gamma_per_type = {1.0};
  }
  return spec;
}

struct State {
  Array positions;  // [n, 3]
  double time = 0.0;
};

/// Deterministic spring forces, [n,3]. Each bond contributes a scalar
/// magnitude -k (d - R) or -k (d - R)^3 along (X_i - X_j)/d to particle i and
/// the opposite to particle j.
inline Array spring_force(const SystemSpec& spec, const Array& x) {
  const std::size_t n = spec.n_particles;
  if (x.rows() != n || x.cols() != 3) {
    throw DimensionError("spring_force: positions of shape " + shape_str(x.shape()) + " for " +
                         std::to_string(n) + " particles");
  }
  Array f({n, 3});
  for (const Bond& b : spec.bonds) {
    const double dx = x(b.i, 0) - x(b.j, 0);
    const double dy = x(b.i, 1) - x(b.j, 1);
    const double dz = x(b.i, 2) - x(b.j, 2);
    const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (!(d > 1e-9)) {
      throw SingularityError("bonded particles " + std::to_string(b.i) + " and " +
                             std::to_string(b.j) + " coincide");
    }
    const double ext = d - spec.equilibrium_length;
    const double mag = spec.force_law == ForceLaw::linear ? -spec.stiffness * ext
                                                          : -spec.stiffness * ext * ext * ext;
    const double s = mag / d;
    f(b.i, 0) += s * dx;
    f(b.i, 1) += s * dy;
    f(b.i, 2) += s * dz;
    f(b.j, 0) -= s * dx;
    f(b.j, 1) -= s * dy;
    f(b.j, 2) -= s * dz;
  }
  return f;
}

inline double ground_truth_sigma(const SystemSpec& spec, std::size_t particle) {
  if (particle >= spec.n_particles) {
    throw IndexError("particle " + std::to_string(particle) + " out of range");
  }
  return std::sqrt(2.0 * spec.gamma(particle) * spec.kbt);
}

inline std::vector<double> particle_gammas(const SystemSpec& spec) {
  std::vector<double> g(spec.n_particles);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = spec.gamma(i);
  return g;
}

}  // namespace bdl
