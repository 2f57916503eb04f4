#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bdl/array.hpp"
#include "bdl/errors.hpp"
#include "bdl/random.hpp"
#include "bdl/systems.hpp"

namespace bdl {

constexpr double kDivergenceLimit = 1e6;

/// One Euler-Maruyama step of dX = F/gamma dt + sqrt(2 kBT / gamma) dW, with
/// dW = sqrt(dt) * noise. Rows of `x` are particles; the system spec only
/// supplies kBT and dt, so stacked batches of several systems work too.
inline Array em_step(const SystemSpec& spec, const Array& x, const Array& force,
                     std::span<const double> gamma, const Array& noise) {
  const std::size_t rows = x.rows();
  if (x.cols() != 3 || force.shape() != x.shape() || noise.shape() != x.shape() ||
      gamma.size() != rows) {
    throw DimensionError("em_step: positions " + shape_str(x.shape()) + ", forces " +
                         shape_str(force.shape()) + ", noise " + shape_str(noise.shape()) +
                         ", " + std::to_string(gamma.size()) + " gammas");
  }
  if (!(spec.dt > 0.0)) throw ParameterError("em_step: dt must be > 0");
  Array out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    if (!(gamma[i] > 0.0)) {
      throw ParameterError("em_step: gamma of particle " + std::to_string(i) + " is not positive");
    }
    const double drift = spec.dt / gamma[i];
    const double diffusion = std::sqrt(2.0 * spec.kbt * spec.dt / gamma[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double f = force(i, c);
      if (!std::isfinite(f)) {
        throw NumericalError("em_step: non-finite force on particle " + std::to_string(i));
      }
      out(i, c) = x(i, c) + f * drift + diffusion * noise(i, c);
    }
  }
  return out;
}

/// Regular ring polygon with side length R in the xy-plane, each coordinate
/// jittered by N(0, (jitter * R)^2).
inline Array random_initial_condition(const SystemSpec& spec, std::uint64_t seed,
                                      double jitter = 0.1) {
  const std::size_t n = spec.n_particles;
  const double r = spec.equilibrium_length;
  const double radius = r / (2.0 * std::sin(std::numbers::pi / static_cast<double>(n)));
  Array x({n, 3});
  std::mt19937_64 engine(derive_seed(seed, "initial-condition"));
  std::normal_distribution<double> normal(0.0, jitter * r);
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    x(i, 0) = radius * std::cos(phi);
    x(i, 1) = radius * std::sin(phi);
    x(i, 2) = 0.0;
  }
  if (jitter > 0.0) {
    for (double& v : x.values()) v += normal(engine);
  }
  return x;
}

/// Stacked standard normals for a batch of trajectories at one step.
/// Trajectory b draws from NoiseStream(seeds[b], step).
inline Array batch_noise(std::span<const std::uint64_t> seeds, std::size_t n,
                         std::uint64_t step) {
  Array noise({seeds.size() * n, 3});
  for (std::size_t b = 0; b < seeds.size(); ++b) {
    NoiseStream stream(seeds[b], step);
    double* dst = noise.data() + b * n * 3;
    for (std::size_t k = 0; k < n * 3; ++k) dst[k] = stream.normal();
  }
  return noise;
}

/// Positions indexed by (trajectory, step, particle, coordinate).
struct TrajectoryEnsemble {
  SystemSpec spec;
  std::size_t n_traj = 0;
  std::size_t n_steps = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> positions;  // [n_traj, n_steps + 1, n, 3]

  TrajectoryEnsemble() = default;
  TrajectoryEnsemble(SystemSpec s, std::size_t traj, std::size_t steps)
      : spec(std::move(s)), n_traj(traj), n_steps(steps),
        positions(traj * (steps + 1) * spec.n_particles * 3, 0.0) {}

  std::size_t index(std::size_t traj, std::size_t step, std::size_t particle,
                    std::size_t coord) const {
    return ((traj * (n_steps + 1) + step) * spec.n_particles + particle) * 3 + coord;
  }
  double at(std::size_t traj, std::size_t step, std::size_t particle, std::size_t coord) const {
    return positions[index(traj, step, particle, coord)];
  }
  double& at(std::size_t traj, std::size_t step, std::size_t particle, std::size_t coord) {
    return positions[index(traj, step, particle, coord)];
  }

  Array frame(std::size_t traj, std::size_t step) const {
    const std::size_t n = spec.n_particles;
    const auto begin = positions.begin() + static_cast<std::ptrdiff_t>(index(traj, step, 0, 0));
    return Array({n, 3}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n * 3)));
  }

  void set_frame(std::size_t traj, std::size_t step, std::span<const double> values) {
    std::copy(values.begin(), values.end(),
              positions.begin() + static_cast<std::ptrdiff_t>(index(traj, step, 0, 0)));
  }

  double duration() const { return static_cast<double>(n_steps) * spec.dt; }
};

/// Advances a stacked batch [B*n, 3] by one step. `previous` is the prior
/// frame (equal to `current` at step 0); `noise` holds standard normals.
using BatchStepper =
    std::function<Array(const Array& current, const Array& previous, const Array& noise)>;

enum class DivergencePolicy { raise, mark };

struct BatchRollout {
  TrajectoryEnsemble ensemble;
  std::vector<bool> diverged;
  std::vector<std::size_t> divergence_step;

  std::size_t n_diverged() const {
    std::size_t count = 0;
    for (bool d : diverged) count += d ? 1 : 0;
    return count;
  }
};

/// Rolls out one trajectory per entry of `seeds`, starting from the matching
/// initial condition. Trajectories never interact, so each trajectory's path
/// depends only on its own (X0, seed).
inline BatchRollout rollout_batch(const SystemSpec& spec, std::span<const Array> initial,
                                  std::span<const std::uint64_t> seeds, std::size_t steps,
                                  const BatchStepper& stepper,
                                  DivergencePolicy policy = DivergencePolicy::raise) {
  if (initial.size() != seeds.size()) {
    throw DimensionError("rollout: " + std::to_string(initial.size()) + " initial conditions for " +
                         std::to_string(seeds.size()) + " seeds");
  }
  const std::size_t n = spec.n_particles;
  const std::size_t batch = seeds.size();
  BatchRollout out{TrajectoryEnsemble(spec, batch, steps), std::vector<bool>(batch, false),
                   std::vector<std::size_t>(batch, 0)};
  out.ensemble.seeds.assign(seeds.begin(), seeds.end());
  Array current({batch * n, 3});
  for (std::size_t b = 0; b < batch; ++b) {
    if (initial[b].rows() != n || initial[b].cols() != 3) {
      throw DimensionError("rollout: initial condition of shape " + shape_str(initial[b].shape()) +
                           " for " + std::to_string(n) + " particles");
    }
    std::copy_n(initial[b].data(), n * 3, current.data() + b * n * 3);
    out.ensemble.set_frame(b, 0, initial[b].values());
  }
  Array previous = current;
  for (std::size_t step = 1; step <= steps; ++step) {
    Array noise = batch_noise(seeds, n, step - 1);
    Array next = stepper(current, previous, noise);
    if (next.shape() != current.shape()) {
      throw DimensionError("rollout: stepper returned shape " + shape_str(next.shape()));
    }
    for (std::size_t b = 0; b < batch; ++b) {
      std::span<double> block(next.data() + b * n * 3, n * 3);
      if (out.diverged[b]) {
        std::copy_n(current.data() + b * n * 3, n * 3, block.begin());
      } else {
        bool bad = false;
        for (double v : block) bad = bad || !std::isfinite(v) || std::abs(v) > kDivergenceLimit;
        if (bad) {
          if (policy == DivergencePolicy::raise) {
            throw DivergenceError("trajectory " + std::to_string(b) + " diverged at step " +
                                      std::to_string(step),
                                  step);
          }
          out.diverged[b] = true;
          out.divergence_step[b] = step;
          std::copy_n(current.data() + b * n * 3, n * 3, block.begin());
        }
      }
      out.ensemble.set_frame(b, step, block);
    }
    previous = std::move(current);
    current = std::move(next);
  }
  return out;
}

/// Stepper for a force field and per-particle gammas of a single system,
/// applied independently to each stacked copy.
inline BatchStepper sde_stepper(const SystemSpec& spec,
                                std::function<Array(const Array&)> force_fn,
                                std::vector<double> gamma) {
  return [spec, force_fn = std::move(force_fn), gamma = std::move(gamma)](
             const Array& current, const Array&, const Array& noise) {
    const std::size_t n = spec.n_particles;
    const std::size_t batch = current.rows() / n;
    Array force({batch * n, 3});
    std::vector<double> g(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
      Array x({n, 3}, std::vector<double>(current.data() + b * n * 3, current.data() + (b + 1) * n * 3));
      Array f = force_fn(x);
      std::copy_n(f.data(), n * 3, force.data() + b * n * 3);
      std::copy(gamma.begin(), gamma.end(), g.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return em_step(spec, current, force, g, noise);
  };
}

inline BatchStepper ground_truth_stepper(const SystemSpec& spec) {
  return sde_stepper(
      spec, [spec](const Array& x) { return spring_force(spec, x); }, particle_gammas(spec));
}

/// Single trajectory driven by an arbitrary force field and gamma vector.
inline TrajectoryEnsemble rollout(const SystemSpec& spec, const Array& x0,
                                  std::function<Array(const Array&)> force_fn,
                                  std::vector<double> gamma, std::size_t steps,
                                  std::uint64_t seed) {
  if (steps < 1) throw ParameterError("rollout needs at least one step");
  const Array initial[] = {x0};
  const std::uint64_t seeds[] = {seed};
  return rollout_batch(spec, initial, seeds, steps,
                       sde_stepper(spec, std::move(force_fn), std::move(gamma)))
      .ensemble;
}

/// Ground-truth ensemble from `n_traj` random initial conditions.
inline TrajectoryEnsemble generate_ensemble(const SystemSpec& spec, std::size_t n_traj,
                                            std::size_t steps, std::uint64_t seed) {
  spec.validate();
  std::vector<Array> initial;
  std::vector<std::uint64_t> seeds;
  const std::uint64_t init_root = derive_seed(seed, "initial-conditions");
  const std::uint64_t noise_root = derive_seed(seed, "noise");
  for (std::size_t t = 0; t < n_traj; ++t) {
    initial.push_back(random_initial_condition(spec, derive_seed(init_root, t, 0)));
    seeds.push_back(derive_seed(noise_root, t, 0));
  }
  return rollout_batch(spec, initial, seeds, steps, ground_truth_stepper(spec)).ensemble;
}

/// Consecutive-step pairs (X_t, X_{t+dt}) with finite-difference velocities
/// (X_t - X_{t-dt})/dt, zero where no predecessor exists.
struct StepPairDataset {
  SystemSpec spec;
  Array inputs;      // [B, n, 3]
  Array targets;     // [B, n, 3]
  Array velocities;  // [B, n, 3]

  std::size_t size() const { return inputs.empty() ? 0 : inputs.shape()[0]; }
};

inline StepPairDataset extract_pairs(const TrajectoryEnsemble& ens, std::size_t points_per_traj) {
  if (points_per_traj > ens.n_steps) {
    throw ParameterError("cannot extract " + std::to_string(points_per_traj) +
                         " pairs from trajectories of " + std::to_string(ens.n_steps) + " steps");
  }
  const std::size_t n = ens.spec.n_particles;
  const std::size_t total = ens.n_traj * points_per_traj;
  StepPairDataset data{ens.spec, Array({total, n, 3}), Array({total, n, 3}), Array({total, n, 3})};
  std::size_t row = 0;
  for (std::size_t t = 0; t < ens.n_traj; ++t) {
    for (std::size_t s = 0; s < points_per_traj; ++s, ++row) {
      for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t k = (row * n + p) * 3 + c;
          data.inputs[k] = ens.at(t, s, p, c);
          data.targets[k] = ens.at(t, s + 1, p, c);
          data.velocities[k] = s > 0 ? (ens.at(t, s, p, c) - ens.at(t, s - 1, p, c)) / ens.spec.dt : 0.0;
        }
      }
    }
  }
  return data;
}

inline StepPairDataset generate_training_data(const SystemSpec& spec, std::size_t n_traj,
                                              std::size_t points_per_traj, std::uint64_t seed) {
  return extract_pairs(generate_ensemble(spec, n_traj, points_per_traj, seed), points_per_traj);
}

}  // namespace bdl
