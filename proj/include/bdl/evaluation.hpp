#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "bdl/errors.hpp"
#include "bdl/integrator.hpp"
#include "bdl/models.hpp"
#include "bdl/random.hpp"
#include "bdl/systems.hpp"

namespace bdl {

constexpr double kDegenerateSigma = 1e-12;

/// Mean and unbiased std across trajectories for every (step, particle,
/// coordinate).
struct EnsembleStats {
  std::size_t n_steps = 0;
  std::size_t n_particles = 0;
  std::size_t n_samples = 0;
  std::vector<double> mean;  // [n_steps + 1, n, 3]
  std::vector<double> sd;

  std::size_t index(std::size_t step, std::size_t particle, std::size_t coord) const {
    return (step * n_particles + particle) * 3 + coord;
  }
  double mu(std::size_t step, std::size_t p, std::size_t c) const { return mean[index(step, p, c)]; }
  double sigma(std::size_t step, std::size_t p, std::size_t c) const { return sd[index(step, p, c)]; }
};

/// Statistics over the trajectories of `ens` not excluded by `exclude`.
inline EnsembleStats ensemble_stats(const TrajectoryEnsemble& ens,
                                    const std::vector<bool>& exclude = {}) {
  std::vector<std::size_t> use;
  for (std::size_t t = 0; t < ens.n_traj; ++t) {
    if (exclude.empty() || !exclude[t]) use.push_back(t);
  }
  if (use.size() < 2) {
    throw ParameterError("ensemble statistics need at least 2 trajectories, got " +
                         std::to_string(use.size()));
  }
  EnsembleStats s;
  s.n_steps = ens.n_steps;
  s.n_particles = ens.spec.n_particles;
  s.n_samples = use.size();
  const std::size_t cells = (s.n_steps + 1) * s.n_particles * 3;
  s.mean.assign(cells, 0.0);
  s.sd.assign(cells, 0.0);
  const double count = static_cast<double>(use.size());
  for (std::size_t step = 0; step <= s.n_steps; ++step) {
    for (std::size_t p = 0; p < s.n_particles; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        double mu = 0.0;
        for (std::size_t t : use) mu += ens.at(t, step, p, c);
        mu /= count;
        double ss = 0.0;
        for (std::size_t t : use) {
          const double d = ens.at(t, step, p, c) - mu;
          ss += d * d;
        }
        s.mean[s.index(step, p, c)] = mu;
        s.sd[s.index(step, p, c)] = std::sqrt(ss / (count - 1.0));
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Position error

struct PositionError {
  std::vector<double> per_particle;
  std::size_t skipped_coords = 0;  // coordinates with a degenerate ground-truth std

  double mean() const {
    double acc = 0.0;
    for (double v : per_particle) acc += v;
    return per_particle.empty() ? 0.0 : acc / static_cast<double>(per_particle.size());
  }
};

/// Std-normalized distance between a predicted mean position and the
/// ground-truth ensemble mean, for a single particle.
inline double position_error(std::span<const double, 3> gt_mean, std::span<const double, 3> gt_sigma,
                             std::span<const double, 3> pred_mean, std::size_t* skipped = nullptr) {
  double acc = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    if (gt_sigma[c] < kDegenerateSigma) {
      if (skipped) ++*skipped;
      continue;
    }
    const double z = (gt_mean[c] - pred_mean[c]) / gt_sigma[c];
    acc += z * z;
  }
  return std::sqrt(acc);
}

/// Per-particle position error at `step`. `pred_mean` is [n, 3].
inline PositionError position_error(const EnsembleStats& gt, const Array& pred_mean, std::size_t step) {
  if (step > gt.n_steps || pred_mean.rows() != gt.n_particles || pred_mean.cols() != 3) {
    throw DimensionError("position_error: step " + std::to_string(step) + ", prediction " +
                         shape_str(pred_mean.shape()));
  }
  PositionError out;
  for (std::size_t p = 0; p < gt.n_particles; ++p) {
    const std::size_t k = gt.index(step, p, 0);
    out.per_particle.push_back(position_error(std::span<const double, 3>(gt.mean.data() + k, 3),
                                              std::span<const double, 3>(gt.sd.data() + k, 3),
                                              std::span<const double, 3>(pred_mean.data() + p * 3, 3),
                                              &out.skipped_coords));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brownian error

/// RMSE over particles between sqrt(2 gamma_hat kBT) and sqrt(2 gamma kBT).
/// `gamma_hat` holds one value per particle of `spec`, or several stacked
/// configurations of it.
inline double brownian_error(std::span<const double> gamma_hat, const SystemSpec& spec) {
  const std::size_t n = spec.n_particles;
  if (gamma_hat.empty() || gamma_hat.size() % n != 0) {
    throw DimensionError("brownian_error: " + std::to_string(gamma_hat.size()) + " gammas for " +
                         std::to_string(n) + " particles");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < gamma_hat.size(); ++k) {
    const double d = std::sqrt(2.0 * std::max(gamma_hat[k], 0.0) * spec.kbt) -
                     std::sqrt(2.0 * spec.gamma(k % n) * spec.kbt);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(gamma_hat.size()));
}

// ---------------------------------------------------------------------------
// KL roll-out error

/// D_KL(N(mu0, sigma0^2) || N(mu1, sigma1^2)). sigma0 below 1e-12 (a
/// deterministic prediction) is floored there.
inline double kl_normal(double mu0, double sigma0, double mu1, double sigma1) {
  if (sigma1 < kDegenerateSigma) {
    throw NumericalError("KL divergence against a degenerate ground-truth distribution");
  }
  const double s0 = std::max(sigma0, kDegenerateSigma);
  const double dm = mu0 - mu1;
  return std::log(sigma1 / s0) + (s0 * s0 + dm * dm) / (2.0 * sigma1 * sigma1) - 0.5;
}

/// Mean KL over particles and coordinates at one step.
inline double kl_step(const EnsembleStats& pred, const EnsembleStats& gt, std::size_t step) {
  double acc = 0.0;
  for (std::size_t p = 0; p < gt.n_particles; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      acc += kl_normal(pred.mu(step, p, c), pred.sigma(step, p, c), gt.mu(step, p, c), gt.sigma(step, p, c));
    }
  }
  return acc / static_cast<double>(gt.n_particles * 3);
}

inline void require_comparable(const EnsembleStats& a, const EnsembleStats& b) {
  if (a.n_steps != b.n_steps || a.n_particles != b.n_particles) {
    throw DimensionError("ensembles differ in step grid or particle count");
  }
}

/// Per-step D_KL(predicted || ground truth) for steps 1..n_steps (step 0 is
/// the shared initial condition).
inline std::vector<double> kl_rollout_error(const EnsembleStats& gt, const EnsembleStats& pred) {
  require_comparable(gt, pred);
  std::vector<double> out;
  for (std::size_t s = 1; s <= gt.n_steps; ++s) out.push_back(kl_step(pred, gt, s));
  return out;
}

inline std::vector<double> kl_rollout_error(const TrajectoryEnsemble& gt, const TrajectoryEnsemble& pred) {
  if (gt.spec.n_particles != pred.spec.n_particles || gt.n_steps != pred.n_steps ||
      gt.spec.dt != pred.spec.dt) {
    throw DimensionError("kl_rollout_error: ensembles differ in particle count or step grid");
  }
  return kl_rollout_error(ensemble_stats(gt), ensemble_stats(pred));
}

/// exp(mean(log x)); zero if any entry is zero.
inline double geometric_mean(std::span<const double> values) {
  if (values.empty()) throw ParameterError("geometric mean of an empty series");
  double acc = 0.0;
  for (double v : values) {
    if (v < 0.0 || !std::isfinite(v)) throw NumericalError("geometric mean needs finite values >= 0");
    if (v == 0.0) return 0.0;
    acc += std::log(v);
  }
  return std::exp(acc / static_cast<double>(values.size()));
}

// ---------------------------------------------------------------------------
// Protocol

struct EvalProtocol {
  std::size_t n_init = 100;
  std::size_t seeds_per_init = 10;
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double max_diverged_fraction = 0.1;

  void validate() const {
    if (n_init == 0) throw ParameterError("evaluation needs at least one initial condition");
    if (seeds_per_init < 2) throw ParameterError("evaluation needs at least 2 seeds per initial condition");
    if (steps == 0) throw ParameterError("evaluation needs at least one step");
    if (threads == 0) throw ParameterError("threads must be >= 1");
  }
};

struct MetricReport {
  std::string family;
  SystemSpec spec;
  EvalProtocol protocol;
  std::vector<double> position_error;  // per step 1..steps
  std::vector<double> kl;              // per step 1..steps
  double brownian_error = 0.0;
  double gm_position_error = 0.0;
  double gm_kl = 0.0;
  std::size_t n_trajectories = 0;
  std::size_t n_diverged = 0;
  std::size_t skipped_coords = 0;
  std::vector<double> gamma_hat_per_type;  // NaN for types the model has no gamma for
};

/// Something that can be rolled out under the evaluation protocol: a learned
/// model or the ground-truth force field.
struct Dynamics {
  std::string label;
  bool stochastic = true;
  std::function<BatchStepper(const SystemSpec&)> stepper;
  // Predicted gamma for every particle of one configuration.
  std::function<std::vector<double>(const SystemSpec&, const Array&)> gamma;
};

inline Dynamics learned_dynamics(const ModelParams& params) {
  Dynamics d;
  d.label = to_string(params.arch.family);
  d.stochastic = is_stochastic(params.arch.family);
  d.stepper = [params](const SystemSpec& spec) { return model_stepper(params, spec); };
  d.gamma = [params](const SystemSpec& spec, const Array& x) {
    if (!is_stochastic(params.arch.family)) return std::vector<double>(spec.n_particles, 0.0);
    const Prediction p = predict(params, spec, x, Array(x.shape()));
    return std::vector<double>(p.gamma.values().begin(), p.gamma.values().end());
  };
  return d;
}

/// The true force law with gammas scaled by `gamma_scale`.
inline Dynamics ground_truth_dynamics(double gamma_scale = 1.0) {
  Dynamics d;
  d.label = "ground-truth";
  d.stepper = [gamma_scale](const SystemSpec& spec) {
    std::vector<double> g = particle_gammas(spec);
    for (double& v : g) v *= gamma_scale;
    return sde_stepper(spec, [spec](const Array& x) { return spring_force(spec, x); }, std::move(g));
  };
  d.gamma = [gamma_scale](const SystemSpec& spec, const Array&) {
    std::vector<double> g = particle_gammas(spec);
    for (double& v : g) v *= gamma_scale;
    return g;
  };
  return d;
}

namespace detail {

struct InitResult {
  std::vector<double> position_error;
  std::vector<double> kl;
  std::vector<double> gamma_hat;
  std::size_t diverged = 0;
  std::size_t skipped = 0;
  bool usable = true;
};

inline InitResult evaluate_init(const Dynamics& dynamics, const BatchStepper& stepper,
                                const SystemSpec& spec, const EvalProtocol& proto, std::size_t init) {
  const std::uint64_t root = derive_seed(proto.seed, "evaluation");
  const Array x0 = random_initial_condition(spec, derive_seed(derive_seed(root, "initial-conditions"), init, 0));
  std::vector<Array> initial(proto.seeds_per_init, x0);
  std::vector<std::uint64_t> gt_seeds, pred_seeds;
  for (std::size_t j = 0; j < proto.seeds_per_init; ++j) {
    gt_seeds.push_back(derive_seed(derive_seed(root, "ground-truth"), init, j));
    pred_seeds.push_back(derive_seed(derive_seed(root, "prediction"), init, j));
  }
  const BatchRollout gt = rollout_batch(spec, initial, gt_seeds, proto.steps, ground_truth_stepper(spec));
  const BatchRollout pred = rollout_batch(spec, initial, pred_seeds, proto.steps, stepper, DivergencePolicy::mark);
  InitResult r;
  r.diverged = pred.n_diverged();
  r.gamma_hat = dynamics.gamma(spec, x0);
  if (proto.seeds_per_init - r.diverged < 2) {
    r.usable = false;
    return r;
  }
  const EnsembleStats gs = ensemble_stats(gt.ensemble);
  const EnsembleStats ps = ensemble_stats(pred.ensemble, pred.diverged);
  r.kl = kl_rollout_error(gs, ps);
  for (std::size_t s = 1; s <= proto.steps; ++s) {
    Array mean({spec.n_particles, 3});
    for (std::size_t p = 0; p < spec.n_particles; ++p) {
      for (std::size_t c = 0; c < 3; ++c) mean(p, c) = ps.mu(s, p, c);
    }
    const PositionError pe = position_error(gs, mean, s);
    r.position_error.push_back(pe.mean());
    r.skipped += pe.skipped_coords;
  }
  return r;
}

}  // namespace detail

/// Ground-truth and predicted ensembles from `n_init` random initial
/// conditions with `seeds_per_init` noise seeds each. Predicted rollouts use
/// noise streams independent of the ground truth but shared by every model,
/// so two models evaluated with the same protocol see identical noise.
/// Initial conditions run in parallel; the reduction is in index order.
inline MetricReport evaluate(const Dynamics& dynamics, const SystemSpec& spec, const EvalProtocol& proto) {
  proto.validate();
  spec.validate();
  const BatchStepper stepper = dynamics.stepper(spec);
  std::vector<detail::InitResult> results(proto.n_init);
  const std::size_t workers = std::min(proto.threads, proto.n_init);
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < proto.n_init; i += workers) {
        results[i] = detail::evaluate_init(dynamics, stepper, spec, proto, i);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  MetricReport report;
  report.family = dynamics.label;
  report.spec = spec;
  report.protocol = proto;
  report.n_trajectories = proto.n_init * proto.seeds_per_init;
  report.position_error.assign(proto.steps, 0.0);
  report.kl.assign(proto.steps, 0.0);
  std::vector<double> gammas;
  std::size_t usable = 0;
  for (const auto& r : results) {
    report.n_diverged += r.diverged;
    gammas.insert(gammas.end(), r.gamma_hat.begin(), r.gamma_hat.end());
    if (!r.usable) continue;
    ++usable;
    report.skipped_coords += r.skipped;
    for (std::size_t s = 0; s < proto.steps; ++s) {
      report.position_error[s] += r.position_error[s];
      report.kl[s] += r.kl[s];
    }
  }
  const double diverged_fraction =
      static_cast<double>(report.n_diverged) / static_cast<double>(report.n_trajectories);
  if (diverged_fraction > proto.max_diverged_fraction || usable == 0) {
    throw NumericalError(std::to_string(report.n_diverged) + " of " +
                         std::to_string(report.n_trajectories) +
                         " predicted trajectories diverged; evaluation failed");
  }
  for (std::size_t s = 0; s < proto.steps; ++s) {
    report.position_error[s] /= static_cast<double>(usable);
    report.kl[s] /= static_cast<double>(usable);
  }
  report.gm_position_error = geometric_mean(report.position_error);
  report.gm_kl = geometric_mean(report.kl);
  report.brownian_error = brownian_error(gammas, spec);
  report.gamma_hat_per_type.assign(spec.n_types(), std::numeric_limits<double>::quiet_NaN());
  if (dynamics.stochastic) {
    std::vector<double> sum(spec.n_types(), 0.0), count(spec.n_types(), 0.0);
    for (std::size_t k = 0; k < gammas.size(); ++k) {
      const std::size_t t = spec.particle_types[k % spec.n_particles];
      sum[t] += gammas[k];
      count[t] += 1.0;
    }
    for (std::size_t t = 0; t < sum.size(); ++t) {
      if (count[t] > 0) report.gamma_hat_per_type[t] = sum[t] / count[t];
    }
  }
  return report;
}

inline MetricReport evaluate(const ModelParams& params, const SystemSpec& spec, const EvalProtocol& proto) {
  check_model_fits(params, spec);
  return evaluate(learned_dynamics(params), spec, proto);
}

/// Change of system size or temperature for zero-shot evaluation.
struct ZeroShotTarget {
  std::optional<std::size_t> n;
  std::optional<double> kbt;
};

inline SystemSpec zero_shot_spec(const SystemSpec& trained_on, const ZeroShotTarget& target) {
  SystemSpec spec = trained_on;
  if (target.n) {
    spec = default_spec(trained_on.kind, *target.n);
    spec.force_law = trained_on.force_law;
    spec.stiffness = trained_on.stiffness;
    spec.equilibrium_length = trained_on.equilibrium_length;
    spec.mass = trained_on.mass;
    spec.gamma_per_type = trained_on.gamma_per_type;
    spec.kbt = trained_on.kbt;
    spec.dt = trained_on.dt;
  }
  if (target.kbt) spec.kbt = *target.kbt;
  spec.validate();
  return spec;
}

/// Evaluates a graph model on a resized or reheated system without
/// retraining.
inline MetricReport zero_shot(const ModelParams& params, const SystemSpec& trained_on,
                              const ZeroShotTarget& target, const EvalProtocol& proto) {
  if (!is_inductive(params.arch.family)) {
    throw CapabilityError(to_string(params.arch.family) +
                          " is not inductive and cannot be evaluated on other system sizes or temperatures");
  }
  return evaluate(params, zero_shot_spec(trained_on, target), proto);
}

}  // namespace bdl
