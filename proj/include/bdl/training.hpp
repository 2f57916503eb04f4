#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bdl/array.hpp"
#include "bdl/autodiff.hpp"
#include "bdl/errors.hpp"
#include "bdl/integrator.hpp"
#include "bdl/models.hpp"
#include "bdl/optim.hpp"
#include "bdl/random.hpp"

namespace bdl {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 20;
  double lambda = 1.0;
  double epsilon = 1e-6;
  std::size_t max_epochs = 10000;
  std::size_t patience = 100;
  double min_delta = 1e-3;
  double split = 0.8;
  std::uint64_t seed = 0;
  bool sample_noise_in_training = false;

  void validate() const {
    if (!(split > 0.0 && split < 1.0)) throw ParameterError("split must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw ParameterError("epsilon must be > 0");
    if (!(lambda > 0.0)) throw ParameterError("lambda must be > 0");
    if (!(lr > 0.0)) throw ParameterError("learning rate must be > 0");
    if (batch_size == 0) throw ParameterError("batch size must be >= 1");
    if (patience == 0) throw ParameterError("patience must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Loss

/// Gaussian negative log-likelihood with a per-row variance:
///   (1/m) sum_rows sum_coords [ log max(v, eps) + lambda (x - mean)^2 / max(v, eps) ]
/// over the m rows (particle instances) of `target`. The log term counts once
/// per coordinate, so the minimizing variance is the per-coordinate variance.
inline ad::Var gaussian_nll(const Array& target, ad::Var mean, ad::Var variance, double lambda,
                           double epsilon) {
  const Array& mv = mean.value();
  const Array& vv = variance.value();
  const std::size_t m = mv.rows();
  const std::size_t d = mv.cols();
  if (target.rows() != m || target.cols() != d || vv.size() != m) {
    throw DimensionError("gaussian_nll: target " + shape_str(target.shape()) + ", mean " +
                         shape_str(mv.shape()) + ", variance " + shape_str(vv.shape()));
  }
  if (m == 0) throw DimensionError("gaussian_nll: empty batch");
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const double v = std::max(vv[r], epsilon);
    const double logv = std::log(v);
    for (std::size_t c = 0; c < d; ++c) {
      const double res = target[r * d + c] - mv[r * d + c];
      total += logv + lambda * res * res / v;
    }
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  if (!std::isfinite(total)) throw NumericalError("gaussian_nll: non-finite loss");
  const std::size_t parents[] = {mean.id, variance.id};
  return mean.tape->record(
      Array::scalar(total * inv_m), parents,
      [target, im = mean.id, iv = variance.id, lambda, epsilon, m, d, inv_m](ad::Tape& t, std::size_t self) {
        const double g = t.grad_ref(self)[0] * inv_m;
        const Array& mv = t.value(im);
        const Array& vv = t.value(iv);
        for (std::size_t r = 0; r < m; ++r) {
          const double v = std::max(vv[r], epsilon);
          double sq = 0.0;
          if (t.requires_grad(im)) {
            Array& gm = t.grad_ref(im);
            for (std::size_t c = 0; c < d; ++c) {
              const double res = target[r * d + c] - mv[r * d + c];
              gm[r * d + c] -= g * 2.0 * lambda * res / v;
            }
          }
          if (t.requires_grad(iv) && vv[r] > epsilon) {
            for (std::size_t c = 0; c < d; ++c) {
              const double res = target[r * d + c] - mv[r * d + c];
              sq += res * res;
            }
            t.grad_ref(iv)[r] += g * (static_cast<double>(d) / v - lambda * sq / (v * v));
          }
        }
      });
}

/// Value-level loss over [B, n, 3] positions with one sigma per particle.
inline double gaussian_nll_loss(const Array& x_true, const Array& x_pred,
                                std::span<const double> sigma_hat, double lambda, double epsilon) {
  if (x_true.shape() != x_pred.shape() || x_true.rank() != 3 || x_true.shape()[2] != 3) {
    throw DimensionError("gaussian_nll_loss: shapes " + shape_str(x_true.shape()) + " and " +
                         shape_str(x_pred.shape()));
  }
  const std::size_t batch = x_true.shape()[0];
  const std::size_t n = x_true.shape()[1];
  if (sigma_hat.size() != n) {
    throw DimensionError("gaussian_nll_loss: " + std::to_string(sigma_hat.size()) + " sigmas for " +
                         std::to_string(n) + " particles");
  }
  if (!all_finite(x_true) || !all_finite(x_pred)) {
    throw NumericalError("gaussian_nll_loss: non-finite positions");
  }
  Array variance({batch * n, 1});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(sigma_hat[i])) throw NumericalError("gaussian_nll_loss: non-finite sigma");
      variance[b * n + i] = sigma_hat[i] * sigma_hat[i];
    }
  }
  ad::Tape tape;
  return gaussian_nll(x_true.reshaped({batch * n, 3}), tape.constant(x_pred.reshaped({batch * n, 3})),
                      tape.constant(std::move(variance)), lambda, epsilon)
      .value()[0];
}

// ---------------------------------------------------------------------------
// Batches

/// Stacked rows of a StepPairDataset.
struct Batch {
  Array positions;   // [B*n, 3]
  Array velocities;  // [B*n, 3]
  Array targets;     // [B*n, 3]
};

inline Batch gather_batch(const StepPairDataset& data, std::span<const std::size_t> rows) {
  const std::size_t w = data.spec.n_particles * 3;
  const std::size_t m = rows.size() * data.spec.n_particles;
  Batch b{Array({m, 3}), Array({m, 3}), Array({m, 3})};
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= data.size()) throw IndexError("batch row " + std::to_string(rows[k]) + " out of range");
    std::copy_n(data.inputs.data() + rows[k] * w, w, b.positions.data() + k * w);
    std::copy_n(data.velocities.data() + rows[k] * w, w, b.velocities.data() + k * w);
    std::copy_n(data.targets.data() + rows[k] * w, w, b.targets.data() + k * w);
  }
  return b;
}

/// Loss of a model on a batch, recorded on `tape`. For SDE families the
/// variance is the per-step positional variance 2 kBT dt / gamma; NN has no
/// variance head and is scored with unit variance.
inline ad::Var batch_loss(const ModelParams& params, const Bindings& bindings, ad::Tape& tape,
                          const SystemSpec& spec, const Batch& batch, const TrainConfig& cfg,
                          const Array* noise = nullptr) {
  const StepOutputs out = predict_step(params, bindings, tape, StepInputs{&spec, batch.positions, batch.velocities});
  const std::size_t m = batch.positions.rows();
  if (!out.gamma) {
    return gaussian_nll(batch.targets, out.mean, tape.constant(Array({m, 1}, 1.0)), cfg.lambda, cfg.epsilon);
  }
  ad::Var variance = ad::scale(ad::reciprocal_clamped(*out.gamma, kGammaFloor), 2.0 * spec.kbt * spec.dt);
  ad::Var mean = out.mean;
  if (noise != nullptr) {
    mean = ad::add(mean, ad::scale_rows(tape.constant(*noise), ad::sqrt(variance)));
  }
  return gaussian_nll(batch.targets, mean, variance, cfg.lambda, cfg.epsilon);
}

/// Loss and its gradient with respect to every parameter.
inline double loss_and_grad(const ModelParams& params, const SystemSpec& spec, const Batch& batch,
                            const TrainConfig& cfg, ParamTree& grads, const Array* noise = nullptr) {
  ad::Tape tape;
  const Bindings b = bind(tape, params.tensors, true);
  ad::Var loss = batch_loss(params, b, tape, spec, batch, cfg, noise);
  tape.backward(loss);
  grads.clear();
  for (const auto& [name, var] : b) grads.emplace(name, tape.grad(var));
  return loss.value()[0];
}

/// Mean loss over `rows` of the dataset, evaluated in chunks.
inline double dataset_loss(const ModelParams& params, const StepPairDataset& data,
                           std::span<const std::size_t> rows, const TrainConfig& cfg,
                           std::size_t chunk = 512) {
  if (rows.empty()) throw ParameterError("dataset_loss: no rows");
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t count = std::min(chunk, rows.size() - start);
    const Batch batch = gather_batch(data, rows.subspan(start, count));
    ad::Tape tape;
    const Bindings b = bind(tape, params.tensors, false);
    total += batch_loss(params, b, tape, data.spec, batch, cfg).value()[0] * static_cast<double>(count);
  }
  return total / static_cast<double>(rows.size());
}

inline Array training_noise(const TrainConfig& cfg, std::uint64_t step, std::size_t rows) {
  NoiseStream stream(derive_seed(cfg.seed, "training-noise"), step);
  Array noise({rows, 3});
  for (double& v : noise.values()) v = stream.normal();
  return noise;
}

/// One Adam step on a batch; returns the pre-update loss.
inline double train_step(ModelParams& params, AdamState& opt, const Batch& batch,
                         const SystemSpec& spec, const TrainConfig& cfg, const Array* noise = nullptr,
                         std::size_t batch_index = 0) {
  ParamTree grads;
  double loss = 0.0;
  try {
    loss = loss_and_grad(params, spec, batch, cfg, grads, noise);
  } catch (const NumericalError& e) {
    throw NumericalError("training diverged at batch " + std::to_string(batch_index) + ": " + e.what());
  }
  if (!std::isfinite(loss)) {
    throw NumericalError("training diverged at batch " + std::to_string(batch_index));
  }
  adam_step(params.tensors, grads, opt, cfg.lr);
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop

/// Deterministic shuffled 80:20 style partition of [0, size).
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

inline Split split_dataset(std::size_t size, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 engine(derive_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), engine);
  std::size_t n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(size)));
  n_train = std::clamp<std::size_t>(n_train, size > 0 ? 1 : 0, size);
  if (size >= 2 && n_train == size) n_train = size - 1;
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return s;
}

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double val_loss;
  bool operator==(const EpochRecord&) const = default;
};

/// Everything needed to continue a run: current and best parameters,
/// optimizer moments, loss history and the plateau tracker.
struct Checkpoint {
  ModelParams params;
  AdamState opt;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
  ModelParams best;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  double plateau_ref = std::numeric_limits<double>::infinity();
  std::size_t plateau_epoch = 0;
};

class Trainer {
 public:
  Trainer(ModelParams init, const StepPairDataset& data, TrainConfig cfg)
      : data_(data), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (data.size() == 0) throw ParameterError("training dataset is empty");
    check_model_fits(init, data.spec);
    split_ = split_dataset(data.size(), cfg_.split, cfg_.seed);
    state_.opt = AdamState::zeros_like(init.tensors);
    state_.best = init;
    state_.params = std::move(init);
    initial_val_ = validation_loss(state_.params);
  }

  Trainer(Checkpoint resume, const StepPairDataset& data, TrainConfig cfg)
      : data_(data), cfg_(std::move(cfg)), state_(std::move(resume)) {
    cfg_.validate();
    if (data.size() == 0) throw ParameterError("training dataset is empty");
    check_model_fits(state_.params, data.spec);
    split_ = split_dataset(data.size(), cfg_.split, cfg_.seed);
    initial_val_ = validation_loss(state_.best);
  }

  /// Runs one epoch; returns false once the validation loss has failed to
  /// improve by min_delta for `patience` epochs.
  bool run_epoch() {
    std::vector<std::size_t> order = split_.train;
    std::mt19937_64 engine(derive_seed(cfg_.seed, state_.epoch, 0x65706f6368ULL));
    std::shuffle(order.begin(), order.end(), engine);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++batches) {
      const std::size_t count = std::min(cfg_.batch_size, order.size() - start);
      const Batch batch = gather_batch(data_, std::span<const std::size_t>(order).subspan(start, count));
      Array noise;
      if (cfg_.sample_noise_in_training) noise = training_noise(cfg_, state_.opt.step, batch.positions.rows());
      total += train_step(state_.params, state_.opt, batch, data_.spec, cfg_,
                          cfg_.sample_noise_in_training ? &noise : nullptr, batches);
    }
    const double val = validation_loss(state_.params);
    ++state_.epoch;
    state_.history.push_back({state_.epoch, total / static_cast<double>(batches), val});
    if (val < state_.best_val) {
      state_.best_val = val;
      state_.best_epoch = state_.epoch;
      state_.best = state_.params;
    }
    if (val <= state_.plateau_ref - cfg_.min_delta) {
      state_.plateau_ref = val;
      state_.plateau_epoch = state_.epoch;
    }
    return state_.epoch - state_.plateau_epoch < cfg_.patience;
  }

  /// Trains until convergence or `max_epochs` total epochs.
  void run(const std::function<void(const Checkpoint&)>& on_epoch = {}) {
    while (state_.epoch < cfg_.max_epochs) {
      const bool more = run_epoch();
      if (on_epoch) on_epoch(state_);
      if (!more) break;
    }
  }

  const Checkpoint& state() const noexcept { return state_; }
  const Split& split() const noexcept { return split_; }
  double initial_validation_loss() const noexcept { return initial_val_; }

  double validation_loss(const ModelParams& p) const {
    return dataset_loss(p, data_, split_.validation.empty() ? split_.train : split_.validation, cfg_);
  }

 private:
  const StepPairDataset& data_;
  TrainConfig cfg_;
  Split split_;
  Checkpoint state_;
  double initial_val_ = 0.0;
};

struct FitResult {
  ModelParams params;  // best-validation parameters
  std::vector<EpochRecord> history;
  double initial_val_loss = 0.0;
  Checkpoint checkpoint;
};

inline FitResult fit(ModelParams init, const StepPairDataset& data, const TrainConfig& cfg,
                     const std::function<void(const Checkpoint&)>& on_epoch = {}) {
  Trainer trainer(std::move(init), data, cfg);
  trainer.run(on_epoch);
  return {trainer.state().best, trainer.state().history, trainer.initial_validation_loss(),
          trainer.state()};
}

inline FitResult fit(ModelFamily family, const SystemSpec& spec, const StepPairDataset& data,
                     const TrainConfig& cfg,
                     const std::function<void(const Checkpoint&)>& on_epoch = {}) {
  return fit(init_params(family, spec, derive_seed(cfg.seed, "model-init")), data, cfg, on_epoch);
}

}  // namespace bdl
