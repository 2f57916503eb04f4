#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdl/config.hpp"
#include "bdl/evaluation.hpp"
#include "bdl/integrator.hpp"
#include "bdl/io.hpp"
#include "bdl/training.hpp"

namespace bdl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// ---------------------------------------------------------------------------
// Dataset layout: <dir>/trajectories.csv (+ .meta) and <dir>/pairs.bin

struct DatasetPaths {
  fs::path trajectories;
  fs::path sidecar;
  fs::path pairs;

  explicit DatasetPaths(const fs::path& dir)
      : trajectories(dir / "trajectories.csv"),
        sidecar(dir / "trajectories.csv.meta"),
        pairs(dir / "pairs.bin") {}
};

/// Content hash of a dataset directory: the blob digest of a listing of the
/// blob digests of its files.
inline std::string dataset_digest(const fs::path& dir) {
  const DatasetPaths p(dir);
  std::string listing;
  for (const fs::path& f : {p.trajectories, p.sidecar, p.pairs}) {
    listing += io::file_digest(f) + "  " + f.filename().string() + "\n";
  }
  return io::git_blob_digest(listing);
}

/// First `count` pairs of a dataset.
inline StepPairDataset head(const StepPairDataset& d, std::size_t count) {
  if (count > d.size()) throw ParameterError("dataset has fewer than " + std::to_string(count) + " pairs");
  const std::size_t n = d.spec.n_particles;
  auto cut = [&](const Array& a) {
    return Array({count, n, 3}, std::vector<double>(a.values().begin(),
                                                    a.values().begin() + static_cast<std::ptrdiff_t>(count * n * 3)));
  };
  StepPairDataset out;
  out.spec = d.spec;
  out.inputs = cut(d.inputs);
  out.velocities = cut(d.velocities);
  out.targets = cut(d.targets);
  return out;
}

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " '" + p.string() + "' does not exist");
}

// ---------------------------------------------------------------------------
// Commands. Each one receives a validated config.

inline int cmd_generate(const ExperimentConfig& cfg, std::ostream& out) {
  const SystemSpec spec = cfg.spec();
  const TrajectoryEnsemble ens = generate_ensemble(spec, cfg.n_traj, cfg.points_per_traj, cfg.data_seed());
  const StepPairDataset data = extract_pairs(ens, cfg.points_per_traj);
  const DatasetPaths p(cfg.dataset_dir);
  io::save_ensemble(p.trajectories, ens);
  io::save_dataset(p.pairs, data);
  out << "generated " << data.size() << " pairs for " << to_string(spec.kind) << "-" << spec.n_particles
      << " in " << cfg.dataset_dir << "\n";
  out << "dataset digest " << dataset_digest(cfg.dataset_dir) << "\n";
  return kExitOk;
}

inline void print_epoch(std::ostream& out, const Checkpoint& c) {
  const EpochRecord& r = c.history.back();
  if (r.epoch == 1 || r.epoch % 10 == 0) {
    out << "epoch " << r.epoch << " train " << format_double(r.train_loss) << " val "
        << format_double(r.val_loss) << "\n";
  }
}

inline int cmd_train(const ExperimentConfig& cfg, bool resume, std::ostream& out) {
  const DatasetPaths p(cfg.dataset_dir);
  require_file(p.pairs, "dataset");
  std::optional<Checkpoint> start;
  if (resume) {
    require_file(cfg.checkpoint, "checkpoint");
    start = io::load_checkpoint(cfg.checkpoint);
  }
  const StepPairDataset data = io::load_dataset(p.pairs);
  const std::string data_digest = dataset_digest(cfg.dataset_dir);
  const TrainConfig tc = cfg.train_config();
  auto on_epoch = [&out](const Checkpoint& c) { print_epoch(out, c); };

  Checkpoint state;
  double initial_val = 0.0;
  if (start) {
    if (start->params.arch.family != cfg.family) {
      throw CapabilityError("checkpoint holds a " + to_string(start->params.arch.family) +
                            " model but the config asks for " + to_string(cfg.family));
    }
    Trainer trainer(std::move(*start), data, tc);
    trainer.run(on_epoch);
    state = trainer.state();
    initial_val = trainer.initial_validation_loss();
  } else {
    FitResult r = fit(cfg.family, data.spec, data, tc, on_epoch);
    state = std::move(r.checkpoint);
    initial_val = r.initial_val_loss;
  }

  io::save_checkpoint(cfg.checkpoint, state);
  io::write_file(cfg.history, io::history_csv(state.history));

  KvDocument manifest = config_document(cfg);
  manifest.set("", "kind", "run-manifest");
  manifest.set("", "format_version", io::kFormatVersion);
  manifest.set("result", "epochs", static_cast<std::uint64_t>(state.epoch));
  manifest.set("result", "best_epoch", static_cast<std::uint64_t>(state.best_epoch));
  manifest.set("result", "initial_val_loss", initial_val);
  manifest.set("result", "best_val_loss", state.best_val);
  manifest.set("digests", "dataset", data_digest);
  manifest.set("digests", "checkpoint", io::file_digest(cfg.checkpoint));
  manifest.set("digests", "history", io::file_digest(cfg.history));
  io::write_file(cfg.manifest, manifest.str());

  out << "trained " << to_string(cfg.family) << " for " << state.epoch << " epochs; best val "
      << format_double(state.best_val) << " at epoch " << state.best_epoch << "\n";
  out << "checkpoint " << cfg.checkpoint << " digest " << io::file_digest(cfg.checkpoint) << "\n";
  return kExitOk;
}

inline ModelParams load_model(const ExperimentConfig& cfg) {
  require_file(cfg.checkpoint, "checkpoint");
  return io::load_checkpoint(cfg.checkpoint).best;
}

inline void print_report(std::ostream& out, const std::string& label, const MetricReport& r) {
  out << label << ": gm position error " << format_double(r.gm_position_error) << ", gm KL "
      << format_double(r.gm_kl) << ", Brownian error " << format_double(r.brownian_error) << ", diverged "
      << r.n_diverged << "/" << r.n_trajectories << "\n";
}

inline int cmd_evaluate(const ExperimentConfig& cfg, std::ostream& out) {
  const ModelParams params = load_model(cfg);
  const SystemSpec spec = cfg.spec();
  check_model_fits(params, spec);
  const MetricReport r = evaluate(params, spec, cfg.protocol());
  io::save_report(cfg.report, r);
  print_report(out, to_string(params.arch.family), r);
  out << "report " << cfg.report << ".csv digest " << io::file_digest(cfg.report + ".csv") << "\n";
  return kExitOk;
}

/// Predicted ensemble from the evaluation initial conditions and noise.
inline int cmd_rollout(const ExperimentConfig& cfg, std::ostream& out) {
  const ModelParams params = load_model(cfg);
  const SystemSpec spec = cfg.spec();
  check_model_fits(params, spec);
  const EvalProtocol proto = cfg.protocol();
  const std::uint64_t root = derive_seed(proto.seed, "evaluation");
  std::vector<Array> initial;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < proto.n_init; ++i) {
    const Array x0 = random_initial_condition(spec, derive_seed(derive_seed(root, "initial-conditions"), i, 0));
    for (std::size_t j = 0; j < proto.seeds_per_init; ++j) {
      initial.push_back(x0);
      seeds.push_back(derive_seed(derive_seed(root, "prediction"), i, j));
    }
  }
  const BatchRollout r =
      rollout_batch(spec, initial, seeds, proto.steps, model_stepper(params, spec), DivergencePolicy::mark);
  io::save_ensemble(cfg.rollout, r.ensemble);
  out << "rolled out " << r.ensemble.n_traj << " trajectories of " << proto.steps << " steps to " << cfg.rollout
      << " (" << r.n_diverged() << " diverged)\n";
  return kExitOk;
}

inline int cmd_generalize(const ExperimentConfig& cfg, std::ostream& out) {
  const ModelParams params = load_model(cfg);
  const SystemSpec trained_on = cfg.spec();
  if (!is_inductive(params.arch.family)) {
    throw CapabilityError(to_string(params.arch.family) + " is not inductive and cannot be evaluated zero-shot");
  }
  check_model_fits(params, trained_on);
  std::vector<std::pair<std::string, ZeroShotTarget>> targets;
  for (std::size_t n : cfg.generalize_sizes) targets.push_back({"n" + std::to_string(n), {n, std::nullopt}});
  for (double t : cfg.generalize_kbts) targets.push_back({"kbt" + format_double(t), {std::nullopt, t}});
  // Every target spec is checked before the first evaluation runs.
  for (const auto& [label, target] : targets) (void)zero_shot_spec(trained_on, target);
  for (const auto& [label, target] : targets) {
    const MetricReport r = zero_shot(params, trained_on, target, cfg.protocol());
    const std::string stem = cfg.generalize_prefix + "_" + label;
    io::save_report(stem, r);
    print_report(out, label, r);
  }
  return kExitOk;
}

inline int cmd_sweep(const ExperimentConfig& cfg, std::ostream& out) {
  const SystemSpec spec = cfg.spec();
  const std::uint64_t root = derive_seed(cfg.seed, "sweep");
  std::string csv = "dataset_size,epochs,best_val_loss,brownian_error,gm_position_error,gm_kl,n_diverged\n";
  for (std::size_t size : cfg.sweep_sizes) {
    const std::size_t points = std::min(size, cfg.points_per_traj);
    const std::size_t n_traj = (size + points - 1) / points;
    const StepPairDataset data =
        head(generate_training_data(spec, n_traj, points, derive_seed(root, size, 0)), size);
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(root, size, 1);
    const FitResult fitted = fit(cfg.family, spec, data, tc);
    const MetricReport r = evaluate(fitted.params, spec, cfg.protocol());
    csv += std::to_string(size) + ',' + std::to_string(fitted.checkpoint.epoch) + ',' +
           format_double(fitted.checkpoint.best_val) + ',' + format_double(r.brownian_error) + ',' +
           format_double(r.gm_position_error) + ',' + format_double(r.gm_kl) + ',' +
           std::to_string(r.n_diverged) + '\n';
    print_report(out, "size " + std::to_string(size), r);
  }
  io::write_file(cfg.sweep_csv, csv);
  out << "sweep written to " << cfg.sweep_csv << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Argument handling

namespace detail {

struct Binding {
  CLI::Option* option;
  std::string section;
  std::string key;
  std::string value;
};

struct Subcommand {
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::unique_ptr<Binding>> bindings;

  void bind(const std::string& flag, const std::string& section, const std::string& key, const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->section = section;
    b->key = key;
    b->option = app->add_option(flag, b->value, help);
    bindings.push_back(std::move(b));
  }

  /// defaults < config file < --set < named flags
  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    for (const std::string& s : sets) set_config_assignment(cfg, s);
    for (const auto& b : bindings) {
      if (b->option->count() > 0) set_config_value(cfg, b->section, b->key, b->value);
    }
    return cfg;
  }
};

inline std::unique_ptr<Subcommand> make_subcommand(CLI::App& root, const std::string& name,
                                                   const std::string& help) {
  auto s = std::make_unique<Subcommand>();
  s->app = root.add_subcommand(name, help);
  s->app->add_option("-c,--config", s->config_path, "experiment config file");
  s->app->add_option("--set", s->sets, "override one config value: section.key=value");
  s->bind("--seed", "experiment", "seed", "global seed");
  s->bind("--threads", "experiment", "threads", "worker threads");
  return s;
}

inline void bind_system(Subcommand& s, bool with_size_and_temperature = true) {
  s.bind("--kind", "system", "kind", "linear, nonlinear or binary");
  if (with_size_and_temperature) {
    s.bind("--n", "system", "n", "number of particles");
    s.bind("--kbt", "system", "kbt", "thermal energy");
  }
  s.bind("--dt", "system", "dt", "time step");
}

inline void bind_protocol(Subcommand& s) {
  s.bind("--n-init", "evaluate", "n_init", "initial conditions");
  s.bind("--seeds", "evaluate", "seeds_per_init", "noise seeds per initial condition");
  s.bind("--steps", "evaluate", "steps", "roll-out steps");
}

inline void bind_training(Subcommand& s) {
  s.bind("--family", "model", "family", "brognet, bdgnn, bfgn, bnn or nn");
  s.bind("--max-epochs", "train", "max_epochs", "epoch budget");
  s.bind("--lr", "train", "learning_rate", "Adam learning rate");
  s.bind("--batch-size", "train", "batch_size", "minibatch size");
  s.bind("--patience", "train", "patience", "epochs without improvement before stopping");
}

}  // namespace detail

/// Parses arguments, validates the resolved config and runs one command.
/// Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Brownian dynamics learning toolkit", "bdl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto generate = detail::make_subcommand(app, "generate", "simulate ground-truth trajectories and extract pairs");
  detail::bind_system(*generate);
  generate->bind("--n-traj", "data", "n_traj", "trajectories");
  generate->bind("--points", "data", "points_per_traj", "pairs per trajectory");
  generate->bind("--dataset", "paths", "dataset", "output directory");

  auto train = detail::make_subcommand(app, "train", "fit a model to a generated dataset");
  detail::bind_training(*train);
  train->bind("--dataset", "paths", "dataset", "dataset directory");
  train->bind("--checkpoint", "paths", "checkpoint", "checkpoint output");
  train->bind("--history", "paths", "history", "loss history CSV");
  train->bind("--manifest", "paths", "manifest", "run manifest");
  bool resume = false;
  train->app->add_flag("--resume", resume, "continue from the checkpoint");

  auto evaluate_cmd = detail::make_subcommand(app, "evaluate", "score a checkpoint against ground truth");
  detail::bind_system(*evaluate_cmd);
  detail::bind_protocol(*evaluate_cmd);
  evaluate_cmd->bind("--checkpoint", "paths", "checkpoint", "checkpoint to evaluate");
  evaluate_cmd->bind("--report", "paths", "report", "report path stem");

  auto rollout_cmd = detail::make_subcommand(app, "rollout", "dump a predicted trajectory ensemble");
  detail::bind_system(*rollout_cmd);
  detail::bind_protocol(*rollout_cmd);
  rollout_cmd->bind("--checkpoint", "paths", "checkpoint", "checkpoint to roll out");
  rollout_cmd->bind("--out", "paths", "rollout", "ensemble CSV output");

  auto generalize = detail::make_subcommand(app, "generalize", "zero-shot evaluation on other sizes or temperatures");
  detail::bind_system(*generalize, false);
  detail::bind_protocol(*generalize);
  generalize->bind("--trained-n", "system", "n", "system size the model was trained on");
  generalize->bind("--trained-kbt", "system", "kbt", "temperature the model was trained on");
  generalize->bind("--checkpoint", "paths", "checkpoint", "checkpoint to evaluate");
  generalize->bind("--prefix", "paths", "zero_shot", "report path prefix");
  std::vector<std::string> target_n, target_kbt;
  generalize->app->add_option("--n", target_n, "target system size (repeatable)");
  generalize->app->add_option("--kbt", target_kbt, "target temperature (repeatable)");

  auto sweep = detail::make_subcommand(app, "sweep", "train and evaluate across dataset sizes");
  detail::bind_system(*sweep);
  detail::bind_training(*sweep);
  detail::bind_protocol(*sweep);
  std::vector<std::string> sizes;
  sweep->app->add_option("--sizes", sizes, "dataset sizes")->delimiter(',');
  sweep->bind("--out", "paths", "sweep", "sweep CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    ExperimentConfig cfg;
    const detail::Subcommand* chosen = nullptr;
    for (const auto* s : {generate.get(), train.get(), evaluate_cmd.get(), rollout_cmd.get(), generalize.get(),
                          sweep.get()}) {
      if (s->app->parsed()) chosen = s;
    }
    cfg = chosen->resolve();
    if (chosen == generalize.get() && (!target_n.empty() || !target_kbt.empty())) {
      cfg.generalize_sizes.clear();
      cfg.generalize_kbts.clear();
      for (const std::string& v : target_n) cfg.generalize_sizes.push_back(static_cast<std::size_t>(parse_u64(v, "n")));
      for (const std::string& v : target_kbt) cfg.generalize_kbts.push_back(parse_double(v, "kbt"));
    }
    if (chosen == sweep.get() && !sizes.empty()) {
      cfg.sweep_sizes.clear();
      for (const std::string& v : sizes) cfg.sweep_sizes.push_back(static_cast<std::size_t>(parse_u64(v, "sizes")));
      if (cfg.sweep_sizes.empty()) throw ConfigError("--sizes needs at least one value");
    }
    cfg.validate();

    if (chosen == generate.get()) return cmd_generate(cfg, out);
    if (chosen == train.get()) return cmd_train(cfg, resume, out);
    if (chosen == evaluate_cmd.get()) return cmd_evaluate(cfg, out);
    if (chosen == rollout_cmd.get()) return cmd_rollout(cfg, out);
    if (chosen == generalize.get()) return cmd_generalize(cfg, out);
    return cmd_sweep(cfg, out);
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace bdl::cli
