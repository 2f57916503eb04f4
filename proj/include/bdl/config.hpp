#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bdl/evaluation.hpp"
#include "bdl/io.hpp"
#include "bdl/kv.hpp"
#include "bdl/models.hpp"
#include "bdl/random.hpp"
#include "bdl/systems.hpp"
#include "bdl/training.hpp"

namespace bdl {

/// Every knob of an experiment. Defaults reproduce the reference setup:
/// linear ring of 5, BroGNet, 100 x 100 training pairs, 100 x 10 x 100
/// evaluation.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  SystemKind kind = SystemKind::linear;
  std::size_t n = 5;
  std::optional<double> kbt;  // unset: system default
  std::optional<double> dt;

  std::size_t n_traj = 100;
  std::size_t points_per_traj = 100;

  ModelFamily family = ModelFamily::brognet;
  TrainConfig train;

  std::size_t n_init = 100;
  std::size_t seeds_per_init = 10;
  std::size_t eval_steps = 100;
  double max_diverged_fraction = 0.1;

  std::vector<std::size_t> generalize_sizes{50, 500};
  std::vector<double> generalize_kbts{10.0, 100.0};
  std::vector<std::size_t> sweep_sizes{100, 500, 1000, 5000, 10000};

  std::string dataset_dir = "data";
  std::string checkpoint = "run/model.ckpt";
  std::string history = "run/history.csv";
  std::string manifest = "run/manifest.txt";
  std::string report = "run/report";
  std::string rollout = "run/rollout.csv";
  std::string generalize_prefix = "run/zero_shot";
  std::string sweep_csv = "run/sweep.csv";

  SystemSpec spec() const {
    SystemSpec s = default_spec(kind, n);
    if (kbt) s.kbt = *kbt;
    if (dt) s.dt = *dt;
    s.validate();
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig c = train;
    c.seed = derive_seed(seed, "train");
    return c;
  }

  EvalProtocol protocol() const {
    EvalProtocol p;
    p.n_init = n_init;
    p.seeds_per_init = seeds_per_init;
    p.steps = eval_steps;
    p.seed = derive_seed(seed, "evaluate");
    p.threads = threads;
    p.max_diverged_fraction = max_diverged_fraction;
    return p;
  }

  std::uint64_t data_seed() const { return derive_seed(seed, "data"); }

  void validate() const {
    if (threads == 0) throw ParameterError("threads must be >= 1");
    (void)spec();
    if (n_traj == 0) throw ParameterError("n_traj must be >= 1");
    if (points_per_traj == 0) throw ParameterError("points_per_traj must be >= 1");
    train.validate();
    protocol().validate();
    if (!(max_diverged_fraction >= 0.0 && max_diverged_fraction <= 1.0)) {
      throw ParameterError("max_diverged_fraction must lie in [0, 1]");
    }
    for (std::size_t s : sweep_sizes) {
      if (s == 0) throw ParameterError("sweep sizes must be >= 1");
    }
    for (std::size_t s : generalize_sizes) {
      if (s < 2) throw ParameterError("generalization sizes must be >= 2");
    }
    for (double t : generalize_kbts) {
      if (!(t >= 0.0)) throw ParameterError("generalization temperatures must be >= 0");
    }
  }
};

namespace detail {

struct ConfigField {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
std::vector<T> parse_list(const std::string& v, const std::string& what) {
  std::vector<T> out;
  for (const std::string& tok : split(v, ',')) {
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(parse_double(tok, what));
    } else {
      out.push_back(static_cast<T>(parse_u64(tok, what)));
    }
  }
  return out;
}

inline std::size_t parse_size(const std::string& v, const std::string& what) {
  return static_cast<std::size_t>(parse_u64(v, what));
}

inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<ConfigField> fields = {
      {"experiment", "seed", [](C& c, S v) { c.seed = parse_u64(v, "seed"); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"experiment", "threads", [](C& c, S v) { c.threads = parse_size(v, "threads"); },
       [](const C& c) { return std::to_string(c.threads); }},

      {"system", "kind", [](C& c, S v) { c.kind = parse_system_kind(v); },
       [](const C& c) { return to_string(c.kind); }},
      {"system", "n", [](C& c, S v) { c.n = parse_size(v, "n"); },
       [](const C& c) { return std::to_string(c.n); }},
      {"system", "kbt", [](C& c, S v) { c.kbt = parse_double(v, "kbt"); },
       [](const C& c) { return format_double(c.spec().kbt); }},
      {"system", "dt", [](C& c, S v) { c.dt = parse_double(v, "dt"); },
       [](const C& c) { return format_double(c.spec().dt); }},

      {"data", "n_traj", [](C& c, S v) { c.n_traj = parse_size(v, "n_traj"); },
       [](const C& c) { return std::to_string(c.n_traj); }},
      {"data", "points_per_traj", [](C& c, S v) { c.points_per_traj = parse_size(v, "points_per_traj"); },
       [](const C& c) { return std::to_string(c.points_per_traj); }},

      {"model", "family", [](C& c, S v) { c.family = parse_model_family(v); },
       [](const C& c) { return to_string(c.family); }},

      {"train", "learning_rate", [](C& c, S v) { c.train.lr = parse_double(v, "learning_rate"); },
       [](const C& c) { return format_double(c.train.lr); }},
      {"train", "batch_size", [](C& c, S v) { c.train.batch_size = parse_size(v, "batch_size"); },
       [](const C& c) { return std::to_string(c.train.batch_size); }},
      {"train", "lambda", [](C& c, S v) { c.train.lambda = parse_double(v, "lambda"); },
       [](const C& c) { return format_double(c.train.lambda); }},
      {"train", "epsilon", [](C& c, S v) { c.train.epsilon = parse_double(v, "epsilon"); },
       [](const C& c) { return format_double(c.train.epsilon); }},
      {"train", "max_epochs", [](C& c, S v) { c.train.max_epochs = parse_size(v, "max_epochs"); },
       [](const C& c) { return std::to_string(c.train.max_epochs); }},
      {"train", "patience", [](C& c, S v) { c.train.patience = parse_size(v, "patience"); },
       [](const C& c) { return std::to_string(c.train.patience); }},
      {"train", "min_delta", [](C& c, S v) { c.train.min_delta = parse_double(v, "min_delta"); },
       [](const C& c) { return format_double(c.train.min_delta); }},
      {"train", "split", [](C& c, S v) { c.train.split = parse_double(v, "split"); },
       [](const C& c) { return format_double(c.train.split); }},
      {"train", "sample_noise", [](C& c, S v) { c.train.sample_noise_in_training = parse_bool(v, "sample_noise"); },
       [](const C& c) { return std::string(c.train.sample_noise_in_training ? "true" : "false"); }},

      {"evaluate", "n_init", [](C& c, S v) { c.n_init = parse_size(v, "n_init"); },
       [](const C& c) { return std::to_string(c.n_init); }},
      {"evaluate", "seeds_per_init", [](C& c, S v) { c.seeds_per_init = parse_size(v, "seeds_per_init"); },
       [](const C& c) { return std::to_string(c.seeds_per_init); }},
      {"evaluate", "steps", [](C& c, S v) { c.eval_steps = parse_size(v, "steps"); },
       [](const C& c) { return std::to_string(c.eval_steps); }},
      {"evaluate", "max_diverged_fraction",
       [](C& c, S v) { c.max_diverged_fraction = parse_double(v, "max_diverged_fraction"); },
       [](const C& c) { return format_double(c.max_diverged_fraction); }},

      {"generalize", "sizes", [](C& c, S v) { c.generalize_sizes = parse_list<std::size_t>(v, "sizes"); },
       [](const C& c) { return io::join(c.generalize_sizes); }},
      {"generalize", "kbts", [](C& c, S v) { c.generalize_kbts = parse_list<double>(v, "kbts"); },
       [](const C& c) { return io::join(c.generalize_kbts); }},
      {"sweep", "sizes", [](C& c, S v) { c.sweep_sizes = parse_list<std::size_t>(v, "sizes"); },
       [](const C& c) { return io::join(c.sweep_sizes); }},

      {"paths", "dataset", [](C& c, S v) { c.dataset_dir = v; }, [](const C& c) { return c.dataset_dir; }},
      {"paths", "checkpoint", [](C& c, S v) { c.checkpoint = v; }, [](const C& c) { return c.checkpoint; }},
      {"paths", "history", [](C& c, S v) { c.history = v; }, [](const C& c) { return c.history; }},
      {"paths", "manifest", [](C& c, S v) { c.manifest = v; }, [](const C& c) { return c.manifest; }},
      {"paths", "report", [](C& c, S v) { c.report = v; }, [](const C& c) { return c.report; }},
      {"paths", "rollout", [](C& c, S v) { c.rollout = v; }, [](const C& c) { return c.rollout; }},
      {"paths", "zero_shot", [](C& c, S v) { c.generalize_prefix = v; },
       [](const C& c) { return c.generalize_prefix; }},
      {"paths", "sweep", [](C& c, S v) { c.sweep_csv = v; }, [](const C& c) { return c.sweep_csv; }},
  };
  return fields;
}

}  // namespace detail

/// Sets one field addressed as (section, key). Unknown names are errors.
inline void set_config_value(ExperimentConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.section == section && f.key == key) {
      if (value.empty()) throw ConfigError("empty value for " + section + "." + key);
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "' in section [" + section + "]");
}

/// "section.key=value" form used by --set.
inline void set_config_assignment(ExperimentConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  const std::size_t dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("expected section.key=value, got '" + assignment + "'");
  }
  set_config_value(cfg, std::string(trim(assignment.substr(0, dot))),
                   std::string(trim(assignment.substr(dot + 1, eq - dot - 1))),
                   std::string(trim(assignment.substr(eq + 1))));
}

inline void apply_config(ExperimentConfig& cfg, const KvDocument& doc) {
  for (const auto& e : doc.entries()) {
    if (e.section.empty()) throw ConfigError("key '" + e.key + "' is outside any [section]");
    set_config_value(cfg, e.section, e.key, e.value);
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  apply_config(cfg, KvDocument::parse(text));
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Full echo of every field; parsing it back reproduces the config.
inline KvDocument config_document(const ExperimentConfig& cfg) {
  KvDocument doc;
  for (const auto& f : detail::config_fields()) doc.set(f.section, f.key, f.get(cfg));
  return doc;
}

}  // namespace bdl
