#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bdl/evaluation.hpp"
#include "bdl/integrator.hpp"
#include "bdl/kv.hpp"
#include "bdl/models.hpp"
#include "bdl/training.hpp"

namespace bdl::io {

inline constexpr std::uint64_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Files and digests

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  return buf.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

inline std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw IoError("SHA-1 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return hex.str();
}

/// Same value `git hash-object` reports for a file with this content.
inline std::string git_blob_digest(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

inline std::string file_digest(const std::filesystem::path& path) { return git_blob_digest(read_file(path)); }

// ---------------------------------------------------------------------------
// Shared field encoders

template <class T>
std::string join(const std::vector<T>& xs, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

inline std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const std::string& tok : split(s, ',')) out.push_back(parse_double(tok, what));
  return out;
}

inline std::vector<std::uint64_t> parse_u64s(const std::string& s, const std::string& what, char sep = ',') {
  std::vector<std::uint64_t> out;
  for (const std::string& tok : split(s, sep)) out.push_back(parse_u64(tok, what));
  return out;
}

// ---------------------------------------------------------------------------
// SystemSpec <-> [section]

inline void write_spec(KvDocument& doc, const SystemSpec& spec, const std::string& section = "system") {
  doc.set(section, "kind", to_string(spec.kind));
  doc.set(section, "n_particles", static_cast<std::uint64_t>(spec.n_particles));
  doc.set(section, "force_law", to_string(spec.force_law));
  doc.set(section, "stiffness", spec.stiffness);
  doc.set(section, "equilibrium_length", spec.equilibrium_length);
  doc.set(section, "mass", spec.mass);
  doc.set(section, "kbt", spec.kbt);
  doc.set(section, "dt", spec.dt);
  doc.set(section, "gamma_per_type", join(spec.gamma_per_type));
  doc.set(section, "particle_types", join(spec.particle_types));
  std::string bonds;
  for (std::size_t k = 0; k < spec.bonds.size(); ++k) {
    if (k) bonds += ',';
    bonds += std::to_string(spec.bonds[k].i) + '-' + std::to_string(spec.bonds[k].j);
  }
  doc.set(section, "bonds", bonds);
}

inline SystemSpec read_spec(const KvDocument& doc, const std::string& section = "system") {
  SystemSpec spec;
  spec.kind = parse_system_kind(doc.get(section, "kind"));
  spec.n_particles = doc.get_u64(section, "n_particles");
  spec.force_law = parse_force_law(doc.get(section, "force_law"));
  spec.stiffness = doc.get_double(section, "stiffness");
  spec.equilibrium_length = doc.get_double(section, "equilibrium_length");
  spec.mass = doc.get_double(section, "mass");
  spec.kbt = doc.get_double(section, "kbt");
  spec.dt = doc.get_double(section, "dt");
  spec.gamma_per_type = parse_doubles(doc.get(section, "gamma_per_type"), "gamma_per_type");
  for (std::uint64_t t : parse_u64s(doc.get(section, "particle_types"), "particle_types")) {
    spec.particle_types.push_back(t);
  }
  for (const std::string& b : split(doc.get(section, "bonds"), ',')) {
    const auto ij = parse_u64s(b, "bonds", '-');
    if (ij.size() != 2) throw ConfigError("malformed bond '" + b + "'");
    spec.bonds.push_back({ij[0], ij[1]});
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Tensor container: text header, manifest, raw little-endian float64 blobs.
//
//   bdl-container
//   <header sections>
//   [manifest]
//   <name> = <d0>x<d1>... @ <offset> + <bytes>
//   @@data
//   <blob bytes>

struct TensorFile {
  KvDocument header;
  std::map<std::string, Array> tensors;
};

inline constexpr const char* kContainerMagic = "bdl-container";
inline constexpr const char* kDataMarker = "@@data";

namespace detail {

inline void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace detail

inline std::string encode(const TensorFile& file) {
  KvDocument header = file.header;
  std::string blob;
  for (const auto& [name, t] : file.tensors) {
    if (name.empty() || name.find_first_of("=[]#\n ") != std::string::npos) {
      throw ParameterError("tensor name '" + name + "' cannot be stored");
    }
    const std::size_t offset = blob.size();
    for (double v : t.values()) detail::put_le(blob, v);
    header.set("manifest", name,
               detail::shape_token(t.shape()) + " @ " + std::to_string(offset) + " + " +
                   std::to_string(blob.size() - offset));
  }
  return std::string(kContainerMagic) + "\n" + header.str() + kDataMarker + "\n" + blob;
}

inline TensorFile decode(const std::string& bytes, const std::string& origin = "container") {
  const std::string magic = std::string(kContainerMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw IoError(origin + ": not a bdl container");
  const std::string marker = std::string("\n") + kDataMarker + "\n";
  const std::size_t mpos = bytes.find(marker, magic.size() - 1);
  if (mpos == std::string::npos) throw IoError(origin + ": missing data marker");
  TensorFile file;
  KvDocument all;
  try {
    all = KvDocument::parse(bytes.substr(magic.size(), mpos + 1 - magic.size()));
  } catch (const ConfigError& e) {
    throw IoError(origin + ": bad header: " + e.what());
  }
  const std::size_t data_begin = mpos + marker.size();
  const std::size_t data_size = bytes.size() - data_begin;
  std::size_t covered = 0;
  for (const auto& e : all.entries()) {
    if (e.section != "manifest") {
      file.header.set(e.section, e.key, e.value);
      continue;
    }
    // "<shape> @ <offset> + <bytes>"
    std::istringstream in(e.value);
    std::string shape_tok, at, plus;
    std::size_t offset = 0, nbytes = 0;
    if (!(in >> shape_tok >> at >> offset >> plus >> nbytes) || at != "@" || plus != "+") {
      throw IoError(origin + ": bad manifest entry for '" + e.key + "'");
    }
    Shape shape;
    try {
      for (std::uint64_t d : parse_u64s(shape_tok, "shape", 'x')) shape.push_back(d);
    } catch (const ConfigError&) {
      throw IoError(origin + ": bad shape for '" + e.key + "'");
    }
    const std::size_t count = shape_size(shape);
    if (nbytes != 8 * count || offset > data_size || nbytes > data_size - offset) {
      throw IoError(origin + ": tensor '" + e.key + "' does not fit the data section");
    }
    covered += nbytes;
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) values[k] = detail::get_le(bytes.data() + data_begin + offset + 8 * k);
    file.tensors.emplace(e.key, Array(shape, std::move(values)));
  }
  if (covered != data_size) {
    throw IoError(origin + ": data section has " + std::to_string(data_size) + " bytes, manifest covers " +
                  std::to_string(covered));
  }
  return file;
}

// ---------------------------------------------------------------------------
// ModelParams

inline void write_architecture(KvDocument& doc, const Architecture& a) {
  doc.set("model", "family", to_string(a.family));
  doc.set("model", "n_types", static_cast<std::uint64_t>(a.n_types));
  doc.set("model", "n_particles", static_cast<std::uint64_t>(a.n_particles));
  doc.set("model", "node_embed", static_cast<std::uint64_t>(a.node_embed));
  doc.set("model", "edge_embed", static_cast<std::uint64_t>(a.edge_embed));
  doc.set("model", "hidden", static_cast<std::uint64_t>(a.hidden));
  doc.set("model", "hidden_layers", static_cast<std::uint64_t>(a.hidden_layers));
  doc.set("model", "mp_layers", static_cast<std::uint64_t>(a.mp_layers));
  doc.set("model", "force_head_linear", a.force_head_linear);
}

inline Architecture read_architecture(const KvDocument& doc) {
  Architecture a;
  a.family = parse_model_family(doc.get("model", "family"));
  a.n_types = doc.get_u64("model", "n_types");
  a.n_particles = doc.get_u64("model", "n_particles");
  a.node_embed = doc.get_u64("model", "node_embed");
  a.edge_embed = doc.get_u64("model", "edge_embed");
  a.hidden = doc.get_u64("model", "hidden");
  a.hidden_layers = doc.get_u64("model", "hidden_layers");
  a.mp_layers = doc.get_u64("model", "mp_layers");
  a.force_head_linear = doc.get_bool("model", "force_head_linear");
  return a;
}

namespace detail {

inline void check_kind(const KvDocument& doc, const std::string& expected, const std::string& origin) {
  const std::string* kind = doc.find("", "kind");
  if (!kind || *kind != expected) {
    throw IoError(origin + ": expected a " + expected + " file, found " + (kind ? *kind : "no kind tag"));
  }
  const std::string* v = doc.find("", "format_version");
  if (!v || *v != std::to_string(kFormatVersion)) {
    throw IoError(origin + ": unsupported format version " + (v ? *v : "(missing)"));
  }
}

// Tensors of `tree` must match the layer layout of `arch` exactly.
inline void check_layout(const Architecture& arch, const ParamTree& tree, const std::string& origin) {
  const ParamTree expected = init_params(arch, 0).tensors;
  if (expected.size() != tree.size()) {
    throw IoError(origin + ": parameter set does not match the declared architecture");
  }
  for (const auto& [name, t] : expected) {
    auto it = tree.find(name);
    if (it == tree.end() || it->second.shape() != t.shape()) {
      throw IoError(origin + ": parameter '" + name + "' missing or misshapen");
    }
  }
}

inline ParamTree extract(const TensorFile& f, const std::string& prefix) {
  ParamTree out;
  for (const auto& [name, t] : f.tensors) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t);
  }
  return out;
}

inline void insert(TensorFile& f, const std::string& prefix, const ParamTree& tree) {
  for (const auto& [name, t] : tree) f.tensors.emplace(prefix + name, t);
}

}  // namespace detail

inline std::string encode_params(const ModelParams& p) {
  TensorFile f;
  f.header.set("", "kind", "model-params");
  f.header.set("", "format_version", kFormatVersion);
  write_architecture(f.header, p.arch);
  f.tensors = p.tensors;
  return encode(f);
}

inline ModelParams decode_params(const std::string& bytes, const std::string& origin = "params") {
  const TensorFile f = decode(bytes, origin);
  detail::check_kind(f.header, "model-params", origin);
  ModelParams p;
  try {
    p.arch = read_architecture(f.header);
  } catch (const ConfigError& e) {
    throw IoError(origin + ": " + e.what());
  }
  p.tensors = f.tensors;
  detail::check_layout(p.arch, p.tensors, origin);
  return p;
}

inline void save_params(const std::filesystem::path& path, const ModelParams& p) {
  write_file(path, encode_params(p));
}
inline ModelParams load_params(const std::filesystem::path& path) {
  return decode_params(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Checkpoint: parameter container plus optimizer moments, best parameters and
// plateau tracker. The loss history lives in the [history] section.

inline std::string encode_checkpoint(const Checkpoint& c) {
  TensorFile f;
  f.header.set("", "kind", "checkpoint");
  f.header.set("", "format_version", kFormatVersion);
  write_architecture(f.header, c.params.arch);
  f.header.set("checkpoint", "epoch", static_cast<std::uint64_t>(c.epoch));
  f.header.set("checkpoint", "adam_step", c.opt.step);
  f.header.set("checkpoint", "best_val", c.best_val);
  f.header.set("checkpoint", "best_epoch", static_cast<std::uint64_t>(c.best_epoch));
  f.header.set("checkpoint", "plateau_ref", c.plateau_ref);
  f.header.set("checkpoint", "plateau_epoch", static_cast<std::uint64_t>(c.plateau_epoch));
  for (const EpochRecord& r : c.history) {
    f.header.set("history", std::to_string(r.epoch), format_double(r.train_loss) + "," + format_double(r.val_loss));
  }
  detail::insert(f, "param/", c.params.tensors);
  detail::insert(f, "best/", c.best.tensors);
  detail::insert(f, "adam_m/", c.opt.m);
  detail::insert(f, "adam_v/", c.opt.v);
  return encode(f);
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const TensorFile f = decode(bytes, origin);
  detail::check_kind(f.header, "checkpoint", origin);
  Checkpoint c;
  try {
    const Architecture arch = read_architecture(f.header);
    c.params = {arch, detail::extract(f, "param/")};
    c.best = {arch, detail::extract(f, "best/")};
    c.opt.m = detail::extract(f, "adam_m/");
    c.opt.v = detail::extract(f, "adam_v/");
    c.opt.step = f.header.get_u64("checkpoint", "adam_step");
    c.epoch = f.header.get_u64("checkpoint", "epoch");
    c.best_val = f.header.get_double("checkpoint", "best_val");
    c.best_epoch = f.header.get_u64("checkpoint", "best_epoch");
    c.plateau_ref = f.header.get_double("checkpoint", "plateau_ref");
    c.plateau_epoch = f.header.get_u64("checkpoint", "plateau_epoch");
    for (const auto& e : f.header.section("history")) {
      const auto losses = parse_doubles(e.value, "history");
      if (losses.size() != 2) throw ConfigError("history entry '" + e.key + "' needs two losses");
      c.history.push_back({parse_u64(e.key, "history epoch"), losses[0], losses[1]});
    }
  } catch (const ConfigError& e) {
    throw IoError(origin + ": " + e.what());
  }
  detail::check_layout(c.params.arch, c.params.tensors, origin);
  detail::check_layout(c.params.arch, c.best.tensors, origin);
  detail::check_layout(c.params.arch, c.opt.m, origin);
  detail::check_layout(c.params.arch, c.opt.v, origin);
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file(path, encode_checkpoint(c));
}
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (const EpochRecord& r : history) {
    out += std::to_string(r.epoch) + ',' + format_double(r.train_loss) + ',' + format_double(r.val_loss) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory ensembles: CSV plus a structured-text sidecar.

inline std::string ensemble_csv(const TrajectoryEnsemble& ens) {
  std::string out = "traj_id,step,particle_id,x,y,z\n";
  out.reserve(out.size() + ens.n_traj * (ens.n_steps + 1) * ens.spec.n_particles * 80);
  for (std::size_t t = 0; t < ens.n_traj; ++t) {
    for (std::size_t s = 0; s <= ens.n_steps; ++s) {
      for (std::size_t i = 0; i < ens.spec.n_particles; ++i) {
        out += std::to_string(t) + ',' + std::to_string(s) + ',' + std::to_string(i);
        for (std::size_t c = 0; c < 3; ++c) out += ',' + format_double(ens.at(t, s, i, c));
        out += '\n';
      }
    }
  }
  return out;
}

inline std::string ensemble_sidecar(const TrajectoryEnsemble& ens) {
  KvDocument doc;
  doc.set("", "kind", "trajectory-ensemble");
  doc.set("", "schema_version", kFormatVersion);
  doc.set("ensemble", "n_traj", static_cast<std::uint64_t>(ens.n_traj));
  doc.set("ensemble", "n_steps", static_cast<std::uint64_t>(ens.n_steps));
  doc.set("ensemble", "dt", ens.spec.dt);
  doc.set("ensemble", "seeds", join(ens.seeds));
  write_spec(doc, ens.spec);
  return doc.str();
}

inline TrajectoryEnsemble parse_ensemble(const std::string& csv, const std::string& sidecar,
                                         const std::string& origin = "ensemble") {
  TrajectoryEnsemble ens;
  try {
    const KvDocument doc = KvDocument::parse(sidecar);
    if (doc.get("", "kind") != "trajectory-ensemble") throw ConfigError("not a trajectory-ensemble sidecar");
    if (doc.get_u64("", "schema_version") != kFormatVersion) throw ConfigError("unsupported schema version");
    ens = TrajectoryEnsemble(read_spec(doc), doc.get_u64("ensemble", "n_traj"), doc.get_u64("ensemble", "n_steps"));
    ens.seeds = parse_u64s(doc.get("ensemble", "seeds"), "seeds");
    if (ens.seeds.size() != ens.n_traj) throw ConfigError("seed count does not match n_traj");
  } catch (const ParameterError& e) {
    throw IoError(origin + " sidecar: " + e.what());
  }
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "traj_id,step,particle_id,x,y,z") {
    throw IoError(origin + ": unexpected CSV header");
  }
  const std::size_t n = ens.spec.n_particles;
  std::vector<char> seen(ens.n_traj * (ens.n_steps + 1) * n, 0);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cols = split(line, ',');
    try {
      if (cols.size() != 6) throw ConfigError("expected 6 columns");
      const std::size_t t = parse_u64(cols[0], "traj_id"), s = parse_u64(cols[1], "step"),
                        i = parse_u64(cols[2], "particle_id");
      if (t >= ens.n_traj || s > ens.n_steps || i >= n) throw ConfigError("index out of range");
      const std::size_t key = (t * (ens.n_steps + 1) + s) * n + i;
      if (seen[key]) throw ConfigError("duplicate row");
      seen[key] = 1;
      for (std::size_t c = 0; c < 3; ++c) ens.at(t, s, i, c) = parse_double(cols[3 + c], "coordinate");
    } catch (const ConfigError& e) {
      throw IoError(origin + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (char c : seen) {
    if (!c) throw IoError(origin + ": CSV is missing rows");
  }
  return ens;
}

inline void save_ensemble(const std::filesystem::path& csv_path, const TrajectoryEnsemble& ens) {
  write_file(csv_path, ensemble_csv(ens));
  write_file(csv_path.string() + ".meta", ensemble_sidecar(ens));
}

inline TrajectoryEnsemble load_ensemble(const std::filesystem::path& csv_path) {
  return parse_ensemble(read_file(csv_path), read_file(csv_path.string() + ".meta"), csv_path.string());
}

// ---------------------------------------------------------------------------
// Step-pair datasets use the tensor container.

inline std::string encode_dataset(const StepPairDataset& d) {
  TensorFile f;
  f.header.set("", "kind", "step-pairs");
  f.header.set("", "format_version", kFormatVersion);
  write_spec(f.header, d.spec);
  f.tensors.emplace("inputs", d.inputs);
  f.tensors.emplace("velocities", d.velocities);
  f.tensors.emplace("targets", d.targets);
  return encode(f);
}

inline StepPairDataset decode_dataset(const std::string& bytes, const std::string& origin = "dataset") {
  TensorFile f = decode(bytes, origin);
  detail::check_kind(f.header, "step-pairs", origin);
  StepPairDataset d;
  try {
    d.spec = read_spec(f.header);
  } catch (const ParameterError& e) {
    throw IoError(origin + ": " + e.what());
  }
  for (const char* name : {"inputs", "velocities", "targets"}) {
    if (!f.tensors.count(name)) throw IoError(origin + ": missing tensor '" + name + "'");
  }
  d.inputs = std::move(f.tensors.at("inputs"));
  d.velocities = std::move(f.tensors.at("velocities"));
  d.targets = std::move(f.tensors.at("targets"));
  const Shape expected{d.inputs.shape().empty() ? 0 : d.inputs.shape()[0], d.spec.n_particles, 3};
  if (d.inputs.shape() != expected || d.velocities.shape() != expected || d.targets.shape() != expected) {
    throw IoError(origin + ": tensor shapes do not match the system");
  }
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const StepPairDataset& d) {
  write_file(path, encode_dataset(d));
}
inline StepPairDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Metric reports

inline std::string report_csv(const MetricReport& r) {
  std::string out = "step,position_error,kl\n";
  for (std::size_t s = 0; s < r.position_error.size(); ++s) {
    out += std::to_string(s + 1) + ',' + format_double(r.position_error[s]) + ',' + format_double(r.kl[s]) + '\n';
  }
  return out;
}

inline void write_protocol(KvDocument& doc, const EvalProtocol& p) {
  doc.set("protocol", "n_init", static_cast<std::uint64_t>(p.n_init));
  doc.set("protocol", "seeds_per_init", static_cast<std::uint64_t>(p.seeds_per_init));
  doc.set("protocol", "steps", static_cast<std::uint64_t>(p.steps));
  doc.set("protocol", "seed", p.seed);
  doc.set("protocol", "max_diverged_fraction", p.max_diverged_fraction);
}

inline std::string report_summary(const MetricReport& r) {
  KvDocument doc;
  doc.set("", "kind", "metric-report");
  doc.set("", "format_version", kFormatVersion);
  doc.set("report", "family", r.family);
  doc.set("report", "brownian_error", r.brownian_error);
  doc.set("report", "gm_position_error", r.gm_position_error);
  doc.set("report", "gm_kl", r.gm_kl);
  doc.set("report", "n_trajectories", static_cast<std::uint64_t>(r.n_trajectories));
  doc.set("report", "n_diverged", static_cast<std::uint64_t>(r.n_diverged));
  doc.set("report", "skipped_coords", static_cast<std::uint64_t>(r.skipped_coords));
  doc.set("report", "gamma_hat_per_type", join(r.gamma_hat_per_type));
  write_protocol(doc, r.protocol);
  write_spec(doc, r.spec);
  return doc.str();
}

/// Writes `<stem>.csv` and `<stem>.summary`.
inline void save_report(const std::filesystem::path& stem, const MetricReport& r) {
  write_file(stem.string() + ".csv", report_csv(r));
  write_file(stem.string() + ".summary", report_summary(r));
}

}  // namespace bdl::io
