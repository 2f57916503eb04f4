#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "bdl/array.hpp"
#include "bdl/errors.hpp"

namespace bdl {

/// Named parameter arrays. std::map keeps iteration order (and therefore
/// serialization and update order) deterministic.
using ParamTree = std::map<std::string, Array>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamTree m;
  ParamTree v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParamTree& params) {
    AdamState s;
    for (const auto& [name, value] : params) {
      s.m.emplace(name, Array(value.shape()));
      s.v.emplace(name, Array(value.shape()));
    }
    return s;
  }
};

inline void require_congruent(const ParamTree& a, const ParamTree& b, const char* what) {
  if (a.size() != b.size()) {
    throw StructureError(std::string(what) + ": tree sizes differ (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
  }
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw StructureError(std::string(what) + ": key '" + ia->first + "' vs '" + ib->first + "'");
    }
    if (ia->second.shape() != ib->second.shape()) {
      throw StructureError(std::string(what) + ": shape of '" + ia->first + "' differs (" +
                           shape_str(ia->second.shape()) + " vs " +
                           shape_str(ib->second.shape()) + ")");
    }
  }
}

/// One bias-corrected Adam update, applied in place.
inline void adam_step(ParamTree& params, const ParamTree& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  require_congruent(params, grads, "adam_step grads");
  require_congruent(params, state.m, "adam_step first moments");
  require_congruent(params, state.v, "adam_step second moments");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  auto im = state.m.begin();
  auto iv = state.v.begin();
  auto ig = grads.begin();
  for (auto ip = params.begin(); ip != params.end(); ++ip, ++im, ++iv, ++ig) {
    Array& p = ip->second;
    Array& m = im->second;
    Array& v = iv->second;
    const Array& g = ig->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace bdl
