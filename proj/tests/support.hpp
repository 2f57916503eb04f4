#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "bdl/autodiff.hpp"
#include "bdl/optim.hpp"

namespace bdl::test {

/// ||a - b|| / max(||a||, ||b||) over every entry of two congruent trees.
inline double relative_error(const ParamTree& a, const ParamTree& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [name, ta] : a) {
    const Array& tb = b.at(name);
    for (std::size_t i = 0; i < ta.size(); ++i) {
      diff += (ta[i] - tb[i]) * (ta[i] - tb[i]);
      na += ta[i] * ta[i];
      nb += tb[i] * tb[i];
    }
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

/// Central differences of `f` with respect to every entry of `params`.
inline ParamTree numeric_gradient(const std::function<double(const ParamTree&)>& f, ParamTree params,
                                  double h = 1e-6) {
  ParamTree out;
  for (auto& [name, t] : params) {
    Array g(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = f(params);
      t[i] = orig - h;
      const double down = f(params);
      t[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

/// Reverse-mode gradient of a loss built on a fresh tape from leaves bound to
/// `params`.
inline ParamTree tape_gradient(const std::function<ad::Var(ad::Tape&, const std::map<std::string, ad::Var>&)>& build,
                               const ParamTree& params) {
  ad::Tape tape;
  std::map<std::string, ad::Var> leaves;
  for (const auto& [name, t] : params) leaves.emplace(name, tape.leaf(t));
  const ad::Var loss = build(tape, leaves);
  tape.backward(loss);
  ParamTree out;
  for (const auto& [name, v] : leaves) out.emplace(name, tape.grad(v));
  return out;
}

inline double tape_value(const std::function<ad::Var(ad::Tape&, const std::map<std::string, ad::Var>&)>& build,
                         const ParamTree& params) {
  ad::Tape tape;
  std::map<std::string, ad::Var> leaves;
  for (const auto& [name, t] : params) leaves.emplace(name, tape.leaf(t));
  return build(tape, leaves).value()[0];
}

inline Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(std::move(shape));
  for (double& v : a.values()) v = u(rng);
  return a;
}

/// Fresh, empty directory removed at scope exit.
class TempDir {
 public:
  TempDir() {
    static std::size_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("bdl-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace bdl::test
