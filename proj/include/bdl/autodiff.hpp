#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bdl/array.hpp"
#include "bdl/errors.hpp"

namespace bdl::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so a
/// single reverse sweep visits every consumer before its producers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var leaf(Array value, bool trainable = true) {
    nodes_.push_back(Node{std::move(value), Array{}, trainable, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Array value) { return leaf(std::move(value), false); }

  /// Appends the result of a primitive. `backward` is dropped when no parent
  /// needs a gradient.
  Var record(Array value, std::span<const std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    nodes_.push_back(Node{std::move(value), Array{}, needs,
                          needs ? std::move(backward) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator for a node, zero-initialized on first touch.
  Array& grad_ref(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.shape() != node.value.shape()) node.grad = Array(node.value.shape());
    return node.grad;
  }

  /// Gradient of the last backward() output w.r.t. `v`; exactly zero when `v`
  /// did not participate.
  Array grad(Var v) const {
    const Node& node = nodes_[v.id];
    if (node.grad.shape() != node.value.shape()) return Array(node.value.shape());
    return node.grad;
  }

  void backward(Var output) {
    if (nodes_[output.id].value.size() != 1) {
      throw DimensionError("backward() needs a scalar output, got shape " +
                           shape_str(nodes_[output.id].value.shape()));
    }
    for (Node& node : nodes_) node.grad = Array{};
    grad_ref(output.id)[0] = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.backward && node.grad.shape() == node.value.shape()) node.backward(*this, i);
    }
  }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return tape->value(id); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw StructureError("variables recorded on different tapes");
}

inline void require_matrix(const Array& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 array, got " +
                         shape_str(a.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

}  // namespace detail

constexpr double kSquareplusB = 4.0;

inline double squareplus(double x) { return 0.5 * (x + std::sqrt(x * x + kSquareplusB)); }
inline double squareplus_grad(double x) {
  return 0.5 * (1.0 + x / std::sqrt(x * x + kSquareplusB));
}

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Array out({m, n});
  detail::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t parents[] = {a.id, b.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, ib = b.id, m, k, n](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    if (t.requires_grad(ia)) detail::gemm_nt(g.data(), t.value(ib).data(), t.grad_ref(ia).data(), m, k, n);
    if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia).data(), g.data(), t.grad_ref(ib).data(), m, k, n);
  });
}

/// x[m,k] * W[k,n] + b[n], with b broadcast over rows.
inline Var affine(Var x, Var w, Var b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  detail::require_matrix(xv, "affine");
  detail::require_matrix(wv, "affine");
  const std::size_t m = xv.shape()[0], k = xv.shape()[1], n = wv.shape()[1];
  if (wv.shape()[0] != k || bv.size() != n) {
    throw DimensionError("affine shape mismatch: input " + shape_str(xv.shape()) +
                         ", weight " + shape_str(wv.shape()) + ", bias " +
                         shape_str(bv.shape()));
  }
  Array out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = bv[j];
  }
  detail::gemm_nn(xv.data(), wv.data(), out.data(), m, k, n);
  const std::size_t parents[] = {x.id, w.id, b.id};
  return x.tape->record(std::move(out), parents,
                        [ix = x.id, iw = w.id, ib = b.id, m, k, n](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    if (t.requires_grad(ix)) detail::gemm_nt(g.data(), t.value(iw).data(), t.grad_ref(ix).data(), m, k, n);
    if (t.requires_grad(iw)) detail::gemm_tn(t.value(ix).data(), g.data(), t.grad_ref(iw).data(), m, k, n);
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

inline Var squareplus(Var x) {
  const Array& xv = x.value();
  Array out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = squareplus(xv[i]);
  const std::size_t parents[] = {x.id};
  return x.tape->record(std::move(out), parents, [ix = x.id](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    const Array& xv = t.value(ix);
    Array& gx = t.grad_ref(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * squareplus_grad(xv[i]);
  });
}

/// Row i of the result is the sum of the rows of `values` whose id is i.
inline Var segment_sum(Var values, std::span<const std::size_t> segment_ids,
                       std::size_t num_segments) {
  const Array& v = values.value();
  const std::size_t e = segment_ids.size();
  if (v.rows() != e) {
    throw DimensionError("segment_sum: " + std::to_string(e) + " ids for values of shape " +
                         shape_str(v.shape()));
  }
  const std::size_t d = v.cols();
  for (std::size_t r = 0; r < e; ++r) {
    if (segment_ids[r] >= num_segments) {
      throw IndexError("segment_sum: id " + std::to_string(segment_ids[r]) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(num_segments) + ")");
    }
  }
  Array out({num_segments, d});
  for (std::size_t r = 0; r < e; ++r) {
    double* dst = out.data() + segment_ids[r] * d;
    const double* src = v.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  std::vector<std::size_t> ids(segment_ids.begin(), segment_ids.end());
  const std::size_t parents[] = {values.id};
  return values.tape->record(std::move(out), parents,
                             [iv = values.id, ids = std::move(ids), d](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    Array& gv = t.grad_ref(iv);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const double* src = g.data() + ids[r] * d;
      double* dst = gv.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

/// out[r] = a[index[r]]
inline Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Array& av = a.value();
  detail::require_matrix(av, "gather_rows");
  const std::size_t n = av.rows(), d = av.cols();
  Array out({index.size(), d});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw IndexError("gather_rows: index " + std::to_string(index[r]) + " out of range for " +
                       std::to_string(n) + " rows");
    }
    std::copy_n(av.data() + index[r] * d, d, out.data() + r * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, idx = std::move(idx), d](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    Array& ga = t.grad_ref(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double* src = g.data() + r * d;
      double* dst = ga.data() + idx[r] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    ids.push_back(p.id);
    total += p.cols();
  }
  Array out({m, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = parts[k].value();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return parts[0].tape->record(std::move(out), ids,
                               [ids, widths, m, total](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Array& gp = t.grad_ref(ids[k]);
        for (std::size_t r = 0; r < m; ++r) {
          const double* src = g.data() + r * total + offset;
          double* dst = gp.data() + r * widths[k];
          for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += src[c];
        }
      }
      offset += widths[k];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Array& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(av.shape()));
  }
  const std::size_t w = end - begin;
  Array out({m, w});
  for (std::size_t r = 0; r < m; ++r) std::copy_n(av.data() + r * n + begin, w, out.data() + r * w);
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, m, n, begin, w](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    Array& ga = t.grad_ref(ia);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < w; ++c) ga[r * n + begin + c] += g[r * w + c];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    Array& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace detail {

template <class Fwd, class DA, class DB>
Var binary_elementwise(Var a, Var b, const char* name, Fwd fwd, DA da, DB db) {
  require_same_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError(std::string(name) + " shape mismatch: " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
  }
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const std::size_t parents[] = {a.id, b.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, ib = b.id, da, db](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    const Array& av = t.value(ia);
    const Array& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var scale(Var a, double s) {
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = s * av[i];
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, s](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    Array& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// Sum of all elements, as a shape-[1] array.
inline Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  const std::size_t parents[] = {a.id};
  return a.tape->record(Array::scalar(acc), parents, [ia = a.id](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self)[0];
    for (double& v : t.grad_ref(ia).values()) v += g;
  });
}

/// out[r, c] = a[r, c] * s[r]; `s` holds one value per row of `a`.
inline Var scale_rows(Var a, Var s) {
  detail::require_same_tape(a, s);
  const Array& av = a.value();
  const Array& sv = s.value();
  const std::size_t m = av.rows(), d = av.cols();
  if (sv.size() != m) {
    throw DimensionError("scale_rows: " + shape_str(av.shape()) + " with row scales " +
                         shape_str(sv.shape()));
  }
  Array out(av.shape());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = av[r * d + c] * sv[r];
  }
  const std::size_t parents[] = {a.id, s.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, is = s.id, m, d](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    const Array& av = t.value(ia);
    const Array& sv = t.value(is);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_ref(ia);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r * d + c] * sv[r];
      }
    }
    if (t.requires_grad(is)) {
      Array& gs = t.grad_ref(is);
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * av[r * d + c];
        gs[r] += acc;
      }
    }
  });
}

/// 1 / max(a, floor), elementwise. The gradient is zero on the clamped branch.
inline Var reciprocal_clamped(Var a, double floor) {
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = 1.0 / std::max(av[i], floor);
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id, floor](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    const Array& av = t.value(ia);
    Array& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > floor) ga[i] -= g[i] / (av[i] * av[i]);
    }
  });
}

/// Elementwise square root; inputs must be positive.
inline Var sqrt(Var a) {
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw NumericalError("sqrt of non-positive value");
    out[i] = std::sqrt(av[i]);
  }
  const std::size_t parents[] = {a.id};
  return a.tape->record(std::move(out), parents, [ia = a.id](Tape& t, std::size_t self) {
    const Array& g = t.grad_ref(self);
    const Array& y = t.value(self);
    Array& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / y[i];
  });
}

}  // namespace bdl::ad
