// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over row-major double matrices.
// Every op records its value on a Tape together with a closure that pushes
// the output gradient back to its inputs. Nodes are replayed in reverse
// creation order, which is a valid topological order.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "occanykit/common.hpp"

namespace occanykit::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Fixed sparse linear map between flattened row-major matrices:
/// out[i] = sum_k weight[k] * in[index[k]] for k in [offset[i], offset[i+1]).
/// Reshapes, gathers, bilinear resizes, im2col and RoPE are all instances.
struct SparseMap {
  Eigen::Index in_rows = 0, in_cols = 0;
  Eigen::Index out_rows = 0, out_cols = 0;
  std::vector<std::size_t> offset{0};
  std::vector<std::size_t> index;
  std::vector<double> weight;

  SparseMap() = default;
  SparseMap(Eigen::Index ir, Eigen::Index ic, Eigen::Index orow, Eigen::Index ocol)
      : in_rows(ir), in_cols(ic), out_rows(orow), out_cols(ocol) {
    offset.reserve(static_cast<std::size_t>(orow * ocol) + 1);
  }

  void add(std::size_t in_flat, double w) {
    index.push_back(in_flat);
    weight.push_back(w);
  }
  /// Close the current output element.
  void next() { offset.push_back(index.size()); }

  Mat apply(const Mat& x) const {
    Mat out(out_rows, out_cols);
    const double* in = x.data();
    double* o = out.data();
    const auto n = static_cast<std::size_t>(out_rows * out_cols);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t k = offset[i]; k < offset[i + 1]; ++k) acc += weight[k] * in[index[k]];
      o[i] = acc;
    }
    return out;
  }

  void apply_transpose_add(const Mat& g, Mat& gin) const {
    const double* go = g.data();
    double* gi = gin.data();
    const auto n = static_cast<std::size_t>(out_rows * out_cols);
    for (std::size_t i = 0; i < n; ++i) {
      const double gv = go[i];
      if (gv == 0.0) continue;
      for (std::size_t k = offset[i]; k < offset[i + 1]; ++k) gi[index[k]] += weight[k] * gv;
    }
  }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Var leaf(Mat value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  /// Record an op output; `backward` runs only when some input needs a gradient.
  Var record(Mat value, bool requires_grad, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  const Mat& value(const Var& v) const { return nodes_[v.id].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id].requires_grad; }
  std::size_t next_id() const { return nodes_.size(); }

  /// Gradient buffer of v, zero-initialised on first access.
  Mat& grad(const Var& v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(const Var& v) const { return nodes_[v.id].grad.size() != 0; }

  /// Accumulate a seed gradient into v (e.g. dL/dOutput from a loss).
  void seed(const Var& v, const Mat& g) {
    if (g.rows() != v.rows() || g.cols() != v.cols())
      throw ValidationError("tape seed: gradient shape mismatch");
    grad(v) += g;
  }

  /// Run the reverse sweep from every seeded node.
  void backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      current_ = i;
      n.backward(*this);
    }
  }

  /// Gradient of the node currently being replayed.
  const Mat& out_grad() const { return nodes_[current_].grad; }
  const Mat& out_value() const { return nodes_[current_].value; }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::size_t current_ = 0;
};

inline const Mat& Var::value() const { return tape->value(*this); }

namespace detail {
inline bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}
inline void check_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ValidationError("autodiff: vars from different tapes");
}
}  // namespace detail

inline Var constant(Tape& t, Mat v) { return t.leaf(std::move(v), false); }

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows())
    throw ValidationError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + ")");
  Tape& t = *a.tape;
  Mat v = a.value() * b.value();
  return t.record(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp) {
    const Mat& g = tp.out_grad();
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
  });
}

/// a * b^T without materialising the transpose.
inline Var matmul_nt(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: column counts differ");
  Tape& t = *a.tape;
  Mat v = a.value() * b.value().transpose();
  return t.record(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp) {
    const Mat& g = tp.out_grad();
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad(b).noalias() += g.transpose() * tp.value(a);
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("add: shape mismatch");
  Tape& t = *a.tape;
  Mat v = a.value() + b.value();
  return t.record(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp) {
    const Mat& g = tp.out_grad();
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

/// x + broadcast(row) where row is 1 x cols.
inline Var add_row(Var x, Var row) {
  detail::check_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw ValidationError("add_row: shape mismatch");
  Tape& t = *x.tape;
  Mat v = x.value().rowwise() + row.value().row(0);
  return t.record(std::move(v), detail::any_grad({x, row}), [x, row](Tape& tp) {
    const Mat& g = tp.out_grad();
    if (tp.requires_grad(x)) tp.grad(x) += g;
    if (tp.requires_grad(row)) tp.grad(row) += g.colwise().sum();
  });
}

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var mul(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("mul: shape mismatch");
  Tape& t = *a.tape;
  Mat v = a.value().cwiseProduct(b.value());
  return t.record(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp) {
    const Mat& g = tp.out_grad();
    if (tp.requires_grad(a)) tp.grad(a) += g.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad(b) += g.cwiseProduct(tp.value(a));
  });
}

inline Var scale(Var x, double s) {
  Tape& t = *x.tape;
  Mat v = x.value() * s;
  return t.record(std::move(v), detail::any_grad({x}), [x, s](Tape& tp) {
    tp.grad(x) += s * tp.out_grad();
  });
}

inline Var add_scalar(Var x, double s) {
  Tape& t = *x.tape;
  Mat v = x.value().array() + s;
  return t.record(std::move(v), detail::any_grad({x}), [x](Tape& tp) {
    tp.grad(x) += tp.out_grad();
  });
}

inline Var exp(Var x) {
  Tape& t = *x.tape;
  Mat v = x.value().array().exp();
  return t.record(std::move(v), detail::any_grad({x}), [x](Tape& tp) {
    tp.grad(x) += tp.out_grad().cwiseProduct(tp.out_value());
  });
}

/// Exact GELU, x * Phi(x).
inline Var gelu(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  Mat v(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double a = xv.data()[i];
    v.data()[i] = 0.5 * a * (1.0 + std::erf(a * std::numbers::sqrt2 / 2.0));
  }
  return t.record(std::move(v), detail::any_grad({x}), [x](Tape& tp) {
    const Mat& xv = tp.value(x);
    const Mat& g = tp.out_grad();
    Mat& gx = tp.grad(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double a = xv.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(a * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * a * a);
      gx.data()[i] += g.data()[i] * (cdf + a * pdf);
    }
  });
}

/// Row-wise layer normalisation with affine gamma/beta (each 1 x cols).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6) {
  detail::check_same_tape(x, gamma);
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ValidationError("layer_norm: shape mismatch");
  Mat xhat(xv.rows(), n);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(xv.rows()));
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (xv.row(r).array() - mean) * is;
  }
  Mat v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
          beta.value().row(0).array();
  auto xhat_ptr = std::make_shared<Mat>(std::move(xhat));
  return t.record(std::move(v), detail::any_grad({x, gamma, beta}),
                  [x, gamma, beta, xhat_ptr, inv_std](Tape& tp) {
    const Mat& g = tp.out_grad();
    const Mat& xh = *xhat_ptr;
    if (tp.requires_grad(gamma)) tp.grad(gamma) += g.cwiseProduct(xh).colwise().sum();
    if (tp.requires_grad(beta)) tp.grad(beta) += g.colwise().sum();
    if (tp.requires_grad(x)) {
      Mat& gx = tp.grad(x);
      const auto& gam = tp.value(gamma);
      const double n = static_cast<double>(xh.cols());
      for (Eigen::Index r = 0; r < xh.rows(); ++r) {
        const Eigen::Array<double, 1, Eigen::Dynamic> gh = g.row(r).array() * gam.row(0).array();
        const double m1 = gh.sum() / n;
        const double m2 = (gh * xh.row(r).array()).sum() / n;
        gx.row(r).array() += (*inv_std)[static_cast<std::size_t>(r)] *
                             (gh - m1 - xh.row(r).array() * m2);
      }
    }
  });
}

inline Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  Mat v(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double m = xv.row(r).maxCoeff();
    v.row(r) = (xv.row(r).array() - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return t.record(std::move(v), detail::any_grad({x}), [x](Tape& tp) {
    const Mat& y = tp.out_value();
    const Mat& g = tp.out_grad();
    Mat& gx = tp.grad(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

inline Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.cols()) throw ValidationError("slice_cols: out of range");
  Tape& t = *x.tape;
  Mat v = x.value().middleCols(start, count);
  return t.record(std::move(v), detail::any_grad({x}), [x, start, count](Tape& tp) {
    tp.grad(x).middleCols(start, count) += tp.out_grad();
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: nothing to concatenate");
  Tape& t = *parts.front().tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: row counts differ");
    cols += p.cols();
    needs = needs || t.requires_grad(p);
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(v), needs, [parts](Tape& tp) {
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.grad(p) += tp.out_grad().middleCols(c0, p.cols());
      c0 += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: nothing to concatenate");
  Tape& t = *parts.front().tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: column counts differ");
    rows += p.rows();
    needs = needs || t.requires_grad(p);
  }
  Mat v(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(v), needs, [parts](Tape& tp) {
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.grad(p) += tp.out_grad().middleRows(r0, p.rows());
      r0 += p.rows();
    }
  });
}

inline Var apply_map(Var x, std::shared_ptr<const SparseMap> map) {
  if (x.rows() != map->in_rows || x.cols() != map->in_cols)
    throw ValidationError("apply_map: input shape mismatch");
  Tape& t = *x.tape;
  Mat v = map->apply(x.value());
  return t.record(std::move(v), detail::any_grad({x}), [x, map](Tape& tp) {
    map->apply_transpose_add(tp.out_grad(), tp.grad(x));
  });
}

/// Reinterpret the flat row-major buffer with a new shape.
inline Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.rows() * x.cols()) throw ValidationError("reshape: element count differs");
  Tape& t = *x.tape;
  Mat v = Eigen::Map<const Mat>(x.value().data(), rows, cols);
  return t.record(std::move(v), detail::any_grad({x}), [x](Tape& tp) {
    Mat& gx = tp.grad(x);
    const Mat& g = tp.out_grad();
    Eigen::Map<Mat>(gx.data(), g.rows(), g.cols()) += g;
  });
}

/// Central-difference check of reverse-mode gradients of a scalar function
/// of several parameter matrices. `build` maps leaf vars to a 1x1 output.
inline double check_gradients(const std::vector<Mat>& inputs,
                              const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                              double eps = 1e-6) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
  Var out = build(tape, leaves);
  if (out.rows() != 1 || out.cols() != 1) throw ValidationError("check_gradients: output must be 1x1");
  tape.seed(out, Mat::Ones(1, 1));
  tape.backward();
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat analytic = tape.has_grad(leaves[k]) ? tape.grad(leaves[k])
                                                  : Mat::Zero(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Mat> shifted = inputs;
        shifted[k].data()[i] += delta;
        Tape t2;
        std::vector<Var> l2;
        for (const auto& m : shifted) l2.push_back(t2.leaf(m, false));
        return build(t2, l2).value()(0, 0);
      };
      const double fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic.data()[i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace occanykit::ad
