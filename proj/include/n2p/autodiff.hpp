#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Nodes are evaluated eagerly as they are recorded, so a Graph doubles as a
// define-by-run tape. Every node also keeps its forward closure: rebinding an
// input with set_input() and calling forward() replays the recorded program
// on the new values. Insertion order is a topological order by construction.

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "n2p/error.hpp"

namespace n2p {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::uint64_t next_parameter_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

/// A trainable array with its gradient accumulator.
template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  std::uint64_t id = next_parameter_id();

  Parameter() = default;
  Parameter(std::string n, Matrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

  // Copies are new parameters with their own identity.
  Parameter(const Parameter& o) : name(o.name), value(o.value), grad(o.grad) {}
  Parameter& operator=(const Parameter& o) {
    name = o.name;
    value = o.value;
    grad = o.grad;
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

/// Handle to a node in a Graph.
struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const { return id != none; }
};

enum class Op {
  input, parameter, affine, relu, sigmoid, softplus, exp, log, square, abs, linear,
  add, sub, mul, mul_col, div_col, max_scalar, segment_sum, segment_exclusive_cumsum,
  sum, mean, row_sum, softmax_rows, normalize_rows, concat_cols, concat_rows, slice_cols,
  gather_rows, maxmin_norm, jsd_rows
};

inline const char* op_name(Op op) {
  static constexpr const char* names[] = {
      "input", "parameter", "affine", "relu", "sigmoid", "softplus", "exp", "log", "square",
      "abs", "linear", "add", "sub", "mul", "mul_col", "div_col", "max_scalar", "segment_sum",
      "segment_exclusive_cumsum", "sum", "mean", "row_sum", "softmax_rows", "normalize_rows",
      "concat_cols", "concat_rows", "slice_cols", "gather_rows", "maxmin_norm", "jsd_rows"};
  return names[static_cast<int>(op)];
}

template <class T>
class Graph {
 public:
  using Mat = Matrix<T>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // ---- leaves ---------------------------------------------------------------

  Var input(Mat value) {
    check_finite(value, "input");
    Node n(Op::input);
    n.value = std::move(value);
    return push(std::move(n), false);
  }

  /// Replaces the value of an input node; the graph is stale until forward().
  void set_input(Var v, Mat value) {
    Node& n = at(v);
    if (n.op != Op::input) throw StateError(describe(v.id) + ": set_input on a non-input node");
    if (n.value.rows() != value.rows() || n.value.cols() != value.cols())
      throw ShapeError(describe(v.id) + ": input expects " + shape_str(n.value) + ", got " +
                       shape_str(value));
    check_finite(value, "input");
    n.value = std::move(value);
    stale_ = true;
  }

  Var param(Parameter<T>& p) {
    Node n(Op::parameter);
    n.param = &p;
    return push(std::move(n), true);
  }

  // ---- dense ----------------------------------------------------------------

  /// y = x W^T + b with W stored out x in and b stored 1 x out.
  Var affine(Var x, Parameter<T>& w, Parameter<T>& b) {
    const Var wv = param(w);
    const Var bv = param(b);
    const auto& X = value(x);
    if (X.cols() != w.value.cols() || b.value.rows() != 1 || b.value.cols() != w.value.rows())
      throw ShapeError("affine at node #" + std::to_string(nodes_.size()) + ": x " + shape_str(X) +
                       ", W " + shape_str(w.value) + ", b " + shape_str(b.value));
    return record(Op::affine, {x, wv, bv},
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const auto& W = g.val(n.in[1]);
          const auto& B = g.val(n.in[2]);
          n.value.resize(X.rows(), W.rows());
          n.value.noalias() = X * W.transpose();
          n.value.rowwise() += B.row(0);
        },
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const auto& W = g.val(n.in[1]);
          if (g.needs(n.in[0])) g.grad(n.in[0]).noalias() += n.grad * W;
          if (g.needs(n.in[1])) g.grad(n.in[1]).noalias() += n.grad.transpose() * X;
          if (g.needs(n.in[2])) g.grad(n.in[2]) += n.grad.colwise().sum();
        });
  }

  // ---- elementwise unary ----------------------------------------------------

  Var relu(Var x) {
    return unary(Op::relu, x, [](const Mat& a) -> Mat { return a.cwiseMax(T(0)); },
                 [](const Mat& a, const Mat&, const Mat& g) -> Mat {
                   return (a.array() > T(0)).select(g.array(), T(0)).matrix();
                 });
  }

  Var sigmoid(Var x) {
    return unary(Op::sigmoid, x,
                 [](const Mat& a) -> Mat { return (T(1) / (T(1) + (-a.array()).exp())).matrix(); },
                 [](const Mat&, const Mat& y, const Mat& g) -> Mat {
                   return (g.array() * y.array() * (T(1) - y.array())).matrix();
                 });
  }

  /// Numerically stable log(1 + e^x).
  Var softplus(Var x) {
    return unary(Op::softplus, x,
                 [](const Mat& a) -> Mat {
                   return (a.array().max(T(0)) + (-a.array().abs()).exp().log1p()).matrix();
                 },
                 [](const Mat& a, const Mat&, const Mat& g) -> Mat {
                   return (g.array() / (T(1) + (-a.array()).exp())).matrix();
                 });
  }

  Var exp(Var x) {
    return unary(Op::exp, x, [](const Mat& a) -> Mat { return a.array().exp().matrix(); },
                 [](const Mat&, const Mat& y, const Mat& g) -> Mat {
                   return (g.array() * y.array()).matrix();
                 });
  }

  Var log(Var x) {
    return unary(Op::log, x, [](const Mat& a) -> Mat { return a.array().log().matrix(); },
                 [](const Mat& a, const Mat&, const Mat& g) -> Mat {
                   return (g.array() / a.array()).matrix();
                 });
  }

  Var square(Var x) {
    return unary(Op::square, x, [](const Mat& a) -> Mat { return a.array().square().matrix(); },
                 [](const Mat& a, const Mat&, const Mat& g) -> Mat {
                   return (T(2) * a.array() * g.array()).matrix();
                 });
  }

  Var abs(Var x) {
    return unary(Op::abs, x, [](const Mat& a) -> Mat { return a.cwiseAbs(); },
                 [](const Mat& a, const Mat&, const Mat& g) -> Mat {
                   return (g.array() * a.array().sign()).matrix();
                 });
  }

  /// y = scale * x + offset.
  Var linear(Var x, T scale, T offset = T(0)) {
    return record(Op::linear, {x},
        [scale, offset](Graph& g, Node& n) {
          n.value = (scale * g.val(n.in[0]).array() + offset).matrix();
        },
        [scale](Graph& g, Node& n) { g.grad(n.in[0]) += scale * n.grad; });
  }

  /// y = max(x, floor) elementwise.
  Var max_scalar(Var x, T floor) {
    return record(Op::max_scalar, {x},
        [floor](Graph& g, Node& n) { n.value = g.val(n.in[0]).cwiseMax(floor); },
        [floor](Graph& g, Node& n) {
          g.grad(n.in[0]) += (g.val(n.in[0]).array() > floor).select(n.grad.array(), T(0)).matrix();
        },
        floor);
  }

  // ---- elementwise binary ---------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return record(Op::add, {a, b},
        [](Graph& g, Node& n) { n.value = g.val(n.in[0]) + g.val(n.in[1]); },
        [](Graph& g, Node& n) {
          if (g.needs(n.in[0])) g.grad(n.in[0]) += n.grad;
          if (g.needs(n.in[1])) g.grad(n.in[1]) += n.grad;
        });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return record(Op::sub, {a, b},
        [](Graph& g, Node& n) { n.value = g.val(n.in[0]) - g.val(n.in[1]); },
        [](Graph& g, Node& n) {
          if (g.needs(n.in[0])) g.grad(n.in[0]) += n.grad;
          if (g.needs(n.in[1])) g.grad(n.in[1]) -= n.grad;
        });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return record(Op::mul, {a, b},
        [](Graph& g, Node& n) { n.value = g.val(n.in[0]).cwiseProduct(g.val(n.in[1])); },
        [](Graph& g, Node& n) {
          if (g.needs(n.in[0])) g.grad(n.in[0]) += n.grad.cwiseProduct(g.val(n.in[1]));
          if (g.needs(n.in[1])) g.grad(n.in[1]) += n.grad.cwiseProduct(g.val(n.in[0]));
        });
  }

  /// x (n x k) scaled row-wise by c (n x 1).
  Var mul_col(Var x, Var c) {
    column_of(x, c, "mul_col");
    return record(Op::mul_col, {x, c},
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const auto& C = g.val(n.in[1]);
          n.value = C.col(0).asDiagonal() * X;
        },
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const auto& C = g.val(n.in[1]);
          if (g.needs(n.in[0])) g.grad(n.in[0]) += C.col(0).asDiagonal() * n.grad;
          if (g.needs(n.in[1])) g.grad(n.in[1]) += n.grad.cwiseProduct(X).rowwise().sum();
        });
  }

  /// x (n x k) divided row-wise by c (n x 1).
  Var div_col(Var x, Var c) {
    column_of(x, c, "div_col");
    return record(Op::div_col, {x, c},
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const auto& C = g.val(n.in[1]);
          n.value = C.col(0).cwiseInverse().asDiagonal() * X;
        },
        [](Graph& g, Node& n) {
          const auto& C = g.val(n.in[1]);
          if (g.needs(n.in[0])) g.grad(n.in[0]) += C.col(0).cwiseInverse().asDiagonal() * n.grad;
          if (g.needs(n.in[1])) {
            // d(x/c)/dc = -x/c^2 = -y/c
            g.grad(n.in[1]) -= (n.grad.cwiseProduct(n.value).rowwise().sum().array() /
                                C.col(0).array()).matrix();
          }
        });
  }

  // ---- segmented reductions (consecutive row blocks of fixed length) --------

  Var segment_sum(Var x, Eigen::Index seg) {
    divisible(x, seg, "segment_sum");
    return record(Op::segment_sum, {x},
        [seg](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          const Eigen::Index groups = X.rows() / seg;
          n.value.setZero(groups, X.cols());
          for (Eigen::Index r = 0; r < groups; ++r)
            n.value.row(r) = X.middleRows(r * seg, seg).colwise().sum();
        },
        [seg](Graph& g, Node& n) {
          auto& G = g.grad(n.in[0]);
          for (Eigen::Index r = 0; r < n.value.rows(); ++r)
            G.middleRows(r * seg, seg).rowwise() += n.grad.row(r);
        });
  }

  /// Within each block of seg rows of a column vector: y_i = sum_{j<i} x_j.
  Var segment_exclusive_cumsum(Var x, Eigen::Index seg) {
    divisible(x, seg, "segment_exclusive_cumsum");
    if (value(x).cols() != 1)
      throw ShapeError(describe_next("segment_exclusive_cumsum") + ": expects a column, got " +
                       shape_str(value(x)));
    return record(Op::segment_exclusive_cumsum, {x},
        [seg](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          n.value.resize(X.rows(), 1);
          for (Eigen::Index b = 0; b < X.rows(); b += seg) {
            T acc = T(0);
            for (Eigen::Index i = 0; i < seg; ++i) {
              n.value(b + i, 0) = acc;
              acc += X(b + i, 0);
            }
          }
        },
        [seg](Graph& g, Node& n) {
          auto& G = g.grad(n.in[0]);
          for (Eigen::Index b = 0; b < n.value.rows(); b += seg) {
            T acc = T(0);
            for (Eigen::Index i = seg - 1; i >= 0; --i) {
              G(b + i, 0) += acc;
              acc += n.grad(b + i, 0);
            }
          }
        });
  }

  // ---- reductions -----------------------------------------------------------

  Var sum(Var x) {
    return record(Op::sum, {x},
        [](Graph& g, Node& n) { n.value = Mat::Constant(1, 1, g.val(n.in[0]).sum()); },
        [](Graph& g, Node& n) { g.grad(n.in[0]).array() += n.grad(0, 0); });
  }

  /// Mean over all entries; an empty input yields 0.
  Var mean(Var x) {
    return record(Op::mean, {x},
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          n.value = Mat::Constant(1, 1, X.size() ? X.sum() / T(X.size()) : T(0));
        },
        [](Graph& g, Node& n) {
          auto& G = g.grad(n.in[0]);
          if (G.size()) G.array() += n.grad(0, 0) / T(G.size());
        });
  }

  Var row_sum(Var x) {
    return record(Op::row_sum, {x},
        [](Graph& g, Node& n) { n.value = g.val(n.in[0]).rowwise().sum(); },
        [](Graph& g, Node& n) { g.grad(n.in[0]).colwise() += n.grad.col(0); });
  }

  Var softmax_rows(Var x) {
    return record(Op::softmax_rows, {x},
        [](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          n.value.resize(X.rows(), X.cols());
          for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const T m = X.row(r).maxCoeff();
            n.value.row(r) = (X.row(r).array() - m).exp().matrix();
            n.value.row(r) /= n.value.row(r).sum();
          }
        },
        [](Graph& g, Node& n) {
          const Mat gy = n.grad.cwiseProduct(n.value);
          g.grad(n.in[0]) += gy - n.value.cwiseProduct(gy.rowwise().sum().replicate(1, n.value.cols()));
        });
  }

  /// Rows divided by max(|row|, eps).
  Var normalize_rows(Var x, T eps) {
    return record(Op::normalize_rows, {x},
        [eps](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          n.value.resize(X.rows(), X.cols());
          for (Eigen::Index r = 0; r < X.rows(); ++r)
            n.value.row(r) = X.row(r) / std::max(X.row(r).norm(), eps);
        },
        [eps](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          auto& G = g.grad(n.in[0]);
          for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const T len = X.row(r).norm();
            if (len > eps)
              G.row(r) += (n.grad.row(r) - n.value.row(r) * n.value.row(r).dot(n.grad.row(r))) / len;
            else
              G.row(r) += n.grad.row(r) / eps;
          }
        },
        eps);
  }

  // ---- structural -----------------------------------------------------------

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError(describe_next("concat_cols") + ": no operands");
    const Eigen::Index rows = value(parts[0]).rows();
    for (const Var& p : parts)
      if (value(p).rows() != rows)
        throw ShapeError(describe_next("concat_cols") + ": row mismatch " +
                         std::to_string(value(p).rows()) + " vs " + std::to_string(rows));
    return record(Op::concat_cols, std::vector<Var>(parts.begin(), parts.end()),
        [](Graph& g, Node& n) {
          Eigen::Index cols = 0;
          for (auto i : n.in) cols += g.val(i).cols();
          n.value.resize(g.val(n.in[0]).rows(), cols);
          Eigen::Index c = 0;
          for (auto i : n.in) {
            const auto& P = g.val(i);
            n.value.middleCols(c, P.cols()) = P;
            c += P.cols();
          }
        },
        [](Graph& g, Node& n) {
          Eigen::Index c = 0;
          for (auto i : n.in) {
            const Eigen::Index w = g.val(i).cols();
            if (g.needs(i)) g.grad(i) += n.grad.middleCols(c, w);
            c += w;
          }
        });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError(describe_next("concat_rows") + ": no operands");
    const Eigen::Index cols = value(parts[0]).cols();
    for (const Var& p : parts)
      if (value(p).cols() != cols)
        throw ShapeError(describe_next("concat_rows") + ": column mismatch " +
                         std::to_string(value(p).cols()) + " vs " + std::to_string(cols));
    return record(Op::concat_rows, std::vector<Var>(parts.begin(), parts.end()),
        [](Graph& g, Node& n) {
          Eigen::Index rows = 0;
          for (auto i : n.in) rows += g.val(i).rows();
          n.value.resize(rows, g.val(n.in[0]).cols());
          Eigen::Index r = 0;
          for (auto i : n.in) {
            const auto& P = g.val(i);
            n.value.middleRows(r, P.rows()) = P;
            r += P.rows();
          }
        },
        [](Graph& g, Node& n) {
          Eigen::Index r = 0;
          for (auto i : n.in) {
            const Eigen::Index h = g.val(i).rows();
            if (g.needs(i)) g.grad(i) += n.grad.middleRows(r, h);
            r += h;
          }
        });
  }

  Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count) {
    if (begin < 0 || count < 0 || begin + count > value(x).cols())
      throw ShapeError(describe_next("slice_cols") + ": columns [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") of " + shape_str(value(x)));
    return record(Op::slice_cols, {x},
        [begin, count](Graph& g, Node& n) { n.value = g.val(n.in[0]).middleCols(begin, count); },
        [begin, count](Graph& g, Node& n) { g.grad(n.in[0]).middleCols(begin, count) += n.grad; });
  }

  Var gather_rows(Var x, std::vector<Eigen::Index> rows) {
    const Eigen::Index n_rows = value(x).rows();
    for (auto r : rows)
      if (r < 0 || r >= n_rows)
        throw ShapeError(describe_next("gather_rows") + ": row " + std::to_string(r) +
                         " out of range for " + shape_str(value(x)));
    auto shared = std::make_shared<const std::vector<Eigen::Index>>(std::move(rows));
    return record(Op::gather_rows, {x},
        [shared](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          n.value.resize(static_cast<Eigen::Index>(shared->size()), X.cols());
          for (std::size_t i = 0; i < shared->size(); ++i)
            n.value.row(static_cast<Eigen::Index>(i)) = X.row((*shared)[i]);
        },
        [shared](Graph& g, Node& n) {
          auto& G = g.grad(n.in[0]);
          for (std::size_t i = 0; i < shared->size(); ++i)
            G.row((*shared)[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        });
  }

  // ---- loss primitives ------------------------------------------------------

  /// (v - min) / (max - min + eps) over a column vector. Ties resolve to the
  /// lowest index when choosing which entry carries the min/max gradient.
  Var maxmin_norm(Var x, T eps) {
    if (value(x).cols() != 1 || value(x).rows() == 0)
      throw ShapeError(describe_next("maxmin_norm") + ": expects a nonempty column, got " +
                       shape_str(value(x)));
    return record(Op::maxmin_norm, {x},
        [eps](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          Eigen::Index lo = 0, hi = 0;
          for (Eigen::Index i = 1; i < X.rows(); ++i) {
            if (X(i, 0) < X(lo, 0)) lo = i;
            if (X(i, 0) > X(hi, 0)) hi = i;
          }
          n.aux = {static_cast<std::ptrdiff_t>(lo), static_cast<std::ptrdiff_t>(hi)};
          const T span = X(hi, 0) - X(lo, 0) + eps;
          n.value = ((X.array() - X(lo, 0)) / span).matrix();
        },
        [eps](Graph& g, Node& n) {
          const auto& X = g.val(n.in[0]);
          auto& G = g.grad(n.in[0]);
          const auto lo = static_cast<Eigen::Index>(n.aux[0]);
          const auto hi = static_cast<Eigen::Index>(n.aux[1]);
          const T span = X(hi, 0) - X(lo, 0) + eps;
          G += n.grad / span;
          const T gy = n.grad.cwiseProduct(n.value).sum();
          G(lo, 0) += (gy - n.grad.sum()) / span;
          G(hi, 0) -= gy / span;
        },
        eps);
  }

  /// Row-wise Jensen-Shannon divergence between probability rows of p and q.
  Var jsd_rows(Var p, Var q) {
    same_shape(p, q, "jsd_rows");
    return record(Op::jsd_rows, {p, q},
        [](Graph& g, Node& n) {
          const auto& P = g.val(n.in[0]);
          const auto& Q = g.val(n.in[1]);
          n.value.resize(P.rows(), 1);
          for (Eigen::Index r = 0; r < P.rows(); ++r) {
            T acc = T(0);
            for (Eigen::Index k = 0; k < P.cols(); ++k) {
              const T a = P(r, k), b = Q(r, k), m = T(0.5) * (a + b);
              if (a > T(0)) acc += T(0.5) * a * std::log(a / m);
              if (b > T(0)) acc += T(0.5) * b * std::log(b / m);
            }
            n.value(r, 0) = acc;
          }
        },
        [](Graph& g, Node& n) {
          const auto& P = g.val(n.in[0]);
          const auto& Q = g.val(n.in[1]);
          constexpr T tiny = std::numeric_limits<T>::min();
          for (Eigen::Index r = 0; r < P.rows(); ++r) {
            const T gr = n.grad(r, 0);
            for (Eigen::Index k = 0; k < P.cols(); ++k) {
              const T a = std::max(P(r, k), tiny), b = std::max(Q(r, k), tiny);
              const T m = T(0.5) * (a + b);
              if (g.needs(n.in[0])) g.grad(n.in[0])(r, k) += gr * T(0.5) * std::log(a / m);
              if (g.needs(n.in[1])) g.grad(n.in[1])(r, k) += gr * T(0.5) * std::log(b / m);
            }
          }
        });
  }

  // ---- evaluation -----------------------------------------------------------

  const Mat& value(Var v) const { return val(checked(v)); }
  T scalar(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) throw ShapeError(describe(v.id) + ": not a scalar (" + shape_str(m) + ")");
    return m(0, 0);
  }

  /// Re-evaluates every recorded node from the current input values.
  void forward() {
    for (auto& n : nodes_)
      if (n.fwd) n.fwd(*this, n);
    stale_ = false;
    backward_done_ = false;
  }

  /// Accumulates d(sum(seed .* out))/d(param) into each Parameter::grad.
  void backward(Var out, const Mat& seed) {
    const std::size_t o = checked(out);
    if (stale_) throw StateError("backward before forward: inputs changed since the last evaluation");
    if (seed.rows() != val(o).rows() || seed.cols() != val(o).cols())
      throw ShapeError(describe(o) + ": seed " + shape_str(seed) + " does not match output " +
                       shape_str(val(o)));
    for (std::size_t i = 0; i <= o; ++i)
      if (nodes_[i].requires_grad) nodes_[i].grad.setZero(val(i).rows(), val(i).cols());
    if (!nodes_[o].requires_grad) return;
    nodes_[o].grad = seed;
    for (std::size_t i = o + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.op == Op::parameter) {
        n.param->grad += n.grad;
      } else if (n.bwd) {
        n.bwd(*this, n);
      }
    }
    backward_done_ = true;
  }

  void backward(Var out) {
    const Mat& v = value(out);
    backward(out, Mat::Ones(v.rows(), v.cols()));
  }

  /// Gradient held by an intermediate node after backward().
  const Mat& node_grad(Var v) const {
    const std::size_t i = checked(v);
    if (!backward_done_) throw StateError(describe(i) + ": gradient requested before backward");
    return nodes_[i].grad;
  }

  /// Hash of every branch decision taken by piecewise ops (relu/abs sign
  /// patterns, clamps, min/max selections). Two evaluations with equal
  /// signatures lie on the same smooth piece of the program.
  std::uint64_t kink_signature() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t x) { h = (h ^ x) * 1099511628211ULL; };
    for (const auto& n : nodes_) {
      switch (n.op) {
        case Op::relu:
        case Op::abs: {
          const auto& X = val_of(n.in[0]);
          for (Eigen::Index i = 0; i < X.size(); ++i) mix(X.data()[i] > T(0) ? 1 : X.data()[i] < T(0) ? 2 : 3);
          break;
        }
        case Op::max_scalar:
        case Op::normalize_rows: {
          const auto& X = val_of(n.in[0]);
          if (n.op == Op::max_scalar) {
            for (Eigen::Index i = 0; i < X.size(); ++i) mix(X.data()[i] > n.threshold ? 1 : 2);
          } else {
            for (Eigen::Index r = 0; r < X.rows(); ++r) mix(X.row(r).norm() > n.threshold ? 1 : 2);
          }
          break;
        }
        case Op::maxmin_norm:
          for (auto a : n.aux) mix(static_cast<std::uint64_t>(a) + 7);
          break;
        default: break;
      }
    }
    return h;
  }

  std::size_t size() const { return nodes_.size(); }
  Op op_of(Var v) const { return nodes_[checked(v)].op; }

 private:
  struct Node {
    using Fn = std::function<void(Graph&, Node&)>;
    explicit Node(Op o) : op(o) {}
    Op op;
    std::vector<std::size_t> in;
    Mat value;
    Mat grad;
    Fn fwd;
    Fn bwd;
    Parameter<T>* param = nullptr;
    std::vector<std::ptrdiff_t> aux;
    T threshold = T(0);
    bool requires_grad = false;
  };

  Var push(Node n, bool requires_grad) {
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  template <class F, class B>
  Var record(Op op, std::vector<Var> in, F&& fwd, B&& bwd, T threshold = T(0)) {
    Node n(op);
    bool req = false;
    for (const Var& v : in) {
      n.in.push_back(checked(v));
      req = req || nodes_[v.id].requires_grad;
    }
    n.fwd = std::forward<F>(fwd);
    n.bwd = std::forward<B>(bwd);
    n.threshold = threshold;
    n.requires_grad = req;
    nodes_.push_back(std::move(n));
    Node& back = nodes_.back();
    back.fwd(*this, back);
    return Var{nodes_.size() - 1};
  }

  template <class F, class D>
  Var unary(Op op, Var x, F f, D df) {
    return record(op, {x},
        [f](Graph& g, Node& n) { n.value = f(g.val(n.in[0])); },
        [df](Graph& g, Node& n) { g.grad(n.in[0]) += df(g.val(n.in[0]), n.value, n.grad); });
  }

  const Mat& val(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.op == Op::parameter ? n.param->value : n.value;
  }
  const Mat& val_of(std::size_t i) const { return val(i); }
  Mat& grad(std::size_t i) { return nodes_[i].grad; }
  bool needs(std::size_t i) const { return nodes_[i].requires_grad; }

  Node& at(Var v) { return nodes_[checked(v)]; }
  std::size_t checked(Var v) const {
    if (!v.valid() || v.id >= nodes_.size())
      throw StateError("invalid node handle " + std::to_string(v.id));
    return v.id;
  }

  std::string describe(std::size_t id) const {
    return "node #" + std::to_string(id) + " (" + op_name(nodes_[id].op) + ")";
  }
  std::string describe_next(const char* op) const {
    return "node #" + std::to_string(nodes_.size()) + " (" + op + ")";
  }
  static std::string shape_str(const Mat& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
  }

  void same_shape(Var a, Var b, const char* op) const {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw ShapeError(describe_next(op) + ": shape " + shape_str(A) + " vs " + shape_str(B));
  }
  void column_of(Var x, Var c, const char* op) const {
    const auto& X = value(x);
    const auto& C = value(c);
    if (C.cols() != 1 || C.rows() != X.rows())
      throw ShapeError(describe_next(op) + ": expects an " + std::to_string(X.rows()) +
                       "x1 column, got " + shape_str(C));
  }
  void divisible(Var x, Eigen::Index seg, const char* op) const {
    if (seg <= 0 || value(x).rows() % seg != 0)
      throw ShapeError(describe_next(op) + ": " + std::to_string(value(x).rows()) +
                       " rows not divisible into segments of " + std::to_string(seg));
  }
  static void check_finite(const Mat& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
  }

  std::vector<Node> nodes_;
  bool stale_ = false;
  bool backward_done_ = false;
};

}  // namespace n2p
