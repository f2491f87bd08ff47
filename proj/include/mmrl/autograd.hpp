#pragma once

// Dense reverse-mode differentiation over Eigen matrices.
//
// Every value is a 2-D row-major matrix; vectors are 1×n rows. Persistent
// parameters live in `Tensor`, per-forward intermediates live in a `Graph`
// that is built while the forward runs and thrown away after `backward`.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrl/errors.hpp"

namespace mmrl::ag {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

// s×s boolean matrix; entry (p, q) true means position p may attend to q.
class AttentionMask {
 public:
  using Storage = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  AttentionMask() = default;
  explicit AttentionMask(Storage allowed) : allowed_(std::move(allowed)) {
    if (allowed_.rows() != allowed_.cols()) {
      throw ShapeError("attention mask must be square, got " +
                       shape_string(allowed_.rows(), allowed_.cols()));
    }
  }

  static AttentionMask full(Index size) {
    return AttentionMask(Storage::Constant(size, size, true));
  }

  static AttentionMask causal(Index size) {
    Storage m(size, size);
    for (Index p = 0; p < size; ++p) {
      for (Index q = 0; q < size; ++q) m(p, q) = q <= p;
    }
    return AttentionMask(std::move(m));
  }

  Index size() const { return allowed_.rows(); }
  bool allowed(Index p, Index q) const { return allowed_(p, q); }
  const Storage& matrix() const { return allowed_; }

  bool is_lower_triangular() const {
    for (Index p = 0; p < size(); ++p) {
      for (Index q = p + 1; q < size(); ++q) {
        if (allowed_(p, q)) return false;
      }
    }
    return true;
  }

  friend bool operator==(const AttentionMask& a, const AttentionMask& b) {
    return a.allowed_.rows() == b.allowed_.rows() && a.allowed_ == b.allowed_;
  }

 private:
  Storage allowed_;
};

// Persistent tensor: parameters, frozen weights and fixed inputs. The gradient
// accumulator is the only part that may change while the tensor is shared.
template <typename Scalar>
class Tensor {
 public:
  using MatrixType = Matrix<Scalar>;

  Tensor() = default;
  explicit Tensor(MatrixType value, bool requires_grad = false)
      : value_(std::move(value)), requires_grad_(requires_grad) {}

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return Tensor(MatrixType::Zero(rows, cols), requires_grad);
  }

  const MatrixType& value() const { return value_; }
  MatrixType& mutable_value() { return value_; }

  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }
  Index size() const { return value_.size(); }
  std::vector<std::size_t> shape() const {
    return {static_cast<std::size_t>(value_.rows()), static_cast<std::size_t>(value_.cols())};
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.reset();
  }

  const std::optional<MatrixType>& grad() const { return grad_; }
  void zero_grad() const { grad_.reset(); }

  template <typename Derived>
  void accumulate_grad(const Eigen::MatrixBase<Derived>& g) const {
    if (!requires_grad_) return;
    if (g.rows() != value_.rows() || g.cols() != value_.cols()) {
      throw ShapeError("gradient " + shape_string(g) + " does not match tensor " +
                       shape_string(value_));
    }
    if (grad_) {
      *grad_ += g;
    } else {
      grad_ = g;
    }
  }

 private:
  MatrixType value_;
  bool requires_grad_ = false;
  mutable std::optional<MatrixType> grad_;
};

template <typename Scalar>
class Graph;

// Handle to a node of a Graph.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar>& value() const { return graph->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool tracks() const { return graph->tracks(*this); }
};

// Tape of executed operations. Parents always have smaller ids than their
// children, so reverse id order is a valid topological order.
template <typename Scalar>
class Graph {
 public:
  using MatrixType = Matrix<Scalar>;
  using VarType = Var<Scalar>;
  using Backprop = std::function<void(Graph&, const MatrixType&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Binds a persistent tensor. The same tensor maps to one node per graph so
  // its gradient is accumulated exactly once.
  VarType leaf(const Tensor<Scalar>& t) {
    if (auto it = leaf_ids_.find(&t); it != leaf_ids_.end()) return {this, it->second};
    Node& n = nodes_.emplace_back();
    n.ref = &t.value();
    n.leaf = &t;
    n.tracks = t.requires_grad();
    const std::size_t id = nodes_.size() - 1;
    leaf_ids_.emplace(&t, id);
    return {this, id};
  }

  VarType constant(MatrixType v) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(v);
    return {this, nodes_.size() - 1};
  }

  // Appends an op result. The backprop closure is kept only when some parent
  // carries gradient.
  VarType record(MatrixType value, std::initializer_list<VarType> parents, Backprop fn) {
    bool any = false;
    for (const VarType& p : parents) any = any || tracks(p);
    return record_if(std::move(value), any, std::move(fn));
  }

  VarType record_if(MatrixType value, bool tracked, Backprop fn) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.tracks = tracked;
    if (tracked) n.backprop = std::move(fn);
    return {this, nodes_.size() - 1};
  }

  const MatrixType& value(VarType v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  // Test hook: overwrite an intermediate value in place. Only meaningful on
  // nodes that do not carry gradient.
  MatrixType& mutable_value(VarType v) {
    Node& n = nodes_.at(v.id);
    if (n.ref) throw ContractError("cannot mutate a bound tensor through the graph");
    return n.owned;
  }

  bool tracks(VarType v) const { return nodes_.at(v.id).tracks; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(VarType target, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_.at(target.id);
    if (!n.tracks) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  // Propagates d(loss)/d(node) to every bound tensor with requires_grad and
  // returns those tensors in first-binding order.
  std::vector<const Tensor<Scalar>*> backward(VarType loss) {
    const MatrixType& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward needs a scalar loss, got " + shape_string(lv));
    }
    std::vector<const Tensor<Scalar>*> touched;
    if (!tracks(loss)) return touched;
    accumulate(loss, MatrixType::Ones(1, 1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.leaf) {
        n.leaf->accumulate_grad(n.grad);
      } else if (n.backprop) {
        n.backprop(*this, n.grad);
      }
      n.grad = MatrixType();
      n.has_grad = false;
    }
    for (const auto& n : nodes_) {
      if (n.leaf && n.tracks) touched.push_back(n.leaf);
    }
    return touched;
  }

 private:
  struct Node {
    MatrixType owned;
    const MatrixType* ref = nullptr;
    const Tensor<Scalar>* leaf = nullptr;
    bool tracks = false;
    Backprop backprop;
    MatrixType grad;
    bool has_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, std::size_t> leaf_ids_;
};

namespace detail {

template <typename Scalar>
void require_same_graph(Var<Scalar> a, Var<Scalar> b) {
  if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
}

template <typename Scalar>
void require_same_shape(const char* op, Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  }
}

// a·b computed one output row at a time, so a row's value never depends on
// how many other rows are in the batch (GEMM blocking would).
template <typename Scalar>
Matrix<Scalar> rowwise_product(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  Matrix<Scalar> out(a.rows(), b.cols());
  for (Index r = 0; r < a.rows(); ++r) out.row(r).noalias() = a.row(r) * b;
  return out;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape("add", a, b);
  auto& g = *a.graph;
  return g.record(a.value() + b.value(), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d);
    g.accumulate(b, d);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape("sub", a, b);
  auto& g = *a.graph;
  return g.record(a.value() - b.value(), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d);
    g.accumulate(b, -d);
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape("mul", a, b);
  auto& g = *a.graph;
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d.cwiseProduct(b.value()));
    g.accumulate(b, d.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto& g = *a.graph;
  return g.record(a.value() * s, {a}, [a, s](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d * s);
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Scalar s) {
  auto& g = *a.graph;
  Matrix<Scalar> out = a.value().array() + s;
  return g.record(std::move(out), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, Var<Scalar> a) { return scale(a, s); }

template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  auto& g = *a.graph;
  return g.record(a.value().cwiseAbs(), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> sign = a.value().unaryExpr([](Scalar x) {
      return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0));
    });
    g.accumulate(a, d.cwiseProduct(sign));
  });
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> a) {
  auto& g = *a.graph;
  return g.record(a.value().cwiseAbs2(), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, Scalar(2) * d.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  auto& g = *a.graph;
  Matrix<Scalar> out = a.value().transpose();
  return g.record(std::move(out), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(a, d.transpose());
  });
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.value()) + " x " +
                     shape_string(b.value()));
  }
  auto& g = *a.graph;
  Matrix<Scalar> out = a.value() * b.value();
  return g.record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    if (g.tracks(a)) g.accumulate(a, d * b.value().transpose());
    if (g.tracks(b)) g.accumulate(b, a.value().transpose() * d);
  });
}

// x·W + b with x: n×in, W: in×out, b: 1×out broadcast over rows.
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeError("linear: input " + shape_string(x.value()) + ", weight " +
                     shape_string(weight.value()) + ", bias " + shape_string(bias.value()));
  }
  auto& g = *x.graph;
  Matrix<Scalar> out = detail::rowwise_product(x.value(), weight.value());
  out.rowwise() += bias.value().row(0);
  return g.record(std::move(out), {x, weight, bias},
                  [x, weight, bias](Graph<Scalar>& g, const Matrix<Scalar>& d) {
                    if (g.tracks(x)) g.accumulate(x, d * weight.value().transpose());
                    if (g.tracks(weight)) g.accumulate(weight, x.value().transpose() * d);
                    if (g.tracks(bias)) g.accumulate(bias, d.colwise().sum());
                  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_string(x.value()));
  }
  auto& g = *x.graph;
  Matrix<Scalar> out = x.value().middleRows(start, count);
  return g.record(std::move(out), {x}, [x, start, count](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
    full.middleRows(start, count) = d;
    g.accumulate(x, full);
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_rows needs at least one part");
  auto& g = *parts.front().graph;
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    detail::require_same_graph(p, parts.front());
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(p.value()) + " vs " +
                       shape_string(parts.front().value()));
    }
    rows += p.rows();
    tracked = tracked || g.tracks(p);
  }
  Matrix<Scalar> out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  std::vector<Var<Scalar>> saved(parts.begin(), parts.end());
  return g.record_if(std::move(out), tracked,
                     [saved = std::move(saved)](Graph<Scalar>& g, const Matrix<Scalar>& d) {
                       Index off = 0;
                       for (const auto& p : saved) {
                         if (g.tracks(p)) g.accumulate(p, d.middleRows(off, p.rows()));
                         off += p.rows();
                       }
                     });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::initializer_list<Var<Scalar>> parts) {
  return concat_rows(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

// Row lookup: out row r = table row ids[r]. Gradients scatter-add back.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const Index> ids) {
  auto& g = *table.graph;
  Matrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= table.rows()) {
      throw ContractError("row id " + std::to_string(ids[r]) + " out of range for " +
                          shape_string(table.value()));
    }
    out.row(static_cast<Index>(r)) = table.value().row(ids[r]);
  }
  std::vector<Index> saved(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [table, saved](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(table.rows(), table.cols());
    for (std::size_t r = 0; r < saved.size(); ++r) full.row(saved[r]) += d.row(static_cast<Index>(r));
    g.accumulate(table, full);
  });
}

// Row-wise cosine a·b / sqrt(|a|²|b|²): n×d, n×d -> n×1. Identical rows give
// exactly 1 since sqrt(fl(s*s)) == s.
template <typename Scalar>
Var<Scalar> cosine_rows(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape("cosine_rows", a, b);
  auto& g = *a.graph;
  const Index n = a.rows();
  Matrix<Scalar> out(n, 1);
  for (Index r = 0; r < n; ++r) {
    const Scalar aa = a.value().row(r).squaredNorm();
    const Scalar bb = b.value().row(r).squaredNorm();
    if (!(aa > 0) || !(bb > 0)) {
      throw NormalizationError("cosine of a zero-norm row " + std::to_string(r));
    }
    out(r, 0) = a.value().row(r).dot(b.value().row(r)) / std::sqrt(aa * bb);
  }
  auto cosines = std::make_shared<Matrix<Scalar>>(out);
  return g.record(std::move(out), {a, b}, [a, b, cosines](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> da(a.rows(), a.cols());
    Matrix<Scalar> db(b.rows(), b.cols());
    for (Index r = 0; r < a.rows(); ++r) {
      const Scalar na = a.value().row(r).norm();
      const Scalar nb = b.value().row(r).norm();
      const Scalar c = (*cosines)(r, 0);
      da.row(r) = d(r, 0) * (b.value().row(r) / (na * nb) - c * a.value().row(r) / (na * na));
      db.row(r) = d(r, 0) * (a.value().row(r) / (na * nb) - c * b.value().row(r) / (nb * nb));
    }
    if (g.tracks(a)) g.accumulate(a, da);
    if (g.tracks(b)) g.accumulate(b, db);
  });
}

// Column-wise mean over rows: n×d -> 1×d.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> x) {
  if (x.rows() == 0) throw ContractError("mean_rows of an empty matrix");
  auto& g = *x.graph;
  Matrix<Scalar> out = x.value().colwise().mean();
  return g.record(std::move(out), {x}, [x](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(x, d.replicate(x.rows(), 1) / static_cast<Scalar>(x.rows()));
  });
}

// Sum along each row: n×d -> n×1.
template <typename Scalar>
Var<Scalar> sum_cols(Var<Scalar> x) {
  auto& g = *x.graph;
  Matrix<Scalar> out = x.value().rowwise().sum();
  return g.record(std::move(out), {x}, [x](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(x, d.replicate(1, x.cols()));
  });
}

template <typename Scalar>
Var<Scalar> sum_all(Var<Scalar> x) {
  auto& g = *x.graph;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return g.record(std::move(out), {x}, [x](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    g.accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), d(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean_all(Var<Scalar> x) {
  if (x.value().size() == 0) throw ContractError("mean_all of an empty matrix");
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

// Single element as a 1×1 value.
template <typename Scalar>
Var<Scalar> element(Var<Scalar> x, Index r, Index c) {
  if (r < 0 || c < 0 || r >= x.rows() || c >= x.cols()) {
    throw ShapeError("element (" + std::to_string(r) + "," + std::to_string(c) + ") out of " +
                     shape_string(x.value()));
  }
  auto& g = *x.graph;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value()(r, c);
  return g.record(std::move(out), {x}, [x, r, c](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
    full(r, c) = d(0, 0);
    g.accumulate(x, full);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations

// tanh-approximated GELU.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  static const Scalar kC = std::sqrt(Scalar(2) / Scalar(M_PI));
  constexpr Scalar kA = Scalar(0.044715);
  auto& g = *x.graph;
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::tanh(kC * (v + kA * v * v * v)));
  });
  return g.record(std::move(out), {x}, [x](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Matrix<Scalar> slope = x.value().unaryExpr([](Scalar v) {
      const Scalar t = std::tanh(kC * (v + kA * v * v * v));
      return Scalar(0.5) * (Scalar(1) + t) +
             Scalar(0.5) * v * (Scalar(1) - t * t) * kC * (Scalar(1) + Scalar(3) * kA * v * v);
    });
    g.accumulate(x, d.cwiseProduct(slope));
  });
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x) {
  auto& g = *x.graph;
  Matrix<Scalar> out = detail::softmax_rows(x.value());
  auto probs = std::make_shared<Matrix<Scalar>>(out);
  return g.record(std::move(out), {x}, [x, probs](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    const auto& p = *probs;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = d.cwiseProduct(p).rowwise().sum();
    Matrix<Scalar> dx = p.cwiseProduct(d - dots.replicate(1, p.cols()));
    g.accumulate(x, dx);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(Var<Scalar> x) {
  auto& g = *x.graph;
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.value().row(r).maxCoeff();
    const Scalar lse = m + std::log((x.value().row(r).array() - m).exp().sum());
    out.row(r) = x.value().row(r).array() - lse;
  }
  auto probs = std::make_shared<Matrix<Scalar>>(out.array().exp().matrix());
  return g.record(std::move(out), {x}, [x, probs](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sums = d.rowwise().sum();
    g.accumulate(x, d - probs->cwiseProduct(sums.replicate(1, d.cols())));
  });
}

// Per-row layer normalization with affine gain/shift (1×d each).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> shift, Scalar eps = Scalar(1e-5)) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gain.cols() != d || shift.cols() != d || gain.rows() != 1 || shift.rows() != 1) {
    throw ShapeError("layer_norm: input " + shape_string(x.value()) + ", gain " +
                     shape_string(gain.value()));
  }
  auto& g = *x.graph;
  auto normed = std::make_shared<Matrix<Scalar>>(n, d);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n);
  for (Index r = 0; r < n; ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    (*inv_std)(r) = Scalar(1) / std::sqrt(var + eps);
    normed->row(r) = (x.value().row(r).array() - mu) * (*inv_std)(r);
  }
  Matrix<Scalar> out = normed->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  return g.record(std::move(out), {x, gain, shift},
                  [x, gain, shift, normed, inv_std](Graph<Scalar>& g, const Matrix<Scalar>& dy) {
                    const auto& xh = *normed;
                    if (g.tracks(gain)) g.accumulate(gain, dy.cwiseProduct(xh).colwise().sum());
                    if (g.tracks(shift)) g.accumulate(shift, dy.colwise().sum());
                    if (!g.tracks(x)) return;
                    Matrix<Scalar> dxh = dy.array().rowwise() * gain.value().row(0).array();
                    Matrix<Scalar> dx(xh.rows(), xh.cols());
                    for (Index r = 0; r < xh.rows(); ++r) {
                      const Scalar m1 = dxh.row(r).mean();
                      const Scalar m2 = dxh.row(r).cwiseProduct(xh.row(r)).mean();
                      dx.row(r) = (*inv_std)(r) * (dxh.row(r).array() - m1 - xh.row(r).array() * m2);
                    }
                    g.accumulate(x, dx);
                  });
}

// Scales every row to unit L2 norm.
template <typename Scalar>
Var<Scalar> normalize_rows(Var<Scalar> x) {
  auto& g = *x.graph;
  auto norms = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(x.value().rowwise().norm());
  for (Index r = 0; r < x.rows(); ++r) {
    if (!((*norms)(r) > Scalar(0))) {
      throw NormalizationError("row " + std::to_string(r) + " of " + shape_string(x.value()) +
                               " has zero norm");
    }
  }
  Matrix<Scalar> out = x.value().array().colwise() / norms->array();
  auto unit = std::make_shared<Matrix<Scalar>>(out);
  return g.record(std::move(out), {x}, [x, norms, unit](Graph<Scalar>& g, const Matrix<Scalar>& d) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = d.cwiseProduct(*unit).rowwise().sum();
    Matrix<Scalar> dx = (d - unit->cwiseProduct(dots.replicate(1, d.cols()))).array().colwise() /
                        norms->array();
    g.accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Attention

// Per-head attention probabilities for queries q and keys k (both s×d).
// Masked logits are set to the most negative finite value before the max
// subtraction, so their weights come out as exactly zero.
template <typename Scalar>
std::vector<Matrix<Scalar>> attention_probabilities(const Matrix<Scalar>& q, const Matrix<Scalar>& k,
                                                    const AttentionMask& mask, Index heads) {
  const Index s = q.rows();
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  if (k.rows() != s || k.cols() != d || mask.size() != s) {
    throw ShapeError("attention: q " + shape_string(q) + ", k " + shape_string(k) + ", mask " +
                     shape_string(mask.size(), mask.size()));
  }
  for (Index p = 0; p < s; ++p) {
    if (!mask.matrix().row(p).any()) {
      throw DegenerateMaskError("row " + std::to_string(p) + " attends to nothing");
    }
  }
  const Index dh = d / heads;
  const Scalar factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  // Each row only looks at columns up to its last allowed key, which keeps a
  // causal row's result independent of anything appended after it.
  std::vector<Index> extent(static_cast<std::size_t>(s));
  for (Index p = 0; p < s; ++p) {
    Index e = s;
    while (!mask.allowed(p, e - 1)) --e;
    extent[static_cast<std::size_t>(p)] = e;
  }
  std::vector<Matrix<Scalar>> probs;
  probs.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    Matrix<Scalar> prob = Matrix<Scalar>::Zero(s, s);
    for (Index p = 0; p < s; ++p) {
      const Index e = extent[static_cast<std::size_t>(p)];
      // Reductions run on a fresh aligned buffer: vectorized sums over a row
      // of `prob` would group terms by that row's address, which depends on s.
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row(e);
      for (Index c = 0; c < e; ++c) {
        row(c) = mask.allowed(p, c) ? qh.row(p).dot(kh.row(c)) * factor : std::numeric_limits<Scalar>::lowest();
      }
      const Scalar m = row.maxCoeff();
      row = (row.array() - m).exp().matrix();
      row /= row.sum();
      prob.row(p).head(e) = row;
    }
    probs.push_back(std::move(prob));
  }
  return probs;
}

// Multi-head scaled dot-product attention over already projected q, k, v.
template <typename Scalar>
Var<Scalar> masked_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, const AttentionMask& mask,
                             Index heads) {
  detail::require_same_shape("attention", q, k);
  detail::require_same_shape("attention", q, v);
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(
      attention_probabilities(q.value(), k.value(), mask, heads));
  const Index d = q.cols();
  const Index dh = d / heads;
  Matrix<Scalar> out(q.rows(), d);
  for (Index h = 0; h < heads; ++h) {
    const auto& p = (*probs)[static_cast<std::size_t>(h)];
    const auto vh = v.value().middleCols(h * dh, dh);
    for (Index r = 0; r < q.rows(); ++r) {
      Index e = q.rows();
      while (e > 1 && p(r, e - 1) == Scalar(0) && !mask.allowed(r, e - 1)) --e;
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> weights = p.row(r).head(e);
      out.row(r).segment(h * dh, dh).noalias() = weights * vh.topRows(e);
    }
  }
  auto& g = *q.graph;
  return g.record(std::move(out), {q, k, v},
                  [q, k, v, probs, heads, dh](Graph<Scalar>& g, const Matrix<Scalar>& d) {
                    const Scalar factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
                    Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
                    Matrix<Scalar> dk = Matrix<Scalar>::Zero(k.rows(), k.cols());
                    Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
                    for (Index h = 0; h < heads; ++h) {
                      const auto& p = (*probs)[static_cast<std::size_t>(h)];
                      const auto dh_out = d.middleCols(h * dh, dh);
                      dv.middleCols(h * dh, dh) = p.transpose() * dh_out;
                      Matrix<Scalar> dp = dh_out * v.value().middleCols(h * dh, dh).transpose();
                      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dp.cwiseProduct(p).rowwise().sum();
                      Matrix<Scalar> ds = p.cwiseProduct(dp - dots.replicate(1, p.cols())) * factor;
                      dq.middleCols(h * dh, dh) = ds * k.value().middleCols(h * dh, dh);
                      dk.middleCols(h * dh, dh) = ds.transpose() * q.value().middleCols(h * dh, dh);
                    }
                    g.accumulate(q, dq);
                    g.accumulate(k, dk);
                    g.accumulate(v, dv);
                  });
}

}  // namespace mmrl::ag
