#pragma once

// Minimal reverse-mode automatic differentiation over row-major dense
// matrices. A Tape records every intermediate in creation order, which is
// already a topological order, so backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stablevc {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

/// A trainable tensor with an accumulated gradient.
template <class T>
struct Parameter {
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = true;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(Eigen::Index rows, Eigen::Index cols, bool weight_decay = true)
      : value(Matrix<T>::Zero(rows, cols)), grad(Matrix<T>::Zero(rows, cols)), decay(weight_decay) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T item() const { return value()(0, 0); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record_grad = true) : record_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, {}); }

  Var<T> param(Parameter<T>& p) {
    if (!record_) return push(p.value, false, {});
    Parameter<T>* target = &p;
    return push(p.value, true, [target](Tape& tape, std::size_t self) {
      if (target->grad.rows() != target->value.rows() || target->grad.cols() != target->value.cols()) {
        target->zero_grad();
      }
      target->grad += tape.grad(self);
    });
  }

  Var<T> push(Matrix<T> value, bool needs_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = record_ && needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var<T>& v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of a node, zero-filled on first access.
  Matrix<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    if (!nodes_[id].needs_grad) return;
    grad(id) += g;
  }

  /// Reverse sweep seeded with d(loss)/d(loss) = 1. The loss must be 1x1.
  void backward(const Var<T>& loss) {
    if (!record_) throw std::logic_error("backward() on a tape that does not record gradients");
    if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward() expects a scalar loss");
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id).setOnes();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_;
};

namespace detail {

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw std::invalid_argument("variables live on different tapes");
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

template <class T>
bool any_grad(const Var<T>& a) {
  return a.tape->needs_grad(a);
}

template <class T>
bool any_grad(const Var<T>& a, const Var<T>& b) {
  return a.tape->needs_grad(a) || b.tape->needs_grad(b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad(a, b), [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::any_grad(a, b), [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad(a, b),
                      [ia, ib](Tape<T>& t, std::size_t self) {
                        if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)));
                        if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)));
                      });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  const std::size_t ia = a.id;
  return a.tape->push(a.value() * s, detail::any_grad(a),
                      [ia, s](Tape<T>& t, std::size_t self) { t.accumulate(ia, t.grad(self) * s); });
}

/// a * s where s is a 1x1 variable.
template <class T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  detail::require_same_tape(a, s);
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scalar expected");
  const std::size_t ia = a.id, is = s.id;
  return a.tape->push(a.value() * s.item(), detail::any_grad(a, s), [ia, is](Tape<T>& t, std::size_t self) {
    const T sv = t.value(is)(0, 0);
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self) * sv);
    if (t.needs_grad(is)) {
      Matrix<T> gs(1, 1);
      gs(0, 0) = t.grad(self).cwiseProduct(t.value(ia)).sum();
      t.accumulate(is, gs);
    }
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const std::size_t ia = a.id, ib = b.id;
  Matrix<T> out = a.value() * b.value();
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, std::size_t self) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self) * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * t.grad(self));
  });
}

/// a * b^T without materializing the transpose as a node.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  const std::size_t ia = a.id, ib = b.id;
  Matrix<T> out = a.value() * b.value().transpose();
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, std::size_t self) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self) * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self).transpose() * t.value(ia));
  });
}

/// Adds a 1 x C row vector to every row of an R x C matrix.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const std::size_t ia = a.id, ir = row.id;
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(out), detail::any_grad(a, row), [ia, ir](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    if (t.needs_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

/// Multiplies every row of an R x C matrix elementwise by a 1 x C row vector.
template <class T>
Var<T> mul_row(const Var<T>& a, const Var<T>& row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: shape mismatch");
  const std::size_t ia = a.id, ir = row.id;
  Matrix<T> out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape->push(std::move(out), detail::any_grad(a, row), [ia, ir](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
    if (t.needs_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

/// Repeats a 1 x C row vector n times.
template <class T>
Var<T> broadcast_rows(const Var<T>& row, Eigen::Index n) {
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: row vector expected");
  const std::size_t ir = row.id;
  Matrix<T> out = row.value().replicate(n, 1);
  return row.tape->push(std::move(out), detail::any_grad(row), [ir](Tape<T>& t, std::size_t self) {
    t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out = a.value().transpose();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class T>
Var<T> tanh(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out = a.value().array().tanh().matrix();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    const Matrix<T>& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct((T(1) - y.array().square()).matrix()));
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out = a.value().array().exp().matrix();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

/// x * sigmoid(x).
template <class T>
Var<T> silu(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out = (a.value().array() / (T(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    const auto x = t.value(ia).array();
    const auto sig = (T(1) / (T(1) + (-x).exp())).eval();
    t.accumulate(ia, (t.grad(self).array() * (sig * (T(1) + x * (T(1) - sig)))).matrix());
  });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& a) {
  const std::size_t ia = a.id;
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  const auto x = a.value().array();
  Matrix<T> out = (T(0.5) * x * (T(1) + (c * (x + k * x.cube())).tanh())).matrix();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, c, k](Tape<T>& t, std::size_t self) {
    const auto x = t.value(ia).array();
    const auto th = (c * (x + k * x.cube())).tanh().eval();
    const auto d = (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square())).eval();
    t.accumulate(ia, (t.grad(self).array() * d).matrix());
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

/// Zero-mean, unit-variance normalization of each row (no affine part).
template <class T>
Var<T> layer_norm_rows(const Var<T>& a, T eps = T(1e-5)) {
  const std::size_t ia = a.id;
  const Eigen::Index n = a.cols();
  Matrix<T> out(a.rows(), n);
  RowVector<T> inv_std(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const auto row = a.value().row(r);
    const T mean = row.mean();
    const T var = (row.array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    out.row(r) = (row.array() - mean) * inv_std(r);
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, inv_std, n](Tape<T>& t, std::size_t self) {
    const Matrix<T>& y = t.value(self);
    const Matrix<T>& g = t.grad(self);
    Matrix<T> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T gm = g.row(r).mean();
      const T gy = g.row(r).dot(y.row(r)) / T(n);
      dx.row(r) = inv_std(r) * (g.row(r).array() - gm - y.row(r).array() * gy);
    }
    t.accumulate(ia, dx);
  });
}

/// Scales each row to unit L2 norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
  const std::size_t ia = a.id;
  Matrix<T> out(a.rows(), a.cols());
  RowVector<T> inv_norm(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    inv_norm(r) = T(1) / std::max(a.value().row(r).norm(), eps);
    out.row(r) = a.value().row(r) * inv_norm(r);
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, inv_norm](Tape<T>& t, std::size_t self) {
    const Matrix<T>& y = t.value(self);
    const Matrix<T>& g = t.grad(self);
    Matrix<T> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      dx.row(r) = inv_norm(r) * (g.row(r) - y.row(r) * g.row(r).dot(y.row(r)));
    }
    t.accumulate(ia, dx);
  });
}

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const T m = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    const Matrix<T>& y = t.value(self);
    const Matrix<T>& g = t.grad(self);
    Matrix<T> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T dot = g.row(r).dot(y.row(r));
      dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    t.accumulate(ia, dx);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: column mismatch");
  const std::size_t ia = a.id, ib = b.id;
  const Eigen::Index ra = a.rows(), rb = b.rows();
  Matrix<T> out(ra + rb, a.cols());
  out.topRows(ra) = a.value();
  out.bottomRows(rb) = b.value();
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib, ra, rb](Tape<T>& t, std::size_t self) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self).topRows(ra));
    if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self).bottomRows(rb));
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || detail::any_grad(p);
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix<T> out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return parts.front().tape->push(std::move(out), needs, [ids, widths](Tape<T>& t, std::size_t self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], t.grad(self).middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  const std::size_t ia = a.id;
  Matrix<T> out = a.value().middleCols(start, count);
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, start, count](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    t.grad(ia).middleCols(start, count) += t.grad(self);
  });
}

/// Shifts rows by `offset` (positive moves content down), zero-filling.
template <class T>
Var<T> shift_rows(const Var<T>& a, Eigen::Index offset) {
  const std::size_t ia = a.id;
  const Eigen::Index n = a.rows();
  Matrix<T> out = Matrix<T>::Zero(n, a.cols());
  const Eigen::Index k = std::min<Eigen::Index>(std::abs(offset), n);
  if (offset >= 0) {
    out.bottomRows(n - k) = a.value().topRows(n - k);
  } else {
    out.topRows(n - k) = a.value().bottomRows(n - k);
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, offset, n, k](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    if (offset >= 0) {
      t.grad(ia).topRows(n - k) += t.grad(self).bottomRows(n - k);
    } else {
      t.grad(ia).bottomRows(n - k) += t.grad(self).topRows(n - k);
    }
  });
}

/// Row i repeated counts[i] times, order preserved.
template <class T>
Var<T> repeat_rows(const Var<T>& a, const std::vector<int>& counts) {
  if (static_cast<Eigen::Index>(counts.size()) != a.rows()) throw std::invalid_argument("repeat_rows: count length");
  Eigen::Index total = 0;
  for (int c : counts) {
    if (c < 1) throw std::invalid_argument("repeat_rows: counts must be >= 1");
    total += c;
  }
  const std::size_t ia = a.id;
  Matrix<T> out(total, a.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (int c = 0; c < counts[i]; ++c) out.row(r++) = a.value().row(i);
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, counts](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    Matrix<T>& ga = t.grad(ia);
    const Matrix<T>& g = t.grad(self);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      for (int c = 0; c < counts[i]; ++c) ga.row(static_cast<Eigen::Index>(i)) += g.row(r++);
    }
  });
}

/// Average pooling along rows with window = stride = factor. The final
/// window averages over whatever rows remain.
template <class T>
Var<T> avg_pool_rows(const Var<T>& a, Eigen::Index factor) {
  if (factor < 1) throw std::invalid_argument("avg_pool_rows: factor must be >= 1");
  const Eigen::Index n = a.rows();
  const Eigen::Index out_rows = (n + factor - 1) / factor;
  const std::size_t ia = a.id;
  Matrix<T> out(out_rows, a.cols());
  for (Eigen::Index o = 0; o < out_rows; ++o) {
    const Eigen::Index begin = o * factor;
    const Eigen::Index len = std::min(factor, n - begin);
    out.row(o) = a.value().middleRows(begin, len).colwise().sum() / T(len);
  }
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, factor, n, out_rows](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    Matrix<T>& ga = t.grad(ia);
    const Matrix<T>& g = t.grad(self);
    for (Eigen::Index o = 0; o < out_rows; ++o) {
      const Eigen::Index begin = o * factor;
      const Eigen::Index len = std::min(factor, n - begin);
      for (Eigen::Index r = begin; r < begin + len; ++r) ga.row(r) += g.row(o) / T(len);
    }
  });
}

/// Column means as a 1 x C row.
template <class T>
Var<T> mean_rows(const Var<T>& a) {
  if (a.rows() < 1) throw std::invalid_argument("mean_rows: empty input");
  const std::size_t ia = a.id;
  const T n = T(a.rows());
  Matrix<T> out = a.value().colwise().sum() / n;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, n](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    t.grad(ia).rowwise() += t.grad(self).row(0) / n;
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Var<T> sum_all(const Var<T>& a) {
  const std::size_t ia = a.id;
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

/// Mean of (a - target)^2 over all elements; target is treated as constant.
template <class T>
Var<T> mse(const Var<T>& a, const Matrix<T>& target) {
  if (a.rows() != target.rows() || a.cols() != target.cols()) throw std::invalid_argument("mse: shape mismatch");
  const std::size_t ia = a.id;
  const Matrix<T> diff = a.value() - target;
  const T n = T(diff.size());
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, diff, n](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, diff * (T(2) * t.grad(self)(0, 0) / n));
  });
}

/// -log softmax(logits)[label] for a 1 x C logit row.
template <class T>
Var<T> nll_from_logits(const Var<T>& logits, Eigen::Index label) {
  if (logits.rows() != 1) throw std::invalid_argument("nll_from_logits: single row expected");
  if (label < 0 || label >= logits.cols()) throw std::out_of_range("nll_from_logits: label out of range");
  const std::size_t il = logits.id;
  const auto& z = logits.value();
  const T m = z.maxCoeff();
  const T lse = m + std::log((z.array() - m).exp().sum());
  Matrix<T> out(1, 1);
  out(0, 0) = lse - z(0, label);
  Matrix<T> probs = (z.array() - lse).exp().matrix();
  return logits.tape->push(std::move(out), detail::any_grad(logits), [il, probs, label](Tape<T>& t, std::size_t self) {
    Matrix<T> g = probs;
    g(0, label) -= T(1);
    t.accumulate(il, g * t.grad(self)(0, 0));
  });
}

/// Identity forward; backward multiplies the incoming gradient by -scale.
template <class T>
Var<T> grad_reverse(const Var<T>& a, T scale) {
  const std::size_t ia = a.id;
  return a.tape->push(a.value(), detail::any_grad(a),
                      [ia, scale](Tape<T>& t, std::size_t self) { t.accumulate(ia, t.grad(self) * (-scale)); });
}

}  // namespace ad
}  // namespace stablevc
