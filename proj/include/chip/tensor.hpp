// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace chip {

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class index_error : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Raised when an operation would produce NaN or Inf from finite inputs.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  Tape* tape = nullptr;
  // Propagates this node's grad into its parents.
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major tensor of doubles. Values are immutable once constructed;
// copies share storage. A tensor is "tracked" when it lives on a Tape.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size()) {
      throw shape_error("tensor shape " + shape_str(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor zeros(Shape shape) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::span<const double> values() const { return node_->values; }

  double item() const {
    if (size() != 1) throw shape_error("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }
  double operator[](std::size_t i) const { return node_->values[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->values[r * node_->shape[1] + c]; }

  bool tracked() const { return node_->tape != nullptr; }
  Tape* tape() const { return node_->tape; }
  const detail::Node* id() const { return node_.get(); }

 private:
  friend class Tape;
  friend struct OpBuilder;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Gradients collected by a backward pass, keyed by tensor identity.
class GradientMap {
 public:
  // Gradient of `t`; zeros of t's shape when t was not reached.
  std::vector<double> at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return std::vector<double>(t.size(), 0.0);
    return it->second;
  }
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

// Ordered record of tracked operations. One tape per loss evaluation; tracked
// tensors must not outlive the tape that recorded them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tracked leaf holding a copy of `value`.
  Tensor variable(const Tensor& value) {
    auto node = std::make_shared<detail::Node>();
    node->shape = value.shape();
    node->values.assign(value.values().begin(), value.values().end());
    node->tape = this;
    nodes_.push_back(node);
    return Tensor(node);
  }

  std::size_t size() const { return nodes_.size(); }

  GradientMap backward(const Tensor& loss) {
    if (loss.size() != 1 || loss.rank() != 0) {
      throw shape_error("backward requires a rank-0 loss, got " + shape_str(loss.shape()));
    }
    if (loss.tape() != this) throw std::invalid_argument("backward: loss is not tracked on this tape");
    for (auto& n : nodes_) n->grad.assign(n->values.size(), 0.0);
    loss.node_->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& n = **it;
      if (n.backward) n.backward(n.grad);
    }
    GradientMap out;
    for (auto& n : nodes_) out.grads_.emplace(n.get(), n->grad);
    return out;
  }

 private:
  friend struct OpBuilder;
  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

inline GradientMap backward(const Tensor& scalar_loss, Tape& tape) { return tape.backward(scalar_loss); }

// Internal helper for defining differentiable operations.
struct OpBuilder {
  using NodePtr = std::shared_ptr<detail::Node>;

  static Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
      if (!t->tracked()) continue;
      if (tape && tape != t->tape()) throw std::invalid_argument("operands recorded on different tapes");
      tape = t->tape();
    }
    return tape;
  }

  static const NodePtr& node(const Tensor& t) { return t.node_; }

  // Gradient buffer of an input, or nullptr when the input is a constant.
  static std::vector<double>* grad_of(const NodePtr& n) { return n->tape ? &n->grad_buffer() : nullptr; }

  template <typename Backward>
  static Tensor make(const char* op, Shape shape, std::vector<double> values, Tape* tape, Backward&& bw) {
    for (double v : values) {
      if (!std::isfinite(v)) throw numeric_error(std::string(op) + ": non-finite result");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    if (tape) {
      n->tape = tape;
      n->backward = std::forward<Backward>(bw);
      tape->record(n);
    }
    return Tensor(n);
  }
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw shape_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

inline void require_nonempty(const Tensor& t, const char* op) {
  if (t.size() == 0) throw shape_error(std::string(op) + ": empty tensor");
}

inline double log_sum_exp(std::span<const double> row) {
  double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

// sigma(x) without overflow.
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto na = OpBuilder::node(a), nb = OpBuilder::node(b);
  return OpBuilder::make("add", a.shape(), std::move(out), OpBuilder::common_tape({&a, &b}),
                         [na, nb](const std::vector<double>& g) {
                           for (auto* ga : {OpBuilder::grad_of(na), OpBuilder::grad_of(nb)}) {
                             if (!ga) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                           }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto na = OpBuilder::node(a), nb = OpBuilder::node(b);
  return OpBuilder::make("sub", a.shape(), std::move(out), OpBuilder::common_tape({&a, &b}),
                         [na, nb](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                           if (auto* gb = OpBuilder::grad_of(nb))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto na = OpBuilder::node(a), nb = OpBuilder::node(b);
  return OpBuilder::make("mul", a.shape(), std::move(out), OpBuilder::common_tape({&a, &b}),
                         [na, nb](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * nb->values[i];
                           if (auto* gb = OpBuilder::grad_of(nb))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * na->values[i];
                         });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto na = OpBuilder::node(a);
  return OpBuilder::make("scale", a.shape(), std::move(out), OpBuilder::common_tape({&a}),
                         [na, s](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
                         });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  auto na = OpBuilder::node(a);
  return OpBuilder::make("gelu", a.shape(), std::move(out), OpBuilder::common_tape({&a}),
                         [na](const std::vector<double>& g) {
                           auto* ga = OpBuilder::grad_of(na);
                           if (!ga) return;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             double x = na->values[i];
                             double u = k * (x + 0.044715 * x * x * x);
                             double t = std::tanh(u);
                             double du = k * (1.0 + 3.0 * 0.044715 * x * x);
                             (*ga)[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                           }
                         });
}

// log sigma(x) = -softplus(-x), evaluated without exponentiating large arguments.
inline Tensor log_sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a[i];
    out[i] = std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
  }
  auto na = OpBuilder::node(a);
  return OpBuilder::make("log_sigmoid", a.shape(), std::move(out), OpBuilder::common_tape({&a}),
                         [na](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*ga)[i] += g[i] * detail::sigmoid(-na->values[i]);
                         });
}

// Forwards values unchanged; contributes no gradient to its input.
inline Tensor stop_gradient(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  return OpBuilder::make("stop_gradient", a.shape(), std::move(out), OpBuilder::common_tape({&a}),
                         [](const std::vector<double>&) {});
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto na = OpBuilder::node(a);
  return OpBuilder::make("sum", Shape{}, {s}, OpBuilder::common_tape({&a}), [na](const std::vector<double>& g) {
    if (auto* ga = OpBuilder::grad_of(na))
      for (auto& v : *ga) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  detail::require_nonempty(a, "mean");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw shape_error("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto na = OpBuilder::node(a);
  return OpBuilder::make("reshape", std::move(shape), std::move(out), OpBuilder::common_tape({&a}),
                         [na](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                         });
}

// Sum of several same-shaped tensors in the given order.
inline Tensor add_n(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("add_n: no operands");
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Matrix operations (rank-2)

// [m x k] . [k x n]; with transpose_b the second operand is [n x k].
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if ((transpose_b ? b.dim(1) : b.dim(0)) != k) {
    throw shape_error("matmul: inner dimension mismatch " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  const auto av = a.values(), bv = b.values();
  auto bat = [&, transpose_b](std::size_t p, std::size_t j) { return transpose_b ? bv[j * k + p] : bv[p * n + j]; };
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bat(p, j);
    }
  auto na = OpBuilder::node(a), nb = OpBuilder::node(b);
  return OpBuilder::make(
      "matmul", Shape{m, n}, std::move(out), OpBuilder::common_tape({&a, &b}),
      [na, nb, m, k, n, transpose_b](const std::vector<double>& g) {
        const auto& av = na->values;
        const auto& bv = nb->values;
        if (auto* ga = OpBuilder::grad_of(na)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * (transpose_b ? bv[j * k + p] : bv[p * n + j]);
              (*ga)[i * k + p] += s;
            }
        }
        if (auto* gb = OpBuilder::grad_of(nb)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double x = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) {
                if (transpose_b)
                  (*gb)[j * k + p] += x * g[i * n + j];
                else
                  (*gb)[p * n + j] += x * g[i * n + j];
              }
            }
        }
      });
}

// Adds a [cols] bias to every row of a [rows x cols] matrix.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  detail::require_rank(a, 2, "add_bias");
  detail::require_rank(bias, 1, "add_bias");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (bias.dim(0) != cols) throw shape_error("add_bias: bias length mismatch");
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] + bias[c];
  auto na = OpBuilder::node(a), nb = OpBuilder::node(bias);
  return OpBuilder::make("add_bias", a.shape(), std::move(out), OpBuilder::common_tape({&a, &bias}),
                         [na, nb, rows, cols](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                           if (auto* gb = OpBuilder::grad_of(nb))
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
                         });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) throw index_error("slice_rows: range out of bounds");
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.values().begin() + begin * cols, a.values().begin() + end * cols);
  auto na = OpBuilder::node(a);
  return OpBuilder::make("slice_rows", Shape{end - begin, cols}, std::move(out), OpBuilder::common_tape({&a}),
                         [na, begin, cols](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * cols + i] += g[i];
                         });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.dim(1)) throw index_error("slice_cols: range out of bounds");
  const std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = a[r * cols + begin + c];
  auto na = OpBuilder::node(a);
  return OpBuilder::make("slice_cols", Shape{rows, w}, std::move(out), OpBuilder::common_tape({&a}),
                         [na, begin, rows, cols, w](const std::vector<double>& g) {
                           if (auto* ga = OpBuilder::grad_of(na))
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < w; ++c) (*ga)[r * cols + begin + c] += g[r * w + c];
                         });
}

// Row i of a matrix as a rank-1 tensor.
inline Tensor row(const Tensor& a, std::size_t i) {
  detail::require_rank(a, 2, "row");
  if (i >= a.dim(0)) throw index_error("row: index out of bounds");
  return reshape(slice_rows(a, i, i + 1), Shape{a.dim(1)});
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat_rows: no operands");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) throw shape_error("concat_rows: column mismatch");
    rows += p.dim(0);
    Tape* t = OpBuilder::common_tape({&p});
    if (t && tape && t != tape) throw std::invalid_argument("operands recorded on different tapes");
    if (t) tape = t;
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<OpBuilder::NodePtr> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(OpBuilder::node(p));
  }
  return OpBuilder::make("concat_rows", Shape{rows, cols}, std::move(out), tape,
                         [nodes](const std::vector<double>& g) {
                           std::size_t off = 0;
                           for (const auto& n : nodes) {
                             if (auto* gn = OpBuilder::grad_of(n))
                               for (std::size_t i = 0; i < n->values.size(); ++i) (*gn)[i] += g[off + i];
                             off += n->values.size();
                           }
                         });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat_cols: no operands");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw shape_error("concat_cols: row mismatch");
    cols += p.dim(1);
    Tape* t = OpBuilder::common_tape({&p});
    if (t && tape && t != tape) throw std::invalid_argument("operands recorded on different tapes");
    if (t) tape = t;
  }
  std::vector<double> out(rows * cols);
  std::vector<OpBuilder::NodePtr> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * cols + off + c] = p[r * w + c];
    nodes.push_back(OpBuilder::node(p));
    offsets.push_back(off);
    off += w;
  }
  return OpBuilder::make("concat_cols", Shape{rows, cols}, std::move(out), tape,
                         [nodes, offsets, rows, cols](const std::vector<double>& g) {
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                             auto* gn = OpBuilder::grad_of(nodes[k]);
                             if (!gn) continue;
                             const std::size_t w = nodes[k]->shape[1];
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < w; ++c) (*gn)[r * w + c] += g[r * cols + offsets[k] + c];
                           }
                         });
}

// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), cols = table.dim(1);
  std::vector<double> out(ids.size() * cols);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) throw index_error("embedding: token id " + std::to_string(ids[t]) + " out of range");
    std::copy_n(table.values().begin() + ids[t] * cols, cols, out.begin() + t * cols);
  }
  auto nt = OpBuilder::node(table);
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return OpBuilder::make("embedding", Shape{ids.size(), cols}, std::move(out), OpBuilder::common_tape({&table}),
                         [nt, idv, cols](const std::vector<double>& g) {
                           if (auto* gt = OpBuilder::grad_of(nt))
                             for (std::size_t t = 0; t < idv.size(); ++t)
                               for (std::size_t c = 0; c < cols; ++c) (*gt)[idv[t] * cols + c] += g[t * cols + c];
                         });
}

// Per-row layer normalization with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) throw shape_error("layer_norm: parameter shape");
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[r * cols + c] - mu) * (x[r * cols + c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (x[r * cols + c] - mu) * inv_std[r];
      out[r * cols + c] = gain[c] * xhat[r * cols + c] + bias[c];
    }
  }
  auto nx = OpBuilder::node(x), ng = OpBuilder::node(gain), nb = OpBuilder::node(bias);
  return OpBuilder::make(
      "layer_norm", x.shape(), std::move(out), OpBuilder::common_tape({&x, &gain, &bias}),
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](const std::vector<double>& g) {
        auto* gx = OpBuilder::grad_of(nx);
        auto* gg = OpBuilder::grad_of(ng);
        auto* gb = OpBuilder::grad_of(nb);
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * ng->values[c];
            mean_d += d;
            mean_dx += d * xhat[r * cols + c];
            if (gg) (*gg)[c] += g[r * cols + c] * xhat[r * cols + c];
            if (gb) (*gb)[c] += g[r * cols + c];
          }
          if (!gx) continue;
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * ng->values[c];
            (*gx)[r * cols + c] += inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      });
}

// Row softmax of a square score matrix with entries above the diagonal masked out.
inline Tensor causal_softmax(const Tensor& scores) {
  detail::require_rank(scores, 2, "causal_softmax");
  const std::size_t n = scores.dim(0);
  if (scores.dim(1) != n) throw shape_error("causal_softmax: scores must be square");
  std::vector<double> out(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const double> row_in = scores.values().subspan(r * n, r + 1);
    const double lse = detail::log_sum_exp(row_in);
    for (std::size_t c = 0; c <= r; ++c) out[r * n + c] = std::exp(row_in[c] - lse);
  }
  auto ns = OpBuilder::node(scores);
  std::vector<double> probs = out;
  return OpBuilder::make("causal_softmax", scores.shape(), std::move(out), OpBuilder::common_tape({&scores}),
                         [ns, probs = std::move(probs), n](const std::vector<double>& g) {
                           auto* gs = OpBuilder::grad_of(ns);
                           if (!gs) return;
                           for (std::size_t r = 0; r < n; ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c <= r; ++c) dot += probs[r * n + c] * g[r * n + c];
                             for (std::size_t c = 0; c <= r; ++c)
                               (*gs)[r * n + c] += probs[r * n + c] * (g[r * n + c] - dot);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Probability operations

// Row-wise log-softmax of [rows x vocab] logits (max-shifted).
inline Tensor log_softmax(const Tensor& logits) {
  detail::require_rank(logits, 2, "log_softmax");
  detail::require_nonempty(logits, "log_softmax");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double lse = detail::log_sum_exp(logits.values().subspan(r * cols, cols));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = logits[r * cols + c] - lse;
  }
  auto nl = OpBuilder::node(logits);
  std::vector<double> lp = out;
  return OpBuilder::make("log_softmax", logits.shape(), std::move(out), OpBuilder::common_tape({&logits}),
                         [nl, lp = std::move(lp), rows, cols](const std::vector<double>& g) {
                           auto* gl = OpBuilder::grad_of(nl);
                           if (!gl) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             double gs = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c)
                               (*gl)[r * cols + c] += g[r * cols + c] - std::exp(lp[r * cols + c]) * gs;
                           }
                         });
}

// out[t] = logprobs[t, tokens[t]].
inline Tensor gather_log_prob(const Tensor& logprobs, std::span<const std::uint32_t> tokens) {
  detail::require_rank(logprobs, 2, "gather_log_prob");
  const std::size_t rows = logprobs.dim(0), cols = logprobs.dim(1);
  if (tokens.size() != rows) {
    throw shape_error("gather_log_prob: " + std::to_string(tokens.size()) + " tokens for " + std::to_string(rows) +
                      " rows");
  }
  std::vector<double> out(rows);
  std::vector<std::size_t> idx(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    if (tokens[t] >= cols) throw index_error("gather_log_prob: token id " + std::to_string(tokens[t]) + " >= vocab");
    idx[t] = t * cols + tokens[t];
    out[t] = logprobs[idx[t]];
  }
  auto nl = OpBuilder::node(logprobs);
  return OpBuilder::make("gather_log_prob", Shape{rows}, std::move(out), OpBuilder::common_tape({&logprobs}),
                         [nl, idx = std::move(idx)](const std::vector<double>& g) {
                           if (auto* gl = OpBuilder::grad_of(nl))
                             for (std::size_t t = 0; t < idx.size(); ++t) (*gl)[idx[t]] += g[t];
                         });
}

// out[t] = KL(softmax(p[t]) || softmax(q[t])) for [T x vocab] logits.
inline Tensor kl_divergence_rows(const Tensor& p_logits, const Tensor& q_logits) {
  detail::require_rank(p_logits, 2, "kl_divergence_rows");
  detail::require_same_shape(p_logits, q_logits, "kl_divergence_rows");
  const std::size_t rows = p_logits.dim(0), cols = p_logits.dim(1);
  std::vector<double> lp(p_logits.size()), lq(q_logits.size()), out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double lse_p = detail::log_sum_exp(p_logits.values().subspan(r * cols, cols));
    const double lse_q = detail::log_sum_exp(q_logits.values().subspan(r * cols, cols));
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      lp[i] = p_logits[i] - lse_p;
      lq[i] = q_logits[i] - lse_q;
      out[r] += std::exp(lp[i]) * (lp[i] - lq[i]);
    }
  }
  auto np = OpBuilder::node(p_logits), nq = OpBuilder::node(q_logits);
  std::vector<double> kl = out;
  return OpBuilder::make(
      "kl_divergence_rows", Shape{rows}, std::move(out), OpBuilder::common_tape({&p_logits, &q_logits}),
      [np, nq, lp = std::move(lp), lq = std::move(lq), kl = std::move(kl), rows, cols](const std::vector<double>& g) {
        auto* gp = OpBuilder::grad_of(np);
        auto* gq = OpBuilder::grad_of(nq);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const double p = std::exp(lp[i]);
            if (gp) (*gp)[i] += g[r] * p * (lp[i] - lq[i] - kl[r]);
            if (gq) (*gq)[i] += g[r] * (std::exp(lq[i]) - p);
          }
      });
}

}  // namespace chip
