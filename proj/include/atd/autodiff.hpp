// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "atd/tensor.hpp"

namespace atd {

enum class OpKind {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddConstant,
  Tanh,
  Sigmoid,
  SoftmaxRows,
  SubRowMax,
  NormalizeRows,
  ScalarMul,
  Sum,
  Mean,
  Reshape,
  ConcatRows,
  TileRows,
  Conv2d,
  SpatialMean,
  CrossEntropy,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddConstant: return "add_constant";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::SubRowMax: return "sub_row_max";
    case OpKind::NormalizeRows: return "normalize_rows";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Reshape: return "reshape";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::TileRows: return "tile_rows";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::SpatialMean: return "spatial_mean";
    case OpKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

namespace debug {

/// Fault injection for negative-control gradient checks: when set, the named
/// operation's backward rule sees its upstream gradient scaled by 1.5.
inline std::string& backward_fault() {
  thread_local std::string fault;
  return fault;
}

}  // namespace debug

class Tape;

/// Handle to one value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::span<const double> grad() const;
};

/// Define-by-run computation record. Entries are appended in execution order,
/// so the record is topologically sorted by construction; backward() walks it
/// once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Entry {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Tensor* bound = nullptr;
  };

  /// With record_grad=false the tape evaluates only; no backward closures are
  /// kept and backward() is rejected.
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool records_grad() const { return record_grad_; }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t id) const { return entries_.at(id); }

  /// Value that never receives a gradient.
  Var constant(Tensor value) {
    Entry e;
    e.value = std::move(value);
    e.value.set_requires_grad(false);
    return push(std::move(e));
  }

  /// Binds a tensor as a leaf. When the tensor requires grad, backward()
  /// accumulates into its gradient slot. Binding the same unchanged tensor
  /// twice returns the same leaf; if its contents changed since (or the address
  /// now belongs to a different tensor) a fresh leaf is bound.
  Var variable(Tensor& tensor) {
    if (auto it = bound_.find(&tensor); it != bound_.end()) {
      const Tensor& cached = entries_[it->second].value;
      if (cached.shape() == tensor.shape() &&
          std::memcmp(cached.data().data(), tensor.data().data(), tensor.numel() * sizeof(double)) == 0) {
        return Var{this, it->second};
      }
      bound_.erase(it);
    }
    Entry e;
    e.value = Tensor(tensor.shape(), tensor.values());
    e.needs_grad = record_grad_ && tensor.requires_grad();
    e.bound = e.needs_grad ? &tensor : nullptr;
    Var v = push(std::move(e));
    bound_.emplace(&tensor, v.id);
    return v;
  }

  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
    Entry e;
    e.kind = kind;
    e.value = std::move(value);
    if (record_grad_) {
      for (auto id : inputs) e.needs_grad = e.needs_grad || entries_[id].needs_grad;
    }
    if (e.needs_grad) e.backward = std::move(backward);
    e.inputs = std::move(inputs);
    return push(std::move(e));
  }

  const Tensor& value(std::size_t id) const { return entries_.at(id).value; }
  bool needs_grad(std::size_t id) const { return entries_.at(id).needs_grad; }

  std::span<const double> grad(std::size_t id) const {
    const auto& e = entries_.at(id);
    if (e.grad.empty()) throw ContractError("Tape::grad: no gradient reached this value");
    return e.grad;
  }

  /// Mutable gradient buffer of an input, allocated on first touch.
  std::span<double> grad_sink(std::size_t id) {
    auto& e = entries_[id];
    if (e.grad.empty()) e.grad.assign(e.value.numel(), 0.0);
    return e.grad;
  }

  /// Seeds d(loss)/d(loss)=1 and propagates in reverse record order.
  /// Gradients of bound tensors accumulate into their gradient slots.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (!record_grad_) throw ContractError("backward: tape was created without gradient recording");
    if (value(loss.id).numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    }
    if (!entries_[loss.id].needs_grad) return;
    grad_sink(loss.id)[0] += 1.0;
    const std::string& fault = debug::backward_fault();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!e.needs_grad || e.grad.empty()) continue;
      if (e.kind == OpKind::Leaf) {
        if (e.bound) e.bound->accumulate_grad(e.grad);
        continue;
      }
      if (!fault.empty() && fault == op_name(e.kind)) {
        for (auto& g : e.grad) g *= 1.5;
      }
      e.backward(*this, i);
    }
  }

 private:
  Var push(Entry e) {
    entries_.push_back(std::move(e));
    return Var{this, entries_.size() - 1};
  }

  bool record_grad_;
  std::deque<Entry> entries_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline std::span<const double> Var::grad() const { return tape->grad(id); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(a.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// C(m×n) += A(m×k) · B(k×n), with optional transposes of the stored operands.
inline void gemm_acc(std::span<const double> a, bool ta, std::span<const double> b, bool tb,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        c[i * n + j] += av * bv;
      }
    }
  }
}

template <class Fwd, class Deriv>
Var unary_map(OpKind kind, const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return a.tape->record(kind, {a.id}, Tensor(x.shape(), std::move(out)),
                        [a = a.id, deriv](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          const auto& xv = t.value(a);
                          const auto& yv = t.value(self);
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(xv[i], yv[i]);
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(A.data(), false, B.data(), false, out, m, k, n);
  return a.tape->record(OpKind::MatMul, {a.id, b.id}, Tensor({m, n}, std::move(out)),
                        [a = a.id, b = b.id, m, k, n](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          if (t.needs_grad(a)) {
                            // dA = G · Bᵀ
                            detail::gemm_acc(g, false, t.value(b).data(), true, t.grad_sink(a), m, n, k);
                          }
                          if (t.needs_grad(b)) {
                            // dB = Aᵀ · G
                            detail::gemm_acc(t.value(a).data(), true, g, false, t.grad_sink(b), k, m, n);
                          }
                        });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const Tensor& A = a.value();
  const std::size_t m = A.dim(0), n = A.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return a.tape->record(OpKind::Transpose, {a.id}, Tensor({n, m}, std::move(out)),
                        [a = a.id, m, n](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                        });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  std::vector<double> out(A.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return a.tape->record(OpKind::Add, {a.id, b.id}, Tensor(A.shape(), std::move(out)),
                        [a = a.id, b = b.id](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          for (auto id : {a, b}) {
                            if (!t.needs_grad(id)) continue;
                            auto s = t.grad_sink(id);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                          }
                        });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  std::vector<double> out(A.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return a.tape->record(OpKind::Sub, {a.id, b.id}, Tensor(A.shape(), std::move(out)),
                        [a = a.id, b = b.id](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          if (t.needs_grad(a)) {
                            auto s = t.grad_sink(a);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                          }
                          if (t.needs_grad(b)) {
                            auto s = t.grad_sink(b);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] -= g[i];
                          }
                        });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  std::vector<double> out(A.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return a.tape->record(OpKind::Mul, {a.id, b.id}, Tensor(A.shape(), std::move(out)),
                        [a = a.id, b = b.id](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          if (t.needs_grad(a)) {
                            const auto& bv = t.value(b);
                            auto s = t.grad_sink(a);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * bv[i];
                          }
                          if (t.needs_grad(b)) {
                            const auto& av = t.value(a);
                            auto s = t.grad_sink(b);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * av[i];
                          }
                        });
}

inline Var scale(const Var& a, double c) {
  return detail::unary_map(
      OpKind::Scale, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_constant(const Var& a, double c) {
  return detail::unary_map(
      OpKind::AddConstant, a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var tanh(const Var& a) {
  return detail::unary_map(
      OpKind::Tanh, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return detail::unary_map(
      OpKind::Sigmoid, a, [](double x) { return sigmoid_scalar(x); },
      [](double, double y) { return y * (1.0 - y); });
}

enum class Elementwise { Add, Sub, Mul, Scale, Tanh, Sigmoid };

/// Dispatching form of the elementwise family. `c` is used by Scale only;
/// binary kinds require `b`.
inline Var elementwise(Elementwise kind, const Var& a, const Var* b = nullptr, double c = 1.0) {
  auto need_b = [&]() -> const Var& {
    if (!b) throw ContractError("elementwise: binary kind requires a second operand");
    return *b;
  };
  switch (kind) {
    case Elementwise::Add: return add(a, need_b());
    case Elementwise::Sub: return sub(a, need_b());
    case Elementwise::Mul: return mul(a, need_b());
    case Elementwise::Scale: return scale(a, c);
    case Elementwise::Tanh: return tanh(a);
    case Elementwise::Sigmoid: return sigmoid(a);
  }
  throw ContractError("elementwise: unknown kind");
}

/// s·A where s holds exactly one value.
inline Var scalar_mul(const Var& s, const Var& a) {
  detail::require_same_tape(s, a, "scalar_mul");
  if (s.value().numel() != 1) throw ShapeError("scalar_mul: scale must have one element, got " + shape_str(s.shape()));
  const double sv = s.value()[0];
  const Tensor& A = a.value();
  std::vector<double> out(A.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * A[i];
  return a.tape->record(OpKind::ScalarMul, {s.id, a.id}, Tensor(A.shape(), std::move(out)),
                        [s = s.id, a = a.id](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          const auto& av = t.value(a);
                          if (t.needs_grad(s)) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                            t.grad_sink(s)[0] += acc;
                          }
                          if (t.needs_grad(a)) {
                            const double sv = t.value(s)[0];
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += sv * g[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Row-wise operations (rank 2)
// ---------------------------------------------------------------------------

/// Numerically stable softmax along each row.
inline Var softmax_rows(const Var& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const Tensor& A = a.value();
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (!A.all_finite()) throw NumericDomainError("softmax_rows: non-finite input entry");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A.data()[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return a.tape->record(OpKind::SoftmaxRows, {a.id}, Tensor({m, n}, std::move(out)),
                        [a = a.id, m, n](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          const auto& y = t.value(self);
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          for (std::size_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                          }
                        });
}

/// A minus its per-row maximum; every output row has max exactly 0.
/// The derivative treats the first maximal entry of each row as the argmax.
inline Var sub_row_max(const Var& a) {
  detail::require_rank(a, 2, "sub_row_max");
  const Tensor& A = a.value();
  const std::size_t m = A.dim(0), n = A.dim(1);
  std::vector<double> out(m * n);
  std::vector<std::size_t> arg(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A.data()[i * n];
    arg[i] = static_cast<std::size_t>(std::max_element(row, row + n) - row);
    const double mx = row[arg[i]];
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - mx;
  }
  return a.tape->record(OpKind::SubRowMax, {a.id}, Tensor({m, n}, std::move(out)),
                        [a = a.id, m, n, arg = std::move(arg)](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          for (std::size_t i = 0; i < m; ++i) {
                            double total = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += g[i * n + j];
                              total += g[i * n + j];
                            }
                            ga[i * n + arg[i]] -= total;
                          }
                        });
}

/// Per-row standardization (x - mean) / sqrt(var + eps), population variance.
inline Var normalize_rows(const Var& a, double eps) {
  detail::require_rank(a, 2, "normalize_rows");
  const Tensor& A = a.value();
  const std::size_t m = A.dim(0), n = A.dim(1);
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A.data()[i * n];
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double denom = std::sqrt(var + eps);
    inv_std[i] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mean) * inv_std[i];
  }
  return a.tape->record(OpKind::NormalizeRows, {a.id}, Tensor({m, n}, std::move(out)),
                        [a = a.id, m, n, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          const auto& y = t.value(self);
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double gm = 0.0, gy = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              gm += g[i * n + j];
                              gy += g[i * n + j] * y[i * n + j];
                            }
                            gm *= inv_n;
                            gy *= inv_n;
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += inv_std[i] * (g[i * n + j] - gm - y[i * n + j] * gy);
                            }
                          }
                        });
}

/// Stacks a (r1×c) on top of b (r2×c).
inline Var concat_rows(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "concat_rows");
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.value().dim(1) != b.value().dim(1)) {
    throw ShapeError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t na = a.value().numel();
  std::vector<double> out(a.value().values());
  out.insert(out.end(), b.value().values().begin(), b.value().values().end());
  Shape shape{a.value().dim(0) + b.value().dim(0), a.value().dim(1)};
  return a.tape->record(OpKind::ConcatRows, {a.id, b.id}, Tensor(shape, std::move(out)),
                        [a = a.id, b = b.id, na](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          if (t.needs_grad(a)) {
                            auto s = t.grad_sink(a);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                          }
                          if (t.needs_grad(b)) {
                            auto s = t.grad_sink(b);
                            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[na + i];
                          }
                        });
}

/// Repeats a 1×n row m times. Explicit replacement for broadcasting.
inline Var tile_rows(const Var& a, std::size_t m) {
  detail::require_rank(a, 2, "tile_rows");
  if (a.value().dim(0) != 1) throw ShapeError("tile_rows: expected one row, got " + shape_str(a.shape()));
  if (m == 0) throw ShapeError("tile_rows: zero repeats");
  const std::size_t n = a.value().dim(1);
  std::vector<double> out;
  out.reserve(m * n);
  for (std::size_t i = 0; i < m; ++i) out.insert(out.end(), a.value().values().begin(), a.value().values().end());
  return a.tape->record(OpKind::TileRows, {a.id}, Tensor({m, n}, std::move(out)),
                        [a = a.id, m, n](Tape& t, std::size_t self) {
                          if (!t.needs_grad(a)) return;
                          auto g = t.grad(self);
                          auto ga = t.grad_sink(a);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) ga[j] += g[i * n + j];
                        });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(OpKind::Reshape, {a.id}, std::move(out), [a = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    auto g = t.grad(self);
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return a.tape->record(OpKind::Sum, {a.id}, Tensor({1}, {acc}), [a = a.id](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    const double g = t.grad(self)[0];
    for (auto& v : t.grad_sink(a)) v += g;
  });
}

inline Var mean(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.value().numel());
  return a.tape->record(OpKind::Mean, {a.id}, Tensor({1}, {acc * inv}), [a = a.id, inv](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    const double g = t.grad(self)[0] * inv;
    for (auto& v : t.grad_sink(a)) v += g;
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (C×H×W layout)
// ---------------------------------------------------------------------------

/// Output extent of a strided, zero-padded window: floor((in - k + 2p)/s) + 1.
inline std::pair<std::size_t, std::size_t> conv_out_dims(std::size_t h1, std::size_t w1, std::size_t kernel,
                                                         std::size_t stride, std::size_t pad) {
  if (h1 == 0 || w1 == 0 || kernel == 0 || stride == 0) {
    throw InvalidGeometryError("conv_out_dims: H1, W1, F and S must be >= 1");
  }
  if (kernel > h1 + 2 * pad || kernel > w1 + 2 * pad) {
    throw InvalidGeometryError("conv_out_dims: kernel " + std::to_string(kernel) + " exceeds padded input " +
                               std::to_string(h1 + 2 * pad) + "x" + std::to_string(w1 + 2 * pad));
  }
  return {(h1 + 2 * pad - kernel) / stride + 1, (w1 + 2 * pad - kernel) / stride + 1};
}

/// Y[o,i,j] = sum_{c,m,n} K[o,c,m,n] · X[c, S·i+m-P, S·j+n-P] + b[o]; padded reads are zero.
inline Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, kernel, "conv2d");
  detail::require_same_tape(x, bias, "conv2d");
  const Tensor& X = x.value();
  const Tensor& K = kernel.value();
  const Tensor& B = bias.value();
  if (X.rank() != 3) throw ShapeError("conv2d: input must be C×H×W, got " + shape_str(X.shape()));
  if (K.rank() != 4 || K.dim(2) != K.dim(3)) {
    throw ShapeError("conv2d: kernel must be Cout×Cin×F×F, got " + shape_str(K.shape()));
  }
  const std::size_t cin = X.dim(0), h1 = X.dim(1), w1 = X.dim(2);
  const std::size_t cout = K.dim(0), f = K.dim(2);
  if (K.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(K.dim(1)));
  }
  if (B.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(B.shape()) + " does not match " + std::to_string(cout) +
                     " output channels");
  }
  const auto [h2, w2] = conv_out_dims(h1, w1, f, stride, pad);
  const auto ph = static_cast<long>(pad);
  std::vector<double> out(cout * h2 * w2);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < h2; ++i) {
      for (std::size_t j = 0; j < w2; ++j) {
        double acc = B[o];
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t mi = 0; mi < f; ++mi) {
            const long r = static_cast<long>(stride * i + mi) - ph;
            if (r < 0 || r >= static_cast<long>(h1)) continue;
            for (std::size_t ni = 0; ni < f; ++ni) {
              const long q = static_cast<long>(stride * j + ni) - ph;
              if (q < 0 || q >= static_cast<long>(w1)) continue;
              acc += K[((o * cin + c) * f + mi) * f + ni] * X[(c * h1 + r) * w1 + q];
            }
          }
        }
        out[(o * h2 + i) * w2 + j] = acc;
      }
    }
  }
  return x.tape->record(
      OpKind::Conv2d, {x.id, kernel.id, bias.id}, Tensor({cout, h2, w2}, std::move(out)),
      [x = x.id, k = kernel.id, b = bias.id, cin, h1, w1, cout, f, h2, w2, stride, ph](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto& X = t.value(x);
        const auto& K = t.value(k);
        const bool gx = t.needs_grad(x), gk = t.needs_grad(k);
        std::span<double> dx = gx ? t.grad_sink(x) : std::span<double>{};
        std::span<double> dk = gk ? t.grad_sink(k) : std::span<double>{};
        if (t.needs_grad(b)) {
          auto db = t.grad_sink(b);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t p = 0; p < h2 * w2; ++p) db[o] += g[o * h2 * w2 + p];
        }
        if (!gx && !gk) return;
        for (std::size_t o = 0; o < cout; ++o) {
          for (std::size_t i = 0; i < h2; ++i) {
            for (std::size_t j = 0; j < w2; ++j) {
              const double go = g[(o * h2 + i) * w2 + j];
              if (go == 0.0) continue;
              for (std::size_t c = 0; c < cin; ++c) {
                for (std::size_t mi = 0; mi < f; ++mi) {
                  const long r = static_cast<long>(stride * i + mi) - ph;
                  if (r < 0 || r >= static_cast<long>(h1)) continue;
                  for (std::size_t ni = 0; ni < f; ++ni) {
                    const long q = static_cast<long>(stride * j + ni) - ph;
                    if (q < 0 || q >= static_cast<long>(w1)) continue;
                    const std::size_t xi = (c * h1 + r) * w1 + q;
                    const std::size_t ki = ((o * cin + c) * f + mi) * f + ni;
                    if (gx) dx[xi] += go * K[ki];
                    if (gk) dk[ki] += go * X[xi];
                  }
                }
              }
            }
          }
        }
      });
}

/// Mean over the spatial extent of each channel: C×H×W -> 1×C.
inline Var spatial_mean(const Var& x) {
  detail::require_rank(x, 3, "spatial_mean");
  const Tensor& X = x.value();
  const std::size_t c = X.dim(0), hw = X.dim(1) * X.dim(2);
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[ch] += X[ch * hw + p];
    out[ch] /= static_cast<double>(hw);
  }
  return x.tape->record(OpKind::SpatialMean, {x.id}, Tensor({1, c}, std::move(out)),
                        [x = x.id, c, hw](Tape& t, std::size_t self) {
                          if (!t.needs_grad(x)) return;
                          auto g = t.grad(self);
                          auto gx = t.grad_sink(x);
                          const double inv = 1.0 / static_cast<double>(hw);
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[ch] * inv;
                        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// -log softmax(logits)[label] for a single vector of logits.
inline Var cross_entropy(const Var& logits, std::size_t label) {
  const Tensor& L = logits.value();
  const std::size_t n = L.numel();
  if (n < 2) throw ContractError("cross_entropy: need at least 2 classes, got " + std::to_string(n));
  if (label >= n) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " + std::to_string(n) +
                        " classes");
  }
  if (!L.all_finite()) throw NumericDomainError("cross_entropy: non-finite logit");
  const double mx = *std::max_element(L.data().begin(), L.data().end());
  double z = 0.0;
  for (double v : L.data()) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  const double loss = log_z - L[label];
  return logits.tape->record(OpKind::CrossEntropy, {logits.id}, Tensor({1}, {loss}),
                             [l = logits.id, label, log_z, n](Tape& t, std::size_t self) {
                               if (!t.needs_grad(l)) return;
                               const double g = t.grad(self)[0];
                               const auto& L = t.value(l);
                               auto gl = t.grad_sink(l);
                               for (std::size_t i = 0; i < n; ++i) {
                                 gl[i] += g * (std::exp(L[i] - log_z) - (i == label ? 1.0 : 0.0));
                               }
                             });
}

// ---------------------------------------------------------------------------
// Backward and gradient checking
// ---------------------------------------------------------------------------

inline void backward(const Var& loss) { loss.tape->backward(loss); }

/// Scalar objective built on a tape from tensors bound with Tape::variable.
using TapeObjective = std::function<Var(Tape&)>;
/// Scalar objective of a single input.
using Objective = std::function<Var(Tape&, const Var&)>;

/// Max over every entry of every input of
///   |analytic - central_difference| / max(1, |analytic|)
/// where central_difference = (f(x + h·e) - f(x - h·e)) / 2h. Inputs are
/// perturbed in place and restored; their gradient slots are overwritten.
inline double grad_check(const TapeObjective& f, std::span<Tensor* const> inputs, double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("grad_check: step size must be positive");
  std::vector<bool> had_flag;
  for (Tensor* x : inputs) {
    had_flag.push_back(x->requires_grad());
    x->zero_grad();
    x->set_requires_grad(true);
  }
  {
    Tape tape;
    const Var out = f(tape);
    if (out.value().numel() != 1) throw ContractError("grad_check: objective must be scalar");
    if (!std::isfinite(out.value()[0])) throw NumericDomainError("grad_check: objective non-finite at x0");
    tape.backward(out);
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor* x : inputs) {
    analytic.emplace_back(x->numel(), 0.0);
    if (x->has_grad()) std::copy(x->grad().begin(), x->grad().end(), analytic.back().begin());
  }
  auto probe = [&f]() {
    Tape tape(false);
    return f(tape).value()[0];
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = *inputs[k];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = probe();
      x[i] = orig - h;
      const double fm = probe();
      x[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericDomainError("grad_check: objective non-finite at probe point");
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k]->set_requires_grad(had_flag[k]);
  return worst;
}

inline double grad_check(const Objective& f, const Tensor& x0, double h = 1e-5) {
  Tensor x(x0.shape(), x0.values());
  Tensor* inputs[] = {&x};
  return grad_check([&](Tape& t) { return f(t, t.variable(x)); }, inputs, h);
}

}  // namespace atd
