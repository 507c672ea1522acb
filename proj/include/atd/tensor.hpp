// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace atd {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class InvalidGeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Seeded generator shared by everything random in the library.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distributions are implementation-defined, so the
/// conversions below are done by hand: uniform reals take the top 53 bits of
/// one draw, gaussians use the Box-Muller transform on two uniforms, and
/// integer ranges use rejection sampling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian(double mean = 0.0, double stddev = 1.0) {
    // 1 - uniform() lies in (0, 1], so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * radius * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(idx[i - 1], idx[j]);
    }
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major array of doubles with an optional gradient slot.
///
/// The shape is fixed at construction. An empty shape denotes a rank-0
/// scalar holding one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return constant(std::move(shape), 0.0); }

  static Tensor constant(Shape shape, double value) {
    validate_shape(shape);
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    validate_shape(shape);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor gaussian(Shape shape, Rng& rng, double mean, double stddev) {
    validate_shape(shape);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.gaussian(mean, stddev);
    return Tensor(std::move(shape), std::move(data));
  }

  /// Row-major matrix from nested rows; convenient in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = 0;
    for (const auto& row : rows) {
      if (cols == 0) cols = row.size();
      if (row.size() != cols) throw ShapeError("Tensor::matrix: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double& at(std::size_t c, std::size_t r, std::size_t k) {
    return data_[(c * shape_[1] + r) * shape_[2] + k];
  }
  double at(std::size_t c, std::size_t r, std::size_t k) const {
    return data_[(c * shape_[1] + r) * shape_[2] + k];
  }

  /// Copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.reset();
    return *this;
  }

  bool has_grad() const { return grad_.has_value(); }
  std::span<const double> grad() const {
    if (!grad_) throw ContractError("Tensor::grad: no gradient populated");
    return *grad_;
  }
  void zero_grad() { grad_.reset(); }

  void accumulate_grad(std::span<const double> g) {
    if (g.size() != data_.size()) {
      throw ShapeError("Tensor::accumulate_grad: length " + std::to_string(g.size()) +
                       " vs " + std::to_string(data_.size()));
    }
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) (*grad_)[i] += g[i];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("Tensor: invalid shape " + shape_str(shape) + ": zero dimension");
    }
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Signed-dimension entry point; rejects negative or zero extents.
inline Shape make_shape(std::initializer_list<long long> dims) {
  Shape shape;
  for (auto d : dims) {
    if (d <= 0) throw ShapeError("invalid shape: dimension " + std::to_string(d));
    shape.push_back(static_cast<std::size_t>(d));
  }
  return shape;
}

}  // namespace atd
