// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "atd/autodiff.hpp"
#include "atd/encoders.hpp"

namespace atd {

/// Learnable state of the fusion stage plus its fixed hyper-parameters.
///
/// The blend weight is stored unconstrained; the effective weight is
/// sigmoid(alpha_raw), which stays inside (0, 1) under any gradient step.
struct AtdParams {
  std::size_t d = 16;
  std::size_t d_h = 16;
  std::size_t rounds = 2;
  double epsilon = 1e-5;

  Tensor value_proj;   // d×d
  Tensor transform_w;  // d×d
  Tensor transform_b;  // d
  Tensor alpha_raw;    // 1

  static AtdParams init(std::size_t d, std::size_t d_h, std::size_t rounds, double epsilon, Rng& rng) {
    AtdParams p;
    p.d = d;
    p.d_h = d_h;
    p.rounds = rounds;
    p.epsilon = epsilon;
    p.value_proj = fan_in_uniform({d, d}, d, rng);
    p.transform_w = fan_in_uniform({d, d}, d, rng);
    p.transform_b = Tensor::zeros({d});
    p.alpha_raw = Tensor::zeros({1});
    p.validate();
    return p;
  }

  void validate() const {
    if (d < 1 || d_h < 1) throw ContractError("AtdParams: d and d_h must be >= 1");
    if (rounds < 1) throw ContractError("AtdParams: rounds must be >= 1, got " + std::to_string(rounds));
    if (!(epsilon > 0.0)) throw ContractError("AtdParams: epsilon must be positive");
  }

  double alpha() const { return sigmoid_scalar(alpha_raw[0]); }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".value_proj", &value_proj});
    out.push_back({prefix + ".transform_w", &transform_w});
    out.push_back({prefix + ".transform_b", &transform_b});
    out.push_back({prefix + ".alpha_raw", &alpha_raw});
  }
};

/// Row-standardized modal features.
struct NormalizedFeature {
  Var rows;

  std::size_t count() const { return rows.value().dim(0); }
  std::size_t width() const { return rows.value().dim(1); }
};

/// (ID - μ) / sqrt(σ² + ε) with μ, σ² taken over each row's d entries.
inline NormalizedFeature normalize(const ModalFeature& feature, double epsilon) {
  const auto& v = feature.rows.value();
  if (v.rank() != 2) throw ShapeError("normalize: expected rows×d, got " + shape_str(v.shape()));
  if (v.dim(1) < 2) throw ContractError("normalize: width must be >= 2, got " + std::to_string(v.dim(1)));
  return {normalize_rows(feature.rows, epsilon)};
}

/// Scaled similarity S = ÎD₁·ÎD₂ᵀ / sqrt(d), m×n.
inline Var similarity(const NormalizedFeature& a, const NormalizedFeature& b) {
  if (a.width() != b.width()) {
    throw ShapeError("guidance_matrix: widths differ " + shape_str(a.rows.shape()) + " vs " +
                     shape_str(b.rows.shape()));
  }
  return scale(matmul(a.rows, transpose(b.rows)), 1.0 / std::sqrt(static_cast<double>(a.width())));
}

/// G = S - rowmax(S): every row peaks at exactly 0.
inline Var guidance_matrix(const NormalizedFeature& a, const NormalizedFeature& b) {
  return sub_row_max(similarity(a, b));
}

/// W = softmax(G / sqrt(d_h)) per row.
inline Var atd_weights(const Var& guidance, std::size_t d_h) {
  if (d_h < 1) throw ContractError("atd_weights: d_h must be >= 1");
  return softmax_rows(scale(guidance, 1.0 / std::sqrt(static_cast<double>(d_h))));
}

/// O = W · (ÎD₂ · V_proj).
inline Var integrate(const Var& weights, const NormalizedFeature& guided, const Var& value_proj) {
  const auto& w = weights.value();
  if (w.rank() != 2 || w.dim(1) != guided.count()) {
    throw ShapeError("integrate: weights " + shape_str(w.shape()) + " do not chain with features " +
                     shape_str(guided.rows.shape()));
  }
  if (value_proj.value().rank() != 2 || value_proj.value().dim(0) != guided.width()) {
    throw ShapeError("integrate: value projection " + shape_str(value_proj.shape()) + " does not chain with features " +
                     shape_str(guided.rows.shape()));
  }
  return matmul(weights, matmul(guided.rows, value_proj));
}

inline Var integrate(Tape& tape, const Var& weights, const NormalizedFeature& guided, AtdParams& p) {
  return integrate(weights, guided, tape.variable(p.value_proj));
}

/// tanh(O·W_F + b_F) + α·ÎD₁ + (1 - α)·ÎD₂ with α = sigmoid(alpha_raw).
inline Var telescopic_displace(Tape& tape, const Var& integrated, const NormalizedFeature& a,
                               const NormalizedFeature& b, AtdParams& p) {
  if (integrated.shape() != a.rows.shape() || a.rows.shape() != b.rows.shape()) {
    throw ShapeError("telescopic_displace: shapes differ " + shape_str(integrated.shape()) + ", " +
                     shape_str(a.rows.shape()) + ", " + shape_str(b.rows.shape()));
  }
  const Var transformed = tanh(linear(integrated, tape.variable(p.transform_w), tape.variable(p.transform_b)));
  const Var alpha = sigmoid(tape.variable(p.alpha_raw));
  const Var complement = add_constant(scale(alpha, -1.0), 1.0);
  return add(transformed, add(scalar_mul(alpha, a.rows), scalar_mul(complement, b.rows)));
}

/// One full pass: normalize both, guidance, weights, integration, displacement.
inline Var atd_fuse(Tape& tape, const ModalFeature& x1, const ModalFeature& x2, AtdParams& p) {
  p.validate();
  if (x1.width() != p.d || x2.width() != p.d) {
    throw ShapeError("atd_fuse: feature widths " + std::to_string(x1.width()) + "/" + std::to_string(x2.width()) +
                     " vs configured d=" + std::to_string(p.d));
  }
  if (x1.count() != x2.count()) {
    throw ShapeError("atd_fuse: row counts differ " + shape_str(x1.rows.shape()) + " vs " +
                     shape_str(x2.rows.shape()));
  }
  const NormalizedFeature n1 = normalize(x1, p.epsilon);
  const NormalizedFeature n2 = normalize(x2, p.epsilon);
  const Var w = atd_weights(guidance_matrix(n1, n2), p.d_h);
  const Var o = integrate(tape, w, n2, p);
  return telescopic_displace(tape, o, n1, n2, p);
}

/// Multi-round fusion with alternating guidance roles. Round 1 fuses (x1, x2);
/// even rounds fuse (z, x2), odd rounds after the first fuse (x1, z).
inline Var alternate_fuse(Tape& tape, const ModalFeature& x1, const ModalFeature& x2, AtdParams& p) {
  if (p.rounds < 1) throw ContractError("alternate_fuse: rounds must be >= 1");
  Var z = atd_fuse(tape, x1, x2, p);
  for (std::size_t r = 2; r <= p.rounds; ++r) {
    const ModalFeature prev{z, Modality::Fused};
    z = (r % 2 == 0) ? atd_fuse(tape, prev, x2, p) : atd_fuse(tape, x1, prev, p);
  }
  return z;
}

}  // namespace atd
