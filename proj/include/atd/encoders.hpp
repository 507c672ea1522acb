// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "atd/autodiff.hpp"

namespace atd {

enum class Modality { Numerical, Visual, Fused };

/// One modality's encoded features, rows×d.
struct ModalFeature {
  Var rows;
  Modality modality = Modality::Numerical;

  std::size_t count() const { return rows.value().dim(0); }
  std::size_t width() const { return rows.value().dim(1); }
};

/// Named reference to a trainable tensor, in a stable order.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Fully connected layer (row form: y = x·W + b)
// ---------------------------------------------------------------------------

struct LinearParams {
  Tensor weight;  // in×out
  Tensor bias;    // out

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng) {
    return {fan_in_uniform({in, out}, in, rng), Tensor::zeros({out})};
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const std::size_t rows = x.value().dim(0);
  const Var b = reshape(bias, {1, bias.value().numel()});
  return add(matmul(x, weight), rows == 1 ? b : tile_rows(b, rows));
}

inline Var linear(Tape& tape, const Var& x, LinearParams& p) {
  return linear(x, tape.variable(p.weight), tape.variable(p.bias));
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvSpec {
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  static ConvSpec same(std::size_t in, std::size_t out, std::size_t kernel) {
    return {kernel, 1, (kernel - 1) / 2, in, out};
  }
};

struct ConvLayer {
  ConvSpec spec;
  Tensor weight;  // out×in×F×F
  Tensor bias;    // out (one per output channel)

  static ConvLayer init(const ConvSpec& spec, Rng& rng) {
    const std::size_t fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
    return {spec,
            fan_in_uniform({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size}, fan_in, rng),
            Tensor::zeros({spec.out_channels})};
  }

  static ConvLayer zeros(const ConvSpec& spec) {
    return {spec, Tensor::zeros({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size}),
            Tensor::zeros({spec.out_channels})};
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

inline Var conv2d(Tape& tape, const Var& x, ConvLayer& layer) {
  const auto& X = x.value();
  if (X.rank() != 3 || X.dim(0) != layer.spec.in_channels) {
    throw ShapeError("conv2d: input " + shape_str(X.shape()) + " does not have " +
                     std::to_string(layer.spec.in_channels) + " channels");
  }
  return conv2d(x, tape.variable(layer.weight), tape.variable(layer.bias), layer.spec.stride, layer.spec.padding);
}

// ---------------------------------------------------------------------------
// Residual block: x + conv(tanh(conv(x)))
// ---------------------------------------------------------------------------

struct ResidualBlockParams {
  ConvLayer first;
  ConvLayer second;

  static ResidualBlockParams init(std::size_t channels, std::size_t kernel, Rng& rng) {
    const auto spec = ConvSpec::same(channels, channels, kernel);
    auto first = ConvLayer::init(spec, rng);
    auto second = ConvLayer::init(spec, rng);
    return {std::move(first), std::move(second)};
  }

  static ResidualBlockParams zeros(std::size_t channels, std::size_t kernel) {
    const auto spec = ConvSpec::same(channels, channels, kernel);
    return {ConvLayer::zeros(spec), ConvLayer::zeros(spec)};
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    first.collect(prefix + ".conv1", out);
    second.collect(prefix + ".conv2", out);
  }
};

inline Var residual_mapping(Tape& tape, const Var& x, ResidualBlockParams& p) {
  return conv2d(tape, tanh(conv2d(tape, x, p.first)), p.second);
}

inline Var residual_block(Tape& tape, const Var& x, ResidualBlockParams& p) {
  const Var fx = residual_mapping(tape, x, p);
  if (fx.shape() != x.shape()) {
    throw ContractError("residual_block: mapping changes shape " + shape_str(x.shape()) + " -> " +
                        shape_str(fx.shape()));
  }
  return add(x, fx);
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Gate weights act on the column [h_{t-1}; x_t] of length hidden+input.
struct LstmParams {
  Tensor w_forget, w_input, w_candidate, w_output;  // hidden×(hidden+input)
  Tensor b_forget, b_input, b_candidate, b_output;  // hidden

  std::size_t hidden() const { return w_forget.dim(0); }
  std::size_t input() const { return w_forget.dim(1) - w_forget.dim(0); }

  static LstmParams zeros(std::size_t hidden, std::size_t input) {
    const Shape w{hidden, hidden + input};
    return {Tensor::zeros(w), Tensor::zeros(w), Tensor::zeros(w), Tensor::zeros(w),
            Tensor::zeros({hidden}), Tensor::zeros({hidden}), Tensor::zeros({hidden}), Tensor::zeros({hidden})};
  }

  static LstmParams init(std::size_t hidden, std::size_t input, Rng& rng) {
    auto p = zeros(hidden, input);
    const Shape w{hidden, hidden + input};
    for (Tensor* t : {&p.w_forget, &p.w_input, &p.w_candidate, &p.w_output}) {
      *t = fan_in_uniform(w, hidden + input, rng);
    }
    return p;
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w_forget", &w_forget});
    out.push_back({prefix + ".w_input", &w_input});
    out.push_back({prefix + ".w_candidate", &w_candidate});
    out.push_back({prefix + ".w_output", &w_output});
    out.push_back({prefix + ".b_forget", &b_forget});
    out.push_back({prefix + ".b_input", &b_input});
    out.push_back({prefix + ".b_candidate", &b_candidate});
    out.push_back({prefix + ".b_output", &b_output});
  }
};

struct LstmState {
  Var hidden;  // hidden×1
  Var cell;    // hidden×1
};

/// One step of the gated recurrence:
///   f = σ(W_f·[h;x] + b_f), i = σ(W_i·[h;x] + b_i), C̃ = tanh(W_C·[h;x] + b_C),
///   C = f⊙C_prev + i⊙C̃, o = σ(W_o·[h;x] + b_o), h = o⊙tanh(C).
inline LstmState lstm_step(Tape& tape, const Var& x_t, const LstmState& prev, LstmParams& p) {
  const std::size_t hidden = p.hidden();
  const std::size_t input = p.input();
  if (x_t.value().numel() != input) {
    throw ShapeError("lstm_step: input " + shape_str(x_t.shape()) + " does not have " + std::to_string(input) +
                     " entries");
  }
  if (prev.hidden.value().numel() != hidden || prev.cell.value().numel() != hidden) {
    throw ShapeError("lstm_step: state " + shape_str(prev.hidden.shape()) + "/" + shape_str(prev.cell.shape()) +
                     " does not match hidden size " + std::to_string(hidden));
  }
  const Var h_col = reshape(prev.hidden, {hidden, 1});
  const Var c_col = reshape(prev.cell, {hidden, 1});
  const Var joined = concat_rows(h_col, reshape(x_t, {input, 1}));
  auto gate = [&](Tensor& w, Tensor& b) {
    return add(matmul(tape.variable(w), joined), reshape(tape.variable(b), {hidden, 1}));
  };
  const Var forget = sigmoid(gate(p.w_forget, p.b_forget));
  const Var in = sigmoid(gate(p.w_input, p.b_input));
  const Var candidate = tanh(gate(p.w_candidate, p.b_candidate));
  const Var cell = add(mul(forget, c_col), mul(in, candidate));
  const Var out = sigmoid(gate(p.w_output, p.b_output));
  return {mul(out, tanh(cell)), cell};
}

inline LstmState lstm_zero_state(Tape& tape, std::size_t hidden) {
  return {tape.constant(Tensor::zeros({hidden, 1})), tape.constant(Tensor::zeros({hidden, 1}))};
}

// ---------------------------------------------------------------------------
// Series encoder: LSTM over T steps, final hidden state projected to width d.
// ---------------------------------------------------------------------------

struct SeriesEncoderParams {
  LstmParams lstm;
  LinearParams projection;  // hidden×d

  static SeriesEncoderParams init(std::size_t input, std::size_t hidden, std::size_t d, Rng& rng) {
    auto lstm = LstmParams::init(hidden, input, rng);
    auto proj = LinearParams::init(hidden, d, rng);
    return {std::move(lstm), std::move(proj)};
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    lstm.collect(prefix + ".lstm", out);
    projection.collect(prefix + ".proj", out);
  }
};

/// Final hidden state h_T (hidden×1) of the LSTM run from zero state.
inline Var lstm_final_hidden(Tape& tape, const Var& sequence, LstmParams& p) {
  const auto& seq = sequence.value();
  if (seq.rank() != 2) throw ShapeError("encode_series: sequence must be T×input, got " + shape_str(seq.shape()));
  const std::size_t steps = seq.dim(0);
  const std::size_t input = seq.dim(1);
  if (input != p.input()) {
    throw ShapeError("encode_series: sequence width " + std::to_string(input) + " vs LSTM input " +
                     std::to_string(p.input()));
  }
  // Rows are pulled out with a constant selector so gradients reach the sequence.
  LstmState state = lstm_zero_state(tape, p.hidden());
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor pick = Tensor::zeros({1, steps});
    pick[t] = 1.0;
    const Var x_t = matmul(tape.constant(std::move(pick)), sequence);
    state = lstm_step(tape, x_t, state, p);
  }
  return state.hidden;
}

inline ModalFeature encode_series(Tape& tape, const Var& sequence, SeriesEncoderParams& p) {
  if (sequence.value().rank() != 2 || sequence.value().dim(0) < 1) {
    throw ContractError("encode_series: empty sequence");
  }
  const Var h = lstm_final_hidden(tape, sequence, p.lstm);
  const Var row = reshape(h, {1, p.lstm.hidden()});
  return {linear(tape, row, p.projection), Modality::Numerical};
}

// ---------------------------------------------------------------------------
// Image encoder: stem conv -> tanh -> residual blocks -> mean pool -> projection.
// ---------------------------------------------------------------------------

struct ImageEncoderParams {
  ConvLayer stem;
  std::vector<ResidualBlockParams> blocks;
  LinearParams projection;  // channels×d

  std::size_t channels() const { return stem.spec.out_channels; }

  static ImageEncoderParams init(std::size_t in_channels, std::size_t channels, std::size_t kernel,
                                 std::size_t block_count, std::size_t d, Rng& rng) {
    ImageEncoderParams p{ConvLayer::init(ConvSpec::same(in_channels, channels, kernel), rng), {}, {}};
    for (std::size_t i = 0; i < block_count; ++i) p.blocks.push_back(ResidualBlockParams::init(channels, kernel, rng));
    p.projection = LinearParams::init(channels, d, rng);
    return p;
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    stem.collect(prefix + ".stem", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    projection.collect(prefix + ".proj", out);
  }
};

struct ImageEncoderOptions {
  bool stem_activation = true;
};

/// Pooled per-channel features (1×channels) before the projection.
inline Var image_pooled_features(Tape& tape, const Var& image, ImageEncoderParams& p,
                                 ImageEncoderOptions options = {}) {
  const auto& img = image.value();
  if (img.rank() != 3) throw ShapeError("encode_image: image must be C×H×W, got " + shape_str(img.shape()));
  conv_out_dims(img.dim(1), img.dim(2), p.stem.spec.kernel_size, p.stem.spec.stride, p.stem.spec.padding);
  Var x = conv2d(tape, image, p.stem);
  if (options.stem_activation) x = tanh(x);
  for (auto& block : p.blocks) x = residual_block(tape, x, block);
  return spatial_mean(x);
}

inline ModalFeature encode_image(Tape& tape, const Var& image, ImageEncoderParams& p,
                                 ImageEncoderOptions options = {}) {
  const Var pooled = image_pooled_features(tape, image, p, options);
  return {linear(tape, pooled, p.projection), Modality::Visual};
}

}  // namespace atd
