// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "atd/autodiff.hpp"
#include "atd/data.hpp"
#include "atd/encoders.hpp"
#include "atd/fusion.hpp"

namespace atd {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

enum class Task { Regression, Classification };

inline const char* task_name(Task t) { return t == Task::Regression ? "regression" : "classification"; }

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

/// (1/n) Σ (y - ŷ)², differentiable in both arguments.
inline Var mse_loss(const Var& y, const Var& yhat) {
  if (y.value().numel() != yhat.value().numel() || y.value().numel() == 0) {
    throw ShapeError("mse_loss: length mismatch " + shape_str(y.shape()) + " vs " + shape_str(yhat.shape()));
  }
  const Var yhat_flat = reshape(yhat, y.shape());
  const Var diff = sub(y, yhat_flat);
  return mean(mul(diff, diff));
}

inline double mae_metric(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size() || y.empty()) {
    throw ShapeError("mae_metric: length mismatch " + std::to_string(y.size()) + " vs " + std::to_string(yhat.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(y[i] - yhat[i]);
  return acc / static_cast<double>(y.size());
}

inline double mse_metric(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size() || y.empty()) {
    throw ShapeError("mse_metric: length mismatch " + std::to_string(y.size()) + " vs " + std::to_string(yhat.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return acc / static_cast<double>(y.size());
}

struct ClassificationScores {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

/// Accuracy and unweighted mean of per-class F1 = 2PR/(P+R); a class with
/// P+R = 0 (or no predictions and no support) scores 0.
inline ClassificationScores classification_metrics(std::span<const std::size_t> predictions,
                                                   std::span<const std::size_t> labels, std::size_t n_classes) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw ShapeError("classification_metrics: length mismatch " + std::to_string(predictions.size()) + " vs " +
                     std::to_string(labels.size()));
  }
  std::vector<std::size_t> tp(n_classes, 0), predicted(n_classes, 0), actual(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predictions[i] >= n_classes) {
      throw ContractError("classification_metrics: class index out of range for " + std::to_string(n_classes) +
                          " classes");
    }
    ++predicted[predictions[i]];
    ++actual[labels[i]];
    if (predictions[i] == labels[i]) {
      ++correct;
      ++tp[labels[i]];
    }
  }
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double p = predicted[c] ? static_cast<double>(tp[c]) / static_cast<double>(predicted[c]) : 0.0;
    const double r = actual[c] ? static_cast<double>(tp[c]) / static_cast<double>(actual[c]) : 0.0;
    f1_sum += (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  return {static_cast<double>(correct) / static_cast<double>(labels.size()),
          f1_sum / static_cast<double>(n_classes)};
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum·v + g; w <- w - lr·v. Gradients come from each tensor's grad
/// slot; a tensor without a populated gradient contributes g = 0.
inline void sgd_step(std::span<Tensor* const> params, OptimizerState& state, double lr, double momentum) {
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.emplace_back(p->numel(), 0.0);
  }
  if (state.velocity.size() != params.size()) {
    throw ContractError("sgd_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = *params[k];
    auto& v = state.velocity[k];
    if (v.size() != w.numel()) {
      throw ContractError("sgd_step: velocity length " + std::to_string(v.size()) + " vs parameter " +
                          shape_str(w.shape()));
    }
    const bool has = w.has_grad();
    std::span<const double> g = has ? w.grad() : std::span<const double>{};
    auto data = w.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + (has ? g[i] : 0.0);
      data[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class Variant { Fused, SeriesOnly, ImageOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Fused: return "fused";
    case Variant::SeriesOnly: return "series";
    case Variant::ImageOnly: return "image";
  }
  return "?";
}

struct ModelConfig {
  Variant variant = Variant::Fused;
  std::size_t input_dim = kSeriesColumns;
  std::size_t hidden = 16;
  std::size_t image_channels = 1;
  std::size_t conv_channels = 4;
  std::size_t kernel = 3;
  std::size_t blocks = 2;
  std::size_t d = 16;
  std::size_t d_h = 16;
  std::size_t rounds = 2;
  double epsilon = 1e-5;
  std::size_t outputs = 1;  // 1 for regression, class count otherwise
};

/// Series encoder + image encoder + fusion + fully connected head. Unimodal
/// variants drop one encoder and the fusion stage, feeding the remaining
/// feature straight to the head.
class AtdModel {
 public:
  AtdModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    series_ = SeriesEncoderParams::init(cfg.input_dim, cfg.hidden, cfg.d, rng);
    image_ = ImageEncoderParams::init(cfg.image_channels, cfg.conv_channels, cfg.kernel, cfg.blocks, cfg.d, rng);
    fusion_ = AtdParams::init(cfg.d, cfg.d_h, cfg.rounds, cfg.epsilon, rng);
    head_ = LinearParams::init(cfg.d, cfg.outputs, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  SeriesEncoderParams& series() { return series_; }
  ImageEncoderParams& image() { return image_; }
  AtdParams& fusion() { return fusion_; }
  LinearParams& head() { return head_; }

  /// Trainable tensors used by this variant, in a stable order.
  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    if (cfg_.variant != Variant::ImageOnly) series_.collect("series", out);
    if (cfg_.variant != Variant::SeriesOnly) image_.collect("image", out);
    if (cfg_.variant == Variant::Fused) fusion_.collect("fusion", out);
    head_.collect("head", out);
    return out;
  }

  /// 1×outputs prediction (regression value or class logits).
  Var forward(Tape& tape, const BimodalSample& sample) {
    Var fused;
    switch (cfg_.variant) {
      case Variant::Fused: {
        const ModalFeature x1 = encode_series(tape, tape.constant(sample.series), series_);
        const ModalFeature x2 = encode_image(tape, tape.constant(sample.image), image_);
        fused = alternate_fuse(tape, x1, x2, fusion_);
        break;
      }
      case Variant::SeriesOnly:
        fused = encode_series(tape, tape.constant(sample.series), series_).rows;
        break;
      case Variant::ImageOnly:
        fused = encode_image(tape, tape.constant(sample.image), image_).rows;
        break;
    }
    return linear(tape, fused, head_);
  }

  Var sample_loss(Tape& tape, const BimodalSample& sample, Task task) {
    const Var out = forward(tape, sample);
    if (task == Task::Regression) return mse_loss(tape.constant(Tensor({1}, {sample.target})), out);
    return cross_entropy(out, sample.label);
  }

  /// Bitwise fingerprint of all parameters (FNV-1a over the raw doubles).
  std::uint64_t fingerprint() {
    std::uint64_t h = 1469598103934665603ull;
    for (auto& p : parameters()) {
      for (double v : p.tensor->data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xff;
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  }

 private:
  ModelConfig cfg_;
  SeriesEncoderParams series_;
  ImageEncoderParams image_;
  AtdParams fusion_;
  LinearParams head_;
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricsReport {
  Task task = Task::Regression;
  std::optional<double> mae, mse, accuracy, macro_f1;
  std::vector<double> loss_trace;

  std::optional<double> final_loss() const {
    if (loss_trace.empty()) return std::nullopt;
    return loss_trace.back();
  }

  /// Flat key=value block; doubles are written in shortest round-trip form.
  std::string serialize() const {
    std::ostringstream os;
    os << "task=" << task_name(task) << '\n';
    if (mae) os << "mae=" << format_double(*mae) << '\n';
    if (mse) os << "mse=" << format_double(*mse) << '\n';
    if (accuracy) os << "accuracy=" << format_double(*accuracy) << '\n';
    if (macro_f1) os << "macro_f1=" << format_double(*macro_f1) << '\n' << "f1_average=macro\n";
    if (auto f = final_loss()) os << "final_loss=" << format_double(*f) << '\n';
    os << "epochs=" << loss_trace.size() << '\n';
    return os.str();
  }
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  std::uint64_t seed = 42;
  Task task = Task::Regression;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ContractError("TrainConfig: learning rate must be finite and >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("TrainConfig: momentum must be in [0, 1)");
    if (batch_size < 1) throw ContractError("TrainConfig: batch size must be >= 1");
  }
};

inline std::vector<Tensor*> parameter_tensors(AtdModel& model) {
  std::vector<Tensor*> out;
  for (auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

/// Mini-batch SGD. Each epoch visits a seeded permutation of the data; the
/// batch loss is the mean of per-sample losses. Returns the per-epoch mean
/// sample loss in `loss_trace`.
inline MetricsReport train(AtdModel& model, const std::vector<BimodalSample>& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: empty dataset");
  Rng rng(cfg.seed);
  auto params = parameter_tensors(model);
  for (Tensor* p : params) p->set_requires_grad(true);
  OptimizerState state;
  MetricsReport report;
  report.task = cfg.task;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(data.size());
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (Tensor* p : params) p->zero_grad();
      Tape tape;
      Var total;
      try {
        for (std::size_t i = start; i < end; ++i) {
          const Var l = model.sample_loss(tape, data[order[i]], cfg.task);
          total = (i == start) ? l : add(total, l);
        }
      } catch (const NumericDomainError& e) {
        // Diverged parameters surface as non-finite activations mid-forward.
        throw DivergenceError("train: " + std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) +
                                  ", batch " + std::to_string(batch + 1),
                              epoch + 1, batch + 1);
      }
      const Var loss = scale(total, 1.0 / static_cast<double>(end - start));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                  std::to_string(batch + 1),
                              epoch + 1, batch + 1);
      }
      tape.backward(loss);
      for (Tensor* p : params) {
        if (!p->has_grad()) continue;
        for (double g : p->grad()) {
          if (!std::isfinite(g)) {
            throw DivergenceError("train: non-finite gradient at epoch " + std::to_string(epoch + 1) + ", batch " +
                                      std::to_string(batch + 1),
                                  epoch + 1, batch + 1);
          }
        }
      }
      sgd_step(params, state, cfg.learning_rate, cfg.momentum);
      epoch_loss += value * static_cast<double>(end - start);
    }
    report.loss_trace.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  for (Tensor* p : params) {
    p->zero_grad();
    p->set_requires_grad(false);
  }
  return report;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Forward-only pass over the data; never touches parameters.
inline MetricsReport evaluate(AtdModel& model, const std::vector<BimodalSample>& data, Task task) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  MetricsReport report;
  report.task = task;
  std::vector<double> y, yhat;
  std::vector<std::size_t> labels, preds;
  for (const auto& s : data) {
    Tape tape(false);
    const Var out = model.forward(tape, s);
    if (task == Task::Regression) {
      y.push_back(s.target);
      yhat.push_back(out.value()[0]);
    } else {
      labels.push_back(s.label);
      preds.push_back(argmax(out.value().data()));
    }
  }
  if (task == Task::Regression) {
    report.mae = mae_metric(y, yhat);
    report.mse = mse_metric(y, yhat);
  } else {
    const auto scores = classification_metrics(preds, labels, model.config().outputs);
    report.accuracy = scores.accuracy;
    report.macro_f1 = scores.macro_f1;
  }
  return report;
}

}  // namespace atd
