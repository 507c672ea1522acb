// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atd/autodiff.hpp"
#include "atd/encoders.hpp"
#include "atd/fusion.hpp"
#include "atd/training.hpp"

namespace atd {

struct GradcheckResult {
  std::string component;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckSizes {
  std::size_t d = 4;
  std::size_t rows = 3;  // feature rows for the stand-alone fusion stages
  std::size_t steps = 3;
  std::size_t input = 2;
  std::size_t hidden = 3;
  std::size_t channels = 2;
  std::size_t image = 6;  // 1×image×image
};

namespace detail {

/// Contracts an arbitrary output to a scalar with fixed random weights so
/// every output entry contributes a distinct gradient direction.
struct Probe {
  Tensor weights;
  Var operator()(Tape& tape, const Var& out) {
    if (weights.shape() != out.shape()) throw ShapeError("probe: weight shape mismatch");
    return sum(mul(tape.constant(weights), out));
  }
};

inline Probe make_probe(Shape shape, Rng& rng) { return {Tensor::uniform(std::move(shape), rng, -1.0, 1.0)}; }

inline std::vector<Tensor*> params_of(std::vector<NamedParam> named) {
  std::vector<Tensor*> out;
  for (auto& p : named) out.push_back(p.tensor);
  return out;
}

/// Offsets alpha_raw and b_F away from their zero init so the check does not
/// sit on a symmetric point.
inline void jitter(AtdParams& p, Rng& rng) {
  p.alpha_raw[0] = rng.uniform(-1.0, 1.0);
  for (auto& v : p.transform_b.data()) v = rng.uniform(-0.5, 0.5);
}

}  // namespace detail

/// Central-difference gradient checks over every differentiable component at
/// small sizes. A component passes when its max relative error is < tolerance.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-4, double h = 1e-5,
                                                        GradcheckSizes sz = {}) {
  std::vector<GradcheckResult> results;
  auto record = [&](std::string name, double err) {
    results.push_back({std::move(name), err, err < tolerance});
  };
  Rng rng(seed);

  {
    Tensor x = Tensor::gaussian({sz.channels, sz.image, sz.image}, rng, 0, 1);
    ConvLayer layer = ConvLayer::init({3, 2, 1, sz.channels, 3}, rng);
    for (auto& v : layer.bias.data()) v = rng.uniform(-0.5, 0.5);
    const auto [h2, w2] = conv_out_dims(sz.image, sz.image, 3, 2, 1);
    auto probe = detail::make_probe({3, h2, w2}, rng);
    Tensor* in[] = {&x, &layer.weight, &layer.bias};
    record("conv2d", grad_check([&](Tape& t) { return probe(t, conv2d(t, t.variable(x), layer)); }, in, h));
  }
  {
    Tensor x = Tensor::gaussian({sz.channels, sz.image, sz.image}, rng, 0, 1);
    auto block = ResidualBlockParams::init(sz.channels, 3, rng);
    for (auto& v : block.first.bias.data()) v = rng.uniform(-0.5, 0.5);
    auto probe = detail::make_probe(x.shape(), rng);
    std::vector<Tensor*> in{&x};
    std::vector<NamedParam> named;
    block.collect("b", named);
    for (auto& p : named) in.push_back(p.tensor);
    record("residual_block", grad_check([&](Tape& t) { return probe(t, residual_block(t, t.variable(x), block)); },
                                        in, h));
  }
  {
    auto lstm = LstmParams::init(sz.hidden, sz.input, rng);
    for (Tensor* b : {&lstm.b_forget, &lstm.b_input, &lstm.b_candidate, &lstm.b_output})
      for (auto& v : b->data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = Tensor::gaussian({sz.input, 1}, rng, 0, 1);
    Tensor h0 = Tensor::gaussian({sz.hidden, 1}, rng, 0, 0.5);
    Tensor c0 = Tensor::gaussian({sz.hidden, 1}, rng, 0, 0.5);
    auto ph = detail::make_probe({sz.hidden, 1}, rng);
    auto pc = detail::make_probe({sz.hidden, 1}, rng);
    std::vector<Tensor*> in{&x, &h0, &c0};
    std::vector<NamedParam> named;
    lstm.collect("l", named);
    for (auto& p : named) in.push_back(p.tensor);
    record("lstm_step", grad_check(
                            [&](Tape& t) {
                              const auto s = lstm_step(t, t.variable(x), {t.variable(h0), t.variable(c0)}, lstm);
                              return add(ph(t, s.hidden), pc(t, s.cell));
                            },
                            in, h));
  }
  {
    auto enc = SeriesEncoderParams::init(sz.input, sz.hidden, sz.d, rng);
    Tensor seq = Tensor::gaussian({sz.steps, sz.input}, rng, 0, 1);
    auto probe = detail::make_probe({1, sz.d}, rng);
    std::vector<Tensor*> in{&seq};
    std::vector<NamedParam> named;
    enc.collect("s", named);
    for (auto& p : named) in.push_back(p.tensor);
    record("series_encoder",
           grad_check([&](Tape& t) { return probe(t, encode_series(t, t.variable(seq), enc).rows); }, in, h));
  }
  {
    auto enc = ImageEncoderParams::init(1, sz.channels, 3, 2, sz.d, rng);
    Tensor img = Tensor::gaussian({1, sz.image, sz.image}, rng, 0, 1);
    auto probe = detail::make_probe({1, sz.d}, rng);
    std::vector<Tensor*> in{&img};
    std::vector<NamedParam> named;
    enc.collect("i", named);
    for (auto& p : named) in.push_back(p.tensor);
    record("image_encoder",
           grad_check([&](Tape& t) { return probe(t, encode_image(t, t.variable(img), enc).rows); }, in, h));
  }
  {
    Tensor x = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    auto probe = detail::make_probe(x.shape(), rng);
    Tensor* in[] = {&x};
    record("normalize", grad_check(
                            [&](Tape& t) {
                              return probe(t, normalize(ModalFeature{t.variable(x), Modality::Numerical}, 1e-5).rows);
                            },
                            in, h));
  }
  {
    Tensor a = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    Tensor b = Tensor::gaussian({sz.rows + 1, sz.d}, rng, 0, 1);
    Tensor v = Tensor::gaussian({sz.d, sz.d}, rng, 0, 0.5);
    auto probe = detail::make_probe({sz.rows, sz.d}, rng);
    Tensor* in[] = {&a, &b, &v};
    record("guidance_weights_integrate", grad_check(
                                             [&](Tape& t) {
                                               const NormalizedFeature n1{t.variable(a)}, n2{t.variable(b)};
                                               const Var w = atd_weights(guidance_matrix(n1, n2), sz.d);
                                               return probe(t, integrate(w, n2, t.variable(v)));
                                             },
                                             in, h));
  }
  {
    auto p = AtdParams::init(sz.d, sz.d, 1, 1e-5, rng);
    detail::jitter(p, rng);
    Tensor o = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    Tensor a = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    Tensor b = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    auto probe = detail::make_probe(o.shape(), rng);
    std::vector<Tensor*> in{&o, &a, &b, &p.transform_w, &p.transform_b, &p.alpha_raw};
    record("telescopic_displace",
           grad_check(
               [&](Tape& t) {
                 return probe(t, telescopic_displace(t, t.variable(o), {t.variable(a)}, {t.variable(b)}, p));
               },
               in, h));
  }
  auto fusion_check = [&](const char* name, std::size_t rounds) {
    auto p = AtdParams::init(sz.d, sz.d, rounds, 1e-5, rng);
    detail::jitter(p, rng);
    Tensor x1 = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    Tensor x2 = Tensor::gaussian({sz.rows, sz.d}, rng, 0, 1);
    auto probe = detail::make_probe(x1.shape(), rng);
    std::vector<Tensor*> in{&x1, &x2};
    std::vector<NamedParam> named;
    p.collect("f", named);
    for (auto& q : named) in.push_back(q.tensor);
    record(name, grad_check(
                     [&](Tape& t) {
                       const ModalFeature f1{t.variable(x1), Modality::Numerical};
                       const ModalFeature f2{t.variable(x2), Modality::Visual};
                       return probe(t, rounds == 1 ? atd_fuse(t, f1, f2, p) : alternate_fuse(t, f1, f2, p));
                     },
                     in, h));
  };
  fusion_check("atd_fuse", 1);
  fusion_check("alternate_fuse", 3);
  {
    ModelConfig mc;
    mc.input_dim = sz.input;
    mc.hidden = sz.hidden;
    mc.conv_channels = sz.channels;
    mc.blocks = 2;
    mc.d = sz.d;
    mc.d_h = sz.d;
    mc.rounds = 2;
    AtdModel model(mc, rng.next_u64());
    detail::jitter(model.fusion(), rng);
    BimodalSample s;
    s.series = Tensor::gaussian({sz.steps, sz.input}, rng, 0, 1);
    s.image = Tensor::gaussian({1, sz.image, sz.image}, rng, 0, 1);
    s.target = rng.gaussian();
    auto in = detail::params_of(model.parameters());
    record("full_model", grad_check([&](Tape& t) { return model.sample_loss(t, s, Task::Regression); }, in, h));
  }
  return results;
}

}  // namespace atd
