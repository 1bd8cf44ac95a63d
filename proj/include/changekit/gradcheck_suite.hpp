#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "changekit/align.hpp"
#include "changekit/amplifier.hpp"
#include "changekit/gradcheck.hpp"
#include "changekit/model.hpp"
#include "changekit/ops.hpp"

namespace changekit {

using CheckFn = std::function<GradReport(uint64_t)>;

namespace gradcheck_detail {

inline Tensor positive_tensor(Rng& rng, std::vector<int> shape, double lo = 0.3) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (float& v : t.data) v = static_cast<float>(lo + std::fabs(v));
  return t;
}

inline Tensor unit_tensor(Rng& rng, std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(0.05 + 0.9 * rng.uniform());
  return t;
}

inline GradReport check_unary(const std::string& name, ops::UnKind kind, uint64_t seed,
                              bool positive = false) {
  Rng rng(seed, std::hash<std::string>{}(name));
  Tensor x = positive ? positive_tensor(rng, {2, 3, 4}) : random_tensor(rng, {2, 3, 4});
  return check_gradients(name, {x}, [kind](Tape& t, const std::vector<Value>& in) {
    return ops::sum_all(t, ops::unary(t, kind, in[0]));
  });
}

inline GradReport check_binary(const std::string& name, ops::BinKind kind, uint64_t seed) {
  Rng rng(seed, std::hash<std::string>{}(name));
  Tensor a = random_tensor(rng, {2, 3, 4});
  Tensor b = random_tensor(rng, {2, 1, 4});  // exercises broadcast reduction
  if (kind == ops::BinKind::Div)
    for (float& v : b.data) v = static_cast<float>(0.5 + std::fabs(v));
  return check_gradients(name, {a, b}, [kind](Tape& t, const std::vector<Value>& in) {
    // weight the output so the two argument gradients are not symmetric
    Value out = ops::binary(t, kind, in[0], in[1]);
    Value w = t.leaf([&] {
      Tensor m = Tensor::zeros(t.val(out).shape);
      for (size_t i = 0; i < m.numel(); ++i)
        m.data[i] = 0.25f + 0.1f * static_cast<float>(i % 7);
      return m;
    }());
    return ops::sum_all(t, ops::mul(t, out, w));
  });
}

}  // namespace gradcheck_detail

/// Named finite-difference checks for every differentiable operation. Each
/// entry maps a seed to a report; callers run however many seeds they need.
inline const std::vector<std::pair<std::string, CheckFn>>& gradcheck_registry() {
  using namespace gradcheck_detail;
  static const std::vector<std::pair<std::string, CheckFn>> reg = {
      {"elementwise.add",
       [](uint64_t s) { return check_binary("elementwise.add", ops::BinKind::Add, s); }},
      {"elementwise.sub",
       [](uint64_t s) { return check_binary("elementwise.sub", ops::BinKind::Sub, s); }},
      {"elementwise.mul",
       [](uint64_t s) { return check_binary("elementwise.mul", ops::BinKind::Mul, s); }},
      {"elementwise.div",
       [](uint64_t s) { return check_binary("elementwise.div", ops::BinKind::Div, s); }},
      {"elementwise.abs",
       [](uint64_t s) { return check_unary("elementwise.abs", ops::UnKind::Abs, s); }},
      {"elementwise.tanh",
       [](uint64_t s) { return check_unary("elementwise.tanh", ops::UnKind::Tanh, s); }},
      {"elementwise.sigmoid",
       [](uint64_t s) { return check_unary("elementwise.sigmoid", ops::UnKind::Sigmoid, s); }},
      {"elementwise.relu",
       [](uint64_t s) { return check_unary("elementwise.relu", ops::UnKind::Relu, s); }},
      {"elementwise.sqrt",
       [](uint64_t s) { return check_unary("elementwise.sqrt", ops::UnKind::Sqrt, s, true); }},
      {"conv2d",
       [](uint64_t s) {
         Rng rng(s, 11);
         Tensor x = random_tensor(rng, {2, 5, 5});
         Tensor w = random_tensor(rng, {3, 2, 3, 3}, 0.5);
         Tensor b = random_tensor(rng, {3}, 0.2);
         // eps 1e-2: the strided conv's double sums amplify float32 rounding
         // of the inputs, so a wider stencil is needed to beat the noise
         return check_gradients("conv2d", {x, w, b},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(
                                      t, ops::conv2d(t, in[0], in[1], in[2], 2, 1));
                                },
                                1e-2);
       }},
      {"gap",
       [](uint64_t s) {
         Rng rng(s, 12);
         Tensor x = random_tensor(rng, {3, 4, 5});
         return check_gradients("gap", {x}, [](Tape& t, const std::vector<Value>& in) {
           Value g = ops::gap(t, in[0]);
           return ops::sum_all(t, ops::mul(t, g, g));
         });
       }},
      {"bilinear_sample",
       [](uint64_t s) {
         Rng rng(s, 13);
         Tensor f = random_tensor(rng, {2, 5, 5});
         // coords at quarter-pixel offsets: integer lattice points have an
         // ambiguous subgradient and are excluded by construction
         Tensor c = Tensor::zeros({2, 4, 4});
         for (float& v : c.data)
           v = static_cast<float>(rng.uniform_int(0, 3)) + 0.25f +
               0.5f * static_cast<float>(rng.uniform());
         return check_gradients("bilinear_sample", {f, c},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(t, ops::bilinear_sample(t, in[0], in[1]));
                                });
       }},
      {"bound_offsets",
       [](uint64_t s) {
         Rng rng(s, 14);
         Tensor raw = random_tensor(rng, {2, 4, 4});
         return check_gradients("bound_offsets", {raw},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(t, align::bound_offsets(t, in[0], 2.5f));
                                });
       }},
      {"align",
       [](uint64_t s) {
         Rng rng(s, 15);
         Tensor f = random_tensor(rng, {2, 6, 6});
         Tensor off = Tensor::zeros({2, 6, 6});
         for (float& v : off.data)
           v = static_cast<float>(rng.uniform_int(-1, 1)) + 0.25f +
               0.5f * static_cast<float>(rng.uniform());
         Tensor gate = Tensor::scalar(0.7f);
         return check_gradients("align", {f, off, gate},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(
                                      t, align::align_features(t, in[0], in[1], in[2]));
                                },
                                1e-2);
       }},
      {"offset_loss",
       [](uint64_t s) {
         Rng rng(s, 16);
         Tensor a = random_tensor(rng, {2, 4, 4});
         Tensor b = random_tensor(rng, {2, 3, 3});
         return check_gradients("offset_loss", {a, b},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return align::offset_loss(t, {in[0], in[1]});
                                });
       }},
      {"spatial_gradient",
       [](uint64_t s) {
         Rng rng(s, 17);
         Tensor f = random_tensor(rng, {2, 5, 5});
         // superimpose a ramp so per-pixel gradient magnitudes stay away from
         // the sqrt kink at |grad| = 0, where the stencil sees pure curvature
         for (int c = 0; c < 2; ++c)
           for (int y = 0; y < 5; ++y)
             for (int x = 0; x < 5; ++x) f.at3(c, y, x) += 2.0f * static_cast<float>(x + y);
         return check_gradients("spatial_gradient", {f},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(t, ops::spatial_gradient(t, in[0]));
                                },
                                3e-3);
       }},
      {"dssim",
       [](uint64_t s) {
         Rng rng(s, 18);
         Tensor a = unit_tensor(rng, {2, 8, 8});
         Tensor b = unit_tensor(rng, {2, 8, 8});
         // floor 1e-2: the ssim quotient's tiny stabilizer constants make the
         // smallest per-pixel gradients (|g| < 1e-2) curvature-dominated; the
         // exclusion removes under 1% of the elements
         return check_gradients("dssim", {a, b},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(t, amplifier::dssim(t, in[0], in[1]));
                                },
                                1e-2, 1e-2, 1e-2);
       }},
      {"spatial_gate",
       [](uint64_t s) {
         Rng rng(s, 19);
         const int C = 2;
         Tensor cues = random_tensor(rng, {3 * C + 1, 6, 6}, 0.5);
         amplifier::Params p = amplifier::init_params(C, 2, 0.0f, rng);
         return check_gradients(
             "spatial_gate", {cues, p.gate1_w, p.gate1_b, p.gate2_w, p.gate2_b},
             [](Tape& t, const std::vector<Value>& in) {
               amplifier::ParamValues pv{};
               pv.gate1_w = in[1];
               pv.gate1_b = in[2];
               pv.gate2_w = in[3];
               pv.gate2_b = in[4];
               return ops::sum_all(t, amplifier::spatial_gate(t, in[0], pv));
             },
             1e-2);
       }},
      {"channel_weights",
       [](uint64_t s) {
         Rng rng(s, 20);
         const int C = 4;
         Tensor f = random_tensor(rng, {C, 3, 3});
         amplifier::Params p = amplifier::init_params(C, 2, 0.0f, rng);
         return check_gradients(
             "channel_weights", {f, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2},
             [](Tape& t, const std::vector<Value>& in) {
               amplifier::ParamValues pv{};
               pv.mlp_w1 = in[1];
               pv.mlp_b1 = in[2];
               pv.mlp_w2 = in[3];
               pv.mlp_b2 = in[4];
               return ops::sum_all(t, amplifier::channel_weights(t, in[0], pv));
             },
             1e-2);
       }},
      {"amplify",
       [](uint64_t s) {
         Rng rng(s, 21);
         Tensor f = random_tensor(rng, {3, 4, 4});
         Tensor m = unit_tensor(rng, {1, 4, 4});
         Tensor cw = unit_tensor(rng, {3});
         Tensor alpha = Tensor::scalar(static_cast<float>(rng.uniform(-0.5, 0.5)));
         return check_gradients("amplify", {f, m, cw, alpha},
                                [](Tape& t, const std::vector<Value>& in) {
                                  return ops::sum_all(
                                      t, amplifier::amplify(t, in[0], in[1], in[2], in[3]));
                                },
                                1e-2);
       }},
      {"total_loss",
       [](uint64_t s) {
         Rng rng(s, 22);
         model::Config cfg;
         cfg.stages = 1;
         cfg.base_channels = 4;
         cfg.delta_max = 2.0f;
         cfg.offset_weight = 0.05f;
         cfg.sparsity_weight = 0.1f;
         model::Params p = model::init_params(cfg, s);
         Tensor t1 = unit_tensor(rng, {1, 8, 8});
         Tensor t2 = unit_tensor(rng, {1, 8, 8});
         Tensor gt = Tensor::zeros({1, 4, 4});
         for (float& v : gt.data) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
         std::vector<Tensor> in = {t1,
                                   t2,
                                   p.enc_w[0],
                                   p.enc_b[0],
                                   p.fuse_w,
                                   p.fuse_b,
                                   p.align.conv1_w,
                                   p.align.conv1_b,
                                   p.align.conv2_w,
                                   p.align.conv2_b,
                                   p.align.gate_w,
                                   p.align.gate_b,
                                   p.amp.gate1_w,
                                   p.amp.gate1_b,
                                   p.amp.gate2_w,
                                   p.amp.gate2_b,
                                   p.amp.mlp_w1,
                                   p.amp.mlp_b1,
                                   p.amp.mlp_w2,
                                   p.amp.mlp_b2,
                                   p.amp.alpha,
                                   p.head_w,
                                   p.head_b};
         // start the offset head and alpha off their zero init so the check
         // sees non-degenerate gradients
         for (float& v : in[8].data) v = static_cast<float>(rng.normal() * 0.1);
         in[20].data[0] = 0.3f;
         return check_gradients(
             "total_loss", in,
             [cfg, gt](Tape& t, const std::vector<Value>& v) {
               model::ParamValues pv;
               pv.enc_w = {v[2]};
               pv.enc_b = {v[3]};
               pv.fuse_w = v[4];
               pv.fuse_b = v[5];
               pv.align = {v[6], v[7], v[8], v[9], v[10], v[11], cfg.delta_max};
               pv.amp = {v[12], v[13], v[14], v[15], v[16], v[17], v[18], v[19], v[20]};
               pv.head_w = v[21];
               pv.head_b = v[22];
               model::ForwardOut fw = model::forward(t, v[0], v[1], cfg, pv);
               return model::total_loss(t, fw, gt, cfg).total;
             },
             1e-2);
       }},
  };
  return reg;
}

}  // namespace changekit
