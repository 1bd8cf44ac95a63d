#pragma once

#include <map>
#include <string>
#include <vector>

#include "changekit/ops.hpp"
#include "changekit/rng.hpp"
#include "changekit/tape.hpp"

namespace changekit::amplifier {

constexpr int kDssimWindow = 7;
constexpr float kDssimC1 = 1e-4f;
constexpr float kDssimC2 = 9e-4f;

/// Parameters of the change amplifier. The gate net maps the (3C+1)-channel
/// cue stack to a single-channel spatial gate; the channel MLP produces
/// per-channel weights; alpha scales the residual amplification and starts at
/// exactly 0, making the module a no-op at initialization.
struct Params {
  Tensor gate1_w, gate1_b;  // cmid×(3C+1)×1×1, cmid
  Tensor gate2_w, gate2_b;  // 1×cmid×3×3, 1
  Tensor mlp_w1, mlp_b1;    // hidden×C, hidden
  Tensor mlp_w2, mlp_b2;    // C×hidden, C
  Tensor alpha;             // scalar, initialized 0
  int reduction = 4;
  float sparsity_weight = 0.0f;
};

inline Params init_params(int channels, int reduction, float sparsity_weight, Rng& rng) {
  if (reduction < 1) throw std::invalid_argument("reduction ratio must be >= 1");
  Params p;
  p.reduction = reduction;
  p.sparsity_weight = sparsity_weight;
  int cues = 3 * channels + 1;
  int cmid = std::max(channels / 4, 8);
  int hidden = std::max(channels / reduction, 1);
  auto randn = [&rng](Tensor& t, double std) {
    for (float& v : t.data) v = static_cast<float>(rng.normal() * std);
  };
  p.gate1_w = Tensor::zeros({cmid, cues, 1, 1});
  randn(p.gate1_w, std::sqrt(2.0 / cues));
  p.gate1_b = Tensor::zeros({cmid});
  p.gate2_w = Tensor::zeros({1, cmid, 3, 3});
  randn(p.gate2_w, std::sqrt(2.0 / (cmid * 9.0)));
  p.gate2_b = Tensor::zeros({1});
  p.mlp_w1 = Tensor::zeros({hidden, channels});
  randn(p.mlp_w1, std::sqrt(2.0 / channels));
  p.mlp_b1 = Tensor::zeros({hidden});
  p.mlp_w2 = Tensor::zeros({channels, hidden});
  randn(p.mlp_w2, std::sqrt(2.0 / hidden));
  p.mlp_b2 = Tensor::zeros({channels});
  p.alpha = Tensor::scalar(0.0f);
  return p;
}

inline std::map<std::string, Tensor*> param_refs(Params& p, const std::string& prefix) {
  return {{prefix + "gate_net.conv1.weight", &p.gate1_w},
          {prefix + "gate_net.conv1.bias", &p.gate1_b},
          {prefix + "gate_net.conv2.weight", &p.gate2_w},
          {prefix + "gate_net.conv2.bias", &p.gate2_b},
          {prefix + "channel_mlp.w1", &p.mlp_w1},
          {prefix + "channel_mlp.b1", &p.mlp_b1},
          {prefix + "channel_mlp.w2", &p.mlp_w2},
          {prefix + "channel_mlp.b2", &p.mlp_b2},
          {prefix + "alpha", &p.alpha}};
}

struct ParamValues {
  Value gate1_w, gate1_b, gate2_w, gate2_b;
  Value mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Value alpha;
};

inline ParamValues stage(Tape& t, const Params& p) {
  return {t.leaf(p.gate1_w), t.leaf(p.gate1_b), t.leaf(p.gate2_w),
          t.leaf(p.gate2_b), t.leaf(p.mlp_w1),  t.leaf(p.mlp_b1),
          t.leaf(p.mlp_w2),  t.leaf(p.mlp_b2),  t.leaf(p.alpha)};
}

/// Structural dissimilarity map (1 - SSIM)/2 averaged over channels, computed
/// with a uniform window and border replication. Result is 1×H×W in [0,1].
inline Value dssim(Tape& t, Value f_t, Value f_t2, int window = kDssimWindow,
                   float c1 = kDssimC1, float c2 = kDssimC2) {
  require_same_shape(t.val(f_t), t.val(f_t2), "dssim");
  if (window % 2 == 0) throw std::invalid_argument("dssim window must be odd");
  using namespace ops;
  Value mu1 = box_filter(t, f_t, window);
  Value mu2 = box_filter(t, f_t2, window);
  Value mu1mu2 = mul(t, mu1, mu2);
  Value mu1sq = mul(t, mu1, mu1);
  Value mu2sq = mul(t, mu2, mu2);
  Value s11 = sub(t, box_filter(t, mul(t, f_t, f_t), window), mu1sq);
  Value s22 = sub(t, box_filter(t, mul(t, f_t2, f_t2), window), mu2sq);
  Value s12 = sub(t, box_filter(t, mul(t, f_t, f_t2), window), mu1mu2);
  Value num = mul(t, add_const(t, scale(t, mu1mu2, 2.0f), c1),
                  add_const(t, scale(t, s12, 2.0f), c2));
  Value den = mul(t, add_const(t, add(t, mu1sq, mu2sq), c1),
                  add_const(t, add(t, s11, s22), c2));
  Value ssim = div(t, num, den);
  Value dss = scale(t, add_const(t, neg(t, ssim), 1.0f), 0.5f);
  return mean_channels(t, dss);
}

/// Cue stack, fixed channel order: |f_t - f_t2| (C), grad mag of f_t (C),
/// grad mag of f_t2 (C), structural dissimilarity (1) -> (3C+1)×H×W.
inline Value build_cues(Tape& t, Value f_t, Value f_t2_aligned) {
  require_same_shape(t.val(f_t), t.val(f_t2_aligned), "build_cues");
  Value diff = ops::abs(t, ops::sub(t, f_t, f_t2_aligned));
  Value g1 = ops::spatial_gradient(t, f_t);
  Value g2 = ops::spatial_gradient(t, f_t2_aligned);
  Value dss = dssim(t, f_t, f_t2_aligned);
  return ops::concat_channels(t, {diff, g1, g2, dss});
}

/// 1×1 conv -> relu -> 3×3 conv -> sigmoid over the cue stack -> M in (0,1).
inline Value spatial_gate(Tape& t, Value cues, const ParamValues& p) {
  if (t.val(cues).dim(0) != t.val(p.gate1_w).dim(1))
    throw std::invalid_argument("spatial_gate: cue channels " +
                                std::to_string(t.val(cues).dim(0)) + " do not match gate net");
  Value h = ops::relu(t, ops::conv2d(t, cues, p.gate1_w, p.gate1_b, 1, 0));
  return ops::sigmoid(t, ops::conv2d(t, h, p.gate2_w, p.gate2_b, 1, 1));
}

/// s = sigmoid(W2 relu(W1 gap(f) + b1) + b2), one weight per channel.
inline Value channel_weights(Tape& t, Value f, const ParamValues& p) {
  Value pooled = ops::gap(t, f);
  Value h = ops::relu(t, ops::affine(t, p.mlp_w1, pooled, p.mlp_b1));
  return ops::sigmoid(t, ops::affine(t, p.mlp_w2, h, p.mlp_b2));
}

/// Residual amplification: out[c,y,x] = f[c,y,x] * (1 + alpha * m[y,x] * s[c]).
inline Value amplify(Tape& t, Value f, Value m, Value s, Value alpha) {
  const Tensor& vf = t.val(f);
  int C = vf.dim(0);
  Value s_col = ops::reshape(t, s, {C, 1, 1});
  Value ms = ops::mul(t, m, s_col);             // C×H×W via broadcast
  Value scaled = ops::mul(t, alpha, ms);        // alpha is {1}
  Value factor = ops::add_const(t, scaled, 1.0f);
  return ops::mul(t, f, factor);
}

/// Mean of the gate map: an l1 prior, since m >= 0.
inline Value gate_sparsity_loss(Tape& t, Value m) { return ops::mean_all(t, m); }

struct State {
  Value cues;        // (3C+1)×H×W
  Value gate_map;    // 1×H×W
  Value channel_w;   // C
  Value amplified;   // C×H×W
};

inline State forward(Tape& t, Value f_t, Value f_t2_aligned, Value f_fused,
                     const ParamValues& p) {
  Value cues = build_cues(t, f_t, f_t2_aligned);
  Value m = spatial_gate(t, cues, p);
  Value s = channel_weights(t, f_fused, p);
  Value out = amplify(t, f_fused, m, s, p.alpha);
  return {cues, m, s, out};
}

}  // namespace changekit::amplifier
