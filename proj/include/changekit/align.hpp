#pragma once

#include <map>
#include <string>
#include <vector>

#include "changekit/ops.hpp"
#include "changekit/rng.hpp"
#include "changekit/tape.hpp"

namespace changekit::align {

/// Parameters of the deformable alignment head for one feature level.
/// The offset head is two 3×3 convs (2C -> c_mid -> 2) with the final layer
/// zero-initialized so the module starts as an exact identity; the gate head
/// is GAP -> affine -> sigmoid producing one scalar per sample.
struct Params {
  Tensor conv1_w, conv1_b;  // c_mid×2C×3×3, c_mid
  Tensor conv2_w, conv2_b;  // 2×c_mid×3×3, 2  (zero-initialized)
  Tensor gate_w, gate_b;    // 1×2C, 1
  float delta_max = 3.0f;   // offset amplitude bound, pixels
  int level = 0;
};

inline int default_mid_channels(int c) { return std::max(c / 2, 8); }

inline Params init_params(int channels, float delta_max, Rng& rng, int level = 0) {
  if (delta_max <= 0.0f) throw std::invalid_argument("delta_max must be positive");
  Params p;
  p.delta_max = delta_max;
  p.level = level;
  int cin = 2 * channels;
  int cmid = default_mid_channels(channels);
  double std1 = std::sqrt(2.0 / (cin * 9.0));  // He init for the hidden conv
  p.conv1_w = Tensor::zeros({cmid, cin, 3, 3});
  for (float& v : p.conv1_w.data) v = static_cast<float>(rng.normal() * std1);
  p.conv1_b = Tensor::zeros({cmid});
  p.conv2_w = Tensor::zeros({2, cmid, 3, 3});  // exactly zero: initial offsets vanish
  p.conv2_b = Tensor::zeros({2});
  p.gate_w = Tensor::zeros({1, cin});
  p.gate_b = Tensor::zeros({1});
  return p;
}

inline std::map<std::string, Tensor*> param_refs(Params& p, const std::string& prefix) {
  return {{prefix + "offset_head.conv1.weight", &p.conv1_w},
          {prefix + "offset_head.conv1.bias", &p.conv1_b},
          {prefix + "offset_head.conv2.weight", &p.conv2_w},
          {prefix + "offset_head.conv2.bias", &p.conv2_b},
          {prefix + "gate_head.weight", &p.gate_w},
          {prefix + "gate_head.bias", &p.gate_b}};
}

/// Tape-resident copy of the parameters for one forward/backward pass.
struct ParamValues {
  Value conv1_w, conv1_b, conv2_w, conv2_b, gate_w, gate_b;
  float delta_max;
};

inline ParamValues stage(Tape& t, const Params& p) {
  return {t.leaf(p.conv1_w), t.leaf(p.conv1_b), t.leaf(p.conv2_w),
          t.leaf(p.conv2_b), t.leaf(p.gate_w),  t.leaf(p.gate_b), p.delta_max};
}

struct OffsetPrediction {
  Value raw_offsets;  // 2×H×W
  Value gate;         // scalar in (0,1)
};

/// Raw offsets and gate from the concatenated bi-temporal features.
inline OffsetPrediction predict_offsets(Tape& t, Value f_t, Value f_t2, const ParamValues& p) {
  require_same_shape(t.val(f_t), t.val(f_t2), "predict_offsets");
  Value cat = ops::concat_channels(t, {f_t, f_t2});
  Value h = ops::relu(t, ops::conv2d(t, cat, p.conv1_w, p.conv1_b, 1, 1));
  Value raw = ops::conv2d(t, h, p.conv2_w, p.conv2_b, 1, 1);
  Value pooled = ops::gap(t, cat);
  Value gate = ops::sigmoid(t, ops::affine(t, p.gate_w, pooled, p.gate_b));
  return {raw, gate};
}

/// Amplitude bound: delta_max * tanh(raw). |result| < delta_max strictly:
/// float32 tanh saturates to exactly +-1 for |raw| >~ 9, so the saturated
/// tail is clamped one ulp below 1 to keep the bound strict. The clamp only
/// changes values where the tanh derivative already underflows to 0.
inline Value bound_offsets(Tape& t, Value raw, float delta_max) {
  if (delta_max <= 0.0f) throw std::invalid_argument("delta_max must be positive");
  constexpr float kMax = 0.99999994f;  // largest float below 1
  const Tensor& vx = t.val(raw);
  Tensor out = Tensor::zeros(vx.shape);
  for (size_t i = 0; i < vx.numel(); ++i) {
    float u = std::tanh(vx.data[i]);
    out.data[i] = delta_max * std::clamp(u, -kMax, kMax);
  }
  Value self = ops::detail::next_value(t);
  return t.record(std::move(out), [raw, self, delta_max](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& vx = tp.val(raw);
    Tensor& gx = tp.grad(raw);
    for (size_t i = 0; i < g.numel(); ++i) {
      float u = std::tanh(vx.data[i]);
      gx.data[i] += g.data[i] * delta_max * (1.0f - u * u);
    }
  });
}

/// Sum over levels of ||offsets||_2 / sqrt(numel). The per-element
/// normalization keeps the loss scale independent of tile resolution.
inline Value offset_loss(Tape& t, const std::vector<Value>& bounded_per_level) {
  if (bounded_per_level.empty()) throw std::invalid_argument("offset_loss: empty level list");
  Value total = ops::rms_norm(t, bounded_per_level[0]);
  for (size_t i = 1; i < bounded_per_level.size(); ++i)
    total = ops::add(t, total, ops::rms_norm(t, bounded_per_level[i]));
  return total;
}

/// Resample features at (identity grid + gate * offsets).
inline Value align_features(Tape& t, Value f_t2, Value bounded, Value gate) {
  const Tensor& v = t.val(f_t2);
  Value grid = t.leaf(ops::identity_grid(v.dim(1), v.dim(2)));
  Value coords = ops::add(t, grid, ops::mul(t, gate, bounded));
  return ops::bilinear_sample(t, f_t2, coords);
}

struct Result {
  Value aligned;           // C×H×W
  Value offsets_bounded;   // 2×H×W
  Value gate;              // scalar
  Value offset_loss_term;  // scalar
};

/// Full alignment pass: predict, bound, resample. With a freshly initialized
/// head this returns f_t2 bitwise and a zero loss term.
inline Result forward(Tape& t, Value f_t, Value f_t2, const ParamValues& p) {
  OffsetPrediction pred = predict_offsets(t, f_t, f_t2, p);
  Value bounded = bound_offsets(t, pred.raw_offsets, p.delta_max);
  Value aligned = align_features(t, f_t2, bounded, pred.gate);
  Value loss = ops::rms_norm(t, bounded);
  return {aligned, bounded, pred.gate, loss};
}

}  // namespace changekit::align
