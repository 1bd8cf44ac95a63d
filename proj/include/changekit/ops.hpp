#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "changekit/tape.hpp"
#include "changekit/tensor.hpp"

namespace changekit::ops {

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

struct BroadcastPlan {
  std::vector<int> out_shape;
  std::vector<size_t> stride_a, stride_b;  // element strides per out axis; 0 on broadcast axes
};

inline BroadcastPlan broadcast_shapes(const std::vector<int>& a, const std::vector<int>& b) {
  size_t nd = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out_shape.resize(nd);
  std::vector<int> ax(nd, 1), bx(nd, 1);
  std::copy(a.begin(), a.end(), ax.begin() + (nd - a.size()));
  std::copy(b.begin(), b.end(), bx.begin() + (nd - b.size()));
  for (size_t i = 0; i < nd; ++i) {
    if (ax[i] != bx[i] && ax[i] != 1 && bx[i] != 1)
      throw std::invalid_argument("shapes not broadcastable: " + shape_str(a) + " vs " +
                                  shape_str(b));
    p.out_shape[i] = std::max(ax[i], bx[i]);
  }
  p.stride_a.assign(nd, 0);
  p.stride_b.assign(nd, 0);
  size_t sa = 1, sb = 1;
  for (size_t i = nd; i-- > 0;) {
    if (ax[i] != 1) p.stride_a[i] = sa;
    if (bx[i] != 1) p.stride_b[i] = sb;
    sa *= static_cast<size_t>(ax[i]);
    sb *= static_cast<size_t>(bx[i]);
  }
  return p;
}

namespace detail {

// Visit every output element together with the matching flat indices into a and b.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& fn) {
  size_t nd = p.out_shape.size();
  size_t total = shape_numel(p.out_shape);
  std::vector<int> idx(nd, 0);
  size_t ia = 0, ib = 0;
  for (size_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out_shape[d]) break;
      ia -= p.stride_a[d] * static_cast<size_t>(p.out_shape[d]);
      ib -= p.stride_b[d] * static_cast<size_t>(p.out_shape[d]);
      idx[d] = 0;
    }
  }
}

inline Value next_value(const Tape& t) { return Value{static_cast<int>(t.size())}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary (broadcasting)
// ---------------------------------------------------------------------------

enum class BinKind { Add, Sub, Mul, Div };

inline Value binary(Tape& t, BinKind kind, Value a, Value b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  BroadcastPlan plan = broadcast_shapes(va.shape, vb.shape);
  Tensor out = Tensor::zeros(plan.out_shape);
  detail::for_each_broadcast(plan, [&](size_t o, size_t ia, size_t ib) {
    float x = va.data[ia], y = vb.data[ib];
    out.data[o] = kind == BinKind::Add   ? x + y
                  : kind == BinKind::Sub ? x - y
                  : kind == BinKind::Mul ? x * y
                                         : x / y;
  });
  Value self = detail::next_value(t);
  bool scalar_pair = va.numel() == 1 && vb.numel() == 1;
  double fa = scalar_pair ? t.scalar_f64(a) : 0.0, fb = scalar_pair ? t.scalar_f64(b) : 0.0;
  Value rec = t.record(std::move(out), [kind, a, b, plan, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& xa = tp.val(a);
    const Tensor& xb = tp.val(b);
    Tensor& ga = tp.grad(a);
    Tensor& gb = tp.grad(b);
    detail::for_each_broadcast(plan, [&](size_t o, size_t ia, size_t ib) {
      float go = g.data[o];
      switch (kind) {
        case BinKind::Add:
          ga.data[ia] += go;
          gb.data[ib] += go;
          break;
        case BinKind::Sub:
          ga.data[ia] += go;
          gb.data[ib] -= go;
          break;
        case BinKind::Mul:
          ga.data[ia] += go * xb.data[ib];
          gb.data[ib] += go * xa.data[ia];
          break;
        case BinKind::Div: {
          float y = xb.data[ib];
          ga.data[ia] += go / y;
          gb.data[ib] -= go * xa.data[ia] / (y * y);
          break;
        }
      }
    });
  });
  if (scalar_pair)
    t.set_f64(rec, kind == BinKind::Add   ? fa + fb
                   : kind == BinKind::Sub ? fa - fb
                   : kind == BinKind::Mul ? fa * fb
                                          : fa / fb);
  return rec;
}

inline Value add(Tape& t, Value a, Value b) { return binary(t, BinKind::Add, a, b); }
inline Value sub(Tape& t, Value a, Value b) { return binary(t, BinKind::Sub, a, b); }
inline Value mul(Tape& t, Value a, Value b) { return binary(t, BinKind::Mul, a, b); }
inline Value div(Tape& t, Value a, Value b) { return binary(t, BinKind::Div, a, b); }

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

enum class UnKind { Neg, Abs, Tanh, Sigmoid, Relu, Sqrt };

inline Value unary(Tape& t, UnKind kind, Value x) {
  const Tensor& vx = t.val(x);
  Tensor out = Tensor::zeros(vx.shape);
  for (size_t i = 0; i < out.numel(); ++i) {
    float v = vx.data[i];
    switch (kind) {
      case UnKind::Neg: out.data[i] = -v; break;
      case UnKind::Abs:
        out.data[i] = std::fabs(v);
        t.note_branch(v > 0.0f ? 2u : (v < 0.0f ? 1u : 0u));
        break;
      case UnKind::Tanh: out.data[i] = std::tanh(v); break;
      case UnKind::Sigmoid: out.data[i] = 1.0f / (1.0f + std::exp(-v)); break;
      case UnKind::Relu:
        out.data[i] = v > 0.0f ? v : 0.0f;
        t.note_branch(v > 0.0f ? 1u : 0u);
        break;
      case UnKind::Sqrt:
        if (v < 0.0f) throw std::domain_error("sqrt of negative value");
        out.data[i] = std::sqrt(v);
        break;
    }
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [kind, x, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& vx = tp.val(x);
    const Tensor& vy = tp.val(self);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) {
      float go = g.data[i], d = 0.0f;
      switch (kind) {
        case UnKind::Neg: d = -1.0f; break;
        case UnKind::Abs: d = vx.data[i] > 0.0f ? 1.0f : (vx.data[i] < 0.0f ? -1.0f : 0.0f); break;
        case UnKind::Tanh: d = 1.0f - vy.data[i] * vy.data[i]; break;
        case UnKind::Sigmoid: d = vy.data[i] * (1.0f - vy.data[i]); break;
        case UnKind::Relu: d = vx.data[i] > 0.0f ? 1.0f : 0.0f; break;
        case UnKind::Sqrt: d = vy.data[i] > 0.0f ? 0.5f / vy.data[i] : 0.0f; break;
      }
      gx.data[i] += go * d;
    }
  });
}

inline Value neg(Tape& t, Value x) { return unary(t, UnKind::Neg, x); }
inline Value abs(Tape& t, Value x) { return unary(t, UnKind::Abs, x); }
inline Value tanh(Tape& t, Value x) { return unary(t, UnKind::Tanh, x); }
inline Value sigmoid(Tape& t, Value x) { return unary(t, UnKind::Sigmoid, x); }
inline Value relu(Tape& t, Value x) { return unary(t, UnKind::Relu, x); }
inline Value sqrt(Tape& t, Value x) { return unary(t, UnKind::Sqrt, x); }

/// y = c * x
inline Value scale(Tape& t, Value x, float c) {
  const Tensor& vx = t.val(x);
  Tensor out = Tensor::zeros(vx.shape);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = c * vx.data[i];
  Value self = detail::next_value(t);
  Value rec = t.record(std::move(out), [x, c, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += c * g.data[i];
  });
  if (vx.numel() == 1 && t.has_f64(x)) t.set_f64(rec, c * t.scalar_f64(x));
  return rec;
}

/// y = x + c
inline Value add_const(Tape& t, Value x, float c) {
  const Tensor& vx = t.val(x);
  Tensor out = Tensor::zeros(vx.shape);
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] = vx.data[i] + c;
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Value reshape(Tape& t, Value x, std::vector<int> shape) {
  const Tensor& vx = t.val(x);
  if (shape_numel(shape) != vx.numel())
    throw std::invalid_argument("reshape " + shape_str(vx.shape) + " -> " + shape_str(shape) +
                                " changes element count");
  Tensor out(shape, vx.data);
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
}

/// Concatenate C×H×W tensors along the channel axis.
inline Value concat_channels(Tape& t, const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  int H = t.val(parts[0]).dim(1), W = t.val(parts[0]).dim(2);
  int C = 0;
  for (Value p : parts) {
    const Tensor& v = t.val(p);
    if (v.ndim() != 3 || v.dim(1) != H || v.dim(2) != W)
      throw std::invalid_argument("concat: incompatible shape " + shape_str(v.shape));
    C += v.dim(0);
  }
  Tensor out = Tensor::zeros({C, H, W});
  size_t off = 0;
  for (Value p : parts) {
    const Tensor& v = t.val(p);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<long>(off));
    off += v.numel();
  }
  Value self = detail::next_value(t);
  std::vector<Value> ps = parts;
  return t.record(std::move(out), [ps, self](Tape& tp) {
    const Tensor& g = tp.grad(self);
    size_t off = 0;
    for (Value p : ps) {
      Tensor& gp = tp.grad(p);
      for (size_t i = 0; i < gp.numel(); ++i) gp.data[i] += g.data[off + i];
      off += gp.numel();
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Value sum_all(Tape& t, Value x) {
  const Tensor& vx = t.val(x);
  double acc = 0.0;
  for (float v : vx.data) acc += v;  // fixed left-to-right order: deterministic
  Value self = detail::next_value(t);
  Value rec = t.record(Tensor::scalar(static_cast<float>(acc)), [x, self](Tape& tp) {
    float go = tp.grad(self).data[0];
    Tensor& gx = tp.grad(x);
    for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += go;
  });
  t.set_f64(rec, acc);
  return rec;
}

inline Value mean_all(Tape& t, Value x) {
  size_t n = t.val(x).numel();
  return scale(t, sum_all(t, x), 1.0f / static_cast<float>(n));
}

/// Global average pooling: C×H×W -> C (per-channel spatial mean).
inline Value gap(Tape& t, Value x) {
  const Tensor& vx = t.val(x);
  if (vx.ndim() != 3) throw std::invalid_argument("gap expects C×H×W, got " + shape_str(vx.shape));
  int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  size_t hw = static_cast<size_t>(H) * W;
  Tensor out = Tensor::zeros({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (size_t i = 0; i < hw; ++i) acc += vx.data[c * hw + i];
    out.data[c] = static_cast<float>(acc / static_cast<double>(hw));
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self, C, hw](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    float inv = 1.0f / static_cast<float>(hw);
    for (int c = 0; c < C; ++c)
      for (size_t i = 0; i < hw; ++i) gx.data[c * hw + i] += g.data[c] * inv;
  });
}

/// Channel mean: C×H×W -> 1×H×W.
inline Value mean_channels(Tape& t, Value x) {
  const Tensor& vx = t.val(x);
  int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  size_t hw = static_cast<size_t>(H) * W;
  Tensor out = Tensor::zeros({1, H, W});
  for (size_t i = 0; i < hw; ++i) {
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += vx.data[c * hw + i];
    out.data[i] = static_cast<float>(acc / C);
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self, C, hw](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    float inv = 1.0f / static_cast<float>(C);
    for (int c = 0; c < C; ++c)
      for (size_t i = 0; i < hw; ++i) gx.data[c * hw + i] += g.data[i] * inv;
  });
}

/// ||x||_2 / sqrt(numel). Subgradient 0 at the origin.
inline Value rms_norm(Tape& t, Value x) {
  const Tensor& vx = t.val(x);
  double s = 0.0;
  for (float v : vx.data) s += static_cast<double>(v) * v;
  double norm = std::sqrt(s);
  float n = static_cast<float>(vx.numel());
  float out = static_cast<float>(norm / std::sqrt(static_cast<double>(n)));
  Value self = detail::next_value(t);
  Value rec = t.record(Tensor::scalar(out), [x, self, norm, n](Tape& tp) {
    if (norm == 0.0) return;
    float go = tp.grad(self).data[0];
    const Tensor& vx = tp.val(x);
    Tensor& gx = tp.grad(x);
    float k = go / static_cast<float>(norm * std::sqrt(static_cast<double>(n)));
    for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += k * vx.data[i];
  });
  t.set_f64(rec, norm / std::sqrt(static_cast<double>(n)));
  return rec;
}

// ---------------------------------------------------------------------------
// linear layers
// ---------------------------------------------------------------------------

/// y = W x + b with W: out×in, x: in, b: out.
inline Value affine(Tape& t, Value w, Value x, Value b) {
  const Tensor& vw = t.val(w);
  const Tensor& vx = t.val(x);
  const Tensor& vb = t.val(b);
  if (vw.ndim() != 2 || vx.ndim() != 1 || vb.ndim() != 1 || vw.dim(1) != vx.dim(0) ||
      vw.dim(0) != vb.dim(0))
    throw std::invalid_argument("affine: incompatible shapes " + shape_str(vw.shape) + ", " +
                                shape_str(vx.shape) + ", " + shape_str(vb.shape));
  int O = vw.dim(0), I = vw.dim(1);
  Tensor out = Tensor::zeros({O});
  for (int o = 0; o < O; ++o) {
    double acc = vb.data[o];
    for (int i = 0; i < I; ++i) acc += static_cast<double>(vw.data[o * I + i]) * vx.data[i];
    out.data[o] = static_cast<float>(acc);
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [w, x, b, self, O, I](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& vw = tp.val(w);
    const Tensor& vx = tp.val(x);
    Tensor& gw = tp.grad(w);
    Tensor& gx = tp.grad(x);
    Tensor& gb = tp.grad(b);
    for (int o = 0; o < O; ++o) {
      float go = g.data[o];
      gb.data[o] += go;
      for (int i = 0; i < I; ++i) {
        gw.data[o * I + i] += go * vx.data[i];
        gx.data[i] += go * vw.data[o * I + i];
      }
    }
  });
}

/// 2-D cross-correlation with zero padding.
/// x: Cin×H×W, w: Cout×Cin×k×k, b: Cout -> Cout×Ho×Wo.
inline Value conv2d(Tape& t, Value x, Value w, Value b, int stride = 1, int padding = 0) {
  const Tensor& vx = t.val(x);
  const Tensor& vw = t.val(w);
  const Tensor& vb = t.val(b);
  if (vx.ndim() != 3 || vw.ndim() != 4 || vb.ndim() != 1)
    throw std::invalid_argument("conv2d: bad ranks");
  int Cin = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  int Cout = vw.dim(0), k = vw.dim(2);
  if (vw.dim(1) != Cin || vw.dim(3) != k || vb.dim(0) != Cout)
    throw std::invalid_argument("conv2d: incompatible shapes " + shape_str(vx.shape) + " vs " +
                                shape_str(vw.shape));
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if ((H + 2 * padding - k) % stride != 0 || (W + 2 * padding - k) % stride != 0)
    throw std::invalid_argument("conv2d: non-integral output size for input " +
                                shape_str(vx.shape));
  int Ho = (H + 2 * padding - k) / stride + 1;
  int Wo = (W + 2 * padding - k) / stride + 1;
  Tensor out = Tensor::zeros({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co) {
    for (int ho = 0; ho < Ho; ++ho) {
      for (int wo = 0; wo < Wo; ++wo) {
        float acc = vb.data[co];
        int y0 = ho * stride - padding, x0 = wo * stride - padding;
        for (int ci = 0; ci < Cin; ++ci) {
          const float* xp = &vx.data[(static_cast<size_t>(ci) * H) * W];
          const float* wp = &vw.data[((static_cast<size_t>(co) * Cin + ci) * k) * k];
          for (int ky = 0; ky < k; ++ky) {
            int y = y0 + ky;
            if (y < 0 || y >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int xx = x0 + kx;
              if (xx < 0 || xx >= W) continue;
              acc += xp[y * W + xx] * wp[ky * k + kx];
            }
          }
        }
        out.at3(co, ho, wo) = acc;
      }
    }
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out),
                  [x, w, b, self, stride, padding, Cin, H, W, Cout, k, Ho, Wo](Tape& tp) {
                    const Tensor& g = tp.grad(self);
                    const Tensor& vx = tp.val(x);
                    const Tensor& vw = tp.val(w);
                    Tensor& gx = tp.grad(x);
                    Tensor& gw = tp.grad(w);
                    Tensor& gb = tp.grad(b);
                    for (int co = 0; co < Cout; ++co) {
                      for (int ho = 0; ho < Ho; ++ho) {
                        for (int wo = 0; wo < Wo; ++wo) {
                          float go = g.at3(co, ho, wo);
                          if (go == 0.0f) continue;
                          gb.data[co] += go;
                          int y0 = ho * stride - padding, x0 = wo * stride - padding;
                          for (int ci = 0; ci < Cin; ++ci) {
                            const float* xp = &vx.data[(static_cast<size_t>(ci) * H) * W];
                            const float* wp = &vw.data[((static_cast<size_t>(co) * Cin + ci) * k) * k];
                            float* gxp = &gx.data[(static_cast<size_t>(ci) * H) * W];
                            float* gwp = &gw.data[((static_cast<size_t>(co) * Cin + ci) * k) * k];
                            for (int ky = 0; ky < k; ++ky) {
                              int y = y0 + ky;
                              if (y < 0 || y >= H) continue;
                              for (int kx = 0; kx < k; ++kx) {
                                int xx = x0 + kx;
                                if (xx < 0 || xx >= W) continue;
                                gwp[ky * k + kx] += go * xp[y * W + xx];
                                gxp[y * W + xx] += go * wp[ky * k + kx];
                              }
                            }
                          }
                        }
                      }
                    }
                  });
}

/// 2×2 mean pooling, stride 2. Requires even H and W.
inline Value avgpool2(Tape& t, Value x) {
  const Tensor& vx = t.val(x);
  if (vx.ndim() != 3) throw std::invalid_argument("avgpool2 expects C×H×W");
  int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("avgpool2: H and W must be even, got " + shape_str(vx.shape));
  int h = H / 2, w = W / 2;
  Tensor out = Tensor::zeros({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      for (int x2 = 0; x2 < w; ++x2)
        out.at3(c, y, x2) = 0.25f * (vx.at3(c, 2 * y, 2 * x2) + vx.at3(c, 2 * y, 2 * x2 + 1) +
                                     vx.at3(c, 2 * y + 1, 2 * x2) +
                                     vx.at3(c, 2 * y + 1, 2 * x2 + 1));
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self, C, h, w](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2) {
          float go = 0.25f * g.at3(c, y, x2);
          gx.at3(c, 2 * y, 2 * x2) += go;
          gx.at3(c, 2 * y, 2 * x2 + 1) += go;
          gx.at3(c, 2 * y + 1, 2 * x2) += go;
          gx.at3(c, 2 * y + 1, 2 * x2 + 1) += go;
        }
  });
}

// ---------------------------------------------------------------------------
// sampling and filtering
// ---------------------------------------------------------------------------

/// Absolute-pixel identity grid, channel 0 = x, channel 1 = y.
inline Tensor identity_grid(int H, int W) {
  Tensor g = Tensor::zeros({2, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      g.at3(0, y, x) = static_cast<float>(x);
      g.at3(1, y, x) = static_cast<float>(y);
    }
  return g;
}

/// Bilinear interpolation of f at absolute positions; coordinates outside the
/// image are clamped to the border (border-replicate). Differentiable w.r.t.
/// both the feature map and the coordinates. Exact copy at integer positions.
inline Value bilinear_sample(Tape& t, Value f, Value coords) {
  const Tensor& vf = t.val(f);
  const Tensor& vc = t.val(coords);
  if (vf.ndim() != 3 || vc.ndim() != 3 || vc.dim(0) != 2)
    throw std::invalid_argument("bilinear_sample: want f C×H×W and coords 2×Ho×Wo");
  int C = vf.dim(0), H = vf.dim(1), W = vf.dim(2);
  int Ho = vc.dim(1), Wo = vc.dim(2);
  Tensor out = Tensor::zeros({C, Ho, Wo});
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      float cx = vc.at3(0, oy, ox), cy = vc.at3(1, oy, ox);
      float x = std::clamp(cx, 0.0f, static_cast<float>(W - 1));
      float y = std::clamp(cy, 0.0f, static_cast<float>(H - 1));
      int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      float wx = x - static_cast<float>(x0), wy = y - static_cast<float>(y0);
      t.note_branch(static_cast<uint64_t>(y0) * static_cast<uint64_t>(W) + x0 +
                    (cx < 0.0f || cx > static_cast<float>(W - 1) ? 1u << 20 : 0u) +
                    (cy < 0.0f || cy > static_cast<float>(H - 1) ? 1u << 21 : 0u));
      for (int c = 0; c < C; ++c) {
        if (wx == 0.0f && wy == 0.0f) {
          out.at3(c, oy, ox) = vf.at3(c, y0, x0);  // bitwise identity on the lattice
        } else {
          float f00 = vf.at3(c, y0, x0), f01 = vf.at3(c, y0, x1);
          float f10 = vf.at3(c, y1, x0), f11 = vf.at3(c, y1, x1);
          out.at3(c, oy, ox) = (1 - wy) * ((1 - wx) * f00 + wx * f01) +
                               wy * ((1 - wx) * f10 + wx * f11);
        }
      }
    }
  }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [f, coords, self, C, H, W, Ho, Wo](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& vf = tp.val(f);
    const Tensor& vc = tp.val(coords);
    Tensor& gf = tp.grad(f);
    Tensor& gc = tp.grad(coords);
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        float cx = vc.at3(0, oy, ox), cy = vc.at3(1, oy, ox);
        bool clx = cx < 0.0f || cx > static_cast<float>(W - 1);
        bool cly = cy < 0.0f || cy > static_cast<float>(H - 1);
        float x = std::clamp(cx, 0.0f, static_cast<float>(W - 1));
        float y = std::clamp(cy, 0.0f, static_cast<float>(H - 1));
        int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
        int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        float wx = x - static_cast<float>(x0), wy = y - static_cast<float>(y0);
        float dx_acc = 0.0f, dy_acc = 0.0f;
        for (int c = 0; c < C; ++c) {
          float go = g.at3(c, oy, ox);
          if (go == 0.0f) continue;
          float f00 = vf.at3(c, y0, x0), f01 = vf.at3(c, y0, x1);
          float f10 = vf.at3(c, y1, x0), f11 = vf.at3(c, y1, x1);
          gf.at3(c, y0, x0) += go * (1 - wy) * (1 - wx);
          gf.at3(c, y0, x1) += go * (1 - wy) * wx;
          gf.at3(c, y1, x0) += go * wy * (1 - wx);
          gf.at3(c, y1, x1) += go * wy * wx;
          dx_acc += go * ((1 - wy) * (f01 - f00) + wy * (f11 - f10));
          dy_acc += go * ((1 - wx) * (f10 - f00) + wx * (f11 - f01));
        }
        if (!clx) gc.at3(0, oy, ox) += dx_acc;
        if (!cly) gc.at3(1, oy, ox) += dy_acc;
      }
    }
  });
}

/// Mean filter over a win×win window with border replication. win odd.
inline Value box_filter(Tape& t, Value x, int win) {
  const Tensor& vx = t.val(x);
  if (vx.ndim() != 3) throw std::invalid_argument("box_filter expects C×H×W");
  if (win < 1 || win % 2 == 0) throw std::invalid_argument("box_filter: window must be odd");
  int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  int r = win / 2;
  float inv = 1.0f / static_cast<float>(win * win);
  Tensor out = Tensor::zeros({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) {
        float acc = 0.0f;
        for (int dy = -r; dy <= r; ++dy) {
          int yy = std::clamp(y + dy, 0, H - 1);
          for (int dx = -r; dx <= r; ++dx)
            acc += vx.at3(c, yy, std::clamp(x2 + dx, 0, W - 1));
        }
        out.at3(c, y, x2) = acc * inv;
      }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [x, self, C, H, W, r, inv](Tape& tp) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(x);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x2 = 0; x2 < W; ++x2) {
          float go = g.at3(c, y, x2) * inv;
          if (go == 0.0f) continue;
          for (int dy = -r; dy <= r; ++dy) {
            int yy = std::clamp(y + dy, 0, H - 1);
            for (int dx = -r; dx <= r; ++dx)
              gx.at3(c, yy, std::clamp(x2 + dx, 0, W - 1)) += go;
          }
        }
  });
}

/// Per-channel gradient magnitude sqrt(gx^2 + gy^2 + 1e-8): central differences
/// in the interior, one-sided at the borders. Requires H, W >= 2.
inline Value spatial_gradient(Tape& t, Value f) {
  const Tensor& vf = t.val(f);
  if (vf.ndim() != 3) throw std::invalid_argument("spatial_gradient expects C×H×W");
  int C = vf.dim(0), H = vf.dim(1), W = vf.dim(2);
  if (H < 2 || W < 2) throw std::invalid_argument("spatial_gradient needs H, W >= 2");
  constexpr float kEps = 1e-8f;
  auto diff = [](const Tensor& v, int c, int y, int x, int n, bool horiz) -> float {
    // central difference where both neighbours exist, one-sided at borders
    int i = horiz ? x : y;
    if (i > 0 && i < n - 1)
      return 0.5f * (horiz ? v.at3(c, y, x + 1) - v.at3(c, y, x - 1)
                           : v.at3(c, y + 1, x) - v.at3(c, y - 1, x));
    if (i == 0)
      return horiz ? v.at3(c, y, 1) - v.at3(c, y, 0) : v.at3(c, 1, x) - v.at3(c, 0, x);
    return horiz ? v.at3(c, y, n - 1) - v.at3(c, y, n - 2)
                 : v.at3(c, n - 1, x) - v.at3(c, n - 2, x);
  };
  Tensor out = Tensor::zeros({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float gx = diff(vf, c, y, x, W, true);
        float gy = diff(vf, c, y, x, H, false);
        out.at3(c, y, x) = std::sqrt(gx * gx + gy * gy + kEps);
      }
  Value self = detail::next_value(t);
  return t.record(std::move(out), [f, self, C, H, W, diff](Tape& tp) {
    const Tensor& g = tp.grad(self);
    const Tensor& vf = tp.val(f);
    const Tensor& vy = tp.val(self);
    Tensor& gf = tp.grad(f);
    auto scatter = [&](int c, int y, int x, int n, bool horiz, float coeff) {
      int i = horiz ? x : y;
      if (i > 0 && i < n - 1) {
        if (horiz) {
          gf.at3(c, y, x + 1) += 0.5f * coeff;
          gf.at3(c, y, x - 1) -= 0.5f * coeff;
        } else {
          gf.at3(c, y + 1, x) += 0.5f * coeff;
          gf.at3(c, y - 1, x) -= 0.5f * coeff;
        }
      } else if (i == 0) {
        if (horiz) {
          gf.at3(c, y, 1) += coeff;
          gf.at3(c, y, 0) -= coeff;
        } else {
          gf.at3(c, 1, x) += coeff;
          gf.at3(c, 0, x) -= coeff;
        }
      } else {
        if (horiz) {
          gf.at3(c, y, n - 1) += coeff;
          gf.at3(c, y, n - 2) -= coeff;
        } else {
          gf.at3(c, n - 1, x) += coeff;
          gf.at3(c, n - 2, x) -= coeff;
        }
      }
    };
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          float go = g.at3(c, y, x);
          if (go == 0.0f) continue;
          float m = vy.at3(c, y, x);  // > 0 because of the eps term
          float gx = diff(vf, c, y, x, W, true);
          float gyv = diff(vf, c, y, x, H, false);
          scatter(c, y, x, W, true, go * gx / m);
          scatter(c, y, x, H, false, go * gyv / m);
        }
  });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy against a constant target mask. Probabilities are
/// clamped to [1e-6, 1-1e-6] before the logs.
inline Value bce_loss(Tape& t, Value prob, const Tensor& target) {
  const Tensor& vp = t.val(prob);
  require_same_shape(vp, target, "bce_loss");
  constexpr float kLo = 1e-6f, kHi = 1.0f - 1e-6f;
  size_t n = vp.numel();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    float p = std::clamp(vp.data[i], kLo, kHi);
    t.note_branch(p != vp.data[i] ? 1u : 0u);
    float y = target.data[i];
    acc += -(static_cast<double>(y) * std::log(p) + (1.0 - y) * std::log(1.0f - p));
  }
  Value self = detail::next_value(t);
  Tensor tgt = target;
  Value rec = t.record(Tensor::scalar(static_cast<float>(acc / static_cast<double>(n))),
                  [prob, self, tgt = std::move(tgt), n](Tape& tp) {
                    float go = tp.grad(self).data[0] / static_cast<float>(n);
                    const Tensor& vp = tp.val(prob);
                    Tensor& gp = tp.grad(prob);
                    for (size_t i = 0; i < n; ++i) {
                      float p = vp.data[i];
                      if (p <= kLo || p >= kHi) continue;  // clamped: flat
                      gp.data[i] += go * (-tgt.data[i] / p + (1.0f - tgt.data[i]) / (1.0f - p));
                    }
                  });
  t.set_f64(rec, acc / static_cast<double>(n));
  return rec;
}

/// Mean squared difference between two tensors of equal shape.
inline Value mse_loss(Tape& t, Value a, Value b) {
  Value d = sub(t, a, b);
  return mean_all(t, mul(t, d, d));
}

}  // namespace changekit::ops
