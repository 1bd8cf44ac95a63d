#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "changekit/align.hpp"
#include "changekit/amplifier.hpp"
#include "changekit/io.hpp"
#include "changekit/metrics.hpp"
#include "changekit/ops.hpp"
#include "changekit/synth.hpp"

namespace changekit::model {

struct Config {
  int stages = 3;
  int base_channels = 16;
  bool align_enabled = true;
  float delta_max = 3.0f;
  bool amplify_enabled = true;
  int reduction = 4;
  float sparsity_weight = 0.0f;  // weight of the mean-gate penalty, 0 = off
  float offset_weight = 0.01f;   // weight of the offset-norm regularizer
  float threshold = 0.5f;
  float learning_rate = 1e-2f;
  float momentum = 0.9f;
  int batch_size = 4;

  int deep_channels() const { return base_channels << (stages - 1); }
  int downsample_factor() const { return 1 << stages; }

  void validate() const {
    if (stages < 1) throw std::invalid_argument("config: stages must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
    if (!(threshold > 0.0f && threshold < 1.0f))
      throw std::invalid_argument("config: threshold must lie in (0, 1)");
    if (offset_weight < 0.0f || sparsity_weight < 0.0f)
      throw std::invalid_argument("config: loss weights must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const Config& c) {
  j = {{"encoder", {{"stages", c.stages}, {"base_channels", c.base_channels}}},
       {"align", {{"enabled", c.align_enabled}, {"delta_max", c.delta_max}}},
       {"amplify",
        {{"enabled", c.amplify_enabled},
         {"reduction", c.reduction},
         {"sparsity_weight", c.sparsity_weight}}},
       {"loss", {{"offset_weight", c.offset_weight}}},
       {"threshold", c.threshold},
       {"train",
        {{"learning_rate", c.learning_rate},
         {"momentum", c.momentum},
         {"batch_size", c.batch_size}}}};
}

inline void from_json(const nlohmann::json& j, Config& c) {
  Config d;  // defaults for absent keys
  c = d;
  if (j.contains("encoder")) {
    c.stages = j["encoder"].value("stages", d.stages);
    c.base_channels = j["encoder"].value("base_channels", d.base_channels);
  }
  if (j.contains("align")) {
    c.align_enabled = j["align"].value("enabled", d.align_enabled);
    c.delta_max = j["align"].value("delta_max", d.delta_max);
  }
  if (j.contains("amplify")) {
    c.amplify_enabled = j["amplify"].value("enabled", d.amplify_enabled);
    c.reduction = j["amplify"].value("reduction", d.reduction);
    c.sparsity_weight = j["amplify"].value("sparsity_weight", d.sparsity_weight);
  }
  if (j.contains("loss")) c.offset_weight = j["loss"].value("offset_weight", d.offset_weight);
  c.threshold = j.value("threshold", d.threshold);
  if (j.contains("train")) {
    c.learning_rate = j["train"].value("learning_rate", d.learning_rate);
    c.momentum = j["train"].value("momentum", d.momentum);
    c.batch_size = j["train"].value("batch_size", d.batch_size);
  }
  c.validate();
}

/// All learnable tensors. The encoder is siamese: one set of stage convs is
/// applied to both temporal inputs.
struct Params {
  std::vector<Tensor> enc_w, enc_b;  // stage i: c_{i}×c_{i-1}×3×3, stride 2
  Tensor fuse_w, fuse_b;             // C×2C×1×1
  align::Params align;
  amplifier::Params amp;
  Tensor head_w, head_b;  // 1×C×1×1
};

inline Params init_params(const Config& cfg, uint64_t seed) {
  cfg.validate();
  Params p;
  Rng rng(seed, 0xC0DEu);
  auto randn = [&rng](Tensor& t, double std) {
    for (float& v : t.data) v = static_cast<float>(rng.normal() * std);
  };
  int cin = 1;
  for (int s = 0; s < cfg.stages; ++s) {
    int cout = cfg.base_channels << s;
    Tensor w = Tensor::zeros({cout, cin, 3, 3});
    randn(w, std::sqrt(2.0 / (cin * 9.0)));
    p.enc_w.push_back(std::move(w));
    p.enc_b.push_back(Tensor::zeros({cout}));
    cin = cout;
  }
  int C = cfg.deep_channels();
  p.fuse_w = Tensor::zeros({C, 2 * C, 1, 1});
  randn(p.fuse_w, std::sqrt(2.0 / (2.0 * C)));
  p.fuse_b = Tensor::zeros({C});
  Rng arng = rng.split(1), srng = rng.split(2);
  p.align = align::init_params(C, cfg.delta_max, arng);
  p.amp = amplifier::init_params(C, cfg.reduction, cfg.sparsity_weight, srng);
  p.head_w = Tensor::zeros({1, C, 1, 1});
  randn(p.head_w, std::sqrt(2.0 / C));
  p.head_b = Tensor::zeros({1});
  return p;
}

inline std::map<std::string, Tensor*> param_refs(Params& p) {
  std::map<std::string, Tensor*> m;
  for (size_t i = 0; i < p.enc_w.size(); ++i) {
    m["encoder.stage" + std::to_string(i) + ".weight"] = &p.enc_w[i];
    m["encoder.stage" + std::to_string(i) + ".bias"] = &p.enc_b[i];
  }
  m["fuse.weight"] = &p.fuse_w;
  m["fuse.bias"] = &p.fuse_b;
  for (auto& [k, v] : align::param_refs(p.align, "align.")) m[k] = v;
  for (auto& [k, v] : amplifier::param_refs(p.amp, "amplify.")) m[k] = v;
  m["head.weight"] = &p.head_w;
  m["head.bias"] = &p.head_b;
  return m;
}

inline void save_checkpoint(const std::filesystem::path& dir, const Config& cfg, Params& p) {
  std::map<std::string, Tensor> named;
  for (auto& [k, v] : param_refs(p)) named.emplace(k, *v);
  nlohmann::json meta;
  meta["config"] = cfg;
  io::save_params(dir, named, meta);
}

inline std::pair<Config, Params> load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json meta;
  std::map<std::string, Tensor> named = io::load_params(dir, &meta);
  Config cfg = meta.at("config").get<Config>();
  Params p = init_params(cfg, 0);
  for (auto& [k, v] : param_refs(p)) {
    auto it = named.find(k);
    if (it == named.end()) throw std::runtime_error("checkpoint missing tensor: " + k);
    if (it->second.shape != v->shape)
      throw std::runtime_error("checkpoint shape mismatch for " + k);
    *v = it->second;
  }
  return {cfg, p};
}

struct ParamValues {
  std::vector<Value> enc_w, enc_b;
  Value fuse_w, fuse_b;
  align::ParamValues align;
  amplifier::ParamValues amp;
  Value head_w, head_b;
};

inline ParamValues stage_params(Tape& t, const Params& p) {
  ParamValues v;
  for (size_t i = 0; i < p.enc_w.size(); ++i) {
    v.enc_w.push_back(t.leaf(p.enc_w[i]));
    v.enc_b.push_back(t.leaf(p.enc_b[i]));
  }
  v.fuse_w = t.leaf(p.fuse_w);
  v.fuse_b = t.leaf(p.fuse_b);
  v.align = align::stage(t, p.align);
  v.amp = amplifier::stage(t, p.amp);
  v.head_w = t.leaf(p.head_w);
  v.head_b = t.leaf(p.head_b);
  return v;
}

/// Siamese encoder: 3×3 conv + relu + 2×2 mean pool per stage, channels
/// doubling, resolution halving.
inline Value encode(Tape& t, Value image, const Config& cfg, const ParamValues& pv) {
  const Tensor& im = t.val(image);
  if (im.ndim() != 3 || im.dim(0) != 1)
    throw std::invalid_argument("encode expects a 1×H×W image");
  int f = cfg.downsample_factor();
  if (im.dim(1) % f != 0 || im.dim(2) % f != 0)
    throw std::invalid_argument("encode: image size " + shape_str(im.shape) +
                                " not divisible by " + std::to_string(f));
  Value x = image;
  for (int s = 0; s < cfg.stages; ++s)
    x = ops::avgpool2(t, ops::relu(t, ops::conv2d(t, x, pv.enc_w[s], pv.enc_b[s], 1, 1)));
  return x;
}

struct ForwardOut {
  Value prob;  // 1×H'×W'
  std::optional<align::Result> alignment;
  std::optional<amplifier::State> amp_state;
};

/// Full pipeline: encode both inputs, optionally align T2 features toward T1,
/// fuse, optionally amplify, classify.
inline ForwardOut forward(Tape& t, Value t1, Value t2, const Config& cfg,
                          const ParamValues& pv) {
  ForwardOut out;
  Value f1 = encode(t, t1, cfg, pv);
  Value f2 = encode(t, t2, cfg, pv);
  Value f2a = f2;
  if (cfg.align_enabled) {
    out.alignment = align::forward(t, f1, f2, pv.align);
    f2a = out.alignment->aligned;
  }
  Value fused = ops::relu(
      t, ops::conv2d(t, ops::concat_channels(t, {f1, f2a}), pv.fuse_w, pv.fuse_b, 1, 0));
  Value feat = fused;
  if (cfg.amplify_enabled) {
    out.amp_state = amplifier::forward(t, f1, f2a, fused, pv.amp);
    feat = out.amp_state->amplified;
  }
  out.prob = ops::sigmoid(t, ops::conv2d(t, feat, pv.head_w, pv.head_b, 1, 0));
  return out;
}

/// Strict area-majority downsample of a binary H×W mask by integer factor f.
inline Tensor downsample_mask(const Tensor& mask, int f) {
  int H = mask.dim(0), W = mask.dim(1);
  if (H % f != 0 || W % f != 0)
    throw std::invalid_argument("downsample_mask: size not divisible by factor");
  int h = H / f, w = W / f;
  Tensor out = Tensor::zeros({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int count = 0;
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx)
          if (mask.at2(y * f + dy, x * f + dx) != 0.0f) ++count;
      out.at3(0, y, x) = (2 * count > f * f) ? 1.0f : 0.0f;
    }
  return out;
}

/// Nearest-neighbor upsample of a 1×h×w map by integer factor f.
inline Tensor upsample_nearest(const Tensor& map, int f) {
  int h = map.dim(1), w = map.dim(2);
  Tensor out = Tensor::zeros({1, h * f, w * f});
  for (int y = 0; y < h * f; ++y)
    for (int x = 0; x < w * f; ++x) out.at3(0, y, x) = map.at3(0, y / f, x / f);
  return out;
}

struct LossOut {
  Value total;
  float cls = 0.0f, off = 0.0f, sparse = 0.0f;
};

/// L = BCE(prob, gt) + w_off * ||offsets|| + w_sparse * mean(M).
inline LossOut total_loss(Tape& t, const ForwardOut& fw, const Tensor& gt_down,
                          const Config& cfg) {
  LossOut lo;
  Value loss = ops::bce_loss(t, fw.prob, gt_down);
  lo.cls = t.val(loss).item();
  if (cfg.align_enabled && cfg.offset_weight > 0.0f) {
    Value off = fw.alignment->offset_loss_term;
    lo.off = t.val(off).item();
    loss = ops::add(t, loss, ops::scale(t, off, cfg.offset_weight));
  }
  if (cfg.amplify_enabled && cfg.sparsity_weight > 0.0f) {
    Value sp = amplifier::gate_sparsity_loss(t, fw.amp_state->gate_map);
    lo.sparse = t.val(sp).item();
    loss = ops::add(t, loss, ops::scale(t, sp, cfg.sparsity_weight));
  }
  if (!t.val(loss).all_finite()) throw std::runtime_error("total_loss: non-finite loss");
  lo.total = loss;
  return lo;
}

struct TrainRecord {
  int step;
  float total, cls, off, sparse;
};

struct TrainState {
  int step = 0;
  Params params;
  std::map<std::string, Tensor> moments;
  uint64_t seed = 0;
  std::vector<TrainRecord> history;
  bool diverged = false;
};

/// Plain SGD with momentum over the train split, deterministic sample order
/// derived from the seed. Aborts on divergence, keeping the last good params.
inline TrainState train(const Config& cfg, const synth::LoadedDataset& ds, int steps,
                        uint64_t seed,
                        const std::filesystem::path& checkpoint_dir = {},
                        int checkpoint_every = 0) {
  cfg.validate();
  if (ds.split.train.empty()) throw std::invalid_argument("train: empty train split");
  TrainState st;
  st.seed = seed;
  st.params = init_params(cfg, seed);
  auto refs = param_refs(st.params);
  for (auto& [k, v] : refs) st.moments.emplace(k, Tensor::zeros(v->shape));

  Rng order_rng(seed, 0x0EDE);
  std::vector<int> order = ds.split.train;
  order_rng.shuffle(order.begin(), order.end());
  size_t cursor = 0;
  int f = cfg.downsample_factor();

  Params last_good = st.params;
  for (int step = 0; step < steps; ++step) {
    Tape t;
    ParamValues pv = stage_params(t, st.params);
    Value batch_loss{};
    float cls = 0, off = 0, sparse = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        cursor = 0;
        order_rng.shuffle(order.begin(), order.end());
      }
      const synth::LoadedSample& s = ds.samples[static_cast<size_t>(order[cursor++])];
      ForwardOut fw = forward(t, t.leaf(s.t1), t.leaf(s.t2), cfg, pv);
      LossOut lo = total_loss(t, fw, downsample_mask(s.mask, f), cfg);
      cls += lo.cls;
      off += lo.off;
      sparse += lo.sparse;
      batch_loss = b == 0 ? lo.total : ops::add(t, batch_loss, lo.total);
    }
    Value loss = ops::scale(t, batch_loss, 1.0f / static_cast<float>(cfg.batch_size));
    float total = t.val(loss).item();
    if (!std::isfinite(total) || total > 1e3f) {
      st.diverged = true;
      st.params = last_good;
      break;
    }
    t.backward(loss);

    // gather gradients through the staged handles, then SGD + momentum in
    // fixed map order
    std::map<std::string, const Tensor*> grads;
    {
      Params& p = st.params;
      size_t i = 0;
      for (; i < p.enc_w.size(); ++i) {
        grads["encoder.stage" + std::to_string(i) + ".weight"] = &t.grad(pv.enc_w[i]);
        grads["encoder.stage" + std::to_string(i) + ".bias"] = &t.grad(pv.enc_b[i]);
      }
      grads["fuse.weight"] = &t.grad(pv.fuse_w);
      grads["fuse.bias"] = &t.grad(pv.fuse_b);
      grads["align.offset_head.conv1.weight"] = &t.grad(pv.align.conv1_w);
      grads["align.offset_head.conv1.bias"] = &t.grad(pv.align.conv1_b);
      grads["align.offset_head.conv2.weight"] = &t.grad(pv.align.conv2_w);
      grads["align.offset_head.conv2.bias"] = &t.grad(pv.align.conv2_b);
      grads["align.gate_head.weight"] = &t.grad(pv.align.gate_w);
      grads["align.gate_head.bias"] = &t.grad(pv.align.gate_b);
      grads["amplify.gate_net.conv1.weight"] = &t.grad(pv.amp.gate1_w);
      grads["amplify.gate_net.conv1.bias"] = &t.grad(pv.amp.gate1_b);
      grads["amplify.gate_net.conv2.weight"] = &t.grad(pv.amp.gate2_w);
      grads["amplify.gate_net.conv2.bias"] = &t.grad(pv.amp.gate2_b);
      grads["amplify.channel_mlp.w1"] = &t.grad(pv.amp.mlp_w1);
      grads["amplify.channel_mlp.b1"] = &t.grad(pv.amp.mlp_b1);
      grads["amplify.channel_mlp.w2"] = &t.grad(pv.amp.mlp_w2);
      grads["amplify.channel_mlp.b2"] = &t.grad(pv.amp.mlp_b2);
      grads["amplify.alpha"] = &t.grad(pv.amp.alpha);
      grads["head.weight"] = &t.grad(pv.head_w);
      grads["head.bias"] = &t.grad(pv.head_b);
    }
    for (auto& [name, tensor] : refs) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = *git->second;
      Tensor& m = st.moments.at(name);
      for (size_t i = 0; i < tensor->numel(); ++i) {
        m.data[i] = cfg.momentum * m.data[i] + g.data[i];
        tensor->data[i] -= cfg.learning_rate * m.data[i];
      }
    }
    last_good = st.params;
    st.step = step + 1;
    st.history.push_back({step, total, cls / cfg.batch_size, off / cfg.batch_size,
                          sparse / cfg.batch_size});
    if (checkpoint_every > 0 && !checkpoint_dir.empty() && (step + 1) % checkpoint_every == 0)
      save_checkpoint(checkpoint_dir, cfg, st.params);
  }
  return st;
}

/// Threshold probabilities, upsample nearest to full resolution, accumulate a
/// single global confusion matrix over the given sample indices.
inline metrics::MetricReport evaluate(const Config& cfg, const Params& params,
                                      const synth::LoadedDataset& ds,
                                      const std::vector<int>& indices, float threshold,
                                      metrics::ConfusionMatrix* cm_out = nullptr,
                                      std::vector<metrics::ConfusionMatrix>* per_image = nullptr) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty index set");
  metrics::ConfusionMatrix cm;
  for (int idx : indices) {
    const synth::LoadedSample& s = ds.samples.at(static_cast<size_t>(idx));
    Tape t;
    ParamValues pv = stage_params(t, params);
    ForwardOut fw = forward(t, t.leaf(s.t1), t.leaf(s.t2), cfg, pv);
    const Tensor& prob = t.val(fw.prob);
    Tensor pred_low = Tensor::zeros(prob.shape);
    for (size_t i = 0; i < prob.numel(); ++i)
      pred_low.data[i] = prob.data[i] > threshold ? 1.0f : 0.0f;
    Tensor pred = upsample_nearest(pred_low, cfg.downsample_factor());
    Tensor pred2(std::vector<int>{pred.dim(1), pred.dim(2)}, pred.data);
    metrics::ConfusionMatrix one = metrics::confusion(pred2, s.mask);
    if (per_image) per_image->push_back(one);
    cm += one;
  }
  if (cm_out) *cm_out = cm;
  return metrics::metrics_from_cm(cm);
}

/// Inference on a single pair already in memory. Returns the full-resolution
/// binary mask plus the low-resolution probability map.
struct InferOut {
  Tensor mask;       // 1×H×W binary
  Tensor prob;       // 1×h×w
  Tensor gate_map;   // 1×h×w (empty when the amplifier is disabled)
  Tensor dssim_map;  // 1×h×w (empty when the amplifier is disabled)
};

inline InferOut infer(const Config& cfg, const Params& params, const Tensor& t1,
                      const Tensor& t2, float threshold) {
  require_same_shape(t1, t2, "infer");
  Tape t;
  ParamValues pv = stage_params(t, params);
  ForwardOut fw = forward(t, t.leaf(t1), t.leaf(t2), cfg, pv);
  InferOut out;
  out.prob = t.val(fw.prob);
  Tensor pred_low = Tensor::zeros(out.prob.shape);
  for (size_t i = 0; i < out.prob.numel(); ++i)
    pred_low.data[i] = out.prob.data[i] > threshold ? 1.0f : 0.0f;
  out.mask = upsample_nearest(pred_low, cfg.downsample_factor());
  if (fw.amp_state) {
    out.gate_map = t.val(fw.amp_state->gate_map);
    const Tensor& cues = t.val(fw.amp_state->cues);
    int C = (cues.dim(0) - 1) / 3;
    int h = cues.dim(1), w = cues.dim(2);
    out.dssim_map = Tensor::zeros({1, h, w});
    size_t off = static_cast<size_t>(3 * C) * h * w;  // last cue channel
    std::copy(cues.data.begin() + static_cast<long>(off), cues.data.end(),
              out.dssim_map.data.begin());
  }
  return out;
}

inline nlohmann::json report_json(const metrics::MetricReport& r,
                                  const metrics::ConfusionMatrix& cm) {
  nlohmann::json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["oa"] = r.oa;
  j["f1"] = r.f1;
  j["iou"] = r.iou;
  j["kappa"] = r.kappa;
  j["counts"] = {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
  j["degenerate_flags"] = r.degenerate_flags;
  return j;
}

}  // namespace changekit::model
