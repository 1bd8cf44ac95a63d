#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "changekit/io.hpp"
#include "changekit/rng.hpp"
#include "changekit/tensor.hpp"

namespace changekit::synth {

enum class WarpKind { None, Translation, Affine, SmoothField };

inline std::string to_string(WarpKind k) {
  switch (k) {
    case WarpKind::None: return "none";
    case WarpKind::Translation: return "translation";
    case WarpKind::Affine: return "affine";
    case WarpKind::SmoothField: return "smooth-field";
  }
  return "none";
}

inline WarpKind warp_kind_from(const std::string& s) {
  if (s == "none") return WarpKind::None;
  if (s == "translation") return WarpKind::Translation;
  if (s == "affine") return WarpKind::Affine;
  if (s == "smooth-field") return WarpKind::SmoothField;
  throw std::invalid_argument("unknown warp kind: " + s);
}

enum class ChangeShape { Rect, Disk };

struct SceneSpec {
  uint64_t seed = 0;
  int height = 96, width = 96;
  int n_background_blobs = 24;
  WarpKind warp = WarpKind::Translation;
  float max_displacement = 2.0f;  // pixels
  float gain_lo = 1.0f, gain_hi = 1.0f;
  float bias_lo = 0.0f, bias_hi = 0.0f;
  float noise_std = 0.0f;
  int n_objects = 2;
  int object_size_lo = 8, object_size_hi = 16;  // pixels
  ChangeShape shape = ChangeShape::Rect;

  void validate() const {
    if (height < 2 || width < 2) throw std::invalid_argument("scene size too small");
    if (max_displacement < 0) throw std::invalid_argument("max_displacement must be >= 0");
    if (noise_std < 0) throw std::invalid_argument("noise_std must be >= 0");
    if (gain_hi < gain_lo || bias_hi < bias_lo || object_size_hi < object_size_lo)
      throw std::invalid_argument("ill-ordered range in scene spec");
  }
};

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"seed", s.seed},
       {"size", {s.height, s.width}},
       {"n_background_blobs", s.n_background_blobs},
       {"warp", {{"kind", to_string(s.warp)}, {"max_displacement", s.max_displacement}}},
       {"radiometric",
        {{"gain_range", {s.gain_lo, s.gain_hi}},
         {"bias_range", {s.bias_lo, s.bias_hi}},
         {"noise_std", s.noise_std}}},
       {"changes",
        {{"n_objects", s.n_objects},
         {"size_range", {s.object_size_lo, s.object_size_hi}},
         {"shape", s.shape == ChangeShape::Rect ? "rect" : "disk"}}}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.seed = j.at("seed").get<uint64_t>();
  s.height = j.at("size")[0];
  s.width = j.at("size")[1];
  s.n_background_blobs = j.at("n_background_blobs");
  s.warp = warp_kind_from(j.at("warp").at("kind"));
  s.max_displacement = j.at("warp").at("max_displacement");
  const auto& r = j.at("radiometric");
  s.gain_lo = r.at("gain_range")[0];
  s.gain_hi = r.at("gain_range")[1];
  s.bias_lo = r.at("bias_range")[0];
  s.bias_hi = r.at("bias_range")[1];
  s.noise_std = r.at("noise_std");
  const auto& c = j.at("changes");
  s.n_objects = c.at("n_objects");
  s.object_size_lo = c.at("size_range")[0];
  s.object_size_hi = c.at("size_range")[1];
  s.shape = c.at("shape") == "disk" ? ChangeShape::Disk : ChangeShape::Rect;
}

struct SceneSample {
  Tensor t1;             // 1×H×W in [0,1]
  Tensor t2;             // 1×H×W in [0,1]
  Tensor change_mask;    // H×W binary
  Tensor true_warp;      // 2×H×W displacement applied to produce t2
  float clip_fraction = 0.0f;
  SceneSpec spec;
};

namespace detail {

inline Tensor blob_texture(int H, int W, int n_blobs, Rng& rng) {
  Tensor img = Tensor::full({1, H, W}, 0.5f);
  for (int b = 0; b < n_blobs; ++b) {
    double cx = rng.uniform(0.0, W - 1.0);
    double cy = rng.uniform(0.0, H - 1.0);
    double sigma = rng.uniform(3.0, 0.25 * std::min(H, W));
    double amp = rng.uniform(-0.45, 0.45);
    double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img.at3(0, y, x) += static_cast<float>(amp * std::exp(-d2 * inv2s2));
      }
  }
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline Tensor make_warp(const SceneSpec& s, Rng& rng) {
  int H = s.height, W = s.width;
  Tensor w = Tensor::zeros({2, H, W});
  float d = s.max_displacement;
  if (s.warp == WarpKind::None || d == 0.0f) return w;
  switch (s.warp) {
    case WarpKind::Translation: {
      double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      float dx = static_cast<float>(d * std::cos(ang));
      float dy = static_cast<float>(d * std::sin(ang));
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          w.at3(0, y, x) = dx;
          w.at3(1, y, x) = dy;
        }
      break;
    }
    case WarpKind::Affine: {
      // small rotation + scale about the center, then normalized to the bound
      double theta = rng.uniform(-0.02, 0.02);
      double scale = 1.0 + rng.uniform(-0.01, 0.01);
      double cx = 0.5 * (W - 1), cy = 0.5 * (H - 1);
      double maxmag = 0.0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double rx = x - cx, ry = y - cy;
          double nx = scale * (std::cos(theta) * rx - std::sin(theta) * ry);
          double ny = scale * (std::sin(theta) * rx + std::cos(theta) * ry);
          w.at3(0, y, x) = static_cast<float>(nx - rx);
          w.at3(1, y, x) = static_cast<float>(ny - ry);
          maxmag = std::max({maxmag, std::fabs(nx - rx), std::fabs(ny - ry)});
        }
      if (maxmag > 0.0)
        for (float& v : w.data) v = static_cast<float>(v * (d / maxmag));
      break;
    }
    case WarpKind::SmoothField: {
      // sum of <= 4 low-frequency sinusoidal components, amplitude-normalized
      int ncomp = rng.uniform_int(2, 4);
      double maxmag = 0.0;
      std::vector<double> fx(ncomp), fy(ncomp), ph(ncomp), ax(ncomp), ay(ncomp);
      for (int i = 0; i < ncomp; ++i) {
        fx[i] = rng.uniform(0.5, 2.0) * 2.0 * 3.14159265358979323846 / W;
        fy[i] = rng.uniform(0.5, 2.0) * 2.0 * 3.14159265358979323846 / H;
        ph[i] = rng.uniform(0.0, 6.28318);
        ax[i] = rng.uniform(-1.0, 1.0);
        ay[i] = rng.uniform(-1.0, 1.0);
      }
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double ux = 0.0, uy = 0.0;
          for (int i = 0; i < ncomp; ++i) {
            double s0 = std::sin(fx[i] * x + fy[i] * y + ph[i]);
            ux += ax[i] * s0;
            uy += ay[i] * s0;
          }
          w.at3(0, y, x) = static_cast<float>(ux);
          w.at3(1, y, x) = static_cast<float>(uy);
          maxmag = std::max({maxmag, std::fabs(ux), std::fabs(uy)});
        }
      if (maxmag > 0.0)
        for (float& v : w.data) v = static_cast<float>(v * (d / maxmag));
      break;
    }
    default: break;
  }
  return w;
}

/// Backward warp: out(x) = img(x + warp(x)), bilinear, border replicate.
inline Tensor warp_image(const Tensor& img, const Tensor& warp) {
  int H = img.dim(1), W = img.dim(2);
  Tensor out = Tensor::zeros(img.shape);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float sx = std::clamp(x + warp.at3(0, y, x), 0.0f, static_cast<float>(W - 1));
      float sy = std::clamp(y + warp.at3(1, y, x), 0.0f, static_cast<float>(H - 1));
      int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      float wx = sx - x0, wy = sy - y0;
      if (wx == 0.0f && wy == 0.0f) {
        out.at3(0, y, x) = img.at3(0, y0, x0);
      } else {
        out.at3(0, y, x) = (1 - wy) * ((1 - wx) * img.at3(0, y0, x0) + wx * img.at3(0, y0, x1)) +
                           wy * ((1 - wx) * img.at3(0, y1, x0) + wx * img.at3(0, y1, x1));
      }
    }
  return out;
}

}  // namespace detail

/// Deterministic scene synthesis: T1 is a smooth blob texture; T2 is T1
/// geometrically warped, radiometrically jittered, with change objects painted
/// after warping and recorded in the mask. Pure function of the spec.
inline SceneSample gen_scene(const SceneSpec& spec) {
  spec.validate();
  int H = spec.height, W = spec.width;
  Rng base(spec.seed);
  Rng rng_bg = base.split(1), rng_warp = base.split(2), rng_rad = base.split(3),
      rng_obj = base.split(4);

  SceneSample s;
  s.spec = spec;
  s.t1 = detail::blob_texture(H, W, spec.n_background_blobs, rng_bg);
  s.true_warp = detail::make_warp(spec, rng_warp);

  bool identity_warp = spec.warp == WarpKind::None || spec.max_displacement == 0.0f;
  s.t2 = identity_warp ? s.t1 : detail::warp_image(s.t1, s.true_warp);

  // radiometric jitter
  float gain = static_cast<float>(rng_rad.uniform(spec.gain_lo, spec.gain_hi));
  float bias = static_cast<float>(rng_rad.uniform(spec.bias_lo, spec.bias_hi));
  if (gain != 1.0f || bias != 0.0f)
    for (float& v : s.t2.data) v = gain * v + bias;
  if (spec.noise_std > 0.0f)
    for (float& v : s.t2.data) v += static_cast<float>(rng_rad.normal() * spec.noise_std);

  // change objects, painted post-warp
  s.change_mask = Tensor::zeros({H, W});
  for (int o = 0; o < spec.n_objects; ++o) {
    int size = rng_obj.uniform_int(spec.object_size_lo, spec.object_size_hi);
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      int cx = rng_obj.uniform_int(0, W - 1);
      int cy = rng_obj.uniform_int(0, H - 1);
      if (cx - size / 2 < 0 || cy - size / 2 < 0 || cx + size / 2 >= W || cy + size / 2 >= H)
        continue;
      float delta = static_cast<float>(rng_obj.uniform(0.25, 0.55)) *
                    (rng_obj.uniform() < 0.5 ? -1.0f : 1.0f);
      int r = size / 2;
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x) {
          if (spec.shape == ChangeShape::Disk &&
              (x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r)
            continue;
          s.t2.at3(0, y, x) += delta;
          s.change_mask.at2(y, x) = 1.0f;
        }
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("gen_scene: could not place change object after 64 attempts");
  }

  // clip and record how much was lost
  size_t clipped = 0;
  for (float& v : s.t2.data) {
    if (v < 0.0f || v > 1.0f) ++clipped;
    v = std::clamp(v, 0.0f, 1.0f);
  }
  s.clip_fraction = static_cast<float>(clipped) / static_cast<float>(s.t2.numel());
  return s;
}

struct DatasetSplit {
  std::vector<int> train, val, test;
};

/// Index-range split, 8:1:1 by default.
inline DatasetSplit split_indices(int n, int train_per_10 = 8, int val_per_10 = 1) {
  DatasetSplit sp;
  int n_train = n * train_per_10 / 10;
  int n_val = n * val_per_10 / 10;
  if (n_train == 0) n_train = std::max(1, n - 2);
  for (int i = 0; i < n; ++i) {
    if (i < n_train)
      sp.train.push_back(i);
    else if (i < n_train + n_val)
      sp.val.push_back(i);
    else
      sp.test.push_back(i);
  }
  return sp;
}

/// Generate n samples (seed = base_seed + i), write PGM images, TNSR warp
/// fields, and a JSON manifest that allows bitwise regeneration.
inline void gen_dataset(const std::filesystem::path& dir, uint64_t base_seed, int n,
                        SceneSpec spec_template, int train_per_10 = 8, int val_per_10 = 1) {
  if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "changekit-dataset-v1";
  manifest["base_seed"] = base_seed;
  manifest["n"] = n;
  nlohmann::json samples = nlohmann::json::array();
  char name[64];
  for (int i = 0; i < n; ++i) {
    SceneSpec spec = spec_template;
    spec.seed = base_seed + static_cast<uint64_t>(i);
    SceneSample s = gen_scene(spec);
    std::snprintf(name, sizeof(name), "%04d", i);
    std::string stem = name;
    io::write_pgm(dir / (stem + "_t1.pgm"), s.t1);
    io::write_pgm(dir / (stem + "_t2.pgm"), s.t2);
    io::write_pgm(dir / (stem + "_mask.pgm"), s.change_mask);
    io::write_tensor(dir / (stem + "_warp.tnsr"), s.true_warp);
    nlohmann::json e;
    e["index"] = i;
    e["spec"] = spec;
    e["clip_fraction"] = s.clip_fraction;
    e["t1"] = stem + "_t1.pgm";
    e["t2"] = stem + "_t2.pgm";
    e["mask"] = stem + "_mask.pgm";
    e["warp"] = stem + "_warp.tnsr";
    samples.push_back(std::move(e));
  }
  manifest["samples"] = std::move(samples);
  DatasetSplit sp = split_indices(n, train_per_10, val_per_10);
  manifest["split"] = {{"train", sp.train}, {"val", sp.val}, {"test", sp.test}};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write dataset manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

/// A dataset as loaded for training/evaluation: images in [0,1], binary masks.
struct LoadedSample {
  Tensor t1, t2;  // 1×H×W
  Tensor mask;    // H×W binary
};

struct LoadedDataset {
  std::vector<LoadedSample> samples;
  DatasetSplit split;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  LoadedDataset ds;
  for (const auto& e : manifest.at("samples")) {
    LoadedSample s;
    s.t1 = io::read_pgm(dir / e.at("t1").get<std::string>());
    s.t2 = io::read_pgm(dir / e.at("t2").get<std::string>());
    Tensor m = io::read_pgm(dir / e.at("mask").get<std::string>());
    s.mask = Tensor::zeros({m.dim(1), m.dim(2)});
    for (size_t i = 0; i < m.numel(); ++i) s.mask.data[i] = m.data[i] > 0.5f ? 1.0f : 0.0f;
    ds.samples.push_back(std::move(s));
  }
  const auto& sp = manifest.at("split");
  ds.split.train = sp.at("train").get<std::vector<int>>();
  ds.split.val = sp.at("val").get<std::vector<int>>();
  ds.split.test = sp.at("test").get<std::vector<int>>();
  return ds;
}

}  // namespace changekit::synth
