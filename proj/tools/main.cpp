// changekit command-line driver: dataset synthesis, training, evaluation,
// single-pair inference, gradient checking, and report visualization.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "changekit/gradcheck_suite.hpp"
#include "changekit/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace changekit;

namespace {

model::Config load_config(const std::string& path) {
  if (path.empty()) return model::Config{};
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  return json::parse(f).get<model::Config>();
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

int cmd_synth(const std::string& out, int n, uint64_t seed, const std::string& warp,
              float max_disp, float noise_std, int size) {
  synth::SceneSpec spec;
  spec.warp = synth::warp_kind_from(warp);
  spec.max_displacement = max_disp;
  spec.noise_std = noise_std;
  spec.height = spec.width = size;
  synth::gen_dataset(out, seed, n, spec);
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config_path, int steps,
              uint64_t seed, const std::string& out, int checkpoint_every) {
  model::Config cfg = load_config(config_path);
  synth::LoadedDataset ds = synth::load_dataset(data);
  model::TrainState st = model::train(cfg, ds, steps, seed, out, checkpoint_every);
  model::save_checkpoint(out, cfg, st.params);
  if (st.diverged) {
    std::cerr << "error: training diverged at step " << st.step
              << "; last good checkpoint written to " << out << "\n";
    return 2;
  }
  if (!st.history.empty()) {
    const model::TrainRecord& last = st.history.back();
    std::cout << "trained " << st.step << " steps, final loss " << last.total << " (cls "
              << last.cls << ", off " << last.off << ", sparse " << last.sparse << ")\n";
  }
  std::cout << "checkpoint written to " << out << "\n";
  return 0;
}

const std::vector<int>& pick_split(const synth::LoadedDataset& ds, const std::string& name,
                                   std::vector<int>& all_storage) {
  if (name == "train") return ds.split.train;
  if (name == "val") return ds.split.val;
  if (name == "test") return ds.split.test;
  if (name == "all") {
    for (size_t i = 0; i < ds.samples.size(); ++i) all_storage.push_back(static_cast<int>(i));
    return all_storage;
  }
  throw std::invalid_argument("unknown split: " + name);
}

int cmd_eval(const std::string& data, const std::string& ckpt, float threshold,
             const std::string& report, const std::string& split,
             const std::string& csv_path) {
  auto [cfg, params] = model::load_checkpoint(ckpt);
  if (threshold > 0.0f) cfg.threshold = threshold;
  synth::LoadedDataset ds = synth::load_dataset(data);
  std::vector<int> all;
  const std::vector<int>& idx = pick_split(ds, split, all);
  metrics::ConfusionMatrix cm;
  std::vector<metrics::ConfusionMatrix> per_image;
  metrics::MetricReport r =
      model::evaluate(cfg, params, ds, idx, cfg.threshold, &cm, &per_image);
  json j = model::report_json(r, cm);
  j["threshold"] = cfg.threshold;
  j["split"] = split;
  j["n_images"] = idx.size();
  j["data"] = data;
  j["ckpt"] = ckpt;
  write_json_file(report, j);
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << "index,tp,fp,fn,tn,precision,recall,f1\n";
    for (size_t k = 0; k < per_image.size(); ++k) {
      metrics::MetricReport ri = metrics::metrics_from_cm(per_image[k]);
      csv << idx[k] << "," << per_image[k].tp << "," << per_image[k].fp << ","
          << per_image[k].fn << "," << per_image[k].tn << "," << ri.precision << ","
          << ri.recall << "," << ri.f1 << "\n";
    }
  }
  std::printf("P=%.4f R=%.4f OA=%.4f F1=%.4f IoU=%.4f Kappa=%.4f (%zu images)\n",
              r.precision, r.recall, r.oa, r.f1, r.iou, r.kappa, idx.size());
  std::cout << "report written to " << report << "\n";
  return 0;
}

int cmd_infer(const std::string& t1_path, const std::string& t2_path,
              const std::string& ckpt, const std::string& out, float threshold,
              const std::string& debug_dir) {
  auto [cfg, params] = model::load_checkpoint(ckpt);
  if (threshold > 0.0f) cfg.threshold = threshold;
  Tensor t1 = io::read_pgm(t1_path);
  Tensor t2 = io::read_pgm(t2_path);
  model::InferOut r = model::infer(cfg, params, t1, t2, cfg.threshold);
  Tensor mask2(std::vector<int>{r.mask.dim(1), r.mask.dim(2)}, r.mask.data);
  io::write_pgm(out, mask2);
  if (!debug_dir.empty()) {
    fs::create_directories(debug_dir);
    io::write_pgm(fs::path(debug_dir) / "prob.pgm", r.prob);
    if (!r.gate_map.data.empty()) {
      io::write_pgm(fs::path(debug_dir) / "gate.pgm", r.gate_map);
      io::write_pgm(fs::path(debug_dir) / "dssim.pgm", r.dssim_map);
    }
  }
  size_t on = 0;
  for (float v : r.mask.data) on += v != 0.0f;
  std::printf("mask written to %s (change fraction %.4f)\n", out.c_str(),
              static_cast<double>(on) / static_cast<double>(r.mask.numel()));
  return 0;
}

int cmd_gradcheck(const std::string& op, uint64_t seed, int n_seeds) {
  bool any = false, all_passed = true;
  for (const auto& [name, fn] : gradcheck_registry()) {
    if (!op.empty() && name != op) continue;
    any = true;
    double worst = 0.0;
    size_t checked = 0, excluded = 0;
    bool passed = true;
    for (int k = 0; k < n_seeds; ++k) {
      GradReport r = fn(seed + static_cast<uint64_t>(k));
      worst = std::max(worst, r.max_rel_err);
      checked += r.checked;
      excluded += r.excluded;
      passed = passed && r.passed;
    }
    all_passed = all_passed && passed;
    std::printf("%-22s %s  max_rel_err=%.3e checked=%zu excluded=%zu\n", name.c_str(),
                passed ? "ok  " : "FAIL", worst, checked, excluded);
  }
  if (!any) throw std::invalid_argument("unknown op: " + op);
  return all_passed ? 0 : 1;
}

int cmd_plot(const std::string& report_path, const std::string& out_dir) {
  std::ifstream f(report_path);
  if (!f) throw std::runtime_error("cannot open report: " + report_path);
  json j = json::parse(f);
  std::string data = j.at("data"), ckpt = j.at("ckpt"), split = j.at("split");
  float threshold = j.at("threshold");
  auto [cfg, params] = model::load_checkpoint(ckpt);
  synth::LoadedDataset ds = synth::load_dataset(data);
  std::vector<int> all;
  const std::vector<int>& idx = pick_split(ds, split, all);
  fs::create_directories(out_dir);
  for (int i : idx) {
    const synth::LoadedSample& s = ds.samples.at(static_cast<size_t>(i));
    model::InferOut r = model::infer(cfg, params, s.t1, s.t2, threshold);
    // overlay: black = true negative, dark gray = missed change, light gray =
    // false alarm, white = correctly detected change
    int H = s.mask.dim(0), W = s.mask.dim(1);
    Tensor overlay = Tensor::zeros({H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        bool gt = s.mask.at2(y, x) != 0.0f;
        bool pd = r.mask.at3(0, y, x) != 0.0f;
        overlay.at2(y, x) = gt && pd ? 1.0f : (!gt && pd ? 0.66f : (gt ? 0.33f : 0.0f));
      }
    char name[64];
    std::snprintf(name, sizeof(name), "%04d_overlay.pgm", i);
    io::write_pgm(fs::path(out_dir) / name, overlay);
  }
  std::cout << "wrote " << idx.size() << " overlays to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"changekit: bi-temporal change detection toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string s_out;
  int s_n = 80, s_size = 96;
  uint64_t s_seed = 0;
  std::string s_warp = "translation";
  float s_disp = 2.0f, s_noise = 0.01f;
  synth_cmd->add_option("--out", s_out, "output directory")->required();
  synth_cmd->add_option("--n", s_n, "number of samples");
  synth_cmd->add_option("--seed", s_seed, "base seed");
  synth_cmd->add_option("--warp", s_warp, "none|translation|affine|smooth-field");
  synth_cmd->add_option("--max-displacement", s_disp, "warp bound in pixels");
  synth_cmd->add_option("--noise-std", s_noise, "radiometric noise sigma");
  synth_cmd->add_option("--size", s_size, "image height and width");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  std::string t_data, t_config, t_out;
  int t_steps = 200, t_ckpt_every = 0;
  uint64_t t_seed = 0;
  train_cmd->add_option("--data", t_data, "dataset directory")->required();
  train_cmd->add_option("--config", t_config, "JSON config file (defaults if omitted)");
  train_cmd->add_option("--steps", t_steps, "training steps");
  train_cmd->add_option("--seed", t_seed, "seed");
  train_cmd->add_option("--out", t_out, "checkpoint directory")->required();
  train_cmd->add_option("--checkpoint-every", t_ckpt_every, "periodic checkpoint interval");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string e_data, e_ckpt, e_report, e_split = "test", e_csv;
  float e_threshold = 0.0f;
  eval_cmd->add_option("--data", e_data, "dataset directory")->required();
  eval_cmd->add_option("--ckpt", e_ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--threshold", e_threshold, "decision threshold (0 = from config)");
  eval_cmd->add_option("--report", e_report, "output JSON report path")->required();
  eval_cmd->add_option("--split", e_split, "train|val|test|all");
  eval_cmd->add_option("--csv", e_csv, "optional per-image CSV path");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "predict a change mask for one pair");
  std::string i_t1, i_t2, i_ckpt, i_out, i_debug;
  float i_threshold = 0.0f;
  infer_cmd->add_option("--t1", i_t1, "first image (PGM)")->required();
  infer_cmd->add_option("--t2", i_t2, "second image (PGM)")->required();
  infer_cmd->add_option("--ckpt", i_ckpt, "checkpoint directory")->required();
  infer_cmd->add_option("--out", i_out, "output mask (PGM)")->required();
  infer_cmd->add_option("--threshold", i_threshold, "decision threshold (0 = from config)");
  infer_cmd->add_option("--debug-maps", i_debug, "directory for prob/gate/dssim maps");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string g_op;
  uint64_t g_seed = 0;
  int g_n = 1;
  gc_cmd->add_option("--op", g_op, "check a single named op");
  gc_cmd->add_option("--seed", g_seed, "base seed");
  gc_cmd->add_option("--seeds", g_n, "number of consecutive seeds per op");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "render prediction-vs-truth overlays");
  std::string p_report, p_out;
  plot_cmd->add_option("--report", p_report, "eval JSON report")->required();
  plot_cmd->add_option("--out", p_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) return cmd_synth(s_out, s_n, s_seed, s_warp, s_disp, s_noise, s_size);
    if (*train_cmd) return cmd_train(t_data, t_config, t_steps, t_seed, t_out, t_ckpt_every);
    if (*eval_cmd) return cmd_eval(e_data, e_ckpt, e_threshold, e_report, e_split, e_csv);
    if (*infer_cmd) return cmd_infer(i_t1, i_t2, i_ckpt, i_out, i_threshold, i_debug);
    if (*gc_cmd) return cmd_gradcheck(g_op, g_seed, g_n);
    if (*plot_cmd) return cmd_plot(p_report, p_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
