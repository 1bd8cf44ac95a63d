#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "changekit/tensor.hpp"

namespace changekit::io {

// ---------------------------------------------------------------------------
// TNSR v1: 8-byte magic "TNSR0001", u32-LE length, UTF-8 JSON header
// {"shape":[...],"dtype":"f32","order":"row-major"}, then raw LE f32 payload.
// ---------------------------------------------------------------------------

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f.write("TNSR0001", 8);
  nlohmann::json hdr;
  hdr["shape"] = t.shape;
  hdr["dtype"] = "f32";
  hdr["order"] = "row-major";
  std::string hs = hdr.dump();
  uint32_t len = static_cast<uint32_t>(hs.size());
  char lenbuf[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                    static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
  f.write(lenbuf, 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * 4));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "TNSR0001", 8) != 0)
    throw std::runtime_error("not a TNSR v1 file: " + path.string());
  unsigned char lenbuf[4];
  f.read(reinterpret_cast<char*>(lenbuf), 4);
  uint32_t len = lenbuf[0] | (lenbuf[1] << 8) | (lenbuf[2] << 16) |
                 (static_cast<uint32_t>(lenbuf[3]) << 24);
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  if (!f) throw std::runtime_error("truncated TNSR header: " + path.string());
  nlohmann::json hdr = nlohmann::json::parse(hs);
  if (hdr.at("dtype") != "f32" || hdr.at("order") != "row-major")
    throw std::runtime_error("unsupported TNSR dtype/order in " + path.string());
  std::vector<int> shape = hdr.at("shape").get<std::vector<int>>();
  size_t n = shape_numel(shape);
  std::vector<float> data(n);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
  if (!f) throw std::runtime_error("truncated TNSR payload: " + path.string());
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit)
// ---------------------------------------------------------------------------

/// Write a 1×H×W or H×W tensor of [0,1] values as 8-bit binary PGM.
inline void write_pgm(const std::filesystem::path& path, const Tensor& img) {
  const Tensor* t = &img;
  Tensor squeezed;
  if (img.ndim() == 3) {
    if (img.dim(0) != 1) throw std::invalid_argument("write_pgm wants a single channel");
    squeezed = Tensor({img.dim(1), img.dim(2)}, img.data);
    t = &squeezed;
  } else if (img.ndim() != 2) {
    throw std::invalid_argument("write_pgm wants H×W or 1×H×W");
  }
  int H = t->dim(0), W = t->dim(1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      float v = std::clamp(t->at2(y, x), 0.0f, 1.0f);
      row[static_cast<size_t>(x)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

/// Read an 8-bit binary PGM into a 1×H×W tensor scaled to [0,1].
inline Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  auto next_token = [&f, &path]() -> std::string {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
      if (c == '#') {  // comment to end of line
        while ((c = f.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw std::runtime_error("truncated PGM header: " + path.string());
    return tok;
  };
  if (next_token() != "P5") throw std::runtime_error("not a binary PGM (P5): " + path.string());
  int W = std::stoi(next_token());
  int H = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (W <= 0 || H <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("unsupported PGM header in " + path.string());
  std::vector<unsigned char> raw(static_cast<size_t>(W) * H);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("truncated PGM payload: " + path.string());
  Tensor out = Tensor::zeros({1, H, W});
  for (size_t i = 0; i < raw.size(); ++i)
    out.data[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
  return out;
}

// ---------------------------------------------------------------------------
// parameter directories: TNSR files plus a JSON manifest naming each tensor
// ---------------------------------------------------------------------------

inline void save_params(const std::filesystem::path& dir,
                        const std::map<std::string, Tensor>& params,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "changekit-params-v1";
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : params) {
    std::string file = name + ".tnsr";
    write_tensor(dir / file, t);
    names.push_back({{"name", name}, {"file", file}, {"shape", t.shape}});
  }
  manifest["tensors"] = names;
  if (!extra.empty()) manifest["meta"] = extra;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline std::map<std::string, Tensor> load_params(const std::filesystem::path& dir,
                                                 nlohmann::json* extra = nullptr) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  std::map<std::string, Tensor> out;
  for (const auto& e : manifest.at("tensors"))
    out.emplace(e.at("name").get<std::string>(), read_tensor(dir / e.at("file").get<std::string>()));
  if (extra && manifest.contains("meta")) *extra = manifest["meta"];
  return out;
}

}  // namespace changekit::io
