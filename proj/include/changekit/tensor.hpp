#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace changekit {

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline size_t shape_numel(const std::vector<int>& s) {
  size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive axis length in shape " + shape_str(s));
    n *= static_cast<size_t>(d);
  }
  return n;
}

/// Dense row-major f32 array with shape metadata. The universal value type.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("shape " + shape_str(shape) + " does not match buffer of " +
                                  std::to_string(data.size()) + " elements");
  }

  static Tensor zeros(std::vector<int> s) {
    size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }
  static Tensor full(std::vector<int> s, float v) {
    size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<float>(n, v));
  }
  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  float item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape));
    return data[0];
  }

  // C×H×W access
  float& at3(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  float at3(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  // H×W access
  float& at2(int y, int x) { return data[static_cast<size_t>(y) * shape[1] + x]; }
  float at2(int y, int x) const { return data[static_cast<size_t>(y) * shape[1] + x]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void require_shape(const Tensor& t, const std::vector<int>& s, const char* what) {
  if (t.shape != s)
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(s) +
                                ", got " + shape_str(t.shape));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

}  // namespace changekit
