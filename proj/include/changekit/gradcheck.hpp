#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "changekit/ops.hpp"
#include "changekit/rng.hpp"
#include "changekit/tape.hpp"

namespace changekit {

struct GradReport {
  std::string op_name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
  size_t checked = 0;
  size_t excluded = 0;  // elements whose difference stencil straddled a kink
};

/// Builds a scalar loss from leaves placed on the given tape, in the same
/// order as the input tensors.
using LossBuilder = std::function<Value(Tape&, const std::vector<Value>&)>;

/// Compare the tape's analytic gradients against central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps), accumulated in doubles. Relative error
/// uses denominator max(|analytic|, |numeric|, 1e-6).
/// Elements are skipped (counted in `excluded`) in two documented cases:
/// the ±eps evaluations take different discrete branches (kink set), or both
/// gradient estimates fall under `floor`, where the quotient of a 32-bit
/// forward pass is pure rounding noise.
inline GradReport check_gradients(const std::string& name, std::vector<Tensor> inputs,
                                  const LossBuilder& build, double eps = 1e-3,
                                  double tol = 1e-2, double floor = 1e-3) {
  GradReport rep;
  rep.op_name = name;

  auto eval = [&](const std::vector<Tensor>& xs, uint64_t* hash) -> double {
    Tape t;
    std::vector<Value> leaves;
    leaves.reserve(xs.size());
    for (const Tensor& x : xs) leaves.push_back(t.leaf(x));
    Value loss = build(t, leaves);
    if (t.val(loss).numel() != 1)
      throw std::invalid_argument("gradcheck builder must return a scalar");
    if (hash) *hash = t.branch_hash;
    return t.scalar_f64(loss);  // unquantized when the loss ends in a reduction
  };

  // analytic pass
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Value> leaves;
    for (const Tensor& x : inputs) leaves.push_back(t.leaf(x));
    Value loss = build(t, leaves);
    if (!t.val(loss).all_finite()) {
      rep.passed = false;
      rep.max_rel_err = rep.max_abs_err = std::numeric_limits<double>::infinity();
      return rep;
    }
    t.backward(loss);
    for (Value v : leaves) analytic.push_back(t.grad(v));
  }

  for (size_t k = 0; k < inputs.size(); ++k) {
    for (size_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<Tensor> xs = inputs;
      float orig = xs[k].data[i];
      uint64_t hp = 0, hm = 0;
      xs[k].data[i] = orig + static_cast<float>(eps);
      double fp = eval(xs, &hp);
      xs[k].data[i] = orig - static_cast<float>(eps);
      double fm = eval(xs, &hm);
      if (hp != hm) {  // a relu sign, bilinear cell, or clamp flipped inside
        ++rep.excluded;  // the stencil: the function is not smooth here
        continue;
      }
      double numeric = (fp - fm) / (2.0 * eps);
      double a = static_cast<double>(analytic[k].data[i]);
      if (std::fabs(a) < floor && std::fabs(numeric) < floor) {
        ++rep.excluded;
        continue;
      }
      ++rep.checked;
      double abs_err = std::fabs(a - numeric);
      double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
    }
  }
  rep.passed = rep.checked > 0 && rep.max_rel_err <= tol;
  return rep;
}

/// Random tensor with entries from N(0, sigma), shifted off the bilinear
/// lattice when quarter_offset is set (derivatives are ambiguous there).
inline Tensor random_tensor(Rng& rng, std::vector<int> shape, double sigma = 1.0,
                            bool quarter_offset = false) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) {
    double x = rng.normal() * sigma;
    if (quarter_offset) x = std::floor(x) + 0.25 + 0.5 * rng.uniform();
    v = static_cast<float>(x);
  }
  return t;
}

}  // namespace changekit
