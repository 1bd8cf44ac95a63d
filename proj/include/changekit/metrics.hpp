#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "changekit/tensor.hpp"

namespace changekit::metrics {

struct ConfusionMatrix {
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// Same quantities as ConfusionMatrix but as rates summing to 1; the output of
/// the (P, R, OA) inversion oracle.
struct ConfusionRates {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

struct MetricReport {
  double precision = 0, recall = 0, oa = 0, f1 = 0, iou = 0, kappa = 0;
  std::vector<std::string> degenerate_flags;  // names of 0/0 metrics forced to 0
};

/// Exact pixel counts. Masks hold {0,1}; 1 means change. Accumulable across
/// images by summation (micro-averaging).
inline ConfusionMatrix confusion(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "confusion");
  ConfusionMatrix cm;
  for (size_t i = 0; i < pred.numel(); ++i) {
    float p = pred.data[i], g = gt.data[i];
    if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f))
      throw std::invalid_argument("confusion: masks must be binary (0/1)");
    if (p == 1.0f)
      g == 1.0f ? ++cm.tp : ++cm.fp;
    else
      g == 1.0f ? ++cm.fn : ++cm.tn;
  }
  return cm;
}

namespace detail {

inline double safe_div(double num, double den, const char* name,
                       std::vector<std::string>& flags) {
  if (den == 0.0) {
    flags.push_back(name);
    return 0.0;
  }
  return num / den;
}

template <typename T>
inline MetricReport metrics_from_counts(T tp, T fp, T fn, T tn) {
  double total = static_cast<double>(tp) + fp + fn + tn;
  if (total <= 0.0) throw std::invalid_argument("metrics: empty confusion matrix");
  MetricReport r;
  double dtp = static_cast<double>(tp), dfp = static_cast<double>(fp);
  double dfn = static_cast<double>(fn), dtn = static_cast<double>(tn);
  r.precision = safe_div(dtp, dtp + dfp, "precision", r.degenerate_flags);
  r.recall = safe_div(dtp, dtp + dfn, "recall", r.degenerate_flags);
  r.oa = (dtp + dtn) / total;
  r.f1 = safe_div(2.0 * r.precision * r.recall, r.precision + r.recall, "f1",
                  r.degenerate_flags);
  r.iou = safe_div(dtp, dtp + dfp + dfn, "iou", r.degenerate_flags);
  double pe = ((dtp + dfp) * (dtp + dfn) + (dfn + dtn) * (dfp + dtn)) / (total * total);
  r.kappa = safe_div(r.oa - pe, 1.0 - pe, "kappa", r.degenerate_flags);
  return r;
}

}  // namespace detail

/// The six evaluation metrics: P, R, OA, F1, IoU, Cohen's Kappa. Any 0/0
/// evaluates to 0 and is listed in degenerate_flags.
inline MetricReport metrics_from_cm(const ConfusionMatrix& cm) {
  return detail::metrics_from_counts(cm.tp, cm.fp, cm.fn, cm.tn);
}

inline MetricReport metrics_from_rates(const ConfusionRates& cr) {
  return detail::metrics_from_counts(cr.tp, cr.fp, cr.fn, cr.tn);
}

/// Solve the normalized confusion matrix from a published (P, R, OA) triple:
///   tp = (1-OA) / ((1/R - 1) + (1/P - 1)), fn = tp (1/R - 1),
///   fp = tp (1/P - 1),                     tn = OA - tp.
/// Errors if the triple is infeasible (negative tn or tp > 1).
inline ConfusionRates invert_from_pro(double p, double r, double oa) {
  if (!(p > 0.0 && p <= 1.0 && r > 0.0 && r <= 1.0))
    throw std::invalid_argument("invert_from_pro: P and R must lie in (0, 1]");
  if (!(oa > 0.0 && oa < 1.0))
    throw std::invalid_argument("invert_from_pro: OA must lie in (0, 1)");
  double inv_r = 1.0 / r - 1.0;
  double inv_p = 1.0 / p - 1.0;
  double denom = inv_r + inv_p;
  ConfusionRates cr;
  if (denom == 0.0) {
    // P = R = 1: no errors at all; tp is the positive-class rate, which the
    // triple does not determine, so require OA = 1 (rejected above).
    throw std::invalid_argument("invert_from_pro: P = R = 1 is inconsistent with OA < 1");
  }
  cr.tp = (1.0 - oa) / denom;
  cr.fn = cr.tp * inv_r;
  cr.fp = cr.tp * inv_p;
  cr.tn = oa - cr.tp;
  if (cr.tn < 0.0)
    throw std::invalid_argument("invert_from_pro: infeasible triple (tn < 0)");
  if (cr.tp > 1.0)
    throw std::invalid_argument("invert_from_pro: infeasible triple (tp > 1)");
  return cr;
}

}  // namespace changekit::metrics
