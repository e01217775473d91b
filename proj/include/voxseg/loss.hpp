#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

/// Smoothing constant added to numerator and denominator of the soft Dice
/// ratio. Makes the empty-vs-empty case score as perfect agreement.
inline constexpr double kDiceEps = 1e-7;

/// Per-class weights for the total loss; defaults to all ones.
struct ClassWeights {
  std::vector<double> w;

  static ClassWeights ones(std::int64_t num_classes) {
    return {std::vector<double>(static_cast<std::size_t>(num_classes), 1.0)};
  }
};

namespace detail {

/// Intersection and mass sums of one channel, accumulated in double over
/// batch and spatial axes in ascending linear order.
template <class T>
struct DiceSums {
  double inter = 0.0, sum_p = 0.0, sum_r = 0.0;
};

template <class T>
DiceSums<T> dice_sums_channel(const Tensor<T>& p, const Tensor<T>& r, std::int64_t channel) {
  const Shape5 s = p.shape();
  DiceSums<T> sums;
  const std::int64_t block = s.spatial();
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* pp = p.data() + (n * s.c + channel) * block;
    const T* rp = r.data() + (n * s.c + channel) * block;
    for (std::int64_t i = 0; i < block; ++i) {
      const double pv = static_cast<double>(pp[i]);
      const double rv = static_cast<double>(rp[i]);
      sums.inter += pv * rv;
      sums.sum_p += pv;
      sums.sum_r += rv;
    }
  }
  return sums;
}

inline double dice_ratio(double inter, double sum_p, double sum_r, double eps) {
  return -(2.0 * inter + eps) / (sum_p + sum_r + eps);
}

}  // namespace detail

/// Soft Dice loss of one probability channel against its one-hot channel:
///   -(2*sum(p*r) + eps) / (sum(p) + sum(r) + eps).
/// Perfect overlap gives -1; so does empty-vs-empty under the eps convention.
template <class T>
double dice_loss_class(const Tensor<T>& p, const Tensor<T>& r, double eps = kDiceEps) {
  if (!(p.shape() == r.shape()))
    throw std::invalid_argument("dice_loss_class: shape mismatch " + p.shape().str() + " vs " +
                                r.shape().str());
  double inter = 0.0, sum_p = 0.0, sum_r = 0.0;
  const T* pp = p.data();
  const T* rp = r.data();
  for (std::int64_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(pp[i]) * static_cast<double>(rp[i]);
    sum_p += static_cast<double>(pp[i]);
    sum_r += static_cast<double>(rp[i]);
  }
  return detail::dice_ratio(inter, sum_p, sum_r, eps);
}

/// Mean of the per-class Dice losses weighted by w: (1/L) * sum_l w_l * L_l,
/// over all L channels of a probability map and matching one-hot target.
template <class T>
double total_loss(const Tensor<T>& p, const Tensor<T>& r, const ClassWeights& weights,
                  double eps = kDiceEps) {
  if (!(p.shape() == r.shape()))
    throw std::invalid_argument("total_loss: shape mismatch");
  const std::int64_t L = p.shape().c;
  if (static_cast<std::int64_t>(weights.w.size()) != L)
    throw std::invalid_argument("total_loss: expected " + std::to_string(L) + " class weights");
  double total = 0.0;
  for (std::int64_t l = 0; l < L; ++l) {
    const auto sums = detail::dice_sums_channel(p, r, l);
    total += weights.w[static_cast<std::size_t>(l)] *
             detail::dice_ratio(sums.inter, sums.sum_p, sums.sum_r, eps);
  }
  return total / static_cast<double>(L);
}

/// Hard Dice similarity coefficient of two label maps for one class, in
/// percent. Both-empty scores 100 (consistent with the eps convention of the
/// soft loss).
inline double dsc_hard(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                       int class_id) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("dsc_hard: extent mismatch");
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_a = pred[i] == class_id;
    const bool in_b = gt[i] == class_id;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Aggregates of one class across cases: sample std (n-1 denominator, 0 for
/// a single case).
struct ClassStats {
  double avg = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

inline ClassStats aggregate_cases(std::span<const double> cases) {
  if (cases.empty()) throw std::invalid_argument("aggregate_cases: no cases");
  ClassStats s;
  s.min = s.max = cases[0];
  double sum = 0.0;
  for (double v : cases) {
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.avg = sum / static_cast<double>(cases.size());
  if (cases.size() > 1) {
    double sq = 0.0;
    for (double v : cases) sq += (v - s.avg) * (v - s.avg);
    s.stddev = std::sqrt(sq / static_cast<double>(cases.size() - 1));
  }
  return s;
}

/// Per-class, per-case Dice percentages plus the aggregate table. The
/// "Total Avg." row is the column-wise mean of the per-class aggregates.
struct DiceReport {
  std::vector<std::string> class_names;
  std::vector<std::vector<double>> cases_percent;  // [class][case]

  std::size_t num_classes() const { return class_names.size(); }

  ClassStats stats(std::size_t cls) const { return aggregate_cases(cases_percent.at(cls)); }

  ClassStats total() const {
    if (class_names.empty()) throw std::invalid_argument("DiceReport: empty report");
    ClassStats t;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      const ClassStats s = stats(c);
      t.avg += s.avg;
      t.stddev += s.stddev;
      t.min += s.min;
      t.max += s.max;
    }
    const double k = static_cast<double>(class_names.size());
    t.avg /= k;
    t.stddev /= k;
    t.min /= k;
    t.max /= k;
    return t;
  }
};

inline DiceReport aggregate(std::vector<std::string> class_names,
                            std::vector<std::vector<double>> cases_percent) {
  if (class_names.size() != cases_percent.size())
    throw std::invalid_argument("aggregate: class name/case list length mismatch");
  for (const auto& c : cases_percent)
    if (c.empty()) throw std::invalid_argument("aggregate: every class needs at least one case");
  return DiceReport{std::move(class_names), std::move(cases_percent)};
}

/// Tables-style CSV: one row per class plus the total row, percent values
/// with one decimal.
inline std::string report_csv(const DiceReport& report) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return std::string(buf);
  };
  std::string out = "class,avg,std,min,max\n";
  auto row = [&](const std::string& name, const ClassStats& s) {
    out += name + "," + fmt(s.avg) + "," + fmt(s.stddev) + "," + fmt(s.min) + "," + fmt(s.max) +
           "\n";
  };
  for (std::size_t c = 0; c < report.num_classes(); ++c) row(report.class_names[c], report.stats(c));
  row("Total Avg.", report.total());
  return out;
}

/// Signed per-class deltas of the aggregate statistics (a minus b).
struct ReportDelta {
  std::vector<std::string> class_names;
  std::vector<ClassStats> delta;
};

inline ReportDelta compare_reports(const DiceReport& a, const DiceReport& b) {
  if (a.class_names != b.class_names)
    throw std::invalid_argument("compare_reports: class lists differ");
  ReportDelta d;
  d.class_names = a.class_names;
  for (std::size_t c = 0; c < a.num_classes(); ++c) {
    const ClassStats sa = a.stats(c), sb = b.stats(c);
    d.delta.push_back({sa.avg - sb.avg, sa.stddev - sb.stddev, sa.min - sb.min, sa.max - sb.max});
  }
  return d;
}

}  // namespace voxseg
