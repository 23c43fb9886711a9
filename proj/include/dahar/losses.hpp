#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dahar/labels.hpp"
#include "dahar/ops.hpp"
#include "dahar/tensor.hpp"

namespace dahar {

// Positive-sample ratio per attribute, clamped away from {0,1} so the
// weighted-loss scales stay bounded.
struct OmegaVector {
  std::vector<double> omega;

  void validate() const {
    for (size_t c = 0; c < omega.size(); ++c)
      if (!(omega[c] > 0.0 && omega[c] < 1.0))
        throw ConfigError("omega[" + std::to_string(c) + "] = " + std::to_string(omega[c]) +
                          " outside (0,1)");
  }
};

inline OmegaVector positive_ratios(const LabelBatch& labels) {
  if (labels.empty()) throw ConfigError("positive_ratios: need at least one sample");
  const size_t c_n = labels[0].values.size();
  OmegaVector out;
  out.omega.resize(c_n);
  for (size_t c = 0; c < c_n; ++c) {
    int64_t pos = 0, known = 0;
    for (const auto& row : labels) {
      if (row.values.size() != c_n) throw ConfigError("positive_ratios: ragged label batch");
      Label l = row.values[c];
      if (l == Label::unknown) continue;
      ++known;
      if (l == Label::positive) ++pos;
    }
    if (known == 0)
      throw ConfigError("positive_ratios: attribute " + std::to_string(c) + " has no known labels");
    double w = static_cast<double>(pos) / static_cast<double>(known);
    out.omega[c] = std::min(1.0 - 1e-3, std::max(1e-3, w));
  }
  return out;
}

namespace detail {

inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid_d(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// Shared core of the BCE family. Per sample, sums the per-attribute
// terms w_pos*y*softplus(-z) + w_neg*(1-y)*softplus(z) over non-ignored
// attributes, then takes the mean over the batch. Weight vectors of
// size 0 mean "unweighted".
template <typename T>
Tensor<T> bce_core(const char* op_name, const Tensor<T>& logits, const LabelBatch& labels,
                   bool ignore_unknown, const std::vector<double>& w_pos,
                   const std::vector<double>& w_neg, bool* all_unknown_flag) {
  if (logits.rank() != 2)
    throw ConfigError("attribute loss: expected logits of shape [B,C], got " + shape_str(logits.shape()));
  const int b_n = logits.dim(0), c_n = logits.dim(1);
  if (static_cast<int>(labels.size()) != b_n)
    throw ConfigError("attribute loss: label batch size does not match logits");
  for (const auto& row : labels)
    if (static_cast<int>(row.values.size()) != c_n)
      throw ConfigError("attribute loss: label width does not match logits");

  double total = 0.0;
  int64_t counted = 0;
  for (int b = 0; b < b_n; ++b) {
    for (int c = 0; c < c_n; ++c) {
      Label l = labels[b].values[c];
      if (l == Label::unknown && ignore_unknown) continue;
      double y = (l == Label::positive) ? 1.0 : 0.0;
      double z = static_cast<double>(logits.at(static_cast<int64_t>(b) * c_n + c));
      double wp = w_pos.empty() ? 1.0 : w_pos[c];
      double wn = w_neg.empty() ? 1.0 : w_neg[c];
      total += wp * y * softplus(-z) + wn * (1.0 - y) * softplus(z);
      ++counted;
    }
  }
  if (all_unknown_flag != nullptr) *all_unknown_flag = (counted == 0);
  Tensor<T> out(Shape{1});
  out.at(0) = static_cast<T>(total / static_cast<double>(b_n));

  dahar::detail::record_op(op_name, {logits}, out,
                           [logits, out, labels, ignore_unknown, w_pos, w_neg]() mutable {
    const int b_n = logits.dim(0), c_n = logits.dim(1);
    const T g = out.impl()->grad[0];
    auto& gl = logits.grad();
    for (int b = 0; b < b_n; ++b) {
      for (int c = 0; c < c_n; ++c) {
        Label l = labels[b].values[c];
        if (l == Label::unknown && ignore_unknown) continue;
        double y = (l == Label::positive) ? 1.0 : 0.0;
        double z = static_cast<double>(logits.at(static_cast<int64_t>(b) * c_n + c));
        double w = (y > 0.5) ? (w_pos.empty() ? 1.0 : w_pos[c]) : (w_neg.empty() ? 1.0 : w_neg[c]);
        double d = w * (sigmoid_d(z) - y) / static_cast<double>(b_n);
        gl[static_cast<size_t>(b) * c_n + c] += g * static_cast<T>(d);
      }
    }
  });
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const LabelBatch& labels, bool ignore_unknown,
                   bool* all_unknown_flag = nullptr) {
  return detail::bce_core("bce_loss", logits, labels, ignore_unknown, {}, {}, all_unknown_flag);
}

// Positive terms scaled by 1/(2*omega_c), negative by 1/(2*(1-omega_c)).
template <typename T>
Tensor<T> weighted_bce_loss(const Tensor<T>& logits, const LabelBatch& labels,
                            const OmegaVector& omega, bool ignore_unknown,
                            bool* all_unknown_flag = nullptr) {
  if (static_cast<int>(omega.omega.size()) != logits.dim(1))
    throw ConfigError("weighted_bce_loss: omega length does not match attribute count");
  omega.validate();
  std::vector<double> w_pos(omega.omega.size()), w_neg(omega.omega.size());
  for (size_t c = 0; c < omega.omega.size(); ++c) {
    w_pos[c] = 1.0 / (2.0 * omega.omega[c]);
    w_neg[c] = 1.0 / (2.0 * (1.0 - omega.omega[c]));
  }
  return detail::bce_core("weighted_bce_loss", logits, labels, ignore_unknown, w_pos, w_neg,
                          all_unknown_flag);
}

// Unweighted mean of the plain and weighted BCE losses.
template <typename T>
Tensor<T> mixed_loss(const Tensor<T>& logits, const LabelBatch& labels, const OmegaVector& omega,
                     bool ignore_unknown) {
  Tensor<T> a = bce_loss(logits, labels, ignore_unknown);
  Tensor<T> b = weighted_bce_loss(logits, labels, omega, ignore_unknown);
  return scale(add(a, b), T(0.5));
}

// Per-pixel BCE between segmentation logits and a ground-truth mask in
// [0,1]; the mask is bilinearly resized to the logit resolution first.
template <typename T>
Tensor<T> mask_loss(const Tensor<T>& seg_logits, const Tensor<T>& gt_mask) {
  if (seg_logits.rank() != 4 || seg_logits.dim(1) != 1)
    throw ConfigError("mask_loss: expected seg_logits[B,1,H,W]");
  if (gt_mask.rank() != 4 || gt_mask.dim(1) != 1 || gt_mask.dim(0) != seg_logits.dim(0))
    throw ConfigError("mask_loss: expected gt_mask[B,1,H,W] with matching batch");
  Tensor<T> gt = gt_mask;
  if (gt.dim(2) != seg_logits.dim(2) || gt.dim(3) != seg_logits.dim(3))
    gt = resize_bilinear(gt, seg_logits.dim(2), seg_logits.dim(3));
  for (int64_t i = 0; i < gt.numel(); ++i) {
    T v = gt.at(i);
    if (v < T(0) || v > T(1)) throw ConfigError("mask_loss: ground-truth values must lie in [0,1]");
  }

  const int64_t n = seg_logits.numel();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double z = static_cast<double>(seg_logits.at(i));
    double y = static_cast<double>(gt.at(i));
    total += y * detail::softplus(-z) + (1.0 - y) * detail::softplus(z);
  }
  Tensor<T> out(Shape{1});
  out.at(0) = static_cast<T>(total / static_cast<double>(n));

  dahar::detail::record_op("mask_loss", {seg_logits}, out, [seg_logits, gt, out]() mutable {
    const int64_t n = seg_logits.numel();
    const T g = out.impl()->grad[0];
    auto& gl = seg_logits.grad();
    for (int64_t i = 0; i < n; ++i) {
      double z = static_cast<double>(seg_logits.at(i));
      double y = static_cast<double>(gt.at(i));
      gl[static_cast<size_t>(i)] +=
          g * static_cast<T>((detail::sigmoid_d(z) - y) / static_cast<double>(n));
    }
  });
  return out;
}

enum class LossKind { bce, wbce, mixed };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "bce") return LossKind::bce;
  if (s == "wbce") return LossKind::wbce;
  if (s == "mixed") return LossKind::mixed;
  throw ConfigError("unknown loss kind '" + s + "' (expected bce|wbce|mixed)");
}

inline std::string loss_kind_to_string(LossKind k) {
  switch (k) {
    case LossKind::bce: return "bce";
    case LossKind::wbce: return "wbce";
    default: return "mixed";
  }
}

template <typename T>
Tensor<T> attribute_loss(LossKind kind, const Tensor<T>& logits, const LabelBatch& labels,
                         const OmegaVector& omega, bool ignore_unknown) {
  switch (kind) {
    case LossKind::bce: return bce_loss(logits, labels, ignore_unknown);
    case LossKind::wbce: return weighted_bce_loss(logits, labels, omega, ignore_unknown);
    default: return mixed_loss(logits, labels, omega, ignore_unknown);
  }
}

template <typename T>
struct TotalLoss {
  Tensor<T> total;
  double main_component = 0.0;
  double side_component = 0.0;
  double mask_component = 0.0;
};

// L = L_attr(main) + L_attr(side) + lambda * L_mask. The two heads are
// supervised independently; the averaged prediction is inference-only.
// Undefined side/seg tensors drop the corresponding component.
template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& main_logits, const Tensor<T>& side_logits,
                        const Tensor<T>& seg_logits, const LabelBatch& labels,
                        const Tensor<T>& gt_mask, const OmegaVector& omega, LossKind kind,
                        bool ignore_unknown, double lambda_mask) {
  TotalLoss<T> out;
  Tensor<T> acc = attribute_loss(kind, main_logits, labels, omega, ignore_unknown);
  out.main_component = static_cast<double>(acc.at(0));
  if (side_logits.defined()) {
    Tensor<T> side = attribute_loss(kind, side_logits, labels, omega, ignore_unknown);
    out.side_component = static_cast<double>(side.at(0));
    acc = add(acc, side);
  }
  if (seg_logits.defined() && lambda_mask != 0.0) {
    Tensor<T> m = mask_loss(seg_logits, gt_mask);
    out.mask_component = static_cast<double>(m.at(0));
    acc = add(acc, scale(m, static_cast<T>(lambda_mask)));
  }
  out.total = acc;
  return out;
}

}  // namespace dahar
