#pragma once

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "dahar/tensor.hpp"

namespace dahar {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// column buffer layout: (Cin*kh*kw) x (OH*OW), row-major
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* col) {
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * (oh * ow);
        for (int i = 0; i < oh; ++i) {
          int yi = i * stride - pad + ki;
          if (yi < 0 || yi >= h) {
            for (int j = 0; j < ow; ++j) row[i * ow + j] = T(0);
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * h + yi) * w;
          for (int j = 0; j < ow; ++j) {
            int xj = j * stride - pad + kj;
            row[i * ow + j] = (xj >= 0 && xj < w) ? src[xj] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int oh, int ow, T* dx) {
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * (oh * ow);
        for (int i = 0; i < oh; ++i) {
          int yi = i * stride - pad + ki;
          if (yi < 0 || yi >= h) continue;
          T* dst = dx + (static_cast<int64_t>(c) * h + yi) * w;
          for (int j = 0; j < ow; ++j) {
            int xj = j * stride - pad + kj;
            if (xj >= 0 && xj < w) dst[xj] += row[i * ow + j];
          }
        }
      }
    }
  }
}

inline void conv_check(const Shape& xs, const Shape& ws, int stride, int padding) {
  if (xs.size() != 4 || ws.size() != 4) throw ConfigError("conv2d: input and weight must be rank 4");
  if (ws[2] < 1 || ws[3] < 1) throw ConfigError("conv2d: kernel extents must be >= 1");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  if (xs[1] != ws[1])
    throw ConfigError("conv2d: input channels " + std::to_string(xs[1]) +
                      " do not match weight channels " + std::to_string(ws[1]));
}

inline std::pair<int, int> conv_out_hw(const Shape& xs, const Shape& ws, int stride, int padding) {
  int oh = (xs[2] + 2 * padding - ws[2]) / stride + 1;
  int ow = (xs[3] + 2 * padding - ws[3]) / stride + 1;
  if (xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] || oh <= 0 || ow <= 0)
    throw ConfigError("conv2d: zero-sized output for input " + shape_str(xs) + " kernel " +
                      shape_str(ws) + " stride " + std::to_string(stride) + " pad " +
                      std::to_string(padding));
  return {oh, ow};
}

}  // namespace detail

namespace reference {

// Direct summation path. Kept permanently as the oracle for the GEMM
// path; forward only, never recorded on a tape.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  detail::conv_check(x.shape(), w.shape(), stride, padding);
  auto [oh, ow] = detail::conv_out_hw(x.shape(), w.shape(), stride, padding);
  const int b_n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  Tensor<T> out(Shape{b_n, cout, oh, ow});
  for (int b = 0; b < b_n; ++b)
    for (int co = 0; co < cout; ++co)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          T acc = bias.at(co);
          for (int ci = 0; ci < cin; ++ci)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                int yi = i * stride - padding + ki;
                int xj = j * stride - padding + kj;
                if (yi < 0 || yi >= h || xj < 0 || xj >= ww) continue;
                acc += x.at(b, ci, yi, xj) * w.at(co, ci, ki, kj);
              }
          out.at(b, co, i, j) = acc;
        }
  return out;
}

}  // namespace reference

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  detail::conv_check(x.shape(), w.shape(), stride, padding);
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0))
    throw ConfigError("conv2d: bias shape must be [Cout]");
  auto [oh, ow] = detail::conv_out_hw(x.shape(), w.shape(), stride, padding);
  const int b_n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int k = cin * kh * kw;
  const int ohw = oh * ow;

  Tensor<T> out(Shape{b_n, cout, oh, ow});
  std::vector<T> col(static_cast<size_t>(k) * ohw);
  detail::CMapRM<T> wm(w.data(), cout, k);
  for (int b = 0; b < b_n; ++b) {
    detail::im2col(x.data() + static_cast<int64_t>(b) * cin * h * ww, cin, h, ww, kh, kw,
                   stride, padding, oh, ow, col.data());
    detail::CMapRM<T> cm(col.data(), k, ohw);
    detail::MapRM<T> om(out.data() + static_cast<int64_t>(b) * cout * ohw, cout, ohw);
    om.noalias() = wm * cm;
    for (int co = 0; co < cout; ++co) om.row(co).array() += bias.at(co);
  }

  detail::record_op("conv2d", {x, w, bias}, out, [x, w, bias, out, stride, padding, oh, ow]() mutable {
    const int b_n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int k = cin * kh * kw;
    const int ohw = oh * ow;
    const auto& go = out.impl()->grad;
    detail::CMapRM<T> wm(w.data(), cout, k);
    std::vector<T> col(static_cast<size_t>(k) * ohw);
    std::vector<T> dcol(static_cast<size_t>(k) * ohw);
    for (int b = 0; b < b_n; ++b) {
      detail::CMapRM<T> gom(go.data() + static_cast<int64_t>(b) * cout * ohw, cout, ohw);
      if (x.tracked()) {
        detail::MapRM<T> dcm(dcol.data(), k, ohw);
        dcm.noalias() = wm.transpose() * gom;
        detail::col2im_accum(dcol.data(), cin, h, ww, kh, kw, stride, padding, oh, ow,
                             x.grad().data() + static_cast<int64_t>(b) * cin * h * ww);
      }
      if (w.tracked() || bias.tracked()) {
        detail::im2col(x.data() + static_cast<int64_t>(b) * cin * h * ww, cin, h, ww, kh, kw,
                       stride, padding, oh, ow, col.data());
        detail::CMapRM<T> cm(col.data(), k, ohw);
        if (w.tracked()) {
          detail::MapRM<T> gwm(w.grad().data(), cout, k);
          gwm.noalias() += gom * cm.transpose();
        }
        if (bias.tracked()) {
          auto& gb = bias.grad();
          for (int co = 0; co < cout; ++co) gb[co] += gom.row(co).sum();
        }
      }
    }
  });
  return out;
}

// x: [B, D] row-major, w: [C, D], bias: [C] -> [B, C]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw ConfigError("linear: expected x[B,D] and w[C,D], got " + shape_str(x.shape()) + " and " +
                      shape_str(w.shape()));
  const int b_n = x.dim(0), d = x.dim(1), c = w.dim(0);
  Tensor<T> out(Shape{b_n, c});
  detail::CMapRM<T> xm(x.data(), b_n, d);
  detail::CMapRM<T> wm(w.data(), c, d);
  detail::MapRM<T> om(out.data(), b_n, c);
  om.noalias() = xm * wm.transpose();
  for (int i = 0; i < b_n; ++i)
    for (int j = 0; j < c; ++j) om(i, j) += bias.at(j);

  detail::record_op("linear", {x, w, bias}, out, [x, w, bias, out]() mutable {
    const int b_n = x.dim(0), d = x.dim(1), c = w.dim(0);
    detail::CMapRM<T> gom(out.impl()->grad.data(), b_n, c);
    if (x.tracked()) {
      detail::MapRM<T> gxm(x.grad().data(), b_n, d);
      detail::CMapRM<T> wm(w.data(), c, d);
      gxm.noalias() += gom * wm;
    }
    if (w.tracked()) {
      detail::MapRM<T> gwm(w.grad().data(), c, d);
      detail::CMapRM<T> xm(x.data(), b_n, d);
      gwm.noalias() += gom.transpose() * xm;
    }
    if (bias.tracked()) {
      auto& gb = bias.grad();
      for (int i = 0; i < b_n; ++i)
        for (int j = 0; j < c; ++j) gb[j] += gom(i, j);
    }
  });
  return out;
}

enum class BNMode { train, eval };

// Normalizes with biased batch statistics in train mode and updates the
// running stats in place by EMA; eval mode uses the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BNMode mode,
                     T eps = T(1e-5), T momentum = T(0.1)) {
  if (x.rank() != 4) throw ConfigError("batch_norm: expected BCHW input");
  const int b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c_n || beta.numel() != c_n)
    throw ConfigError("batch_norm: gamma/beta must have C entries");
  const int64_t n = static_cast<int64_t>(b_n) * h * w;
  if (mode == BNMode::train && n < 2)
    throw ConfigError("batch_norm: degenerate batch (B*H*W < 2) in train mode");

  std::vector<T> mean(c_n), invstd(c_n);
  const int hw = h * w;
  if (mode == BNMode::train) {
    for (int c = 0; c < c_n; ++c) {
      double m = 0.0;
      for (int b = 0; b < b_n; ++b) {
        const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
        for (int i = 0; i < hw; ++i) m += static_cast<double>(p[i]);
      }
      m /= static_cast<double>(n);
      double v = 0.0;
      for (int b = 0; b < b_n; ++b) {
        const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
        for (int i = 0; i < hw; ++i) {
          double d = static_cast<double>(p[i]) - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(n);
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
      running_mean.at(c) = (T(1) - momentum) * running_mean.at(c) + momentum * static_cast<T>(m);
      running_var.at(c) = (T(1) - momentum) * running_var.at(c) + momentum * static_cast<T>(v);
    }
  } else {
    for (int c = 0; c < c_n; ++c) {
      mean[c] = running_mean.at(c);
      invstd[c] = T(1) / std::sqrt(running_var.at(c) + eps);
    }
  }

  Tensor<T> out(x.shape());
  for (int b = 0; b < b_n; ++b)
    for (int c = 0; c < c_n; ++c) {
      const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      T* po = out.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      const T g = gamma.at(c), bt = beta.at(c), mu = mean[c], is = invstd[c];
      for (int i = 0; i < hw; ++i) po[i] = g * (p[i] - mu) * is + bt;
    }

  bool train_mode = (mode == BNMode::train);
  detail::record_op("batch_norm", {x, gamma, beta}, out,
                    [x, gamma, beta, out, mean, invstd, train_mode]() mutable {
    const int b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
    const int64_t n = static_cast<int64_t>(b_n) * hw;
    const auto& go = out.impl()->grad;
    for (int c = 0; c < c_n; ++c) {
      const T mu = mean[c], is = invstd[c], g = gamma.at(c);
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (int b = 0; b < b_n; ++b) {
        const int64_t base = (static_cast<int64_t>(b) * c_n + c) * hw;
        const T* px = x.data() + base;
        const T* pg = go.data() + base;
        for (int i = 0; i < hw; ++i) {
          sum_go += static_cast<double>(pg[i]);
          sum_go_xhat += static_cast<double>(pg[i]) * static_cast<double>((px[i] - mu) * is);
        }
      }
      if (gamma.tracked()) gamma.grad()[c] += static_cast<T>(sum_go_xhat);
      if (beta.tracked()) beta.grad()[c] += static_cast<T>(sum_go);
      if (x.tracked()) {
        auto& gx = x.grad();
        const T mean_go = static_cast<T>(sum_go / static_cast<double>(n));
        const T mean_go_xhat = static_cast<T>(sum_go_xhat / static_cast<double>(n));
        for (int b = 0; b < b_n; ++b) {
          const int64_t base = (static_cast<int64_t>(b) * c_n + c) * hw;
          const T* px = x.data() + base;
          const T* pg = go.data() + base;
          T* pgx = gx.data() + base;
          if (train_mode) {
            for (int i = 0; i < hw; ++i) {
              T xhat = (px[i] - mu) * is;
              pgx[i] += g * is * (pg[i] - mean_go - xhat * mean_go_xhat);
            }
          } else {
            for (int i = 0; i < hw; ++i) pgx[i] += g * is * pg[i];
          }
        }
      }
    }
  });
  return out;
}

// Half-pixel-center bilinear resize: src = (dst + 0.5) * scale - 0.5,
// clamped to the valid range.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ConfigError("resize_bilinear: expected BCHW input");
  if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output extents must be >= 1");
  const int b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);

  struct Tap {
    int lo, hi;
    T frac;
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(out);
    double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
      double src = (d + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      if (src > in - 1) src = in - 1;
      int lo = static_cast<int>(std::floor(src));
      if (lo > in - 1) lo = in - 1;
      int hi = std::min(lo + 1, in - 1);
      taps[d] = Tap{lo, hi, static_cast<T>(src - lo)};
    }
    return taps;
  };
  auto ty = make_taps(h, out_h);
  auto tx = make_taps(w, out_w);

  Tensor<T> out(Shape{b_n, c_n, out_h, out_w});
  for (int b = 0; b < b_n; ++b)
    for (int c = 0; c < c_n; ++c) {
      const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * h * w;
      T* po = out.data() + (static_cast<int64_t>(b) * c_n + c) * out_h * out_w;
      for (int i = 0; i < out_h; ++i) {
        const Tap& a = ty[i];
        for (int j = 0; j < out_w; ++j) {
          const Tap& s = tx[j];
          T v00 = p[a.lo * w + s.lo], v01 = p[a.lo * w + s.hi];
          T v10 = p[a.hi * w + s.lo], v11 = p[a.hi * w + s.hi];
          T top = v00 + (v01 - v00) * s.frac;
          T bot = v10 + (v11 - v10) * s.frac;
          po[i * out_w + j] = top + (bot - top) * a.frac;
        }
      }
    }

  detail::record_op("resize_bilinear", {x}, out, [x, out, ty, tx]() mutable {
    const int b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int out_h = static_cast<int>(ty.size()), out_w = static_cast<int>(tx.size());
    const auto& go = out.impl()->grad;
    auto& gx = x.grad();
    for (int b = 0; b < b_n; ++b)
      for (int c = 0; c < c_n; ++c) {
        T* pg = gx.data() + (static_cast<int64_t>(b) * c_n + c) * h * w;
        const T* po = go.data() + (static_cast<int64_t>(b) * c_n + c) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
          const auto& a = ty[i];
          for (int j = 0; j < out_w; ++j) {
            const auto& s = tx[j];
            T g = po[i * out_w + j];
            pg[a.lo * w + s.lo] += g * (T(1) - a.frac) * (T(1) - s.frac);
            pg[a.lo * w + s.hi] += g * (T(1) - a.frac) * s.frac;
            pg[a.hi * w + s.lo] += g * a.frac * (T(1) - s.frac);
            pg[a.hi * w + s.hi] += g * a.frac * s.frac;
          }
        }
      }
  });
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ConfigError("global_avg_pool: expected BCHW input");
  const int b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{b_n, c_n});
  for (int b = 0; b < b_n; ++b)
    for (int c = 0; c < c_n; ++c) {
      const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      double acc = 0.0;
      for (int i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
      out.at(static_cast<int64_t>(b) * c_n + c) = static_cast<T>(acc / hw);
    }
  detail::record_op("global_avg_pool", {x}, out, [x, out]() mutable {
    const int b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto& go = out.impl()->grad;
    auto& gx = x.grad();
    for (int b = 0; b < b_n; ++b)
      for (int c = 0; c < c_n; ++c) {
        T g = go[static_cast<size_t>(b) * c_n + c] / static_cast<T>(hw);
        T* pg = gx.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
        for (int i = 0; i < hw; ++i) pg[i] += g;
      }
  });
  return out;
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = p[i] > T(0) ? p[i] : T(0);
  detail::record_op("relu", {x}, out, [x, out]() mutable {
    const auto& go = out.impl()->grad;
    auto& gx = x.grad();
    const T* p = x.data();
    for (size_t i = 0; i < gx.size(); ++i)
      if (p[i] > T(0)) gx[i] += go[i];
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = stable_sigmoid(p[i]);
  detail::record_op("sigmoid", {x}, out, [x, out]() mutable {
    const auto& go = out.impl()->grad;
    auto& gx = x.grad();
    const T* po = out.data();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * po[i] * (T(1) - po[i]);
  });
  return out;
}

// x: [B,C,H,W] gated by a single-channel spatial map m: [B,1,H,W].
template <typename T>
Tensor<T> gate_mul(const Tensor<T>& x, const Tensor<T>& m) {
  if (x.rank() != 4 || m.rank() != 4 || m.dim(1) != 1 || x.dim(0) != m.dim(0) ||
      x.dim(2) != m.dim(2) || x.dim(3) != m.dim(3))
    throw ConfigError("gate_mul: expected x[B,C,H,W] and m[B,1,H,W]");
  const int b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (int b = 0; b < b_n; ++b) {
    const T* pm = m.data() + static_cast<int64_t>(b) * hw;
    for (int c = 0; c < c_n; ++c) {
      const T* p = x.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      T* po = out.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      for (int i = 0; i < hw; ++i) po[i] = p[i] * pm[i];
    }
  }
  detail::record_op("gate_mul", {x, m}, out, [x, m, out]() mutable {
    const int b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto& go = out.impl()->grad;
    for (int b = 0; b < b_n; ++b) {
      const T* pm = m.data() + static_cast<int64_t>(b) * hw;
      if (x.tracked()) {
        auto& gx = x.grad();
        for (int c = 0; c < c_n; ++c) {
          const int64_t base = (static_cast<int64_t>(b) * c_n + c) * hw;
          for (int i = 0; i < hw; ++i) gx[base + i] += go[base + i] * pm[i];
        }
      }
      if (m.tracked()) {
        auto& gm = m.grad();
        for (int c = 0; c < c_n; ++c) {
          const int64_t base = (static_cast<int64_t>(b) * c_n + c) * hw;
          const T* px = x.data() + base;
          for (int i = 0; i < hw; ++i) gm[static_cast<int64_t>(b) * hw + i] += go[base + i] * px[i];
        }
      }
    }
  });
  return out;
}

// Confidence-weighted attention pooling. Per-location weights are
// independent sigmoids of the attention logits (no softmax); each
// attribute's descriptor is the weighted average of the features.
//   features: [B,D,H,W], attn_logits: [B,C,H,W] -> [B,C,D]
template <typename T>
Tensor<T> confidence_pool(const Tensor<T>& features, const Tensor<T>& attn_logits, T eps = T(1e-8)) {
  if (features.rank() != 4 || attn_logits.rank() != 4 || features.dim(0) != attn_logits.dim(0) ||
      features.dim(2) != attn_logits.dim(2) || features.dim(3) != attn_logits.dim(3))
    throw ConfigError("confidence_pool: expected features[B,D,H,W], attn_logits[B,C,H,W]");
  const int b_n = features.dim(0), d_n = features.dim(1), c_n = attn_logits.dim(1);
  const int hw = features.dim(2) * features.dim(3);

  Tensor<T> out(Shape{b_n, c_n, d_n});
  std::vector<T> wsum(static_cast<size_t>(b_n) * c_n, T(0));
  for (int b = 0; b < b_n; ++b) {
    for (int c = 0; c < c_n; ++c) {
      const T* pa = attn_logits.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      T* pd = out.data() + (static_cast<int64_t>(b) * c_n + c) * d_n;
      double s = 0.0;
      for (int i = 0; i < hw; ++i) s += static_cast<double>(stable_sigmoid(pa[i]));
      wsum[static_cast<size_t>(b) * c_n + c] = static_cast<T>(s);
      for (int d = 0; d < d_n; ++d) {
        const T* pf = features.data() + (static_cast<int64_t>(b) * d_n + d) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i)
          acc += static_cast<double>(stable_sigmoid(pa[i])) * static_cast<double>(pf[i]);
        pd[d] = static_cast<T>(acc / (s + static_cast<double>(eps)));
      }
    }
  }

  detail::record_op("confidence_pool", {features, attn_logits}, out,
                    [features, attn_logits, out, wsum, eps]() mutable {
    const int b_n = features.dim(0), d_n = features.dim(1), c_n = attn_logits.dim(1);
    const int hw = features.dim(2) * features.dim(3);
    const auto& go = out.impl()->grad;
    for (int b = 0; b < b_n; ++b) {
      for (int c = 0; c < c_n; ++c) {
        const T denom = wsum[static_cast<size_t>(b) * c_n + c] + eps;
        const T* pa = attn_logits.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
        const T* pgo = go.data() + (static_cast<int64_t>(b) * c_n + c) * d_n;
        const T* pd = out.data() + (static_cast<int64_t>(b) * c_n + c) * d_n;
        for (int i = 0; i < hw; ++i) {
          const T wgt = stable_sigmoid(pa[i]);
          if (features.tracked()) {
            auto& gf = features.grad();
            for (int d = 0; d < d_n; ++d)
              gf[(static_cast<int64_t>(b) * d_n + d) * hw + i] += pgo[d] * wgt / denom;
          }
          if (attn_logits.tracked()) {
            double acc = 0.0;
            for (int d = 0; d < d_n; ++d) {
              const T fv = features.data()[(static_cast<int64_t>(b) * d_n + d) * hw + i];
              acc += static_cast<double>(pgo[d]) * static_cast<double>(fv - pd[d]);
            }
            attn_logits.grad()[(static_cast<int64_t>(b) * c_n + c) * hw + i] +=
                static_cast<T>(acc) * wgt * (T(1) - wgt) / denom;
          }
        }
      }
    }
  });
  return out;
}

// Per-attribute linear classifier over per-attribute descriptors.
//   d: [B,C,D], w: [C,D], bias: [C] -> [B,C]
template <typename T>
Tensor<T> attribute_head(const Tensor<T>& d, const Tensor<T>& w, const Tensor<T>& bias) {
  if (d.rank() != 3 || w.rank() != 2 || d.dim(1) != w.dim(0) || d.dim(2) != w.dim(1))
    throw ConfigError("attribute_head: expected d[B,C,D] and w[C,D]");
  const int b_n = d.dim(0), c_n = d.dim(1), d_n = d.dim(2);
  Tensor<T> out(Shape{b_n, c_n});
  for (int b = 0; b < b_n; ++b)
    for (int c = 0; c < c_n; ++c) {
      const T* pd = d.data() + (static_cast<int64_t>(b) * c_n + c) * d_n;
      const T* pw = w.data() + static_cast<int64_t>(c) * d_n;
      double acc = static_cast<double>(bias.at(c));
      for (int k = 0; k < d_n; ++k) acc += static_cast<double>(pd[k]) * static_cast<double>(pw[k]);
      out.at(static_cast<int64_t>(b) * c_n + c) = static_cast<T>(acc);
    }
  detail::record_op("attribute_head", {d, w, bias}, out, [d, w, bias, out]() mutable {
    const int b_n = d.dim(0), c_n = d.dim(1), d_n = d.dim(2);
    const auto& go = out.impl()->grad;
    for (int b = 0; b < b_n; ++b)
      for (int c = 0; c < c_n; ++c) {
        const T g = go[static_cast<size_t>(b) * c_n + c];
        const int64_t base = (static_cast<int64_t>(b) * c_n + c) * d_n;
        if (d.tracked()) {
          auto& gd = d.grad();
          const T* pw = w.data() + static_cast<int64_t>(c) * d_n;
          for (int k = 0; k < d_n; ++k) gd[base + k] += g * pw[k];
        }
        if (w.tracked()) {
          auto& gw = w.grad();
          const T* pd = d.data() + base;
          for (int k = 0; k < d_n; ++k) gw[static_cast<int64_t>(c) * d_n + k] += g * pd[k];
        }
        if (bias.tracked()) bias.grad()[c] += g;
      }
  });
  return out;
}

}  // namespace dahar
