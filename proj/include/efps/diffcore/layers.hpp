// SPDX-License-Identifier: Apache-2.0
//
// Layers with explicit forward and reverse-mode backward passes. Every layer
// caches what its backward pass needs during forward; call backward at most
// once per forward. Parameter gradients accumulate, so callers zero them
// between steps.
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "efps/diffcore/tensor.hpp"

namespace efps::diff {

// Scalar activations, exposed for direct use and testing.
template <typename T>
T relu(T x) {
  return x > T(0) ? x : T(0);
}
template <typename T>
T leaky_relu(T x, T slope) {
  return x > T(0) ? x : slope * x;
}
template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect(const std::string& /*prefix*/, ParamList<T>& /*out*/) {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// Upper bound on the im2col buffer, in elements. Small enough that a chunk's
// columns stay cache resident between im2col and the GEMM.
inline constexpr std::size_t kColumnBudget = std::size_t{1} << 17;

}  // namespace detail

/// 2D cross-correlation with zero padding, computed as im2col + GEMM.
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding),
        weight_({out_channels, in_channels, kernel, kernel}), bias_({out_channels}) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || padding < 0)
      throw Error("invalid convolution geometry");
    weight_.ensure_grad();
    bias_.ensure_grad();
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }

  void init(Rng& rng) {
    kaiming_uniform(weight_, in_ * k_ * k_, rng);
    std::fill(bias_.data.begin(), bias_.data.end(), T(0));
  }

  int out_extent(int extent) const { return (extent + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    require_rank4(x, "conv2d input");
    if (x.c() != in_)
      throw Error("conv2d: expected " + std::to_string(in_) + " input channels, got shape " +
                  shape_str(x.shape));
    if (x.h() + 2 * pad_ < k_ || x.w() + 2 * pad_ < k_)
      throw Error("conv2d: kernel larger than padded input " + shape_str(x.shape));
    input_ = x;
    const int n = x.n(), ho = out_extent(x.h()), wo = out_extent(x.w());
    Tensor<T> y({n, out_, ho, wo});
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ckk = static_cast<std::size_t>(in_) * k_ * k_;
    const int chunk = chunk_size(ckk * howo, n);
    std::vector<T> cols, prod;
    const detail::CMapRM<T> wmat(weight_.data.data(), out_, static_cast<Eigen::Index>(ckk));
    for (int n0 = 0; n0 < n; n0 += chunk) {
      const int nb = std::min(chunk, n - n0);
      const std::size_t ncols = nb * howo;
      im2col(x, n0, nb, ho, wo, cols);
      prod.resize(static_cast<std::size_t>(out_) * ncols);
      detail::MapRM<T> pmat(prod.data(), out_, static_cast<Eigen::Index>(ncols));
      pmat.noalias() = wmat * detail::CMapRM<T>(cols.data(), static_cast<Eigen::Index>(ckk),
                                                static_cast<Eigen::Index>(ncols));
#pragma omp parallel for collapse(2) schedule(static)
      for (int ln = 0; ln < nb; ++ln)
        for (int co = 0; co < out_; ++co) {
          const T b = bias_.data[co];
          const T* src = prod.data() + co * ncols + ln * howo;
          T* dst = y.data.data() + (static_cast<std::size_t>(n0 + ln) * out_ + co) * howo;
          for (std::size_t p = 0; p < howo; ++p) dst[p] = src[p] + b;
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const Tensor<T>& x = input_;
    const int n = x.n(), ho = out_extent(x.h()), wo = out_extent(x.w());
    require_shape(gy, {n, out_, ho, wo}, "conv2d backward");
    Tensor<T> gx(x.shape);
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ckk = static_cast<std::size_t>(in_) * k_ * k_;
    const int chunk = chunk_size(ckk * howo, n);
    std::vector<T> cols, g, gcols, prod;
    const detail::CMapRM<T> wmat(weight_.data.data(), out_, static_cast<Eigen::Index>(ckk));
    detail::MapRM<T> gw(weight_.grad.data(), out_, static_cast<Eigen::Index>(ckk));
    for (int n0 = 0; n0 < n; n0 += chunk) {
      const int nb = std::min(chunk, n - n0);
      const std::size_t ncols = nb * howo;
      g.resize(static_cast<std::size_t>(out_) * ncols);
#pragma omp parallel for collapse(2) schedule(static)
      for (int ln = 0; ln < nb; ++ln)
        for (int co = 0; co < out_; ++co) {
          const T* src = gy.data.data() + (static_cast<std::size_t>(n0 + ln) * out_ + co) * howo;
          std::copy(src, src + howo, g.data() + co * ncols + ln * howo);
        }
      const detail::CMapRM<T> gmat(g.data(), out_, static_cast<Eigen::Index>(ncols));
      for (int co = 0; co < out_; ++co) {
        T s = T(0);
        const T* row = g.data() + co * ncols;
        for (std::size_t p = 0; p < ncols; ++p) s += row[p];
        bias_.grad[co] += s;
      }
      im2col(x, n0, nb, ho, wo, cols);
      const detail::CMapRM<T> cmat(cols.data(), static_cast<Eigen::Index>(ckk),
                                   static_cast<Eigen::Index>(ncols));
      gw.noalias() += gmat * cmat.transpose();
      if (transposed_input_grad()) {
        // Same-size stride-1 convolution: the input gradient is a convolution
        // of the output gradient with the flipped kernel, which touches fewer
        // rows than col2im when out_ < in_.
        const std::size_t okk = static_cast<std::size_t>(out_) * k_ * k_;
        im2col_flipped(gy, n0, nb, gcols);
        prod.resize(static_cast<std::size_t>(in_) * ncols);
        detail::MapRM<T> pmat(prod.data(), in_, static_cast<Eigen::Index>(ncols));
        pmat.noalias() = flipped_weights() * detail::CMapRM<T>(gcols.data(), static_cast<Eigen::Index>(okk),
                                                              static_cast<Eigen::Index>(ncols));
#pragma omp parallel for collapse(2) schedule(static)
        for (int ln = 0; ln < nb; ++ln)
          for (int c = 0; c < in_; ++c) {
            const T* src = prod.data() + c * ncols + ln * howo;
            T* dst = gx.data.data() + (static_cast<std::size_t>(n0 + ln) * in_ + c) * howo;
            std::copy(src, src + howo, dst);
          }
      } else {
        gcols.resize(ckk * ncols);
        detail::MapRM<T> gcmat(gcols.data(), static_cast<Eigen::Index>(ckk),
                               static_cast<Eigen::Index>(ncols));
        gcmat.noalias() = wmat.transpose() * gmat;
        col2im(gcols, n0, nb, ho, wo, gx);
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) override {
    out.push_back({prefix + ".weight", &weight_, true});
    out.push_back({prefix + ".bias", &bias_, true});
  }

 private:
  int chunk_size(std::size_t per_sample, int n) const {
    const std::size_t c = std::max<std::size_t>(1, detail::kColumnBudget / std::max<std::size_t>(1, per_sample));
    return static_cast<int>(std::min<std::size_t>(c, static_cast<std::size_t>(n)));
  }

  // Rows are (channel, ky, kx); columns are (sample, oy, ox).
  // Source offset within one input plane for every (ky, kx, oy, ox), or -1
  // where the tap falls into padding.
  const std::vector<int>& tap_offsets(int h, int w) const {
    if (taps_h_ != h || taps_w_ != w) {
      const int ho = out_extent(h), wo = out_extent(w);
      taps_.assign(static_cast<std::size_t>(k_) * k_ * ho * wo, -1);
      std::size_t i = 0;
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox, ++i) {
              const int iy = oy * stride_ - pad_ + ky, ix = ox * stride_ - pad_ + kx;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w) taps_[i] = iy * w + ix;
            }
      taps_h_ = h;
      taps_w_ = w;
    }
    return taps_;
  }

  // Feature maps at least this wide are gathered row by row; narrower ones
  // through the tap table.
  static constexpr int kRowCopyWidth = 8;

  void im2col_rows(const Tensor<T>& x, int n0, int nb, int ho, int wo, std::vector<T>& cols) const {
    const int h = x.h(), w = x.w();
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ncols = nb * howo;
    const int rows = in_ * k_ * k_;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      const int c = r / (k_ * k_);
      const int ky = (r / k_) % k_;
      const int kx = r % k_;
      T* dst = cols.data() + static_cast<std::size_t>(r) * ncols;
      for (int ln = 0; ln < nb; ++ln) {
        const T* src = x.data.data() + (static_cast<std::size_t>(n0 + ln) * in_ + c) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          T* drow = dst + ln * howo + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ - pad_ + kx;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
    }
  }

  // Rows (c, ky, kx), columns (sample, oy, ox).
  void im2col(const Tensor<T>& x, int n0, int nb, int ho, int wo, std::vector<T>& cols) const {
    const std::size_t hw = x.plane();
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ncols = nb * howo;
    const int kk = k_ * k_;
    cols.resize(static_cast<std::size_t>(in_) * kk * ncols);
    if (wo >= kRowCopyWidth) {
      im2col_rows(x, n0, nb, ho, wo, cols);
      return;
    }
    const std::vector<int>& taps = tap_offsets(x.h(), x.w());
#pragma omp parallel for schedule(static)
    for (int r = 0; r < in_ * kk; ++r) {
      const int c = r / kk;
      const int* off = taps.data() + static_cast<std::size_t>(r % kk) * howo;
      T* dst = cols.data() + static_cast<std::size_t>(r) * ncols;
      for (int ln = 0; ln < nb; ++ln) {
        const T* src = x.data.data() + (static_cast<std::size_t>(n0 + ln) * in_ + c) * hw;
        T* d = dst + ln * howo;
        for (std::size_t p = 0; p < howo; ++p) d[p] = off[p] >= 0 ? src[off[p]] : T(0);
      }
    }
  }

  bool transposed_input_grad() const { return stride_ == 1 && 2 * pad_ == k_ - 1 && out_ < in_; }

  // in_ x (out_ k k) matrix with W'[c][(co, ky, kx)] = W[co][c][ky][kx].
  detail::MatRM<T> flipped_weights() const {
    detail::MatRM<T> wt(in_, out_ * k_ * k_);
    for (int co = 0; co < out_; ++co)
      for (int c = 0; c < in_; ++c)
        for (int kk = 0; kk < k_ * k_; ++kk)
          wt(c, co * k_ * k_ + kk) = weight_.data[(static_cast<std::size_t>(co) * in_ + c) * k_ * k_ + kk];
    return wt;
  }

  // Rows (co, ky, kx), columns (sample, y, x): g[co, y + pad - ky, x + pad - kx].
  void im2col_flipped(const Tensor<T>& g, int n0, int nb, std::vector<T>& cols) const {
    const int h = g.h(), w = g.w();
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const std::size_t ncols = nb * hw;
    cols.resize(static_cast<std::size_t>(out_) * k_ * k_ * ncols);
    const int rows = out_ * k_ * k_;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      const int co = r / (k_ * k_);
      const int ky = (r / k_) % k_;
      const int kx = r % k_;
      T* dst = cols.data() + static_cast<std::size_t>(r) * ncols;
      for (int ln = 0; ln < nb; ++ln) {
        const T* src = g.data.data() + (static_cast<std::size_t>(n0 + ln) * out_ + co) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + pad_ - ky;
          T* drow = dst + ln * hw + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + pad_ - kx;
            drow[x] = (sx >= 0 && sx < w) ? srow[sx] : T(0);
          }
        }
      }
    }
  }

  void col2im_rows(const std::vector<T>& gcols, int n0, int nb, int ho, int wo, Tensor<T>& gx) const {
    const int h = gx.h(), w = gx.w();
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ncols = nb * howo;
#pragma omp parallel for collapse(2) schedule(static)
    for (int ln = 0; ln < nb; ++ln)
      for (int c = 0; c < in_; ++c) {
        T* dst = gx.data.data() + (static_cast<std::size_t>(n0 + ln) * in_ + c) * h * w;
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const int r = (c * k_ + ky) * k_ + kx;
            const T* src = gcols.data() + static_cast<std::size_t>(r) * ncols + ln * howo;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix >= 0 && ix < w) dst[static_cast<std::size_t>(iy) * w + ix] += src[oy * wo + ox];
              }
            }
          }
      }
  }

  void col2im(const std::vector<T>& gcols, int n0, int nb, int ho, int wo, Tensor<T>& gx) const {
    const std::size_t hw = gx.plane();
    const std::size_t howo = static_cast<std::size_t>(ho) * wo;
    const std::size_t ncols = nb * howo;
    const int kk = k_ * k_;
    if (wo >= kRowCopyWidth) {
      col2im_rows(gcols, n0, nb, ho, wo, gx);
      return;
    }
    const std::vector<int>& taps = tap_offsets(gx.h(), gx.w());
#pragma omp parallel for collapse(2) schedule(static)
    for (int ln = 0; ln < nb; ++ln)
      for (int c = 0; c < in_; ++c) {
        T* dst = gx.data.data() + (static_cast<std::size_t>(n0 + ln) * in_ + c) * hw;
        for (int t = 0; t < kk; ++t) {
          const int* off = taps.data() + static_cast<std::size_t>(t) * howo;
          const T* src = gcols.data() + static_cast<std::size_t>(c * kk + t) * ncols + ln * howo;
          for (std::size_t p = 0; p < howo; ++p)
            if (off[p] >= 0) dst[off[p]] += src[p];
        }
      }
  }

  int in_, out_, k_, stride_, pad_;
  mutable std::vector<int> taps_;
  mutable int taps_h_ = -1, taps_w_ = -1;
  Tensor<T> weight_;
  Tensor<T> bias_;
  Tensor<T> input_;
};

/// Per-channel batch normalization over (N, H, W).
template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum), gamma_({channels}, T(1)),
        beta_({channels}, T(0)), running_mean_({channels}, T(0)), running_var_({channels}, T(1)) {
    gamma_.ensure_grad();
    beta_.ensure_grad();
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    require_rank4(x, "batch_norm input");
    if (x.c() != channels_) throw Error("batch_norm: channel mismatch " + shape_str(x.shape));
    mode_ = mode;
    const int n = x.n();
    const std::size_t hw = x.plane();
    const std::size_t count = n * hw;
    if (mode == Mode::kTrain && n < 2) throw Error("batch too small for batch statistics");
    Tensor<T> y(x.shape);
    xhat_ = Tensor<T>(x.shape);
    inv_std_.assign(channels_, T(0));
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels_; ++c) {
      T mean, var;
      if (mode == Mode::kTrain) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.data.data() + (static_cast<std::size_t>(i) * channels_ + c) * hw;
          for (std::size_t k = 0; k < hw; ++k) s += p[k];
        }
        const double mu = s / static_cast<double>(count);
        double ss = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.data.data() + (static_cast<std::size_t>(i) * channels_ + c) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            const double d = p[k] - mu;
            ss += d * d;
          }
        }
        const double v = ss / static_cast<double>(count);
        mean = static_cast<T>(mu);
        var = static_cast<T>(v);
        const double unbiased = count > 1 ? v * count / (count - 1.0) : v;
        running_mean_.data[c] =
            static_cast<T>((1.0 - momentum_) * running_mean_.data[c] + momentum_ * mu);
        running_var_.data[c] =
            static_cast<T>((1.0 - momentum_) * running_var_.data[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_.data[c];
        var = running_var_.data[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps_));
      inv_std_[c] = inv;
      const T g = gamma_.data[c], b = beta_.data[c];
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const T xh = (x.data[off + k] - mean) * inv;
          xhat_.data[off + k] = xh;
          y.data[off + k] = g * xh + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    require_shape(gy, xhat_.shape, "batch_norm backward");
    const int n = gy.n();
    const std::size_t hw = gy.plane();
    const double count = static_cast<double>(n) * hw;
    Tensor<T> gx(gy.shape);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels_; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          sum_g += gy.data[off + k];
          sum_gx += static_cast<double>(gy.data[off + k]) * xhat_.data[off + k];
        }
      }
      gamma_.grad[c] += static_cast<T>(sum_gx);
      beta_.grad[c] += static_cast<T>(sum_g);
      const double scale = static_cast<double>(gamma_.data[c]) * inv_std_[c];
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          if (mode_ == Mode::kTrain)
            gx.data[off + k] = static_cast<T>(
                scale * (gy.data[off + k] - sum_g / count - xhat_.data[off + k] * sum_gx / count));
          else
            gx.data[off + k] = static_cast<T>(scale * gy.data[off + k]);
        }
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) override {
    out.push_back({prefix + ".gamma", &gamma_, true});
    out.push_back({prefix + ".beta", &beta_, true});
    out.push_back({prefix + ".running_mean", &running_mean_, false});
    out.push_back({prefix + ".running_var", &running_var_, false});
  }

 private:
  int channels_;
  double eps_, momentum_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  Mode mode_ = Mode::kTrain;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = relu(x.data[i]);
    output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx.data[i] = output_.data[i] > T(0) ? gy.data[i] : T(0);
    return gx;
  }

 private:
  Tensor<T> output_;
};

template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  explicit LeakyReLU(T slope = T(0.1)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    input_ = x;
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = leaky_relu(x.data[i], slope_);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx.data[i] = input_.data[i] > T(0) ? gy.data[i] : slope_ * gy.data[i];
    return gx;
  }

 private:
  T slope_;
  Tensor<T> input_;
};

template <typename T>
class Sigmoid : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = sigmoid(x.data[i]);
    output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const T s = output_.data[i];
      gx.data[i] = gy.data[i] * s * (T(1) - s);
    }
    return gx;
  }

 private:
  Tensor<T> output_;
};

template <typename T>
class Tanh : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = std::tanh(x.data[i]);
    output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const T t = output_.data[i];
      gx.data[i] = gy.data[i] * (T(1) - t * t);
    }
    return gx;
  }

 private:
  Tensor<T> output_;
};

/// Nearest-neighbour x2 up-sampling.
template <typename T>
class Upsample2x : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    require_rank4(x, "upsample input");
    in_shape_ = x.shape;
    const int h = x.h(), w = x.w();
    Tensor<T> y({x.n(), x.c(), 2 * h, 2 * w});
    const std::size_t planes = static_cast<std::size_t>(x.n()) * x.c();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = x.data.data() + p * h * w;
      T* dst = y.data.data() + p * 4 * h * w;
      for (int oy = 0; oy < 2 * h; ++oy)
        for (int ox = 0; ox < 2 * w; ++ox) dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    const int h = gx.h(), w = gx.w();
    const std::size_t planes = static_cast<std::size_t>(gx.n()) * gx.c();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = gy.data.data() + p * 4 * h * w;
      T* dst = gx.data.data() + p * h * w;
      for (int oy = 0; oy < 2 * h; ++oy)
        for (int ox = 0; ox < 2 * w; ++ox) dst[(oy / 2) * w + ox / 2] += src[oy * 2 * w + ox];
    }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

/// 2x2 average pooling with stride 2.
template <typename T>
class AvgPool2x : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    require_rank4(x, "avgpool input");
    if (x.h() < 2 || x.w() < 2) throw Error("avgpool: input too small " + shape_str(x.shape));
    in_shape_ = x.shape;
    const int h = x.h(), w = x.w(), ho = h / 2, wo = w / 2;
    Tensor<T> y({x.n(), x.c(), ho, wo});
    const std::size_t planes = static_cast<std::size_t>(x.n()) * x.c();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = x.data.data() + p * h * w;
      T* dst = y.data.data() + p * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T* s = src + 2 * oy * w + 2 * ox;
          dst[oy * wo + ox] = T(0.25) * (s[0] + s[1] + s[w] + s[w + 1]);
        }
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    const int h = gx.h(), w = gx.w(), ho = h / 2, wo = w / 2;
    const std::size_t planes = static_cast<std::size_t>(gx.n()) * gx.c();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = gy.data.data() + p * ho * wo;
      T* dst = gx.data.data() + p * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T g = T(0.25) * src[oy * wo + ox];
          T* d = dst + 2 * oy * w + 2 * ox;
          d[0] += g;
          d[1] += g;
          d[w] += g;
          d[w + 1] += g;
        }
    }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

/// Mean over H and W; output is N x C x 1 x 1.
template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    require_rank4(x, "global pool input");
    in_shape_ = x.shape;
    const std::size_t hw = x.plane();
    Tensor<T> y({x.n(), x.c(), 1, 1});
    for (std::size_t p = 0; p < y.size(); ++p) {
      const T* src = x.data.data() + p * hw;
      T s = T(0);
      for (std::size_t k = 0; k < hw; ++k) s += src[k];
      y.data[p] = s / static_cast<T>(hw);
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    const std::size_t hw = gx.plane();
    for (std::size_t p = 0; p < gy.size(); ++p) {
      const T g = gy.data[p] / static_cast<T>(hw);
      std::fill(gx.data.begin() + p * hw, gx.data.begin() + (p + 1) * hw, g);
    }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  template <typename L>
  L& add(std::string name, std::unique_ptr<L> layer) {
    L& ref = *layer;
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(const std::string& prefix, ParamList<T>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(prefix + "." + names_[i], out);
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& at(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<std::string> names_;
  std::vector<LayerPtr<T>> layers_;
};

/// Channel concatenation helpers for dense connectivity.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw Error("concat: spatial mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out({a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t hw = a.plane();
  for (int i = 0; i < a.n(); ++i) {
    T* dst = out.data.data() + static_cast<std::size_t>(i) * out.c() * hw;
    const T* pa = a.data.data() + static_cast<std::size_t>(i) * a.c() * hw;
    const T* pb = b.data.data() + static_cast<std::size_t>(i) * b.c() * hw;
    std::copy(pa, pa + a.c() * hw, dst);
    std::copy(pb, pb + b.c() * hw, dst + a.c() * hw);
  }
  return out;
}

/// Splits a gradient of concat_channels(a, b) back into the two parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int ca) {
  const int cb = g.c() - ca;
  Tensor<T> ga({g.n(), ca, g.h(), g.w()}), gb({g.n(), cb, g.h(), g.w()});
  const std::size_t hw = g.plane();
  for (int i = 0; i < g.n(); ++i) {
    const T* src = g.data.data() + static_cast<std::size_t>(i) * g.c() * hw;
    std::copy(src, src + ca * hw, ga.data.data() + static_cast<std::size_t>(i) * ca * hw);
    std::copy(src + ca * hw, src + g.c() * hw, gb.data.data() + static_cast<std::size_t>(i) * cb * hw);
  }
  return {std::move(ga), std::move(gb)};
}

}  // namespace efps::diff
