// SPDX-License-Identifier: Apache-2.0
//
// The three-stage normal estimator: event interpolation (EI-Net), observation
// fusion (OFM) and surface normal estimation (SNE-Net), plus the losses that
// train them jointly.
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "efps/diffcore/layers.hpp"
#include "efps/diffcore/tensor.hpp"

namespace efps::net {

using diff::Mode;
using diff::ParamList;
using diff::Tensor;

enum class Ablation {
  kFull,     ///< EI-Net + OFM + SNE-Net
  kNoEI,     ///< raw O_e (polarity mean) passed straight to OFM
  kNoOFM,    ///< identity fusion
  kNoEvent,  ///< SNE-Net on r, g, b, n only
};

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoEI: return "no_ei";
    case Ablation::kNoOFM: return "no_ofm";
    case Ablation::kNoEvent: return "no_event";
  }
  return "full";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "no_ei") return Ablation::kNoEI;
  if (s == "no_ofm") return Ablation::kNoOFM;
  if (s == "no_event") return Ablation::kNoEvent;
  throw Error("unknown ablation `" + s + "` (expected full, no_ei, no_ofm, no_event)");
}

/// Channel widths. Topology counts (2 down, 16 residual, 2 up blocks; two
/// dense + transition stages) are fixed; only widths scale.
struct Widths {
  int ei_head = 8;
  int ei_down1 = 16;
  int ei_down2 = 32;
  int ei_residual = 32;
  int ei_up1 = 16;
  int ei_up2 = 8;
  int ei_residual_blocks = 16;
  int sne_growth = 8;
  int sne_layers_per_block = 4;

  static Widths desk() { return {}; }
  static Widths paper() {
    Widths w;
    w.ei_head = 32;
    w.ei_down1 = 64;
    w.ei_down2 = 128;
    w.ei_residual = 128;
    w.ei_up1 = 64;
    w.ei_up2 = 32;
    w.sne_growth = 24;
    return w;
  }
};

inline constexpr float kLeakySlope = 0.1f;

// ---------------------------------------------------------------------------
// Building blocks.

/// M_out = ReLU(BN(conv3x3(M_in))) + M_in
template <typename T>
class ResidualBlock : public diff::Layer<T> {
 public:
  explicit ResidualBlock(int channels) {
    conv_ = &inner_.add("conv", std::make_unique<diff::Conv2d<T>>(channels, channels, 3, 1, 1));
    inner_.add("bn", std::make_unique<diff::BatchNorm2d<T>>(channels));
    inner_.add("relu", std::make_unique<diff::ReLU<T>>());
  }
  void init(Rng& rng) { conv_->init(rng); }
  diff::Conv2d<T>& conv() { return *conv_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    Tensor<T> y = inner_.forward(x, mode);
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += x.data[i];
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = inner_.backward(gy);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += gy.data[i];
    return gx;
  }
  void collect(const std::string& prefix, ParamList<T>& out) override { inner_.collect(prefix, out); }

 private:
  diff::Sequential<T> inner_;
  diff::Conv2d<T>* conv_ = nullptr;
};

/// conv -> BN -> activation, optionally preceded by x2 up-sampling.
template <typename T>
std::unique_ptr<diff::Sequential<T>> conv_bn_act(int in, int out, int kernel, int stride, bool leaky,
                                                 bool upsample, std::vector<diff::Conv2d<T>*>& convs) {
  auto seq = std::make_unique<diff::Sequential<T>>();
  if (upsample) seq->add("up", std::make_unique<diff::Upsample2x<T>>());
  convs.push_back(&seq->add("conv", std::make_unique<diff::Conv2d<T>>(in, out, kernel, stride, kernel / 2)));
  seq->add("bn", std::make_unique<diff::BatchNorm2d<T>>(out));
  if (leaky)
    seq->add("act", std::make_unique<diff::LeakyReLU<T>>(static_cast<T>(kLeakySlope)));
  else
    seq->add("act", std::make_unique<diff::ReLU<T>>());
  return seq;
}

// ---------------------------------------------------------------------------
// EI-Net: sparse two-polarity event map -> dense one-channel map in (0, 1).

template <typename T>
class EINet {
 public:
  EINet(const Widths& w, int in_channels = 2) {
    net_.add("head", conv_bn_act<T>(in_channels, w.ei_head, 3, 1, false, false, convs_));
    net_.add("down1", conv_bn_act<T>(w.ei_head, w.ei_down1, 5, 2, true, false, convs_));
    net_.add("down2", conv_bn_act<T>(w.ei_down1, w.ei_down2, 5, 2, true, false, convs_));
    int c = w.ei_down2;
    if (w.ei_residual != c) {
      // Width adapter so the residual trunk can be wider than the encoder.
      net_.add("res_in", conv_bn_act<T>(c, w.ei_residual, 1, 1, false, false, convs_));
      c = w.ei_residual;
    }
    for (int i = 0; i < w.ei_residual_blocks; ++i) {
      auto& blk = net_.add("res" + std::to_string(i), std::make_unique<ResidualBlock<T>>(c));
      residual_.push_back(&blk);
      convs_.push_back(&blk.conv());
    }
    net_.add("up1", conv_bn_act<T>(c, w.ei_up1, 3, 1, true, true, convs_));
    net_.add("up2", conv_bn_act<T>(w.ei_up1, w.ei_up2, 3, 1, true, true, convs_));
    pred_ = &net_.add("pred", std::make_unique<diff::Conv2d<T>>(w.ei_up2, 1, 3, 1, 1));
    convs_.push_back(pred_);
    net_.add("sigmoid", std::make_unique<diff::Sigmoid<T>>());
  }

  void init(Rng& rng) {
    for (auto* c : convs_) c->init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    diff::require_rank4(x, "ei_net input");
    if (x.h() % 4 != 0 || x.w() % 4 != 0)
      throw Error("resolution incompatible with two down blocks");
    return net_.forward(x, mode);
  }
  Tensor<T> backward(const Tensor<T>& gy) { return net_.backward(gy); }
  void collect(const std::string& prefix, ParamList<T>& out) { net_.collect(prefix, out); }

  diff::Conv2d<T>& pred() { return *pred_; }
  std::vector<ResidualBlock<T>*>& residual_blocks() { return residual_; }

 private:
  diff::Sequential<T> net_;
  std::vector<diff::Conv2d<T>*> convs_;
  std::vector<ResidualBlock<T>*> residual_;
  diff::Conv2d<T>* pred_ = nullptr;
};

// ---------------------------------------------------------------------------
// OFM: O_hat = sigmoid(pointwise_conv(O)) * O.

template <typename T>
class FusionModule {
 public:
  explicit FusionModule(int channels = 5) : channels_(channels), conv_(channels, channels, 1) {}

  void init(Rng& rng) { conv_.init(rng); }
  diff::Conv2d<T>& conv() { return conv_; }

  Tensor<T> forward(const Tensor<T>& o, Mode mode) {
    diff::require_rank4(o, "ofm input");
    if (o.c() != channels_)
      throw Error("ofm: expected " + std::to_string(channels_) + " channels, got " + diff::shape_str(o.shape));
    input_ = o;
    gate_ = gate_act_.forward(conv_.forward(o, mode), mode);
    Tensor<T> y(o.shape);
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = gate_.data[i] * o.data[i];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> g_gate(gy.shape);
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      g_gate.data[i] = gy.data[i] * input_.data[i];
      gx.data[i] = gy.data[i] * gate_.data[i];
    }
    const Tensor<T> g_conv_in = conv_.backward(gate_act_.backward(g_gate));
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += g_conv_in.data[i];
    return gx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) { conv_.collect(prefix + ".pointwise", out); }

 private:
  int channels_;
  diff::Conv2d<T> conv_;
  diff::Sigmoid<T> gate_act_;
  Tensor<T> input_, gate_;
};

// ---------------------------------------------------------------------------
// SNE-Net: dense blocks and transition blocks, global pooling, 3-vector head,
// unit normalization.

template <typename T>
class DenseBlock : public diff::Layer<T> {
 public:
  DenseBlock(int in_channels, int growth, int layers, std::vector<diff::Conv2d<T>*>& convs)
      : in_(in_channels), growth_(growth) {
    int c = in_channels;
    for (int i = 0; i < layers; ++i) {
      auto seq = std::make_unique<diff::Sequential<T>>();
      convs.push_back(&seq->add("conv", std::make_unique<diff::Conv2d<T>>(c, growth, 3, 1, 1)));
      seq->add("relu", std::make_unique<diff::ReLU<T>>());
      layers_.push_back(std::move(seq));
      c += growth;
    }
  }
  int out_channels() const { return in_ + growth_ * static_cast<int>(layers_.size()); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = diff::concat_channels(h, l->forward(h, mode));
    return h;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = gy;
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
      const int c_in = in_ + growth_ * i;
      auto [g_prev, g_new] = diff::split_channels(g, c_in);
      const Tensor<T> g_through = layers_[i]->backward(g_new);
      for (std::size_t k = 0; k < g_prev.size(); ++k) g_prev.data[k] += g_through.data[k];
      g = std::move(g_prev);
    }
    return g;
  }
  void collect(const std::string& prefix, ParamList<T>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(prefix + ".layer" + std::to_string(i), out);
  }

 private:
  int in_, growth_;
  std::vector<std::unique_ptr<diff::Sequential<T>>> layers_;
};

template <typename T>
class SNENet {
 public:
  SNENet(const Widths& w, int in_channels) : in_channels_(in_channels) {
    int c = 2 * w.sne_growth;
    auto stem = std::make_unique<diff::Sequential<T>>();
    convs_.push_back(&stem->add("conv", std::make_unique<diff::Conv2d<T>>(in_channels, c, 3, 1, 1)));
    stem->add("relu", std::make_unique<diff::ReLU<T>>());
    net_.add("stem", std::move(stem));
    for (int b = 0; b < 2; ++b) {
      auto& db = net_.add("db" + std::to_string(b),
                          std::make_unique<DenseBlock<T>>(c, w.sne_growth, w.sne_layers_per_block, convs_));
      c = db.out_channels();
      auto tb = conv_bn_act<T>(c, c / 2, 1, 1, false, false, convs_);
      tb->add("pool", std::make_unique<diff::AvgPool2x<T>>());
      net_.add("tb" + std::to_string(b), std::move(tb));
      c /= 2;
    }
    net_.add("gap", std::make_unique<diff::GlobalAvgPool<T>>());
    head_ = &net_.add("head", std::make_unique<diff::Conv2d<T>>(c, 3, 1));
    convs_.push_back(head_);
  }

  void init(Rng& rng) {
    for (auto* c : convs_) c->init(rng);
  }
  int in_channels() const { return in_channels_; }
  diff::Conv2d<T>& head() { return *head_; }

  /// Returns unit normals as an N x 3 tensor.
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    diff::require_rank4(x, "sne_net input");
    if (x.c() != in_channels_)
      throw Error("sne_net: expected " + std::to_string(in_channels_) + " channels, got " + diff::shape_str(x.shape));
    const Tensor<T> raw = net_.forward(x, mode);
    const int n = raw.n();
    raw_norm_.assign(n, T(0));
    normal_ = Tensor<T>({n, 3});
    for (int i = 0; i < n; ++i) {
      const T* v = raw.data.data() + 3 * i;
      const T len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      if (!(len >= T(1e-12))) throw Error("degenerate normal prediction");
      raw_norm_[i] = len;
      for (int k = 0; k < 3; ++k) normal_.data[3 * i + k] = v[k] / len;
    }
    return normal_;
  }

  Tensor<T> backward(const Tensor<T>& g_normal) {
    const int n = normal_.dim(0);
    Tensor<T> g_raw({n, 3, 1, 1});
    for (int i = 0; i < n; ++i) {
      const T* u = normal_.data.data() + 3 * i;
      const T* g = g_normal.data.data() + 3 * i;
      const T dot = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
      for (int k = 0; k < 3; ++k) g_raw.data[3 * i + k] = (g[k] - u[k] * dot) / raw_norm_[i];
    }
    return net_.backward(g_raw);
  }

  void collect(const std::string& prefix, ParamList<T>& out) { net_.collect(prefix, out); }

 private:
  int in_channels_;
  diff::Sequential<T> net_;
  std::vector<diff::Conv2d<T>*> convs_;
  diff::Conv2d<T>* head_ = nullptr;
  Tensor<T> normal_;
  std::vector<T> raw_norm_;
};

// ---------------------------------------------------------------------------
// Losses.

/// (1/n) sum R^2 - (1/n^2) (sum R)^2 with R = predicted - target.
inline double scale_invariant_loss(std::span<const double> predicted, std::span<const double> target) {
  if (predicted.size() != target.size()) throw Error("scale-invariant loss: size mismatch");
  const std::size_t n = predicted.size();
  if (n == 0) throw Error("scale-invariant loss: empty input");
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = predicted[i] - target[i];
    s += r;
    s2 += r * r;
  }
  const double dn = static_cast<double>(n);
  return std::max(0.0, s2 / dn - (s / dn) * (s / dn));
}

/// d/d(predicted) of scale_invariant_loss: (2/n) R_i - (2/n^2) sum R.
inline std::vector<double> scale_invariant_grad(std::span<const double> predicted,
                                                std::span<const double> target) {
  if (predicted.size() != target.size()) throw Error("scale-invariant loss: size mismatch");
  const std::size_t n = predicted.size();
  if (n == 0) throw Error("scale-invariant loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += predicted[i] - target[i];
  const double dn = static_cast<double>(n);
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = 2.0 / dn * (predicted[i] - target[i]) - 2.0 / (dn * dn) * s;
  return g;
}

inline constexpr double kAcosClamp = 1e-7;

/// Angular error arccos(n . n_hat) with the dot clamped away from +-1.
inline double mae_loss(const Eigen::Vector3d& n, const Eigen::Vector3d& n_hat) {
  if (std::abs(n.norm() - 1.0) > 1e-4 || std::abs(n_hat.norm() - 1.0) > 1e-4)
    throw Error("mae loss expects unit vectors");
  const double d = std::clamp(n.dot(n_hat), -1.0 + kAcosClamp, 1.0 - kAcosClamp);
  return std::acos(d);
}

/// Gradient of mae_loss with respect to n_hat (zero inside the clamp).
inline Eigen::Vector3d mae_grad(const Eigen::Vector3d& n, const Eigen::Vector3d& n_hat) {
  const double d = n.dot(n_hat);
  if (d >= 1.0 - kAcosClamp || d <= -1.0 + kAcosClamp) return Eigen::Vector3d::Zero();
  return -n / std::sqrt(1.0 - d * d);
}

inline double total_loss(double l_e, double l_n) {
  if (!std::isfinite(l_e) || !std::isfinite(l_n)) throw Error("loss terms must be finite");
  return l_e + l_n;
}

// ---------------------------------------------------------------------------
// Full model.

struct LossBreakdown {
  double l_e = 0.0;
  double l_n = 0.0;
  double total() const { return l_e + l_n; }
};

/// Input batches are N x C x m x m with channels (r, g, b, n, e+, e-); the
/// no-event ablation takes only the first four.
template <typename T>
class Model {
 public:
  Model(Ablation ablation, const Widths& widths) : ablation_(ablation), widths_(widths) {
    if (uses_ei()) ei_.emplace(widths, 2);
    if (uses_ofm()) ofm_.emplace(5);
    sne_.emplace(widths, ablation == Ablation::kNoEvent ? 4 : 5);
  }

  Ablation ablation() const { return ablation_; }
  const Widths& widths() const { return widths_; }
  bool uses_ei() const { return ablation_ == Ablation::kFull || ablation_ == Ablation::kNoOFM; }
  bool uses_ofm() const { return ablation_ == Ablation::kFull || ablation_ == Ablation::kNoEI; }
  int input_channels() const { return ablation_ == Ablation::kNoEvent ? 4 : 6; }

  EINet<T>* ei() { return ei_ ? &*ei_ : nullptr; }
  FusionModule<T>* ofm() { return ofm_ ? &*ofm_ : nullptr; }
  SNENet<T>& sne() { return *sne_; }

  void init(Rng& rng) {
    if (ei_) ei_->init(rng);
    if (ofm_) ofm_->init(rng);
    sne_->init(rng);
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    if (ei_) ei_->collect("ei", out);
    if (ofm_) ofm_->collect("ofm", out);
    sne_->collect("sne", out);
    return out;
  }

  /// Forward pass; returns N x 3 unit normals.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode) {
    diff::require_rank4(batch, "model input");
    if (batch.c() < input_channels())
      throw Error("model expects " + std::to_string(input_channels()) + " input channels, got " +
                  diff::shape_str(batch.shape));
    const int n = batch.n(), m = batch.h();
    batch_ = batch;
    if (ablation_ == Ablation::kNoEvent) return sne_->forward(take_channels(batch, 0, 4), mode);

    Tensor<T> events = take_channels(batch, 4, 2);
    if (ei_) {
      ehat_ = ei_->forward(events, mode);
    } else {
      ehat_ = Tensor<T>({n, 1, m, batch.w()});
      const std::size_t hw = batch.plane();
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < hw; ++k)
          ehat_.data[i * hw + k] = T(0.5) * (events.data[(2 * i) * hw + k] + events.data[(2 * i + 1) * hw + k]);
    }
    const Tensor<T> stacked = diff::concat_channels(take_channels(batch, 0, 4), ehat_);
    fused_ = ofm_ ? ofm_->forward(stacked, mode) : stacked;
    return sne_->forward(fused_, mode);
  }

  const Tensor<T>& interpolated_events() const { return ehat_; }
  const Tensor<T>& fused() const { return fused_; }

  /// Loss of the last forward pass against ground-truth normals (N x 3),
  /// followed by the full backward pass. Batch means of both terms.
  LossBreakdown backward(const Tensor<T>& predicted, const std::vector<Eigen::Vector3d>& truth) {
    const int n = predicted.dim(0);
    if (static_cast<int>(truth.size()) != n) throw Error("truth count does not match batch");
    LossBreakdown loss;
    Tensor<T> g_normal({n, 3});
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d nh(predicted.data[3 * i], predicted.data[3 * i + 1], predicted.data[3 * i + 2]);
      loss.l_n += mae_loss(truth[i], nh);
      const Eigen::Vector3d g = mae_grad(truth[i], nh) / static_cast<double>(n);
      for (int k = 0; k < 3; ++k) g_normal.data[3 * i + k] = static_cast<T>(g[k]);
    }
    loss.l_n /= n;

    Tensor<T> g_fused = sne_->backward(g_normal);
    if (ablation_ == Ablation::kNoEvent) return loss;
    if (ofm_) g_fused = ofm_->backward(g_fused);
    if (!ei_) return loss;

    // Gradient reaching O_e_hat through the fusion path, plus L_e against O_n.
    const std::size_t hw = batch_.plane();
    Tensor<T> g_ehat({n, 1, batch_.h(), batch_.w()});
    std::vector<double> pred(hw), target(hw);
    for (int i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < hw; ++k) {
        pred[k] = ehat_.data[i * hw + k];
        target[k] = batch_.data[(static_cast<std::size_t>(i) * batch_.c() + 3) * hw + k];
      }
      loss.l_e += scale_invariant_loss(pred, target);
      const std::vector<double> g = scale_invariant_grad(pred, target);
      for (std::size_t k = 0; k < hw; ++k)
        g_ehat.data[i * hw + k] = g_fused.data[(static_cast<std::size_t>(i) * 5 + 4) * hw + k] +
                                  static_cast<T>(g[k] / n);
    }
    loss.l_e /= n;
    ei_->backward(g_ehat);
    return loss;
  }

 private:
  static Tensor<T> take_channels(const Tensor<T>& x, int first, int count) {
    Tensor<T> out({x.n(), count, x.h(), x.w()});
    const std::size_t hw = x.plane();
    for (int i = 0; i < x.n(); ++i) {
      const T* src = x.data.data() + (static_cast<std::size_t>(i) * x.c() + first) * hw;
      std::copy(src, src + count * hw, out.data.data() + static_cast<std::size_t>(i) * count * hw);
    }
    return out;
  }

  Ablation ablation_;
  Widths widths_;
  std::optional<EINet<T>> ei_;
  std::optional<FusionModule<T>> ofm_;
  std::optional<SNENet<T>> sne_;
  Tensor<T> batch_, ehat_, fused_;
};

}  // namespace efps::net
