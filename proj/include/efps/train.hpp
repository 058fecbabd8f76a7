// SPDX-License-Identifier: Apache-2.0
//
// Training configuration, the mini-batch training loop and MAE evaluation.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "efps/common.hpp"
#include "efps/diffcore/checkpoint.hpp"
#include "efps/diffcore/optim.hpp"
#include "efps/io/keyvalue.hpp"
#include "efps/networks.hpp"
#include "efps/obsmap.hpp"

namespace efps::net {

struct NetConfig {
  int m = 16;
  int k_aug = 1;
  int batch_size = 256;
  int epochs = 30;
  double lr = 1e-3;
  double lambda = eventrep::kDefaultLambda;
  int bins = eventrep::kDefaultBins;
  std::uint64_t seed = 1;
  std::string scale = "desk";
  Ablation ablation = Ablation::kFull;
  int base_channels = 0;  ///< 0 keeps the scale's default widths
  int sne_growth = 0;

  void validate() const {
    if (m != 16 && m != 32) throw Error("m must be 16 or 32");
    if (k_aug < 1) throw Error("k_aug must be at least 1");
    if (batch_size < 2) throw Error("batch_size must be at least 2");
    if (epochs < 0) throw Error("epochs must be non-negative");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be a finite non-negative number");
    if (!(lambda > 0.0)) throw Error("lambda must be positive");
    if (bins < 1) throw Error("bins must be at least 1");
    if (scale != "desk" && scale != "paper") throw Error("scale must be desk or paper");
    if (base_channels < 0 || sne_growth < 0) throw Error("channel widths must be positive");
  }

  Widths widths() const {
    Widths w = scale == "paper" ? Widths::paper() : Widths::desk();
    if (base_channels > 0) {
      w.ei_head = base_channels;
      w.ei_down1 = 2 * base_channels;
      w.ei_down2 = 4 * base_channels;
      w.ei_residual = 4 * base_channels;
      w.ei_up1 = 2 * base_channels;
      w.ei_up2 = base_channels;
    }
    if (sne_growth > 0) w.sne_growth = sne_growth;
    return w;
  }

  static NetConfig from_keyvalue(const io::KeyValueFile& kv) {
    NetConfig c;
    c.m = static_cast<int>(kv.integer_or("m", c.m));
    c.k_aug = static_cast<int>(kv.integer_or("k_aug", c.k_aug));
    c.batch_size = static_cast<int>(kv.integer_or("batch_size", c.batch_size));
    c.epochs = static_cast<int>(kv.integer_or("epochs", c.epochs));
    c.lr = kv.number_or("lr", c.lr);
    c.lambda = kv.number_or("lambda", c.lambda);
    c.bins = static_cast<int>(kv.integer_or("bins", c.bins));
    c.seed = static_cast<std::uint64_t>(kv.integer_or("seed", static_cast<long long>(c.seed)));
    c.scale = kv.get_or("scale", c.scale);
    c.ablation = parse_ablation(kv.get_or("ablation", "full"));
    c.base_channels = static_cast<int>(kv.integer_or("base_channels", 0));
    c.sne_growth = static_cast<int>(kv.integer_or("sne_growth", 0));
    c.validate();
    return c;
  }

  std::map<std::string, std::string> to_map() const {
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {{"m", std::to_string(m)},
            {"k_aug", std::to_string(k_aug)},
            {"batch_size", std::to_string(batch_size)},
            {"epochs", std::to_string(epochs)},
            {"lr", num(lr)},
            {"lambda", num(lambda)},
            {"bins", std::to_string(bins)},
            {"seed", std::to_string(seed)},
            {"scale", scale},
            {"ablation", to_string(ablation)},
            {"base_channels", std::to_string(base_channels)},
            {"sne_growth", std::to_string(sne_growth)}};
  }

  static NetConfig from_map(const std::map<std::string, std::string>& meta) {
    io::KeyValueFile kv;
    for (const auto& [k, v] : meta) kv.set(k, v);
    return from_keyvalue(kv);
  }
};

/// Packs samples into an N x C x m x m batch. Missing normals are an error
/// when `need_normals` is set.
inline Tensor<float> pack_samples(const std::vector<const obsmap::ObservationMapSet*>& samples,
                                  int channels) {
  if (samples.empty()) throw Error("empty batch");
  const int m = samples.front()->m;
  Tensor<float> t({static_cast<int>(samples.size()), channels, m, m});
  const std::size_t plane = static_cast<std::size_t>(m) * m;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    if (s.m != m) throw Error("samples differ in map size");
    if (s.channels() < channels)
      throw Error("sample has " + std::to_string(s.channels()) + " channels, model needs " +
                  std::to_string(channels));
    for (int c = 0; c < channels; ++c)
      std::copy(s.maps[c].cells.begin(), s.maps[c].cells.end(),
                t.data.begin() + static_cast<std::ptrdiff_t>((i * channels + c) * plane));
  }
  return t;
}

struct EpochLoss {
  int epoch = 0;
  long long steps = 0;
  double lr = 0.0;  ///< learning rate of the epoch's last step
  double l_e = 0.0;
  double l_n = 0.0;
  double total() const { return l_e + l_n; }
};

struct TrainResult {
  std::vector<EpochLoss> history;
  long long steps = 0;
  std::size_t samples_per_epoch = 0;
};

/// Rotated copies of every sample: K per input, at angles 2 pi j / K.
inline std::vector<obsmap::ObservationMapSet> augment(const std::vector<obsmap::ObservationMapSet>& samples,
                                                      int k) {
  if (k < 1) throw Error("k_aug must be at least 1");
  std::vector<obsmap::ObservationMapSet> out;
  out.reserve(samples.size() * static_cast<std::size_t>(k));
  for (const auto& s : samples)
    for (int j = 0; j < k; ++j) out.push_back(obsmap::rotate_sample(s, 2.0 * kPi * j / k));
  return out;
}

using ProgressFn = std::function<void(const EpochLoss&)>;

/// Mini-batch Adam on L_total with a per-step cosine schedule from cfg.lr to
/// zero. The sample order is reshuffled every epoch from cfg.seed; a trailing
/// batch of one sample is skipped because batch statistics need two.
inline TrainResult train(Model<float>& model, const std::vector<obsmap::ObservationMapSet>& samples,
                         const NetConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (samples.empty()) throw Error("empty dataset");
  for (const auto& s : samples) {
    if (!s.has_normal) throw Error("training samples need ground-truth normals");
    if (s.m != cfg.m) throw Error("sample map size does not match config m");
  }
  const std::vector<obsmap::ObservationMapSet> data = augment(samples, cfg.k_aug);
  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t full = n / bs, rest = n % bs;
  const long long per_epoch = static_cast<long long>(full + (rest >= 2 ? 1 : 0));
  if (per_epoch == 0) throw Error("dataset too small for one batch");
  const long long total_steps = per_epoch * cfg.epochs;

  diff::Adam<float> adam(model.parameters(), diff::AdamConfig{cfg.lr});
  Rng rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFull);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainResult result;
  result.samples_per_epoch = n;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochLoss el;
    el.epoch = epoch + 1;
    for (std::size_t b0 = 0; b0 + 2 <= n; b0 += bs) {
      const std::size_t b1 = std::min(n, b0 + bs);
      std::vector<const obsmap::ObservationMapSet*> batch;
      std::vector<Eigen::Vector3d> truth;
      for (std::size_t i = b0; i < b1; ++i) {
        batch.push_back(&data[order[i]]);
        truth.push_back(data[order[i]].normal);
      }
      const double lr = diff::cosine_lr(step, total_steps, cfg.lr, 0.0);
      adam.zero_grad();
      const Tensor<float> x = pack_samples(batch, model.input_channels());
      const Tensor<float> y = model.forward(x, Mode::kTrain);
      const LossBreakdown loss = model.backward(y, truth);
      if (!std::isfinite(loss.l_e) || !std::isfinite(loss.l_n))
        throw Error("training diverged at step " + std::to_string(step));
      adam.step(lr);
      el.l_e += loss.l_e;
      el.l_n += loss.l_n;
      el.lr = lr;
      ++el.steps;
      ++step;
    }
    el.l_e /= static_cast<double>(el.steps);
    el.l_n /= static_cast<double>(el.steps);
    result.history.push_back(el);
    if (progress) progress(el);
  }
  result.steps = step;
  return result;
}

/// Eval-mode predictions for every sample, in order.
inline std::vector<Eigen::Vector3d> predict(Model<float>& model,
                                            const std::vector<obsmap::ObservationMapSet>& samples,
                                            int chunk = 512) {
  std::vector<Eigen::Vector3d> out;
  out.reserve(samples.size());
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += static_cast<std::size_t>(chunk)) {
    const std::size_t b1 = std::min(samples.size(), b0 + static_cast<std::size_t>(chunk));
    std::vector<const obsmap::ObservationMapSet*> batch;
    for (std::size_t i = b0; i < b1; ++i) batch.push_back(&samples[i]);
    const Tensor<float> y = model.forward(pack_samples(batch, model.input_channels()), Mode::kEval);
    for (std::size_t i = 0; i < batch.size(); ++i)
      out.emplace_back(y.data[3 * i], y.data[3 * i + 1], y.data[3 * i + 2]);
  }
  return out;
}

/// Angle between two directions in degrees, with the cosine clamped to [-1, 1].
inline double angular_error_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return rad2deg(std::acos(c));
}

/// Mean angular error in degrees over paired normals.
inline double mean_angular_error_deg(const std::vector<Eigen::Vector3d>& truth,
                                     const std::vector<Eigen::Vector3d>& predicted) {
  if (truth.size() != predicted.size()) throw Error("prediction count does not match truth");
  if (truth.empty()) throw Error("empty mask");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += angular_error_deg(truth[i], predicted[i]);
  return s / static_cast<double>(truth.size());
}

/// Error-map color: linear blue (0 degrees) to red (60 degrees and above).
inline std::array<std::uint8_t, 3> error_color(double error_deg) {
  const double t = std::clamp(error_deg / 60.0, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * t)), 0,
          static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)))};
}

struct ObjectScore {
  std::string object;
  std::size_t pixels = 0;
  double mae_deg = 0.0;
};

struct EvalReport {
  std::vector<ObjectScore> objects;
  double average_deg = 0.0;  ///< mean of the per-object MAEs
};

struct LabeledObject {
  std::string name;
  const std::vector<obsmap::ObservationMapSet>* samples = nullptr;
};

inline EvalReport evaluate(Model<float>& model, const std::vector<LabeledObject>& objects) {
  if (objects.empty()) throw Error("nothing to evaluate");
  EvalReport report;
  for (const auto& obj : objects) {
    std::vector<Eigen::Vector3d> truth;
    for (const auto& s : *obj.samples) {
      if (!s.has_normal) throw Error("evaluation samples need ground-truth normals");
      truth.push_back(s.normal);
    }
    if (truth.empty()) throw Error("empty mask");
    const auto pred = predict(model, *obj.samples);
    report.objects.push_back({obj.name, truth.size(), mean_angular_error_deg(truth, pred)});
  }
  for (const auto& o : report.objects) report.average_deg += o.mae_deg;
  report.average_deg /= static_cast<double>(report.objects.size());
  return report;
}

/// Checkpoint with the config recorded as metadata, and the inverse.
inline diff::Checkpoint save_model(Model<float>& model, const NetConfig& cfg) {
  auto meta = cfg.to_map();
  meta["channels"] = std::to_string(model.input_channels());
  meta["version"] = kVersion;
  return diff::make_checkpoint(model.parameters(), meta);
}

inline Model<float> load_model(const diff::Checkpoint& ck, NetConfig* cfg_out = nullptr) {
  auto meta = ck.meta;
  meta.erase("channels");
  meta.erase("version");
  const NetConfig cfg = NetConfig::from_map(meta);
  Model<float> model(cfg.ablation, cfg.widths());
  auto params = model.parameters();
  diff::restore_checkpoint(ck, params);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace efps::net
