// SPDX-License-Identifier: Apache-2.0
//
// Synthetic labeled captures: Lambertian height fields under a point light
// moving along a hemisphere spiral, with a log-intensity event simulator.
//
// Scene coordinates: x to the right, y up, z toward the viewer. Image row y
// therefore maps to decreasing scene y.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "efps/common.hpp"
#include "efps/eventrep.hpp"
#include "efps/image.hpp"
#include "efps/obsgrid.hpp"
#include "efps/obsmap.hpp"

namespace efps::synth {

enum class SceneKind { kSphere, kBlob, kRamp };

inline SceneKind parse_scene(const std::string& s) {
  if (s == "sphere") return SceneKind::kSphere;
  if (s == "blob") return SceneKind::kBlob;
  if (s == "ramp") return SceneKind::kRamp;
  throw Error("invalid scene `" + s + "` (expected sphere, blob, ramp)");
}

inline std::string to_string(SceneKind k) {
  switch (k) {
    case SceneKind::kSphere: return "sphere";
    case SceneKind::kBlob: return "blob";
    case SceneKind::kRamp: return "ramp";
  }
  return "?";
}

struct Trajectory {
  double polar_start_deg = 15.0;
  double polar_end_deg = 60.0;
  double azimuth_turns = 2.0;  ///< full turns over the sequence (4 pi)

  /// Direction at continuous parameter s in [0, 1].
  Eigen::Vector3d at(double s) const {
    const double polar = deg2rad(polar_start_deg + (polar_end_deg - polar_start_deg) * s);
    const double azimuth = 2.0 * kPi * azimuth_turns * s;
    return {std::sin(polar) * std::cos(azimuth), std::sin(polar) * std::sin(azimuth), std::cos(polar)};
  }
};

struct SceneSpec {
  SceneKind kind = SceneKind::kSphere;
  int width = 64;
  int height = 64;
  Eigen::Vector3d albedo{0.9, 0.75, 0.6};
  ImageF albedo_map;  ///< optional per-pixel RGB albedo; overrides `albedo`
  double ambient = 0.15;
  Trajectory trajectory;
  double radius = 0.45;  ///< object disc radius as a fraction of the shorter side
  int blob_count = 5;
  std::uint64_t seed = 1;

  void validate() const {
    if (width < 4 || height < 4) throw Error("scene must be at least 4x4 pixels");
    if (!(ambient >= 0.0 && ambient < 1.0)) throw Error("ambient must be in [0, 1)");
    if ((albedo.array() < 0.0).any() || (albedo.array() > 1.0).any())
      throw Error("albedo must be in [0, 1]");
    if (!albedo_map.empty() && (albedo_map.width != width || albedo_map.height != height ||
                                albedo_map.channels != 3))
      throw Error("albedo map must be an RGB image of the scene size");
    if (!(radius > 0.0 && radius <= 0.5)) throw Error("radius must be in (0, 0.5]");
  }
};

struct EventSimConfig {
  double contrast = 0.15;
  double log_eps = 1e-3;
  int substeps = 8;
  double frame_period = 1.0 / 90.0;  ///< seconds between frames

  void validate() const {
    if (!(contrast > 0.0) || !std::isfinite(contrast)) throw Error("contrast threshold must be positive");
    if (!(log_eps > 0.0) || !std::isfinite(log_eps)) throw Error("log epsilon must be positive");
    if (substeps < 1) throw Error("sub-step count must be at least 1");
    if (!(frame_period > 0.0)) throw Error("frame period must be positive");
  }
};

/// Ground-truth geometry: per-pixel unit normals (row-major) and the mask.
struct Geometry {
  int width = 0;
  int height = 0;
  std::vector<Eigen::Vector3d> normals;
  Mask mask;
};

namespace detail {

struct Gaussian {
  double u, v, amplitude, sigma;
};

inline std::vector<Gaussian> blob_terms(const SceneSpec& spec) {
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + 17);
  std::vector<Gaussian> g;
  for (int k = 0; k < spec.blob_count; ++k) {
    const double r = 0.6 * std::sqrt(rng.uniform());
    const double a = 2.0 * kPi * rng.uniform();
    g.push_back({r * std::cos(a), r * std::sin(a), rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.45)});
  }
  return g;
}

}  // namespace detail

/// Normals and mask for a scene. Coordinates (u, v) are pixel offsets from
/// the image center divided by the disc radius in pixels; v points up.
inline Geometry scene_geometry(const SceneSpec& spec) {
  spec.validate();
  Geometry g;
  g.width = spec.width;
  g.height = spec.height;
  g.normals.assign(static_cast<std::size_t>(spec.width) * spec.height, Eigen::Vector3d::Zero());
  g.mask = Mask(spec.width, spec.height, 1, 0);
  const double cx = (spec.width - 1) / 2.0, cy = (spec.height - 1) / 2.0;
  const double rpx = spec.radius * std::min(spec.width, spec.height);
  const auto blobs = detail::blob_terms(spec);

  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double u = (x - cx) / rpx, v = (cy - y) / rpx;
      const double rr = u * u + v * v;
      Eigen::Vector3d n;
      bool inside = rr < 1.0;
      switch (spec.kind) {
        case SceneKind::kSphere:
          n = Eigen::Vector3d(u, v, std::sqrt(std::max(0.0, 1.0 - rr)));
          break;
        case SceneKind::kBlob: {
          // z = sum a exp(-d^2 / (2 s^2)); n ~ (-dz/du, -dz/dv, 1).
          double dzdu = 0.0, dzdv = 0.0;
          for (const auto& b : blobs) {
            const double du = u - b.u, dv = v - b.v;
            const double e = b.amplitude * std::exp(-(du * du + dv * dv) / (2.0 * b.sigma * b.sigma));
            dzdu -= e * du / (b.sigma * b.sigma);
            dzdv -= e * dv / (b.sigma * b.sigma);
          }
          n = Eigen::Vector3d(-dzdu, -dzdv, 1.0);
          break;
        }
        case SceneKind::kRamp:
          n = Eigen::Vector3d(-0.5, 0.25, 1.0);
          inside = true;
          break;
      }
      if (!inside) continue;
      const std::size_t k = static_cast<std::size_t>(y) * spec.width + x;
      g.normals[k] = n.normalized();
      g.mask.at(x, y) = 255;
    }
  return g;
}

/// Lambertian shading of one pixel: clamp(albedo max(0, n.l) + a, 0, 1).
inline double shade(double albedo, const Eigen::Vector3d& n, const Eigen::Vector3d& l, double ambient) {
  return std::clamp(albedo * std::max(0.0, n.dot(l)) + ambient, 0.0, 1.0);
}

/// RGB frame under light `l`. Background pixels receive only the ambient term.
inline ImageF render_frame(const SceneSpec& spec, const Geometry& geo, const Eigen::Vector3d& l) {
  ImageF img(spec.width, spec.height, 3);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const bool fg = geo.mask.at(x, y) != 0;
      const Eigen::Vector3d& n = geo.normals[static_cast<std::size_t>(y) * spec.width + x];
      for (int c = 0; c < 3; ++c) {
        const double a = spec.albedo_map.empty() ? spec.albedo[c] : spec.albedo_map.at(x, y, c);
        img.at(x, y, c) = static_cast<float>(fg ? shade(a, n, l, spec.ambient)
                                                : std::clamp(spec.ambient, 0.0, 1.0));
      }
    }
  return img;
}

/// Log-intensity event simulation over an irradiance sequence. Each pixel
/// keeps a reference log value r, initialized from the first image; every
/// step to value v emits floor(|log(v + eps) - r| / C) events of the sign of
/// the difference, each moving r by C. Timestamps interpolate the crossing
/// level linearly within the step and stay strictly before the step end.
inline std::vector<eventrep::EventRecord> simulate_events(const std::vector<ImageF>& sequence,
                                                          const std::vector<double>& times,
                                                          const EventSimConfig& cfg) {
  cfg.validate();
  if (sequence.size() < 2) throw Error("event simulation needs at least two images");
  if (sequence.size() != times.size()) throw Error("image count does not match timestamp count");
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1])) throw Error("timestamps must increase");
  const int w = sequence.front().width, h = sequence.front().height;
  for (const auto& img : sequence)
    if (img.width != w || img.height != h || img.channels != 1)
      throw Error("event simulation needs single-channel images of one size");

  const std::size_t npix = static_cast<std::size_t>(w) * h;
  std::vector<std::vector<eventrep::EventRecord>> per_pixel(npix);
  parallel_for(static_cast<std::int64_t>(npix), [&](std::int64_t p) {
    const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
    double ref = std::log(sequence[0].data[p] + cfg.log_eps);
    double prev = ref;
    auto& out = per_pixel[p];
    for (std::size_t k = 1; k < sequence.size(); ++k) {
      const double cur = std::log(sequence[k].data[p] + cfg.log_eps);
      const double diff = cur - ref;
      const auto count = static_cast<long long>(std::floor(std::abs(diff) / cfg.contrast));
      const int sign = diff > 0.0 ? 1 : -1;
      const double t0 = times[k - 1], t1 = times[k];
      const double last = std::nextafter(t1, t0);
      for (long long i = 1; i <= count; ++i) {
        const double level = ref + sign * cfg.contrast * static_cast<double>(i);
        double frac = cur != prev ? (level - prev) / (cur - prev) : 1.0;
        frac = std::clamp(frac, 0.0, 1.0);
        out.push_back({x, y, std::min(t0 + frac * (t1 - t0), last), sign});
      }
      ref += sign * cfg.contrast * static_cast<double>(count);
      prev = cur;
    }
  });

  std::vector<eventrep::EventRecord> events;
  for (auto& v : per_pixel) events.insert(events.end(), v.begin(), v.end());
  std::sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
    return std::tie(a.t, a.y, a.x, a.polarity) < std::tie(b.t, b.y, b.x, b.polarity);
  });
  return events;
}

/// Renders F frames along the trajectory and simulates events from S
/// sub-steps per frame interval. Light j opens window j, which ends at frame
/// j + 1; the final light has an empty window.
inline obsmap::Capture generate_capture(const SceneSpec& spec, int frames, const EventSimConfig& cfg) {
  spec.validate();
  cfg.validate();
  if (frames < 2) throw Error("at least two frames are required");
  const Geometry geo = scene_geometry(spec);
  obsmap::Capture cap;
  cap.mask = geo.mask;
  cap.normals = geo.normals;

  for (int j = 0; j < frames; ++j) {
    const double s = static_cast<double>(j) / (frames - 1);
    LightSample l;
    l.direction = spec.trajectory.at(s);
    l.frame_index = j;
    l.t_start = j * cfg.frame_period;
    l.t_end = j + 1 < frames ? (j + 1) * cfg.frame_period : l.t_start;
    cap.lights.push_back(l);
    cap.frames.push_back(render_frame(spec, geo, l.direction));
  }

  const int steps = (frames - 1) * cfg.substeps;
  std::vector<ImageF> sequence(static_cast<std::size_t>(steps) + 1);
  std::vector<double> times(sequence.size());
  parallel_for(steps + 1, [&](std::int64_t k) {
    const int j = static_cast<int>(k / cfg.substeps);
    const int sub = static_cast<int>(k % cfg.substeps);
    if (sub == 0) {
      sequence[k] = to_gray(cap.frames[j]);
      times[k] = cap.lights[j].t_start;
      return;
    }
    const double s = (j + static_cast<double>(sub) / cfg.substeps) / (frames - 1);
    sequence[k] = to_gray(render_frame(spec, geo, spec.trajectory.at(s)));
    times[k] = (j + static_cast<double>(sub) / cfg.substeps) * cfg.frame_period;
  });
  cap.events.width = spec.width;
  cap.events.height = spec.height;
  cap.events.events = simulate_events(sequence, times, cfg);
  return cap;
}

}  // namespace efps::synth
