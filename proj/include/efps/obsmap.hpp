// SPDX-License-Identifier: Apache-2.0
//
// RGB observation maps, the normalized map, per-pixel samples and the
// rotational augmentation used during training.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "efps/common.hpp"
#include "efps/eventrep.hpp"
#include "efps/image.hpp"
#include "efps/io/binary.hpp"
#include "efps/obsgrid.hpp"

namespace efps::obsmap {

/// Channel order of a stored sample. O_e keeps both polarities here; the
/// networks collapse or interpolate them.
enum Channel : int { kRed = 0, kGreen, kBlue, kNormalized, kEventPos, kEventNeg };
inline constexpr int kRgbChannels = 4;
inline constexpr int kAllChannels = 6;

struct ObservationMapSet {
  int m = 0;
  std::vector<ObsGrid> maps;  ///< kAllChannels grids, or kRgbChannels without events
  int x = 0, y = 0;
  bool has_normal = false;
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();

  ObservationMapSet() = default;
  ObservationMapSet(int size, int channels) : m(size), maps(channels, ObsGrid(size)) {}

  int channels() const { return static_cast<int>(maps.size()); }
  bool operator==(const ObservationMapSet& o) const {
    return m == o.m && maps == o.maps && x == o.x && y == o.y && has_normal == o.has_normal &&
           normal == o.normal;
  }
};

/// Projects one intensity into the map; collisions keep the maximum.
inline void project_intensity(const Eigen::Vector3d& l, double intensity, ObsGrid& map) {
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw Error("intensity out of range");
  require_unit(l);
  deposit_max(map, l, static_cast<float>(intensity));
}

inline std::array<ObsGrid, 3> build_rgb_obsmaps(const std::vector<ImageF>& frames,
                                                const std::vector<LightSample>& lights, int x,
                                                int y, int m) {
  if (frames.size() != lights.size()) throw Error("frame count does not match light count");
  std::array<ObsGrid, 3> maps{ObsGrid(m), ObsGrid(m), ObsGrid(m)};
  for (std::size_t j = 0; j < frames.size(); ++j) {
    const ImageF& f = frames[j];
    if (f.channels != 3) throw Error("RGB frame expected");
    if (!frames.front().same_shape(f)) throw Error("frames differ in size");
    if (!f.contains(x, y)) throw Error("pixel outside frame");
    for (int c = 0; c < 3; ++c) project_intensity(lights[j].direction, f.at(x, y, c), maps[c]);
  }
  return maps;
}

/// (O_r + O_g + O_b) / max(O_r + O_g + O_b), per map.
inline ObsGrid normalize_obsmap(const ObsGrid& r, const ObsGrid& g, const ObsGrid& b) {
  if (r.m != g.m || r.m != b.m) throw Error("observation maps differ in size");
  ObsGrid out(r.m);
  float peak = 0.0f;
  for (std::size_t i = 0; i < out.cells.size(); ++i) {
    out.cells[i] = r.cells[i] + g.cells[i] + b.cells[i];
    peak = std::max(peak, out.cells[i]);
  }
  if (!(peak > 0.0f)) throw Error("empty observation map");
  for (float& v : out.cells) v /= peak;
  return out;
}

namespace detail {

/// Quarter turns for angles that are exact multiples of 90 degrees, else -1.
inline int quarter_turns(double angle) {
  const double q = angle / (kPi / 2.0);
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-9) return -1;
  return static_cast<int>(((static_cast<long long>(r) % 4) + 4) % 4);
}

inline ObsGrid rotate_grid(const ObsGrid& src, double angle) {
  const int m = src.m;
  const int turns = quarter_turns(angle);
  ObsGrid out(m);
  if (turns == 0) return src;
  if (turns > 0) {
    // (u, v) -> (-v, u) per quarter turn on the centered cell lattice.
    for (int iy = 0; iy < m; ++iy)
      for (int ix = 0; ix < m; ++ix) {
        int jx = ix, jy = iy;
        for (int t = 0; t < turns; ++t) {
          const int nx = m - 1 - jy;
          const int ny = jx;
          jx = nx;
          jy = ny;
        }
        out.at(jx, jy) = src.at(ix, iy);
      }
    return out;
  }
  // Nearest-cell forward assignment. A cell already taken sends the value to
  // the closest free cell among the 3 x 3 around the rotated position, so
  // sparse maps keep their sample count; max only when all nine are taken.
  const double c = std::cos(angle), s = std::sin(angle);
  const double half = m / 2.0;
  for (int iy = 0; iy < m; ++iy)
    for (int ix = 0; ix < m; ++ix) {
      const float v = src.at(ix, iy);
      if (v == 0.0f) continue;
      const double u = ix + 0.5 - half, w = iy + 0.5 - half;
      const double px = c * u - s * w + half, py = s * u + c * w + half;
      const int fx = static_cast<int>(std::floor(px)), fy = static_cast<int>(std::floor(py));
      int bx = -1, by = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int jx = fx + dx, jy = fy + dy;
          if (jx < 0 || jy < 0 || jx >= m || jy >= m || out.at(jx, jy) != 0.0f) continue;
          const double d = (jx + 0.5 - px) * (jx + 0.5 - px) + (jy + 0.5 - py) * (jy + 0.5 - py);
          if (d < best) {
            best = d;
            bx = jx;
            by = jy;
          }
        }
      if (bx >= 0) {
        out.at(bx, by) = v;
      } else if (fx >= 0 && fy >= 0 && fx < m && fy < m) {
        out.at(fx, fy) = std::max(out.at(fx, fy), v);
      }
    }
  return out;
}

}  // namespace detail

/// Rotates every map about its center and the normal's tangential part by
/// the same angle. Quarter turns are exact permutations; other angles use
/// nearest-cell assignment.
inline ObservationMapSet rotate_sample(const ObservationMapSet& sample, double angle) {
  ObservationMapSet out = sample;
  const int turns = detail::quarter_turns(angle);
  if (turns == 0) return out;
  for (auto& g : out.maps) g = detail::rotate_grid(g, angle);
  if (sample.has_normal) {
    const Eigen::Vector3d& n = sample.normal;
    if (turns > 0) {
      Eigen::Vector3d r = n;
      for (int t = 0; t < turns; ++t) r = Eigen::Vector3d(-r.y(), r.x(), r.z());
      out.normal = r;
    } else {
      const double c = std::cos(angle), s = std::sin(angle);
      out.normal = Eigen::Vector3d(c * n.x() - s * n.y(), s * n.x() + c * n.y(), n.z());
    }
  }
  return out;
}

/// Everything one capture contributes to sample building. `lights[j]` pairs
/// with `frames[j]`; window j spans [lights[j].t_start, lights[j].t_end) and
/// exists for every frame but the last.
struct Capture {
  std::vector<ImageF> frames;
  std::vector<LightSample> lights;
  eventrep::EventStream events;
  Mask mask;
  std::vector<Eigen::Vector3d> normals;  ///< row-major per pixel; empty when unknown
};

struct SampleOptions {
  int m = 32;
  double lambda = eventrep::kDefaultLambda;
  int bins = eventrep::kDefaultBins;
  bool with_events = true;
};

/// One normalized voxel grid per inter-frame window.
inline std::vector<eventrep::VoxelGrid> window_grids(const Capture& cap, double lambda, int bins) {
  std::vector<eventrep::VoxelGrid> grids;
  if (cap.lights.size() < 2) throw Error("at least two frames are required");
  const int w = cap.frames.front().width, h = cap.frames.front().height;
  if (cap.events.width != w || cap.events.height != h)
    throw Error("event sensor size does not match frames");
  for (std::size_t j = 0; j + 1 < cap.lights.size(); ++j) {
    const LightSample& l = cap.lights[j];
    const auto slice = eventrep::slice_window(cap.events.events, l.t_start, l.t_end);
    grids.push_back(eventrep::normalize_voxel_grid(
        eventrep::accumulate_voxel_grid(slice, w, h, l.t_end - l.t_start, bins, lambda, l.t_start)));
  }
  return grids;
}

/// Samples for every masked pixel, in row-major pixel order. Channels are
/// (r, g, b, n) or (r, g, b, n, e+, e-).
inline std::vector<ObservationMapSet> build_samples(const Capture& cap, const SampleOptions& opt) {
  if (cap.frames.empty()) throw Error("capture has no frames");
  if (cap.frames.size() != cap.lights.size()) throw Error("frame count does not match light count");
  const int w = cap.frames.front().width, h = cap.frames.front().height;
  if (cap.mask.width != w || cap.mask.height != h) throw Error("mask size does not match frames");
  const bool labeled = !cap.normals.empty();
  if (labeled && cap.normals.size() != static_cast<std::size_t>(w) * h)
    throw Error("normal map size does not match frames");

  std::vector<std::pair<int, int>> pixels;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (cap.mask.at(x, y)) pixels.emplace_back(x, y);
  if (pixels.empty()) throw Error("mask is empty");

  std::vector<eventrep::VoxelGrid> grids;
  std::vector<LightSample> windows;
  if (opt.with_events) {
    grids = window_grids(cap, opt.lambda, opt.bins);
    windows.assign(cap.lights.begin(), cap.lights.end() - 1);
  }
  const int channels = opt.with_events ? kAllChannels : kRgbChannels;
  std::vector<ObservationMapSet> out(pixels.size());
  parallel_for(static_cast<std::int64_t>(pixels.size()), [&](std::int64_t i) {
    const auto [x, y] = pixels[i];
    ObservationMapSet s(opt.m, channels);
    s.x = x;
    s.y = y;
    auto rgb = build_rgb_obsmaps(cap.frames, cap.lights, x, y, opt.m);
    s.maps[kNormalized] = normalize_obsmap(rgb[0], rgb[1], rgb[2]);
    for (int c = 0; c < 3; ++c) s.maps[c] = std::move(rgb[c]);
    if (opt.with_events) {
      auto e = eventrep::event_obsmap(grids, x, y, windows, opt.m);
      s.maps[kEventPos] = std::move(e.positive);
      s.maps[kEventNeg] = std::move(e.negative);
    }
    if (labeled) {
      s.has_normal = true;
      s.normal = cap.normals[static_cast<std::size_t>(y) * w + x];
    }
    out[i] = std::move(s);
  });
  return out;
}

// ---------------------------------------------------------------------------
// OBS1: "OBS1", u32 pixel_count, u32 m, u32 channel_count, then f32 cells in
// pixel-major, channel-major, row-major order.
// NRM1: "NRM1", u32 width, u32 height, then width*height f32 triples.

inline std::vector<char> encode_obs1(const std::vector<ObservationMapSet>& samples, int m,
                                     int channels) {
  io::ByteWriter w;
  w.magic("OBS1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(channels));
  for (const auto& s : samples) {
    if (s.m != m || s.channels() != channels) throw Error("inconsistent sample shape");
    for (const auto& g : s.maps) w.array(g.cells.data(), g.cells.size());
  }
  return w.bytes();
}

struct Obs1Header {
  std::uint32_t pixel_count = 0;
  std::uint32_t m = 0;
  std::uint32_t channels = 0;
};

inline std::vector<ObservationMapSet> decode_obs1(std::vector<char> bytes,
                                                  const std::string& origin = "<obs1>",
                                                  Obs1Header* header = nullptr) {
  io::ByteReader r(std::move(bytes), origin);
  r.expect_magic("OBS1");
  Obs1Header h;
  h.pixel_count = r.get<std::uint32_t>();
  h.m = r.get<std::uint32_t>();
  h.channels = r.get<std::uint32_t>();
  if (h.m == 0 || h.channels == 0) throw Error(origin + ": empty map shape");
  const std::size_t cells = static_cast<std::size_t>(h.m) * h.m;
  if (r.remaining() != static_cast<std::size_t>(h.pixel_count) * h.channels * cells * 4)
    throw Error(origin + ": payload size does not match header");
  std::vector<ObservationMapSet> out(h.pixel_count);
  for (auto& s : out) {
    s = ObservationMapSet(static_cast<int>(h.m), static_cast<int>(h.channels));
    for (auto& g : s.maps) r.array(g.cells.data(), cells);
  }
  if (header) *header = h;
  return out;
}

struct NormalMap {
  int width = 0;
  int height = 0;
  std::vector<Eigen::Vector3f> normals;
};

inline std::vector<char> encode_nrm1(const NormalMap& nm) {
  if (nm.normals.size() != static_cast<std::size_t>(nm.width) * nm.height)
    throw Error("normal map size mismatch");
  io::ByteWriter w;
  w.magic("NRM1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nm.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nm.height));
  for (const auto& n : nm.normals) w.array(n.data(), 3);
  return w.bytes();
}

inline NormalMap decode_nrm1(std::vector<char> bytes, const std::string& origin = "<nrm1>") {
  io::ByteReader r(std::move(bytes), origin);
  r.expect_magic("NRM1");
  NormalMap nm;
  nm.width = static_cast<int>(r.get<std::uint32_t>());
  nm.height = static_cast<int>(r.get<std::uint32_t>());
  const std::size_t n = static_cast<std::size_t>(nm.width) * nm.height;
  if (r.remaining() != n * 12) throw Error(origin + ": payload size does not match header");
  nm.normals.resize(n);
  for (auto& v : nm.normals) r.array(v.data(), 3);
  return nm;
}

}  // namespace efps::obsmap
