// SPDX-License-Identifier: Apache-2.0
//
// Event stream representation: polarity-separated voxel grids, their tanh
// normalization, and sparse per-pixel event observation maps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "efps/common.hpp"
#include "efps/io/binary.hpp"
#include "efps/obsgrid.hpp"

namespace efps::eventrep {

struct EventRecord {
  int x = 0;
  int y = 0;
  double t = 0.0;    ///< seconds
  int polarity = 1;  ///< +1 or -1

  bool operator==(const EventRecord&) const = default;
};

struct EventStream {
  int width = 0;
  int height = 0;
  std::vector<EventRecord> events;
};

/// Time-binned event counts of shape (height, width, bins, 2). Channel 0
/// holds positive polarity, channel 1 negative. Entries are count / lambda
/// until normalize_voxel_grid applies tanh.
struct VoxelGrid {
  int width = 0;
  int height = 0;
  int bins = 0;
  double period = 0.0;
  double lambda = 1.0;
  bool normalized = false;
  std::vector<double> values;

  VoxelGrid() = default;
  VoxelGrid(int w, int h, int b, double period_s, double lam)
      : width(w), height(h), bins(b), period(period_s), lambda(lam),
        values(static_cast<std::size_t>(w) * h * b * 2, 0.0) {}

  double bin_width() const { return period / bins; }

  std::size_t index(int x, int y, int bin, int channel) const {
    return ((static_cast<std::size_t>(y) * width + x) * bins + bin) * 2 + channel;
  }
  double& at(int x, int y, int bin, int channel) { return values[index(x, y, bin, channel)]; }
  double at(int x, int y, int bin, int channel) const { return values[index(x, y, bin, channel)]; }
};

inline constexpr double kDefaultLambda = 5.0;
inline constexpr int kDefaultBins = 5;

/// Accumulates events with timestamps relative to the window start.
inline VoxelGrid accumulate_voxel_grid(const std::vector<EventRecord>& events, int width,
                                       int height, double period, int bins, double lambda,
                                       double t_origin = 0.0) {
  if (!(lambda > 0.0)) throw Error("lambda must be positive");
  if (bins < 1) throw Error("bin count must be at least 1");
  if (!(period > 0.0)) throw Error("period must be positive");
  VoxelGrid grid(width, height, bins, period, lambda);
  const double k = grid.bin_width();
  for (const auto& e : events) {
    const double t = e.t - t_origin;
    if (!(t >= 0.0 && t < period)) throw Error("event outside period");
    if (e.x < 0 || e.y < 0 || e.x >= width || e.y >= height)
      throw Error("event outside sensor bounds");
    if (e.polarity != 1 && e.polarity != -1) throw Error("polarity must be +1 or -1");
    const int bin = std::min(bins - 1, static_cast<int>(std::floor(t / k)));
    grid.at(e.x, e.y, bin, e.polarity > 0 ? 0 : 1) += 1.0;
  }
  // Integer counts first, one division per cell.
  for (double& v : grid.values) v /= lambda;
  return grid;
}

/// Elementwise tanh. Inputs are non-negative so the result is in [0, 1).
inline VoxelGrid normalize_voxel_grid(const VoxelGrid& v) {
  if (v.normalized) throw Error("voxel grid already normalized");
  VoxelGrid out = v;
  for (double& x : out.values) x = std::tanh(x);
  out.normalized = true;
  return out;
}

/// Merged per-polarity value of all time slots at a pixel: pre-tanh counts are
/// summed over the bins and tanh is applied once.
inline std::pair<double, double> merged_polarities(const VoxelGrid& grid, int x, int y) {
  double pos = 0.0, neg = 0.0;
  for (int b = 0; b < grid.bins; ++b) {
    double p = grid.at(x, y, b, 0);
    double n = grid.at(x, y, b, 1);
    if (grid.normalized) {
      p = std::atanh(p);
      n = std::atanh(n);
    }
    pos += p;
    neg += n;
  }
  return {std::tanh(pos), std::tanh(neg)};
}

struct EventObservationMap {
  ObsGrid positive;
  ObsGrid negative;

  EventObservationMap() = default;
  explicit EventObservationMap(int m) : positive(m), negative(m) {}
  int m() const { return positive.m; }
};

/// Adds one inter-frame window to an event observation map.
inline void deposit_window(EventObservationMap& map, const VoxelGrid& grid, int x, int y,
                           const LightSample& light) {
  require_unit(light.direction);
  const auto [pos, neg] = merged_polarities(grid, x, y);
  deposit_max(map.positive, light.direction, static_cast<float>(pos));
  deposit_max(map.negative, light.direction, static_cast<float>(neg));
}

/// Builds O_e for one pixel from one grid per window (grids[j] pairs with
/// light_windows[j]).
inline EventObservationMap event_obsmap(const std::vector<VoxelGrid>& grids, int x, int y,
                                        const std::vector<LightSample>& light_windows, int m) {
  if (grids.size() != light_windows.size())
    throw Error("voxel grid count does not match light window count");
  EventObservationMap map(m);
  for (std::size_t j = 0; j < grids.size(); ++j) {
    if (!(x >= 0 && y >= 0 && x < grids[j].width && y < grids[j].height))
      throw Error("pixel outside sensor bounds");
    deposit_window(map, grids[j], x, y, light_windows[j]);
  }
  return map;
}

/// Events with t in [t_start, t_end). Assumes the stream is time sorted.
inline std::vector<EventRecord> slice_window(const std::vector<EventRecord>& sorted, double t_start,
                                             double t_end) {
  auto lo = std::lower_bound(sorted.begin(), sorted.end(), t_start,
                             [](const EventRecord& e, double t) { return e.t < t; });
  auto hi = std::lower_bound(lo, sorted.end(), t_end,
                             [](const EventRecord& e, double t) { return e.t < t; });
  return {lo, hi};
}

// ---------------------------------------------------------------------------
// EVT1 codec: "EVT1", u32 width, u32 height, u64 count, then packed
// (u16 x, u16 y, f64 t, i8 polarity) records.

inline std::vector<char> encode_evt1(const EventStream& s) {
  io::ByteWriter w;
  w.magic("EVT1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.height));
  w.put<std::uint64_t>(s.events.size());
  for (const auto& e : s.events) {
    if (e.x < 0 || e.y < 0 || e.x > 0xFFFF || e.y > 0xFFFF) throw Error("event coordinate out of u16 range");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.x));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.y));
    w.put<double>(e.t);
    w.put<std::int8_t>(static_cast<std::int8_t>(e.polarity));
  }
  return w.bytes();
}

inline EventStream decode_evt1(std::vector<char> bytes, const std::string& origin = "<evt1>") {
  io::ByteReader r(std::move(bytes), origin);
  r.expect_magic("EVT1");
  EventStream s;
  s.width = static_cast<int>(r.get<std::uint32_t>());
  s.height = static_cast<int>(r.get<std::uint32_t>());
  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / 13) throw Error(origin + ": truncated file");
  s.events.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EventRecord e;
    e.x = r.get<std::uint16_t>();
    e.y = r.get<std::uint16_t>();
    e.t = r.get<double>();
    e.polarity = r.get<std::int8_t>();
    if (e.polarity != 1 && e.polarity != -1) throw Error(origin + ": invalid polarity");
    if (e.x >= s.width || e.y >= s.height) throw Error(origin + ": event outside sensor");
    s.events.push_back(e);
  }
  r.expect_end();
  return s;
}

/// CSV fixture reader: `x,y,t,p` rows, optional header line.
inline std::vector<EventRecord> parse_events_csv(std::istream& in) {
  std::vector<EventRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (lineno == 1 && line.find_first_of("xX") == 0) continue;
    for (char& c : line)
      if (c == ',') c = ' ';
    std::istringstream ss(line);
    EventRecord e;
    if (!(ss >> e.x >> e.y >> e.t >> e.polarity))
      throw Error("events csv line " + std::to_string(lineno) + ": expected x,y,t,p");
    if (e.polarity == 0) e.polarity = -1;
    out.push_back(e);
  }
  return out;
}

inline EventStream load_events(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    EventStream s;
    s.events = parse_events_csv(in);
    for (const auto& e : s.events) {
      s.width = std::max(s.width, e.x + 1);
      s.height = std::max(s.height, e.y + 1);
    }
    return s;
  }
  return decode_evt1(io::read_file(path), path);
}

}  // namespace efps::eventrep
