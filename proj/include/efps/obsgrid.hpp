// SPDX-License-Identifier: Apache-2.0
//
// Shared primitives for observation maps: light samples and the hemisphere
// to grid projection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "efps/common.hpp"

namespace efps {

/// One light direction with the frame it was captured at and the event
/// window [t_start, t_end) that starts at that frame.
struct LightSample {
  Eigen::Vector3d direction{0.0, 0.0, 1.0};
  int frame_index = 0;
  double t_start = 0.0;
  double t_end = 0.0;
};

/// m x m grid of intensities. Cell (ix, iy) is stored at iy * m + ix; ix
/// follows the light's x component and iy its y component.
struct ObsGrid {
  int m = 0;
  std::vector<float> cells;

  ObsGrid() = default;
  explicit ObsGrid(int size) : m(size), cells(static_cast<std::size_t>(size) * size, 0.0f) {
    if (size < 1) throw Error("observation map size must be positive");
  }

  float& at(int ix, int iy) { return cells[static_cast<std::size_t>(iy) * m + ix]; }
  float at(int ix, int iy) const { return cells[static_cast<std::size_t>(iy) * m + ix]; }

  float max() const { return cells.empty() ? 0.0f : *std::max_element(cells.begin(), cells.end()); }
  std::size_t nonzero_count() const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [](float v) { return v != 0.0f; }));
  }
  bool operator==(const ObsGrid&) const = default;
};

inline void require_unit(const Eigen::Vector3d& l) {
  if (!l.allFinite() || std::abs(l.norm() - 1.0) > 1e-6) throw Error("light not normalized");
}

/// Grid cell for a light direction: floor(m (l + 1) / 2) per axis, clamped
/// to [0, m-1] (l = +1 would otherwise land on m).
inline std::pair<int, int> projection_index(const Eigen::Vector3d& l, int m) {
  auto axis = [m](double v) {
    const double f = std::floor(static_cast<double>(m) * (v + 1.0) / 2.0);
    return static_cast<int>(std::clamp(f, 0.0, static_cast<double>(m - 1)));
  };
  return {axis(l.x()), axis(l.y())};
}

/// Deposits `value` at the light's cell, keeping the larger value on collision.
inline void deposit_max(ObsGrid& grid, const Eigen::Vector3d& l, float value) {
  const auto [ix, iy] = projection_index(l, grid.m);
  float& cell = grid.at(ix, iy);
  cell = std::max(cell, value);
}

}  // namespace efps
