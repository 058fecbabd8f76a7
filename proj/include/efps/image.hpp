// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "efps/common.hpp"

namespace efps {

/// Interleaved, row-major image. Pixel (x, y) channel c lives at
/// ((y * width + x) * channels + c).
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
    if (w < 0 || h < 0 || c < 1) throw Error("invalid image dimensions");
  }

  bool empty() const { return data.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

using ImageF = Image<float>;
using Mask = Image<std::uint8_t>;

/// Mean over channels, one channel out.
inline ImageF to_gray(const ImageF& img) {
  if (img.channels == 1) return img;
  ImageF out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      float s = 0.0f;
      for (int c = 0; c < img.channels; ++c) s += img.at(x, y, c);
      out.at(x, y) = s / static_cast<float>(img.channels);
    }
  return out;
}

}  // namespace efps
