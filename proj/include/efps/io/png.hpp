// SPDX-License-Identifier: Apache-2.0
//
// 8-bit PNG reading and writing through libpng's simplified API.
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "efps/common.hpp"
#include "efps/image.hpp"
#include "efps/io/binary.hpp"

namespace efps::io {

using Image8 = Image<std::uint8_t>;

inline std::uint32_t png_format(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
  }
  throw Error("PNG supports 1, 3 or 4 channels, got " + std::to_string(channels));
}

inline std::vector<char> encode_png(const Image8& img) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = png_format(img.channels);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p, nullptr, &size, 0, img.data.data(), 0, nullptr))
    throw Error(std::string("PNG encoding failed: ") + p.message);
  std::vector<char> out(size);
  if (!png_image_write_to_memory(&p, out.data(), &size, 0, img.data.data(), 0, nullptr))
    throw Error(std::string("PNG encoding failed: ") + p.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::string& path, const Image8& img) { write_bytes_atomic(path, encode_png(img)); }

/// Reads a PNG as 8-bit gray (channels = 1) or RGB (channels = 3).
inline Image8 read_png(const std::string& path, int channels) {
  const std::vector<char> bytes = read_file(path);
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&p, bytes.data(), bytes.size()))
    throw Error(path + ": " + p.message);
  p.format = png_format(channels);
  Image8 img(static_cast<int>(p.width), static_cast<int>(p.height), channels);
  if (!png_image_finish_read(&p, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&p);
    throw Error(path + ": " + p.message);
  }
  return img;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image8 quantize(const ImageF& img) {
  Image8 out(img.width, img.height, img.channels);
  std::transform(img.data.begin(), img.data.end(), out.data.begin(), [](float v) { return to_byte(v); });
  return out;
}

inline ImageF dequantize(const Image8& img) {
  ImageF out(img.width, img.height, img.channels);
  std::transform(img.data.begin(), img.data.end(), out.data.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
  return out;
}

}  // namespace efps::io
