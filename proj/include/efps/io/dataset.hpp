// SPDX-License-Identifier: Apache-2.0
//
// On-disk capture directories and the small text formats around them.
//
// Layout of a capture directory:
//   frames/frame_NNNN.png   8-bit RGB frames
//   frames.img1             the same frames as f32 (exact values)
//   events.evt1             event stream
//   lights.csv              frame_index,lx,ly,lz
//   normals.nrm1            ground-truth normals (optional)
//   mask.png                8-bit object mask, nonzero inside
//   manifest.json           frame count, size, frame period, generator settings
//
// IMG1: "IMG1", u32 width, u32 height, u32 channels, u32 count, then count
// images of f32 interleaved row-major pixels.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "efps/common.hpp"
#include "efps/eventrep.hpp"
#include "efps/geometry.hpp"
#include "efps/image.hpp"
#include "efps/io/binary.hpp"
#include "efps/io/keyvalue.hpp"
#include "efps/io/png.hpp"
#include "efps/obsgrid.hpp"
#include "efps/obsmap.hpp"

namespace efps::io {

inline std::vector<char> encode_img1(const std::vector<ImageF>& images) {
  if (images.empty()) throw Error("no images to encode");
  const ImageF& first = images.front();
  ByteWriter w;
  w.magic("IMG1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(first.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(first.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(first.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(images.size()));
  for (const auto& img : images) {
    if (!img.same_shape(first)) throw Error("images differ in size");
    w.array(img.data.data(), img.data.size());
  }
  return w.bytes();
}

inline std::vector<ImageF> decode_img1(std::vector<char> bytes, const std::string& origin = "<img1>") {
  ByteReader r(std::move(bytes), origin);
  r.expect_magic("IMG1");
  const auto w = r.get<std::uint32_t>(), h = r.get<std::uint32_t>();
  const auto c = r.get<std::uint32_t>(), n = r.get<std::uint32_t>();
  const std::size_t each = static_cast<std::size_t>(w) * h * c;
  if (r.remaining() != each * n * 4) throw Error(origin + ": payload size does not match header");
  std::vector<ImageF> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    ImageF img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    r.array(img.data.data(), each);
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Light directions CSV.

inline std::string format_lights_csv(const std::vector<LightSample>& lights) {
  std::string out = "frame_index,lx,ly,lz\n";
  char line[128];
  for (const auto& l : lights) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g\n", l.frame_index, l.direction.x(),
                  l.direction.y(), l.direction.z());
    out += line;
  }
  return out;
}

/// Parses `frame_index,lx,ly,lz` rows; a non-numeric first line is a header.
/// Directions are renormalized after checking they are unit to 1e-6.
inline std::vector<LightSample> parse_lights_csv(std::istream& in, const std::string& origin = "<lights>") {
  std::vector<LightSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ss(line);
    LightSample l;
    double x, y, z;
    if (!(ss >> l.frame_index >> x >> y >> z)) {
      if (lineno == 1) continue;
      throw Error(origin + ":" + std::to_string(lineno) + ": expected frame_index,lx,ly,lz");
    }
    l.direction = Eigen::Vector3d(x, y, z);
    require_unit(l.direction);
    l.direction.normalize();
    out.push_back(l);
  }
  return out;
}

inline std::vector<LightSample> load_lights_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_lights_csv(in, path);
}

/// Assigns window [j T, (j + 1) T) to light j; the last light gets an empty window.
inline void assign_windows(std::vector<LightSample>& lights, double frame_period) {
  for (std::size_t j = 0; j < lights.size(); ++j) {
    lights[j].t_start = static_cast<double>(j) * frame_period;
    lights[j].t_end = j + 1 < lights.size() ? static_cast<double>(j + 1) * frame_period : lights[j].t_start;
  }
}

// ---------------------------------------------------------------------------
// Calibration file: fx, fy, cx, cy, alpha, k1, k2, k3, p1, p2, and optional
// P_rgb / P_e with 12 row-major values each.

inline geometry::Calibration parse_calibration(const KeyValueFile& kv) {
  geometry::Calibration c;
  c.intrinsics.fx = kv.number("fx");
  c.intrinsics.fy = kv.number("fy");
  c.intrinsics.cx = kv.number("cx");
  c.intrinsics.cy = kv.number("cy");
  c.intrinsics.alpha = kv.number_or("alpha", 0.0);
  c.distortion.k1 = kv.number_or("k1", 0.0);
  c.distortion.k2 = kv.number_or("k2", 0.0);
  c.distortion.k3 = kv.number_or("k3", 0.0);
  c.distortion.p1 = kv.number_or("p1", 0.0);
  c.distortion.p2 = kv.number_or("p2", 0.0);
  auto matrix = [&](const char* key, geometry::ProjectionMatrix& p) {
    if (!kv.has(key)) return;
    const std::vector<double> v = kv.numbers(key);
    if (v.size() != 12) throw Error(std::string(key) + " needs 12 values");
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 4; ++col) p(r, col) = v[static_cast<std::size_t>(r * 4 + col)];
  };
  matrix("P_rgb", c.p_rgb);
  matrix("P_e", c.p_e);
  c.intrinsics.validate();
  return c;
}

inline geometry::Calibration load_calibration(const std::string& path) {
  return parse_calibration(KeyValueFile::load(path));
}

// ---------------------------------------------------------------------------
// Capture directories.

inline constexpr double kDefaultFramePeriod = 1.0 / 90.0;

inline Image8 mask_image(const Mask& m) {
  Image8 out(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] ? 255 : 0;
  return out;
}

inline obsmap::NormalMap normal_map(const std::vector<Eigen::Vector3d>& normals, int width, int height) {
  obsmap::NormalMap nm;
  nm.width = width;
  nm.height = height;
  for (const auto& n : normals) nm.normals.push_back(n.cast<float>());
  return nm;
}

/// Writes a capture. Every file goes through a temporary and a rename.
inline void save_capture(const std::string& dir, const obsmap::Capture& cap, double frame_period,
                         nlohmann::json manifest = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  if (cap.frames.empty()) throw Error("capture has no frames");
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "frames", ec);
  if (ec) throw Error("cannot create " + dir + ": " + ec.message());
  const int w = cap.frames.front().width, h = cap.frames.front().height;
  for (std::size_t j = 0; j < cap.frames.size(); ++j) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", j);
    write_png((fs::path(dir) / "frames" / name).string(), quantize(cap.frames[j]));
  }
  write_bytes_atomic((fs::path(dir) / "frames.img1").string(), encode_img1(cap.frames));
  write_bytes_atomic((fs::path(dir) / "events.evt1").string(), eventrep::encode_evt1(cap.events));
  const std::string csv = format_lights_csv(cap.lights);
  write_atomic((fs::path(dir) / "lights.csv").string(), [&](std::ostream& os) { os << csv; });
  if (!cap.normals.empty())
    write_bytes_atomic((fs::path(dir) / "normals.nrm1").string(),
                       obsmap::encode_nrm1(normal_map(cap.normals, w, h)));
  write_png((fs::path(dir) / "mask.png").string(), mask_image(cap.mask));
  manifest["frames"] = cap.frames.size();
  manifest["width"] = w;
  manifest["height"] = h;
  manifest["frame_period"] = frame_period;
  const std::string text = manifest.dump(2) + "\n";
  write_atomic((fs::path(dir) / "manifest.json").string(), [&](std::ostream& os) { os << text; });
}

/// Loads a capture directory. Frames come from frames.img1 when present and
/// from the PNGs otherwise; normals are optional.
inline obsmap::Capture load_capture(const std::string& dir, double* frame_period_out = nullptr) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw Error("not a capture directory: " + dir);
  double frame_period = kDefaultFramePeriod;
  if (fs::exists(root / "manifest.json")) {
    std::ifstream in(root / "manifest.json");
    const nlohmann::json m = nlohmann::json::parse(in, nullptr, false);
    if (m.is_discarded()) throw Error((root / "manifest.json").string() + ": invalid JSON");
    frame_period = m.value("frame_period", kDefaultFramePeriod);
  }
  obsmap::Capture cap;
  if (fs::exists(root / "frames.img1")) {
    cap.frames = decode_img1(read_file((root / "frames.img1").string()), (root / "frames.img1").string());
  } else {
    std::vector<fs::path> pngs;
    if (fs::is_directory(root / "frames"))
      for (const auto& e : fs::directory_iterator(root / "frames"))
        if (e.path().extension() == ".png") pngs.push_back(e.path());
    std::sort(pngs.begin(), pngs.end());
    for (const auto& p : pngs) cap.frames.push_back(dequantize(read_png(p.string(), 3)));
  }
  if (cap.frames.empty()) throw Error(dir + ": no frames found");
  cap.lights = load_lights_csv((root / "lights.csv").string());
  if (cap.lights.size() != cap.frames.size())
    throw Error(dir + ": lights.csv has " + std::to_string(cap.lights.size()) + " rows for " +
                std::to_string(cap.frames.size()) + " frames");
  assign_windows(cap.lights, frame_period);
  cap.events = eventrep::load_events((root / "events.evt1").string());
  const Image8 mask = read_png((root / "mask.png").string(), 1);
  cap.mask = Mask(mask.width, mask.height, 1, 0);
  for (std::size_t i = 0; i < mask.data.size(); ++i) cap.mask.data[i] = mask.data[i] ? 255 : 0;
  if (fs::exists(root / "normals.nrm1")) {
    const auto nm = obsmap::decode_nrm1(read_file((root / "normals.nrm1").string()),
                                        (root / "normals.nrm1").string());
    if (nm.width != mask.width || nm.height != mask.height)
      throw Error(dir + ": normal map size does not match mask");
    for (const auto& n : nm.normals) cap.normals.push_back(n.cast<double>());
  }
  if (frame_period_out) *frame_period_out = frame_period;
  return cap;
}

}  // namespace efps::io
