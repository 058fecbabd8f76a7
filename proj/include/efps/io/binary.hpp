// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitive codecs and crash-safe file replacement.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "efps/common.hpp"

namespace efps::io {

static_assert(std::endian::native == std::endian::little,
              "binary codecs assume a little-endian host");

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }

  void string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  template <typename T>
  void array(const T* data, std::size_t n) {
    const auto* p = reinterpret_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n * sizeof(T));
  }

  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string origin)
      : buf_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::string_view(buf_.data() + pos_, m.size()) != m)
      throw Error(origin_ + ": bad magic, expected " + std::string(m));
    pos_ += m.size();
  }

  std::string string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  void array(T* out, std::size_t n) {
    need(n * sizeof(T));
    std::memcpy(out, buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::string& origin() const { return origin_; }

  void expect_end() const {
    if (!at_end()) throw Error(origin_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw Error(origin_ + ": truncated file");
  }

  std::vector<char> buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes through a sibling temporary file and renames over the target, so a
/// failed run never leaves a partial file behind.
inline void write_atomic(const std::string& path,
                         const std::function<void(std::ostream&)>& body) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path() && !fs::exists(target.parent_path()))
    throw Error("output directory does not exist: " + target.parent_path().string());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    try {
      body(out);
    } catch (...) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("write failed for " + path);
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot replace " + path);
  }
}

inline void write_bytes_atomic(const std::string& path, const std::vector<char>& bytes) {
  write_atomic(path, [&](std::ostream& os) {
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  });
}

}  // namespace efps::io
