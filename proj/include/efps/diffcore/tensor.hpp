// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "efps/common.hpp"

namespace efps::diff {

enum class Mode { kTrain, kEval };

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Four-dimensional tensors are NCHW. `grad` is
/// empty unless the tensor is a trainable parameter or buffer that needs one.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(count(shape), fill);
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw Error("negative tensor extent");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  // NCHW accessors.
  int n() const { return dim(0); }
  int c() const { return dim(1); }
  int h() const { return dim(2); }
  int w() const { return dim(3); }
  std::size_t plane() const { return static_cast<std::size_t>(h()) * w(); }

  T& operator()(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * c() + ic) * h() + iy) * w() + ix];
  }
  T operator()(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * c() + ic) * h() + iy) * w() + ix];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& expected, const char* what) {
  if (t.shape != expected)
    throw Error(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                shape_str(t.shape));
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) throw Error(std::string(what) + ": expected NCHW tensor, got " + shape_str(t.shape));
}

/// Named reference to a tensor owned by a layer.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

/// Kaiming-uniform (fan-in) initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(Tensor<T>& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace efps::diff
