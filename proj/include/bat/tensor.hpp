#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace bat {

// Dense row-major tensor of doubles, up to 4 dimensions.
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::initializer_list<std::size_t> d) : dims(d) {
    std::size_t n = 1;
    for (std::size_t x : dims) n *= x;
    v.assign(n, 0.0);
  }
  explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) {
    std::size_t n = 1;
    for (std::size_t x : dims) n *= x;
    v.assign(n, 0.0);
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }

  std::size_t size() const { return v.size(); }
  std::size_t dim(std::size_t i) const { return dims.at(i); }

  double& operator()(std::size_t i) { return v[i]; }
  double operator()(std::size_t i) const { return v[i]; }
  double& operator()(std::size_t i, std::size_t j) { return v[i * dims[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * dims[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return v[(i * dims[1] + j) * dims[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return v[(i * dims[1] + j) * dims[2] + k];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return v[((i * dims[1] + j) * dims[2] + k) * dims[3] + l];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return v[((i * dims[1] + j) * dims[2] + k) * dims[3] + l];
  }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  void require_shape(const Tensor& o, const char* what) const {
    if (!same_shape(o)) throw std::invalid_argument(std::string("shape mismatch: ") + what);
  }
};

}  // namespace bat
