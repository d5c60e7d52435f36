#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ddeq/errors.hpp"

namespace ddeq {

// Dense row-major tensor of doubles, rank 2 or 3. Scalars are 1x1 matrices;
// row vectors are 1xn, column vectors nx1.
class Tensor {
 public:
  Tensor() : dims_{0, 0, 1} {}
  Tensor(int64_t rows, int64_t cols)
      : dims_{rows, cols, 1}, data_(static_cast<size_t>(rows * cols), 0.0) {}
  Tensor(int64_t d0, int64_t d1, int64_t d2)
      : dims_{d0, d1, d2},
        rank3_(true),
        data_(static_cast<size_t>(d0 * d1 * d2), 0.0) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }
  static Tensor zeros(int64_t rows, int64_t cols) { return Tensor(rows, cols); }
  static Tensor full(int64_t rows, int64_t cols, double v) {
    Tensor t(rows, cols);
    for (auto& x : t.data_) x = v;
    return t;
  }

  bool rank3() const { return rank3_; }
  int64_t rows() const { return dims_[0]; }
  int64_t cols() const { return dims_[1]; }
  int64_t dim(int i) const { return dims_[i]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const {
    return rank3_ == o.rank3_ && dims_[0] == o.dims_[0] &&
           dims_[1] == o.dims_[1] && dims_[2] == o.dims_[2];
  }
  bool is_scalar() const { return !rank3_ && dims_[0] == 1 && dims_[1] == 1; }

  double& operator()(int64_t i, int64_t j) { return data_[i * dims_[1] + j]; }
  double operator()(int64_t i, int64_t j) const {
    return data_[i * dims_[1] + j];
  }
  double& operator()(int64_t i, int64_t j, int64_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double operator()(int64_t i, int64_t j, int64_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double scalar_value() const {
    if (numel() != 1) throw ShapeError("scalar_value on non-scalar tensor");
    return data_[0];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool all_finite() const;
  double max_abs_diff(const Tensor& o) const;

 private:
  int64_t dims_[3];
  bool rank3_ = false;
  std::vector<double> data_;
};

// Deterministic random stream. Uniforms come straight from the top 53 bits of
// a mt19937_64 draw and normals from an explicit Box-Muller transform, so the
// stream does not depend on implementation-defined distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }
  // in [0, 1)
  double uniform();
  double normal();
  // in [0, n)
  int64_t uniform_int(int64_t n);

  Tensor normal_matrix(int64_t rows, int64_t cols);

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Derives independent sub-seeds from a base seed, a purpose tag and an index
// (splitmix64 mixing). Used so that every randomized stage of a run has its
// own reproducible stream.
uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index);

}  // namespace ddeq
