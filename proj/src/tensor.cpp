#include "ddeq/tensor.hpp"

#include <cmath>

namespace ddeq {

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs_diff(const Tensor& o) const {
  if (!same_shape(o)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < data_.size(); ++i)
    m = std::max(m, std::abs(data_[i] - o.data_[i]));
  return m;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw Error("uniform_int: n must be positive");
  int64_t v = static_cast<int64_t>(uniform() * static_cast<double>(n));
  return v >= n ? n - 1 : v;
}

Tensor Rng::normal_matrix(int64_t rows, int64_t cols) {
  Tensor t(rows, cols);
  for (auto& x : t.vec()) x = normal();
  return t;
}

uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1) +
               0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ddeq
