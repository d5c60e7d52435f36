#include "ddeq/kernel.hpp"

#include <cmath>

namespace ddeq {

namespace {

double sq_dist(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
  double s = 0.0;
  for (int64_t k = 0; k < a.cols(); ++k) {
    double diff = a(i, k) - b(j, k);
    s += diff * diff;
  }
  return s;
}

double kval(const KernelSpec& k, double dist_sq) {
  if (k.family == KernelFamily::kRiesz) return -std::sqrt(dist_sq);
  return std::exp(-dist_sq / (2.0 * k.sigma * k.sigma));
}

}  // namespace

double kernel_eval(const KernelSpec& k, const Tensor& x, const Tensor& y) {
  if (x.numel() != y.numel())
    throw DimensionMismatch("kernel_eval: dimension mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double diff = x.vec()[i] - y.vec()[i];
    s += diff * diff;
  }
  return kval(k, s);
}

Tensor kernel_grad1(const KernelSpec& k, const Tensor& x, const Tensor& y) {
  if (x.numel() != y.numel())
    throw DimensionMismatch("kernel_grad1: dimension mismatch");
  int64_t d = x.numel();
  Tensor g(1, d);
  double s = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    double diff = x.vec()[i] - y.vec()[i];
    s += diff * diff;
  }
  if (k.family == KernelFamily::kRiesz) {
    if (s == 0.0) return g;  // zero subgradient at coincidence
    double inv = 1.0 / std::sqrt(s);
    for (int64_t i = 0; i < d; ++i)
      g.vec()[i] = -(x.vec()[i] - y.vec()[i]) * inv;
    return g;
  }
  double c = -kval(k, s) / (k.sigma * k.sigma);
  for (int64_t i = 0; i < d; ++i) g.vec()[i] = c * (x.vec()[i] - y.vec()[i]);
  return g;
}

double mmd_sq(const KernelSpec& k, const DiscreteMeasure& mu,
              const DiscreteMeasure& nu) {
  if (mu.dim() != nu.dim())
    throw DimensionMismatch("mmd_sq: dimension mismatch");
  Tensor a = mu.active_points();
  Tensor b = nu.active_points();
  int64_t n = a.rows(), m = b.rows();
  if (n == 0 || m == 0) throw Error("mmd_sq: empty measure");
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) saa += kval(k, sq_dist(a, i, a, j));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j) sbb += kval(k, sq_dist(b, i, b, j));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) sab += kval(k, sq_dist(a, i, b, j));
  double dn = static_cast<double>(n), dm = static_cast<double>(m);
  return saa / (dn * dn) + sbb / (dm * dm) - 2.0 * sab / (dn * dm);
}

namespace {

// grad f_mu at each row of `at`, where f_mu is the witness between the point
// sets a and b (both uniformly weighted):
//   grad f(x) = 1/n sum_j grad1 k(x, a_j) - 1/m sum_j grad1 k(x, b_j)
Tensor witness_gradient(const KernelSpec& k, const Tensor& at, const Tensor& a,
                        const Tensor& b) {
  int64_t d = at.cols();
  Tensor out(at.rows(), d);
  Tensor xi(1, d), yj(1, d);
  for (int64_t i = 0; i < at.rows(); ++i) {
    for (int64_t c = 0; c < d; ++c) xi.vec()[c] = at(i, c);
    for (int64_t j = 0; j < a.rows(); ++j) {
      for (int64_t c = 0; c < d; ++c) yj.vec()[c] = a(j, c);
      Tensor g = kernel_grad1(k, xi, yj);
      for (int64_t c = 0; c < d; ++c)
        out(i, c) += g.vec()[c] / static_cast<double>(a.rows());
    }
    for (int64_t j = 0; j < b.rows(); ++j) {
      for (int64_t c = 0; c < d; ++c) yj.vec()[c] = b(j, c);
      Tensor g = kernel_grad1(k, xi, yj);
      for (int64_t c = 0; c < d; ++c)
        out(i, c) -= g.vec()[c] / static_cast<double>(b.rows());
    }
  }
  return out;
}

// Scatters rows computed on the active set back into an Nxd matrix.
Tensor scatter_active(const Tensor& active_rows,
                      const std::vector<uint8_t>& mask, int64_t rows) {
  Tensor out(rows, active_rows.cols());
  int64_t r = 0;
  for (int64_t i = 0; i < rows; ++i)
    if (mask[i]) {
      for (int64_t j = 0; j < active_rows.cols(); ++j)
        out(i, j) = active_rows(r, j);
      ++r;
    }
  return out;
}

}  // namespace

Tensor mmd_flow_gradient_fixed(const KernelSpec& k, const DiscreteMeasure& mu,
                               const DiscreteMeasure& nu) {
  if (mu.dim() != nu.dim())
    throw DimensionMismatch("mmd_flow_gradient_fixed: dimension mismatch");
  Tensor a = mu.active_points();
  Tensor b = nu.active_points();
  Tensor g = witness_gradient(k, a, a, b);
  return scatter_active(g, mu.mask, mu.rows());
}

Tensor wasserstein_gradient_pushforward(const KernelSpec& k,
                                        const DiscreteMeasure& mu,
                                        const PushforwardMap& map) {
  Tensor a = mu.active_points();
  Tensor b = map.apply(a);
  if (b.rows() != a.rows() || b.cols() != a.cols())
    throw DimensionMismatch("pushforward map must preserve shape");
  Tensor term1 = witness_gradient(k, a, a, b);
  Tensor fy = witness_gradient(k, b, a, b);
  Tensor term2 = map.vjp(a, fy);
  for (int64_t i = 0; i < term1.numel(); ++i)
    term1.vec()[i] -= term2.vec()[i];
  return scatter_active(term1, mu.mask, mu.rows());
}

PushforwardMap rotation_map(int k_div) {
  if (k_div < 1) throw Error("rotation_map: k must be >= 1");
  double a = 2.0 * M_PI / static_cast<double>(k_div);
  double c = std::cos(a), s = std::sin(a);
  PushforwardMap map;
  map.apply = [c, s](const Tensor& x) {
    if (x.cols() != 2) throw DimensionMismatch("rotation_map: want 2D points");
    Tensor y(x.rows(), 2);
    for (int64_t i = 0; i < x.rows(); ++i) {
      y(i, 0) = c * x(i, 0) - s * x(i, 1);
      y(i, 1) = s * x(i, 0) + c * x(i, 1);
    }
    return y;
  };
  map.vjp = [c, s](const Tensor& x, const Tensor& v) {
    (void)x;  // linear map: Jacobian is the rotation matrix everywhere
    Tensor y(v.rows(), 2);
    for (int64_t i = 0; i < v.rows(); ++i) {
      y(i, 0) = c * v(i, 0) + s * v(i, 1);
      y(i, 1) = -s * v(i, 0) + c * v(i, 1);
    }
    return y;
  };
  return map;
}

namespace {

// Kernel matrix between the rows of a and b as a graph value.
Var kernel_matrix_graph(Tape& t, const KernelSpec& k, Var a, Var b) {
  if (k.family == KernelFamily::kRiesz) return t.neg(t.pairwise_dist(a, b));
  return t.exp(t.scale(t.pairwise_sqdist(a, b),
                       -1.0 / (2.0 * k.sigma * k.sigma)));
}

// Mean of K over active pairs: sum(K .* (ra rb^T)) / (na nb).
Var masked_pair_mean(Tape& t, Var kmat, const std::vector<uint8_t>& ra,
                     const std::vector<uint8_t>& rb) {
  int64_t n = t.value(kmat).rows(), m = t.value(kmat).cols();
  int64_t na = 0, nb = 0;
  Tensor w(n, m);
  for (uint8_t x : ra) na += x ? 1 : 0;
  for (uint8_t x : rb) nb += x ? 1 : 0;
  if (na == 0 || nb == 0) throw AllMasked("half_mmd_sq_graph: empty measure");
  double inv = 1.0 / (static_cast<double>(na) * static_cast<double>(nb));
  for (int64_t i = 0; i < n; ++i)
    if (ra[i])
      for (int64_t j = 0; j < m; ++j)
        if (rb[j]) w(i, j) = inv;
  return t.sum_all(t.mul(kmat, t.constant(std::move(w))));
}

}  // namespace

Var half_mmd_sq_graph(Tape& t, const KernelSpec& k, Var a,
                      const std::vector<uint8_t>& mask_a, Var b,
                      const std::vector<uint8_t>& mask_b) {
  if (t.value(a).cols() != t.value(b).cols())
    throw DimensionMismatch("half_mmd_sq_graph: dimension mismatch");
  Var saa = masked_pair_mean(t, kernel_matrix_graph(t, k, a, a), mask_a, mask_a);
  Var sbb = masked_pair_mean(t, kernel_matrix_graph(t, k, b, b), mask_b, mask_b);
  Var sab = masked_pair_mean(t, kernel_matrix_graph(t, k, a, b), mask_a, mask_b);
  return t.scale(t.add(t.sub(saa, t.scale(sab, 2.0)), sbb), 0.5);
}

}  // namespace ddeq
