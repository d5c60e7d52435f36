#pragma once

#include <functional>

#include "ddeq/autodiff.hpp"
#include "ddeq/measure.hpp"

namespace ddeq {

enum class KernelFamily { kRiesz, kGaussian };

struct KernelSpec {
  KernelFamily family = KernelFamily::kRiesz;
  double sigma = 1.0;  // Gaussian only

  static KernelSpec riesz() { return {KernelFamily::kRiesz, 1.0}; }
  static KernelSpec gaussian(double sigma) {
    if (!(sigma > 0)) throw Error("KernelSpec: sigma must be positive");
    return {KernelFamily::kGaussian, sigma};
  }
};

// k(x, y). Riesz: -|x-y|; Gaussian: exp(-|x-y|^2 / (2 sigma^2)).
double kernel_eval(const KernelSpec& k, const Tensor& x, const Tensor& y);

// Gradient of k w.r.t. the first argument, as a 1xd row. The Riesz kernel
// uses the zero subgradient at x == y.
Tensor kernel_grad1(const KernelSpec& k, const Tensor& x, const Tensor& y);

// Squared MMD between two discrete measures with uniform weights over active
// particles (biased V-statistic, diagonal terms included).
double mmd_sq(const KernelSpec& k, const DiscreteMeasure& mu,
              const DiscreteMeasure& nu);

// Wasserstein gradient of F(mu) = 1/2 MMD^2(mu, nu) for fixed nu, evaluated
// at each active particle of mu. Masked rows are zero.
Tensor mmd_flow_gradient_fixed(const KernelSpec& k, const DiscreteMeasure& mu,
                               const DiscreteMeasure& nu);

// Per-particle map on the active rows of a measure, with its vector-Jacobian
// product: vjp(points, v) returns rows J_T(x_i)^T v_i.
struct PushforwardMap {
  std::function<Tensor(const Tensor&)> apply;
  std::function<Tensor(const Tensor&, const Tensor&)> vjp;
};

// Wasserstein gradient of G(mu) = 1/2 MMD^2(mu, T_# mu): per active particle
// grad f_mu(x) - J_T(x)^T grad f_mu(T(x)), with f_mu the witness between mu
// and its pushforward. Masked rows are zero.
Tensor wasserstein_gradient_pushforward(const KernelSpec& k,
                                        const DiscreteMeasure& mu,
                                        const PushforwardMap& map);

// 2D rotation by 2*pi / k_div as a pushforward map.
PushforwardMap rotation_map(int k_div);

// Tape version of 1/2 MMD^2 between row sets a (mask_a) and b (mask_b);
// differentiates through both arguments.
Var half_mmd_sq_graph(Tape& t, const KernelSpec& k, Var a,
                      const std::vector<uint8_t>& mask_a, Var b,
                      const std::vector<uint8_t>& mask_b);

}  // namespace ddeq
