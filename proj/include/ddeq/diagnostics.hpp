#pragma once

#include "ddeq/measure.hpp"
#include "ddeq/net.hpp"
#include "ddeq/solver.hpp"

namespace ddeq {

// Exact Wasserstein-2 distance between uniform discrete measures. Equal
// active counts use a minimum-cost perfect assignment; unequal counts solve
// the exact transportation problem with integer masses scaled by lcm(N, M).
double w2_distance(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

// The two routes behind w2_distance, exposed for cross-checks.
double w2_assignment(const Tensor& a, const Tensor& b);
double w2_transport(const Tensor& a, const Tensor& b);

// Theorem-5 inner/outer learning-rate ratio, with steps starting at t = 1.
inline double epsilon_t(int64_t t) {
  if (t < 1) throw Error("epsilon_t: t must be >= 1");
  return std::min(1.0, 1.0 / std::sqrt(static_cast<double>(t)));
}

// PL-inequality monitor: mean over n_random standard normal clouds mu of
//   F(mu) / |grad_W F(mu)|^2_{L2(mu)},   F(mu) = 1/2 MMD^2(mu, mu_star).
// Draws with gradient norm below 1e-12 are skipped.
double pl_ratio(const KernelSpec& kernel, const DiscreteMeasure& mu_star,
                int n_random, uint64_t seed);

// Gradient-discrepancy monitor (Assumption-4 analogue):
//   |grad_W G(mu_t) - grad_W F_{mu_star}(mu_t)|^2_{L2(mu_t)} / eps_t,
// with grad_W G from the solver's rescaled autodiff path.
double grad_discrepancy_ratio(const ParamStore& params,
                              const ModelConfig& model, const FlowConfig& flow,
                              const Tensor& x, const CoreMasks& masks,
                              const DiscreteMeasure& mu_t,
                              const DiscreteMeasure& mu_star, int64_t t);

// Theorem-5 ratio: sum_{t<=T} g2[t-1] / (sqrt(T) * log(T)^2), T >= 2.
double theorem_ratio(const std::vector<double>& grad_norm_sq, int64_t T);

struct DiagnosticsRow {
  int64_t t = 0;
  double eps_t = 0.0;
  double pl = 0.0;
  double grad_discrepancy = 0.0;
  double theorem = 0.0;
  bool has_theorem = false;
};

void write_diagnostics_csv(const std::string& path,
                           const std::vector<DiagnosticsRow>& rows);

}  // namespace ddeq
