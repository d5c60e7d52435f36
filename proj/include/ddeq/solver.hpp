#pragma once

#include "ddeq/kernel.hpp"
#include "ddeq/net.hpp"

namespace ddeq {

enum class SolverKind { kWgd, kFixedPointIteration };

struct FlowConfig {
  int iterations = 200;
  double step_size = 5.0;
  double step_decay = 1.0;     // eta_l = step_size * step_decay^l
  bool rescale_by_n = true;    // multiply autodiff gradient by n_active
  int record_every = 0;        // 0 = record nothing
  bool record_snapshots = false;
  SolverKind kind = SolverKind::kWgd;
  KernelSpec kernel = KernelSpec::riesz();

  void validate() const {
    if (iterations < 0) throw ConfigError("flow iterations must be >= 0");
    if (step_size < 0) throw ConfigError("flow step size must be >= 0");
    if (!(step_decay > 0) || step_decay > 1)
      throw ConfigError("flow step decay must be in (0, 1]");
  }
};

struct FlowTrace {
  std::vector<int> steps;
  std::vector<double> objectives;
  std::vector<double> residuals;
  std::vector<Tensor> snapshots;
};

// One Wasserstein gradient descent step on G(Z) = 1/2 MMD^2(mu_Z, F(Z, X));
// the gradient is zeroed on masked and pinned rows, rescaled by n_active and
// applied with step size step_size * step_decay^step_index.
Tensor wgf_step(const Tensor& z, const Tensor& x, const ParamStore& params,
                const ModelConfig& model, const FlowConfig& cfg,
                const CoreMasks& masks, int step_index);

// 1/2 MMD^2(mu_Z, F(Z, X)) with the flow's kernel.
double residual(const Tensor& z, const Tensor& x, const ParamStore& params,
                const ModelConfig& model, const FlowConfig& cfg,
                const CoreMasks& masks);

struct SolveResult {
  Tensor z_star;
  FlowTrace trace;
};

// Runs `iterations` steps of the configured solver from z0.
SolveResult solve(const Tensor& z0, const Tensor& x, const ParamStore& params,
                  const ModelConfig& model, const FlowConfig& cfg,
                  const CoreMasks& masks);

struct FixedFlowConfig {
  int iterations = 1000;
  double step_size = 1.0;
  double step_decay = 1.0;
  KernelSpec kernel = KernelSpec::riesz();
  std::vector<int> snapshot_steps;  // also records the final iterate
  int record_every = 0;
};

struct FixedFlowResult {
  DiscreteMeasure final_measure;
  FlowTrace trace;
  std::vector<std::pair<int, Tensor>> snapshots;
};

// MMD flow of mu against a fixed target measure.
FixedFlowResult fixed_target_flow(const DiscreteMeasure& mu0,
                                  const DiscreteMeasure& target,
                                  const FixedFlowConfig& cfg);

// MMD flow of mu against its own pushforward under a parameter-free map.
FixedFlowResult fixed_target_flow(const DiscreteMeasure& mu0,
                                  const PushforwardMap& map,
                                  const FixedFlowConfig& cfg);

}  // namespace ddeq
