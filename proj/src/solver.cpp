#include "ddeq/solver.hpp"

#include <cmath>

namespace ddeq {

namespace {

int64_t count_active(const std::vector<uint8_t>& mask) {
  int64_t n = 0;
  for (uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

void zero_rows_inplace(Tensor& g, const std::vector<uint8_t>& mask,
                       bool zero_where_true) {
  for (int64_t i = 0; i < g.rows(); ++i)
    if ((mask[i] != 0) == zero_where_true)
      for (int64_t j = 0; j < g.cols(); ++j) g(i, j) = 0.0;
}

}  // namespace

Tensor wgf_step(const Tensor& z, const Tensor& x, const ParamStore& params,
                const ModelConfig& model, const FlowConfig& cfg,
                const CoreMasks& masks, int step_index) {
  Tape t;
  BoundParams p(t, params, /*requires_grad=*/false);
  Var zv = t.leaf(z, true);
  Var xv = t.constant(x);
  Var f = ddeq_core_forward(t, zv, xv, p, model, masks);
  Var g = half_mmd_sq_graph(t, cfg.kernel, zv, masks.z_mask, f, masks.z_mask);
  Tensor grad = t.value(t.grad(g, {zv})[0]);
  zero_rows_inplace(grad, masks.z_mask, /*zero_where_true=*/false);
  if (!masks.pin_mask.empty())
    zero_rows_inplace(grad, masks.pin_mask, /*zero_where_true=*/true);
  if (!grad.all_finite())
    throw NonFiniteGradient("wgf_step: non-finite gradient at step " +
                            std::to_string(step_index));
  double eta = cfg.step_size * std::pow(cfg.step_decay, step_index);
  double scale_n =
      cfg.rescale_by_n ? static_cast<double>(count_active(masks.z_mask)) : 1.0;
  Tensor out = z;
  for (int64_t i = 0; i < z.rows(); ++i)
    for (int64_t j = 0; j < z.cols(); ++j)
      out(i, j) -= eta * scale_n * grad(i, j);
  return out;
}

double residual(const Tensor& z, const Tensor& x, const ParamStore& params,
                const ModelConfig& model, const FlowConfig& cfg,
                const CoreMasks& masks) {
  Tensor f = core_forward_value(params, model, z, x, masks);
  DiscreteMeasure mu(z, masks.z_mask);
  DiscreteMeasure nu(std::move(f), masks.z_mask);
  return 0.5 * mmd_sq(cfg.kernel, mu, nu);
}

SolveResult solve(const Tensor& z0, const Tensor& x, const ParamStore& params,
                  const ModelConfig& model, const FlowConfig& cfg,
                  const CoreMasks& masks) {
  cfg.validate();
  SolveResult res;
  res.z_star = z0;
  if (cfg.iterations == 0) return res;
  auto record = [&](int step) {
    if (cfg.record_every <= 0) return;
    if (step % cfg.record_every != 0 && step != cfg.iterations) return;
    double r = residual(res.z_star, x, params, model, cfg, masks);
    res.trace.steps.push_back(step);
    res.trace.residuals.push_back(r);
    res.trace.objectives.push_back(r);
    if (cfg.record_snapshots) res.trace.snapshots.push_back(res.z_star);
  };
  record(0);
  for (int l = 0; l < cfg.iterations; ++l) {
    if (cfg.kind == SolverKind::kWgd) {
      res.z_star = wgf_step(res.z_star, x, params, model, cfg, masks, l);
    } else {
      Tensor f = core_forward_value(params, model, res.z_star, x, masks);
      if (!f.all_finite())
        throw NonFiniteGradient("solve: non-finite iterate at step " +
                                std::to_string(l));
      res.z_star = std::move(f);
    }
    record(l + 1);
  }
  return res;
}

namespace {

FixedFlowResult run_particle_flow(
    const DiscreteMeasure& mu0, const FixedFlowConfig& cfg,
    const std::function<Tensor(const DiscreteMeasure&)>& gradient,
    const std::function<double(const DiscreteMeasure&)>& objective) {
  FixedFlowResult res;
  DiscreteMeasure mu = mu0;
  auto want_snapshot = [&](int step) {
    for (int s : cfg.snapshot_steps)
      if (s == step) return true;
    return false;
  };
  auto record = [&](int step) {
    if (want_snapshot(step))
      res.snapshots.emplace_back(step, mu.points);
    if (cfg.record_every > 0 &&
        (step % cfg.record_every == 0 || step == cfg.iterations)) {
      double v = objective(mu);
      res.trace.steps.push_back(step);
      res.trace.objectives.push_back(v);
      res.trace.residuals.push_back(v);
    }
  };
  record(0);
  for (int l = 0; l < cfg.iterations; ++l) {
    Tensor g = gradient(mu);
    if (!g.all_finite())
      throw NonFiniteGradient("fixed_target_flow: non-finite gradient at step " +
                              std::to_string(l));
    double eta = cfg.step_size * std::pow(cfg.step_decay, l);
    for (int64_t i = 0; i < mu.points.rows(); ++i)
      if (mu.mask[i])
        for (int64_t j = 0; j < mu.points.cols(); ++j)
          mu.points(i, j) -= eta * g(i, j);
    record(l + 1);
  }
  res.final_measure = std::move(mu);
  return res;
}

}  // namespace

FixedFlowResult fixed_target_flow(const DiscreteMeasure& mu0,
                                  const DiscreteMeasure& target,
                                  const FixedFlowConfig& cfg) {
  return run_particle_flow(
      mu0, cfg,
      [&](const DiscreteMeasure& mu) {
        return mmd_flow_gradient_fixed(cfg.kernel, mu, target);
      },
      [&](const DiscreteMeasure& mu) {
        return 0.5 * mmd_sq(cfg.kernel, mu, target);
      });
}

FixedFlowResult fixed_target_flow(const DiscreteMeasure& mu0,
                                  const PushforwardMap& map,
                                  const FixedFlowConfig& cfg) {
  return run_particle_flow(
      mu0, cfg,
      [&](const DiscreteMeasure& mu) {
        return wasserstein_gradient_pushforward(cfg.kernel, mu, map);
      },
      [&](const DiscreteMeasure& mu) {
        DiscreteMeasure pushed(map.apply(mu.active_points()));
        DiscreteMeasure active(mu.active_points());
        return 0.5 * mmd_sq(cfg.kernel, active, pushed);
      });
}

}  // namespace ddeq
