#include "ddeq/train.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace ddeq {

namespace {

constexpr uint64_t kTagInit = 1;
constexpr uint64_t kTagShuffle = 2;
constexpr uint64_t kTagLatent = 3;
constexpr uint64_t kTagPrep = 4;
constexpr uint64_t kTagEval = 5;
constexpr uint64_t kTagDiag = 6;

Tensor zero_pad_cols(const Tensor& x, int64_t cols) {
  if (x.cols() > cols) throw ShapeError("zero_pad_cols: already wider");
  Tensor out(x.rows(), cols);
  for (int64_t i = 0; i < x.rows(); ++i)
    for (int64_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j);
  return out;
}

Var masked_pin_zeroed_grad(Tape& t, Var g, const CoreMasks& masks) {
  Var out = zero_masked_rows(t, g, masks.z_mask);
  if (masks.pin_mask.empty()) return out;
  std::vector<uint8_t> keep(masks.pin_mask.size());
  for (size_t i = 0; i < keep.size(); ++i) keep[i] = masks.pin_mask[i] ? 0 : 1;
  return zero_masked_rows(t, out, keep);
}

Var cross_entropy_graph(Tape& t, Var logits, int label) {
  int64_t c = t.value(logits).cols();
  if (label < 0 || label >= c) throw Error("cross entropy: label out of range");
  std::vector<uint8_t> all(static_cast<size_t>(c), uint8_t{1});
  Var m = t.masked_max_pool(t.transpose(logits), all);
  Var shifted = t.sub(logits, t.broadcast_scalar(m, 1, c));
  Var lse = t.add(t.log(t.sum_all(t.exp(shifted))), m);
  return t.sub(lse, t.slice_cols(logits, label, label + 1));
}

int argmax_row(const Tensor& logits) {
  int best = 0;
  for (int64_t j = 1; j < logits.cols(); ++j)
    if (logits(0, j) > logits(0, best)) best = static_cast<int>(j);
  return best;
}

double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.vec()) s += v * v;
  return std::sqrt(s);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; each index writes
// only its own output slot, so results are identical for any thread count.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = threads > 0 ? threads : (hw > 0 ? hw : 1);
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (free_fraction < 0) throw ConfigError("free_fraction must be >= 0");
  if (noise_fraction < 0 || noise_fraction > 1)
    throw ConfigError("noise_fraction must be in [0, 1]");
  if (latent_particles < 1) throw ConfigError("latent_particles must be >= 1");
  flow.validate();
  model.validate();
  if (task == TaskKind::kComplete && !model.with_coupling)
    throw ConfigError("completion task needs model.with_coupling");
  if (task == TaskKind::kClassify && model.num_classes < 2)
    throw ConfigError("classification task needs model.num_classes >= 2");
}

void adam_step(ParamStore& params, OptimizerState& state,
               const std::vector<Tensor>& grads, const AdamConfig& adam,
               double lr) {
  auto& items = params.items();
  if (grads.size() != items.size())
    throw ShapeError("adam_step: gradient list size mismatch");
  if (state.m.empty()) {
    for (const auto& [name, value] : items) {
      (void)name;
      Tensor z = value;
      for (auto& x : z.vec()) x = 0.0;
      state.m.push_back(z);
      state.v.push_back(std::move(z));
    }
  }
  state.step += 1;
  double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < items.size(); ++i) {
    auto& theta = items[i].second.vec();
    auto& m = state.m[i].vec();
    auto& v = state.v[i].vec();
    const auto& g = grads[i].vec();
    if (g.size() != theta.size()) throw ShapeError("adam_step: shape mismatch");
    for (size_t k = 0; k < theta.size(); ++k) {
      m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * g[k];
      v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * g[k] * g[k];
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      theta[k] -= lr * mhat / (std::sqrt(vhat) + adam.eps);
    }
  }
}

PreparedSample latent_init(const Sample& sample, const TrainConfig& cfg,
                           const ParamStore& params, uint64_t draw_seed) {
  PreparedSample out;
  const int64_t p = cfg.model.latent_dim;
  if (cfg.task == TaskKind::kClassify) {
    Rng rng(derive_seed(draw_seed, kTagLatent, 0));
    out.z0 = rng.normal_matrix(cfg.latent_particles, p);
    out.masks.z_mask.assign(static_cast<size_t>(cfg.latent_particles), 1);
    DiscreteMeasure c = sample.input.compact();
    out.x = c.points;
    out.masks.x_mask = c.mask;
    out.label = sample.label;
    return out;
  }
  // Completion: noise the partial input, add free particles, lift through q.
  DiscreteMeasure noised =
      cfg.noise_fraction > 0
          ? add_noise(sample.input.compact(), cfg.noise_fraction,
                      derive_seed(draw_seed, kTagPrep, 0))
          : sample.input.compact();
  FreeParticleResult with_free = add_free_particles(
      noised, cfg.free_fraction, derive_seed(draw_seed, kTagPrep, 1));
  Tensor lifted = zero_pad_cols(with_free.measure.points, p);
  out.z0 = coupling_forward_value(params, lifted);
  out.masks.z_mask = with_free.measure.mask;
  out.masks.pin_mask = with_free.pin_mask;
  out.free_count = with_free.measure.rows() - noised.rows();
  out.x = noised.points;
  out.masks.x_mask = noised.mask;
  out.target = sample.target ? &*sample.target : nullptr;
  return out;
}

PhantomResult phantom_backward(const Tensor& z_star,
                               const PreparedSample& prepared,
                               const ParamStore& params,
                               const TrainConfig& cfg) {
  Tape t;
  BoundParams p(t, params, /*requires_grad=*/true);
  Var z = t.leaf(z_star, true);
  Var x = t.constant(prepared.x);
  Var f = ddeq_core_forward(t, z, x, p, cfg.model, prepared.masks);
  Var inner = half_mmd_sq_graph(t, cfg.flow.kernel, z, prepared.masks.z_mask, f,
                                prepared.masks.z_mask);
  Var gz = masked_pin_zeroed_grad(t, t.grad(inner, {z})[0], prepared.masks);
  int64_t n_active = 0;
  for (uint8_t m : prepared.masks.z_mask) n_active += m ? 1 : 0;
  double eta = cfg.flow.step_size *
               std::pow(cfg.flow.step_decay, cfg.flow.iterations) *
               cfg.phantom_damping *
               (cfg.flow.rescale_by_n ? static_cast<double>(n_active) : 1.0);
  Var z_plus = t.sub(z, t.scale(gz, eta));

  PhantomResult res;
  Var loss;
  if (cfg.task == TaskKind::kClassify) {
    if (!prepared.label) throw Error("phantom_backward: sample has no label");
    Var logits = classify_head(t, z_plus, p, prepared.masks.z_mask);
    res.logits = t.value(logits);
    loss = cross_entropy_graph(t, logits, *prepared.label);
  } else {
    if (!prepared.target) throw Error("phantom_backward: sample has no target");
    Var pred = t.slice_cols(coupling_inverse(t, z_plus, p), 0,
                            cfg.model.data_dim);
    DiscreteMeasure tgt = prepared.target->compact();
    Var tgt_v = t.constant(tgt.points);
    loss = half_mmd_sq_graph(t, KernelSpec::riesz(), pred,
                             prepared.masks.z_mask, tgt_v, tgt.mask);
  }
  res.loss = t.value(loss).scalar_value();
  std::vector<Var> grads = t.grad(loss, p.all());
  res.grads.reserve(grads.size());
  for (Var g : grads) {
    Tensor v = t.value(g);
    if (!v.all_finite())
      throw NonFiniteGradient("phantom_backward: non-finite parameter gradient");
    res.grads.push_back(std::move(v));
  }
  return res;
}

double loss_classify(const Tensor& logits, int label) {
  Tape t;
  Var l = t.constant(logits);
  return t.value(cross_entropy_graph(t, l, label)).scalar_value();
}

double loss_complete(const DiscreteMeasure& pred,
                     const DiscreteMeasure& target) {
  return 0.5 * mmd_sq(KernelSpec::riesz(), pred, target);
}

void write_run_record_csv(const std::string& path, const RunRecord& record) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  auto fmt = [](double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  bool with_accuracy = false;
  for (const auto& r : record.rows)
    with_accuracy = with_accuracy || r.accuracy.has_value();
  out << "step,epoch,loss,residual_mean,grad_norm,lr";
  if (with_accuracy) out << ",accuracy";
  out << "\n";
  for (const auto& r : record.rows) {
    out << r.step << "," << r.epoch << "," << fmt(r.loss) << ","
        << fmt(r.residual_mean) << "," << fmt(r.grad_norm) << "," << fmt(r.lr);
    if (with_accuracy) {
      out << ",";
      if (r.accuracy) out << fmt(*r.accuracy);
    }
    out << "\n";
  }
}

namespace {

struct SampleOutcome {
  double loss = 0.0;
  double residual = 0.0;
  std::vector<Tensor> grads;
  bool correct = false;
};

// Pads the conditioning clouds of a batch to a common particle count and the
// completion latents to a common row count, so every sample goes through the
// same padded code path that full-batch parallel execution would use.
void pad_prepared_batch(std::vector<PreparedSample>& batch) {
  int64_t x_max = 0, z_max = 0;
  for (const auto& s : batch) {
    x_max = std::max(x_max, s.x.rows());
    z_max = std::max(z_max, s.z0.rows());
  }
  for (auto& s : batch) {
    if (s.x.rows() < x_max) {
      Tensor x(x_max, s.x.cols());
      for (int64_t i = 0; i < s.x.rows(); ++i)
        for (int64_t j = 0; j < s.x.cols(); ++j) x(i, j) = s.x(i, j);
      s.x = std::move(x);
      s.masks.x_mask.resize(static_cast<size_t>(x_max), 0);
    }
    if (s.z0.rows() < z_max) {
      Tensor z(z_max, s.z0.cols());
      for (int64_t i = 0; i < s.z0.rows(); ++i)
        for (int64_t j = 0; j < s.z0.cols(); ++j) z(i, j) = s.z0(i, j);
      s.z0 = std::move(z);
      s.masks.z_mask.resize(static_cast<size_t>(z_max), 0);
      if (!s.masks.pin_mask.empty())
        s.masks.pin_mask.resize(static_cast<size_t>(z_max), 0);
    }
  }
}

}  // namespace

TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw Error("train: empty dataset");
  TrainResult result;
  result.params = init_params(cfg.model, derive_seed(cfg.seed, kTagInit, 0));
  result.initial_params = result.params;
  OptimizerState opt;

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(dataset.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<double> grad_norm_sq_series;
  grad_norm_sq_series.reserve(static_cast<size_t>(total_steps));

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // 90% learning-rate drops after the configured epoch fractions.
    double lr = cfg.adam.lr;
    double frac =
        static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
    if (frac >= cfg.lr_drop1) lr *= cfg.lr_drop_factor;
    if (frac >= cfg.lr_drop2) lr *= cfg.lr_drop_factor;

    std::vector<int64_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng shuffle_rng(derive_seed(cfg.seed, kTagShuffle, epoch));
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

    for (int64_t b = 0; b < steps_per_epoch; ++b, ++step) {
      int64_t lo = b * cfg.batch_size;
      int64_t hi = std::min<int64_t>(lo + cfg.batch_size,
                                     static_cast<int64_t>(order.size()));
      int64_t bs = hi - lo;
      std::vector<PreparedSample> prepared(bs);
      for (int64_t i = 0; i < bs; ++i)
        prepared[i] = latent_init(
            dataset[order[lo + i]], cfg, result.params,
            derive_seed(cfg.seed, kTagLatent,
                        static_cast<uint64_t>(step) * 1000003 + i));
      pad_prepared_batch(prepared);

      std::vector<SampleOutcome> outcomes(bs);
      std::vector<Tensor> first_z_star;
      parallel_for(bs, cfg.threads, [&](int64_t i) {
        const PreparedSample& s = prepared[i];
        SolveResult sol = solve(s.z0, s.x, result.params, cfg.model, cfg.flow,
                                s.masks);
        PhantomResult ph = phantom_backward(sol.z_star, s, result.params, cfg);
        SampleOutcome& o = outcomes[i];
        o.loss = ph.loss;
        o.residual =
            residual(sol.z_star, s.x, result.params, cfg.model, cfg.flow,
                     s.masks);
        o.grads = std::move(ph.grads);
        if (cfg.task == TaskKind::kClassify)
          o.correct = argmax_row(ph.logits) == *s.label;
        if (i == 0) first_z_star = {sol.z_star};
      });

      // Fixed-order reduction keeps results identical across thread counts.
      std::vector<Tensor> grads = std::move(outcomes[0].grads);
      double loss_sum = outcomes[0].loss;
      double residual_sum = outcomes[0].residual;
      int64_t correct = outcomes[0].correct ? 1 : 0;
      for (int64_t i = 1; i < bs; ++i) {
        for (size_t gidx = 0; gidx < grads.size(); ++gidx) {
          auto& acc = grads[gidx].vec();
          const auto& g = outcomes[i].grads[gidx].vec();
          for (size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
        }
        loss_sum += outcomes[i].loss;
        residual_sum += outcomes[i].residual;
        correct += outcomes[i].correct ? 1 : 0;
      }
      double inv_bs = 1.0 / static_cast<double>(bs);
      for (auto& g : grads)
        for (auto& v : g.vec()) v *= inv_bs;

      double norm = global_norm(grads);
      if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
        double s = cfg.grad_clip / norm;
        for (auto& g : grads)
          for (auto& v : g.vec()) v *= s;
      }

      RunRecordRow row;
      row.step = step + 1;
      row.epoch = epoch;
      row.loss = loss_sum * inv_bs;
      row.residual_mean = residual_sum * inv_bs;
      row.grad_norm = norm;
      row.lr = lr;
      if (cfg.task == TaskKind::kClassify)
        row.accuracy = static_cast<double>(correct) * inv_bs;
      grad_norm_sq_series.push_back(norm * norm);

      if (cfg.diag_every > 0 && (step + 1) % cfg.diag_every == 0) {
        const PreparedSample& s = prepared[0];
        DiscreteMeasure mu_star(first_z_star[0], s.masks.z_mask);
        DiagnosticsRow d;
        d.t = step + 1;
        d.eps_t = epsilon_t(d.t);
        d.pl = pl_ratio(cfg.flow.kernel, mu_star, 8,
                        derive_seed(cfg.seed, kTagDiag, step));
        d.grad_discrepancy =
            grad_discrepancy_ratio(result.params, cfg.model, cfg.flow, s.x,
                                   s.masks, mu_star, mu_star, d.t);
        if (d.t >= 2) {
          d.theorem = theorem_ratio(grad_norm_sq_series, d.t);
          d.has_theorem = true;
        }
        result.record.diagnostics.push_back(d);
      }

      adam_step(result.params, opt, grads, cfg.adam, lr);
      result.record.rows.push_back(row);
      if (on_step) on_step(row, result.params);
    }
  }
  return result;
}

DiscreteMeasure removed_particles(const DiscreteMeasure& input,
                                  const DiscreteMeasure& target) {
  DiscreteMeasure in = input.compact();
  DiscreteMeasure tgt = target.compact();
  std::map<std::vector<double>, int64_t> pool;
  for (int64_t i = 0; i < in.rows(); ++i) {
    std::vector<double> row(in.dim());
    for (int64_t j = 0; j < in.dim(); ++j) row[j] = in.points(i, j);
    pool[row] += 1;
  }
  std::vector<int64_t> keep;
  for (int64_t i = 0; i < tgt.rows(); ++i) {
    std::vector<double> row(tgt.dim());
    for (int64_t j = 0; j < tgt.dim(); ++j) row[j] = tgt.points(i, j);
    auto it = pool.find(row);
    if (it != pool.end() && it->second > 0)
      it->second -= 1;
    else
      keep.push_back(i);
  }
  Tensor pts(static_cast<int64_t>(keep.size()), tgt.dim());
  for (size_t r = 0; r < keep.size(); ++r)
    for (int64_t j = 0; j < tgt.dim(); ++j) pts(r, j) = tgt.points(keep[r], j);
  return DiscreteMeasure(std::move(pts));
}

EvalMetrics evaluate(const std::vector<Sample>& dataset,
                     const ParamStore& params, const TrainConfig& cfg) {
  EvalMetrics metrics;
  metrics.samples = static_cast<int64_t>(dataset.size());
  if (dataset.empty()) return metrics;

  struct PerSample {
    bool correct = false;
    double half_mmd = 0.0;
    double w2_free = 0.0;
    double w2_full = 0.0;
    bool has_free = false;
  };
  std::vector<PerSample> rows(dataset.size());

  parallel_for(static_cast<int64_t>(dataset.size()), cfg.threads,
               [&](int64_t i) {
    const Sample& sample = dataset[i];
    PreparedSample s = latent_init(sample, cfg, params,
                                   derive_seed(cfg.seed, kTagEval, i));
    SolveResult sol = solve(s.z0, s.x, params, cfg.model, cfg.flow, s.masks);
    if (cfg.task == TaskKind::kClassify) {
      Tape t;
      BoundParams p(t, params, false);
      Var logits = classify_head(t, t.constant(sol.z_star), p, s.masks.z_mask);
      rows[i].correct = argmax_row(t.value(logits)) == *sample.label;
      return;
    }
    Tensor inv = coupling_inverse_value(params, sol.z_star);
    Tensor pred_pts(inv.rows(), cfg.model.data_dim);
    for (int64_t r = 0; r < inv.rows(); ++r)
      for (int64_t j = 0; j < cfg.model.data_dim; ++j)
        if (s.masks.z_mask[r]) pred_pts(r, j) = inv(r, j);
    DiscreteMeasure pred(std::move(pred_pts), s.masks.z_mask);
    DiscreteMeasure target = sample.target->compact();
    rows[i].half_mmd = loss_complete(pred, target);
    rows[i].w2_full = w2_distance(pred, target);
    // Free rows are the appended block at the tail of the latent.
    if (s.free_count > 0) {
      DiscreteMeasure removed = removed_particles(sample.input, *sample.target);
      if (removed.rows() > 0) {
        DiscreteMeasure pc = pred.compact();
        Tensor free_pts(s.free_count, cfg.model.data_dim);
        for (int64_t r = 0; r < s.free_count; ++r)
          for (int64_t j = 0; j < cfg.model.data_dim; ++j)
            free_pts(r, j) = pc.points(pc.rows() - s.free_count + r, j);
        rows[i].w2_free =
            w2_distance(DiscreteMeasure(std::move(free_pts)), removed);
        rows[i].has_free = true;
      }
    }
  });

  int64_t correct = 0, free_count = 0;
  for (const auto& r : rows) {
    correct += r.correct ? 1 : 0;
    metrics.mean_half_mmd_sq += r.half_mmd;
    metrics.mean_w2_full += r.w2_full;
    if (r.has_free) {
      metrics.mean_w2_free += r.w2_free;
      ++free_count;
    }
  }
  double n = static_cast<double>(dataset.size());
  metrics.accuracy = static_cast<double>(correct) / n;
  metrics.mean_half_mmd_sq /= n;
  metrics.mean_w2_full /= n;
  if (free_count > 0)
    metrics.mean_w2_free /= static_cast<double>(free_count);
  return metrics;
}

std::vector<Sample> make_completion_dataset(const std::vector<Sample>& full,
                                            double radius, uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(full.size());
  for (size_t i = 0; i < full.size(); ++i) {
    Sample s;
    s.id = full[i].id;
    s.target = full[i].input.compact();
    s.input = make_partial(full[i].input, radius,
                           derive_seed(seed, 0x9a37, i));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ddeq
