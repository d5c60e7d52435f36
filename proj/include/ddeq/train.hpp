#pragma once

#include <optional>

#include "ddeq/diagnostics.hpp"
#include "ddeq/measure.hpp"
#include "ddeq/solver.hpp"

namespace ddeq {

enum class TaskKind { kClassify, kComplete };

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  TaskKind task = TaskKind::kClassify;
  int epochs = 5;
  int batch_size = 64;
  AdamConfig adam;
  // learning rate drops by `lr_drop_factor` after these fractions of epochs
  double lr_drop1 = 0.4;
  double lr_drop2 = 0.8;
  double lr_drop_factor = 0.1;
  int latent_particles = 10;     // classification
  double free_fraction = 0.275;  // completion
  double noise_fraction = 0.0;   // completion input noise
  double phantom_damping = 1.0;
  double grad_clip = 0.0;  // global-norm clip; 0 = off
  int threads = 0;         // 0 = hardware concurrency
  int diag_every = 0;      // 0 = no diagnostics logging
  FlowConfig flow;
  ModelConfig model;
  uint64_t seed = 0;

  void validate() const;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;
};

// Adam update, in place; `grads` aligned with params.items() order.
void adam_step(ParamStore& params, OptimizerState& state,
               const std::vector<Tensor>& grads, const AdamConfig& adam,
               double lr);

// Solver-ready bundle for one sample at one draw.
struct PreparedSample {
  Tensor z0;
  Tensor x;  // conditioning cloud (padded rows zero)
  CoreMasks masks;
  std::optional<int> label;
  const DiscreteMeasure* target = nullptr;  // completion ground truth
  int64_t free_count = 0;  // latent rows appended as free particles
};

// Classification: latent_particles x latent_dim standard normal latents.
// Completion: input (+ noise) + free particles, zero-padded to the latent
// dimension and passed through the coupling layer; input rows are pinned.
PreparedSample latent_init(const Sample& sample, const TrainConfig& cfg,
                           const ParamStore& params, uint64_t draw_seed);

struct PhantomResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with params.items()
  Tensor logits;              // classification only
};

// One differentiable inner update at the detached fixed point, followed by
// the task head and loss; reverse mode yields the parameter gradients.
PhantomResult phantom_backward(const Tensor& z_star,
                               const PreparedSample& prepared,
                               const ParamStore& params,
                               const TrainConfig& cfg);

// Numerically stable cross entropy from a 1xC logit row.
double loss_classify(const Tensor& logits, int label);
// 1/2 MMD^2 with the Riesz kernel over active particles.
double loss_complete(const DiscreteMeasure& pred, const DiscreteMeasure& target);

struct RunRecordRow {
  int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double residual_mean = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::optional<double> accuracy;
};

struct RunRecord {
  std::vector<RunRecordRow> rows;
  std::vector<DiagnosticsRow> diagnostics;
};

void write_run_record_csv(const std::string& path, const RunRecord& record);

struct TrainResult {
  ParamStore params;
  ParamStore initial_params;
  RunRecord record;
};

using StepCallback =
    std::function<void(const RunRecordRow&, const ParamStore&)>;

TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                  const StepCallback& on_step = nullptr);

struct EvalMetrics {
  double accuracy = 0.0;           // classification
  double mean_half_mmd_sq = 0.0;   // completion: prediction vs target
  double mean_w2_free = 0.0;       // completion: free vs removed particles
  double mean_w2_full = 0.0;       // completion: full prediction vs target
  int64_t samples = 0;
};

EvalMetrics evaluate(const std::vector<Sample>& dataset,
                     const ParamStore& params, const TrainConfig& cfg);

// Derives (partial input, full target) completion pairs from full clouds.
std::vector<Sample> make_completion_dataset(const std::vector<Sample>& full,
                                            double radius, uint64_t seed);

// Rows of `target` that do not appear in `input` (exact multiset match).
DiscreteMeasure removed_particles(const DiscreteMeasure& input,
                                  const DiscreteMeasure& target);

}  // namespace ddeq
