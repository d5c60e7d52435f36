#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddeq/tensor.hpp"

namespace ddeq {

// Uniformly weighted discrete measure: an Nxd particle matrix plus an
// activity mask. Rows with mask false are padding and are kept exactly zero;
// each active particle carries weight 1 / n_active.
struct DiscreteMeasure {
  Tensor points;               // N x d
  std::vector<uint8_t> mask;   // N entries, true = active

  DiscreteMeasure() = default;
  explicit DiscreteMeasure(Tensor pts);
  DiscreteMeasure(Tensor pts, std::vector<uint8_t> m);

  int64_t rows() const { return points.rows(); }
  int64_t dim() const { return points.cols(); }
  int64_t n_active() const;
  // Drops padded rows; active rows keep their relative order.
  DiscreteMeasure compact() const;
  // Active rows only, in order, as an n_active x d matrix.
  Tensor active_points() const;
  void check_invariants() const;
};

struct Sample {
  DiscreteMeasure input;
  std::optional<int> label;
  std::optional<DiscreteMeasure> target;
  std::string id;
};

struct Batch {
  std::vector<Tensor> points;               // B entries, each N_max x d
  std::vector<std::vector<uint8_t>> masks;  // B entries, N_max each
  std::vector<std::string> ids;
  int64_t n_max = 0;
};

// Shifts active particles to zero mean and scales so the scalar standard
// deviation over all active coordinates is one. Throws DegenerateSpread for
// fewer than two active particles or coinciding particles.
DiscreteMeasure normalize(const DiscreteMeasure& m);

// Picks two distinct active particles uniformly at random and deactivates
// every active particle within Euclidean distance r of either (inclusive).
// The result is compacted. Throws EmptyPartial when nothing survives.
DiscreteMeasure make_partial(const DiscreteMeasure& m, double r,
                             uint64_t seed);

struct FreeParticleResult {
  DiscreteMeasure measure;
  // True exactly on the rows carried over from the input (the pinned ones).
  std::vector<uint8_t> pin_mask;
};

// Appends round(fraction * n_active) i.i.d. standard normal particles.
FreeParticleResult add_free_particles(const DiscreteMeasure& partial,
                                      double fraction, uint64_t seed);

// Replaces round(fraction * n_active) uniformly chosen active particles with
// i.i.d. standard normal draws.
DiscreteMeasure add_noise(const DiscreteMeasure& m, double fraction,
                          uint64_t seed);

// Pads samples (compacted) with zero rows to the largest active count.
Batch pad_batch(const std::vector<DiscreteMeasure>& samples);
std::vector<DiscreteMeasure> unbatch(const Batch& batch);

// Canonical points CSV: header sample_id,point_id,x0,..[,label].
std::vector<Sample> load_points_csv(const std::string& path);
void save_points_csv(const std::vector<Sample>& samples,
                     const std::string& path);

enum class ShapeFamily { kGaussianMixture, kRing, kCross, kGrid };
ShapeFamily shape_family_from_string(const std::string& s);
std::string to_string(ShapeFamily f);

struct SynthSpec {
  int classes = 3;
  int samples_per_class = 100;
  int particles = 48;     // upper bound; per-sample counts vary
  int dim = 2;
  std::vector<ShapeFamily> families = {ShapeFamily::kRing, ShapeFamily::kCross,
                                       ShapeFamily::kGaussianMixture,
                                       ShapeFamily::kGrid};
  uint64_t seed = 0;
};

// Deterministic synthetic classification clouds, one family per class,
// normalized. With classes == 1 it yields an unlabeled single-family set
// usable as completion targets.
std::vector<Sample> synth_dataset(const SynthSpec& spec);

// Rounds half away from zero; particle-count convention used throughout.
int64_t round_count(double x);

}  // namespace ddeq
