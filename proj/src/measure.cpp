#include "ddeq/measure.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace ddeq {

DiscreteMeasure::DiscreteMeasure(Tensor pts)
    : points(std::move(pts)),
      mask(static_cast<size_t>(points.rows()), uint8_t{1}) {}

DiscreteMeasure::DiscreteMeasure(Tensor pts, std::vector<uint8_t> m)
    : points(std::move(pts)), mask(std::move(m)) {
  if (static_cast<int64_t>(mask.size()) != points.rows())
    throw ShapeError("DiscreteMeasure: mask length != rows");
}

int64_t DiscreteMeasure::n_active() const {
  int64_t n = 0;
  for (uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

DiscreteMeasure DiscreteMeasure::compact() const {
  Tensor pts(n_active(), dim());
  int64_t r = 0;
  for (int64_t i = 0; i < rows(); ++i)
    if (mask[i]) {
      for (int64_t j = 0; j < dim(); ++j) pts(r, j) = points(i, j);
      ++r;
    }
  return DiscreteMeasure(std::move(pts));
}

Tensor DiscreteMeasure::active_points() const {
  return compact().points;
}

void DiscreteMeasure::check_invariants() const {
  if (static_cast<int64_t>(mask.size()) != rows())
    throw ShapeError("measure: mask length != rows");
  for (int64_t i = 0; i < rows(); ++i)
    if (!mask[i])
      for (int64_t j = 0; j < dim(); ++j)
        if (points(i, j) != 0.0)
          throw ShapeError("measure: padded row is not zero");
}

int64_t round_count(double x) { return static_cast<int64_t>(std::floor(x + 0.5)); }

DiscreteMeasure normalize(const DiscreteMeasure& m) {
  int64_t n = m.n_active(), d = m.dim();
  if (n < 2) throw DegenerateSpread("normalize: fewer than two active particles");
  std::vector<double> mean(d, 0.0);
  for (int64_t i = 0; i < m.rows(); ++i)
    if (m.mask[i])
      for (int64_t j = 0; j < d; ++j) mean[j] += m.points(i, j);
  for (auto& v : mean) v /= static_cast<double>(n);
  double var = 0.0;
  for (int64_t i = 0; i < m.rows(); ++i)
    if (m.mask[i])
      for (int64_t j = 0; j < d; ++j) {
        double c = m.points(i, j) - mean[j];
        var += c * c;
      }
  var /= static_cast<double>(n * d);
  double sd = std::sqrt(var);
  if (!(sd > 1e-15))
    throw DegenerateSpread("normalize: active particles coincide");
  DiscreteMeasure out = m;
  for (int64_t i = 0; i < m.rows(); ++i)
    if (m.mask[i])
      for (int64_t j = 0; j < d; ++j)
        out.points(i, j) = (m.points(i, j) - mean[j]) / sd;
  return out;
}

DiscreteMeasure make_partial(const DiscreteMeasure& m, double r,
                             uint64_t seed) {
  if (r < 0) throw Error("make_partial: negative radius");
  DiscreteMeasure c = m.compact();
  int64_t n = c.rows(), d = c.dim();
  if (n < 2) throw EmptyPartial("make_partial: need at least two particles");
  Rng rng(seed);
  int64_t i0 = rng.uniform_int(n);
  int64_t i1 = rng.uniform_int(n - 1);
  if (i1 >= i0) ++i1;  // second center distinct from the first
  std::vector<uint8_t> keep(n, uint8_t{1});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t center : {i0, i1}) {
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        double diff = c.points(i, j) - c.points(center, j);
        s += diff * diff;
      }
      if (std::sqrt(s) <= r) {
        keep[i] = 0;
        break;
      }
    }
  }
  int64_t n_keep = 0;
  for (uint8_t k : keep) n_keep += k;
  if (n_keep == 0) throw EmptyPartial("make_partial: radius removed every particle");
  Tensor pts(n_keep, d);
  int64_t row = 0;
  for (int64_t i = 0; i < n; ++i)
    if (keep[i]) {
      for (int64_t j = 0; j < d; ++j) pts(row, j) = c.points(i, j);
      ++row;
    }
  return DiscreteMeasure(std::move(pts));
}

FreeParticleResult add_free_particles(const DiscreteMeasure& partial,
                                      double fraction, uint64_t seed) {
  if (fraction < 0) throw Error("add_free_particles: negative fraction");
  int64_t n_new = round_count(fraction * static_cast<double>(partial.n_active()));
  int64_t n = partial.rows(), d = partial.dim();
  Rng rng(seed);
  Tensor pts(n + n_new, d);
  std::vector<uint8_t> mask(n + n_new, uint8_t{1});
  std::vector<uint8_t> pin(n + n_new, uint8_t{0});
  for (int64_t i = 0; i < n; ++i) {
    mask[i] = partial.mask[i];
    pin[i] = partial.mask[i];
    for (int64_t j = 0; j < d; ++j) pts(i, j) = partial.points(i, j);
  }
  for (int64_t i = 0; i < n_new; ++i)
    for (int64_t j = 0; j < d; ++j) pts(n + i, j) = rng.normal();
  FreeParticleResult res;
  res.measure = DiscreteMeasure(std::move(pts), std::move(mask));
  res.pin_mask = std::move(pin);
  return res;
}

DiscreteMeasure add_noise(const DiscreteMeasure& m, double fraction,
                          uint64_t seed) {
  if (fraction < 0 || fraction > 1)
    throw Error("add_noise: fraction outside [0, 1]");
  int64_t n_active = m.n_active();
  int64_t n_replace = round_count(fraction * static_cast<double>(n_active));
  std::vector<int64_t> active;
  active.reserve(n_active);
  for (int64_t i = 0; i < m.rows(); ++i)
    if (m.mask[i]) active.push_back(i);
  Rng rng(seed);
  // partial Fisher-Yates: the first n_replace entries are the chosen set
  for (int64_t i = 0; i < n_replace; ++i) {
    int64_t j = i + rng.uniform_int(n_active - i);
    std::swap(active[i], active[j]);
  }
  DiscreteMeasure out = m;
  for (int64_t i = 0; i < n_replace; ++i)
    for (int64_t j = 0; j < m.dim(); ++j)
      out.points(active[i], j) = rng.normal();
  return out;
}

Batch pad_batch(const std::vector<DiscreteMeasure>& samples) {
  if (samples.empty()) throw Error("pad_batch: empty sample list");
  int64_t d = samples[0].dim();
  int64_t n_max = 0;
  for (const auto& s : samples) {
    if (s.dim() != d) throw DimensionMismatch("pad_batch: mixed dimensions");
    n_max = std::max(n_max, s.n_active());
  }
  Batch b;
  b.n_max = n_max;
  for (const auto& s : samples) {
    DiscreteMeasure c = s.compact();
    Tensor pts(n_max, d);
    std::vector<uint8_t> mask(n_max, uint8_t{0});
    for (int64_t i = 0; i < c.rows(); ++i) {
      mask[i] = 1;
      for (int64_t j = 0; j < d; ++j) pts(i, j) = c.points(i, j);
    }
    b.points.push_back(std::move(pts));
    b.masks.push_back(std::move(mask));
    b.ids.emplace_back();
  }
  return b;
}

std::vector<DiscreteMeasure> unbatch(const Batch& batch) {
  std::vector<DiscreteMeasure> out;
  out.reserve(batch.points.size());
  for (size_t s = 0; s < batch.points.size(); ++s)
    out.push_back(
        DiscreteMeasure(batch.points[s], batch.masks[s]).compact());
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_double(const std::string& s, int line_no) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc{} || res.ptr != e)
    throw ParseError("bad number '" + s + "' on line " +
                     std::to_string(line_no));
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::vector<Sample> load_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) return {};  // empty file -> empty list
  auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "point_id")
    throw SchemaError("header must start with sample_id,point_id");
  bool has_label = header.back() == "label";
  int dim = static_cast<int>(header.size()) - 2 - (has_label ? 1 : 0);
  if (dim < 1) throw SchemaError("no coordinate columns");
  for (int j = 0; j < dim; ++j)
    if (header[2 + j] != "x" + std::to_string(j))
      throw SchemaError("expected coordinate column x" + std::to_string(j));

  struct Acc {
    std::vector<double> coords;
    std::optional<int> label;
  };
  std::map<std::string, Acc> acc;  // keyed by sample_id
  std::vector<std::string> order;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (static_cast<int>(f.size()) != 2 + dim + (has_label ? 1 : 0))
      throw ParseError("wrong field count on line " + std::to_string(line_no));
    const std::string& sid = f[0];
    auto it = acc.find(sid);
    if (it == acc.end()) {
      it = acc.emplace(sid, Acc{}).first;
      order.push_back(sid);
    }
    for (int j = 0; j < dim; ++j)
      it->second.coords.push_back(parse_double(f[2 + j], line_no));
    if (has_label && !f.back().empty()) {
      int lab = static_cast<int>(parse_double(f.back(), line_no));
      if (it->second.label && *it->second.label != lab)
        throw ParseError("inconsistent label for sample " + sid + " on line " +
                         std::to_string(line_no));
      it->second.label = lab;
    }
  }
  std::vector<Sample> out;
  out.reserve(order.size());
  for (const auto& sid : order) {
    const Acc& a = acc[sid];
    int64_t n = static_cast<int64_t>(a.coords.size()) / dim;
    Tensor pts(n, dim);
    for (int64_t i = 0; i < n; ++i)
      for (int j = 0; j < dim; ++j) pts(i, j) = a.coords[i * dim + j];
    Sample s;
    s.input = DiscreteMeasure(std::move(pts));
    s.label = a.label;
    s.id = sid;
    out.push_back(std::move(s));
  }
  return out;
}

void save_points_csv(const std::vector<Sample>& samples,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  int dim = samples.empty() ? 2 : static_cast<int>(samples[0].input.dim());
  bool has_label = false;
  for (const auto& s : samples) has_label = has_label || s.label.has_value();
  out << "sample_id,point_id";
  for (int j = 0; j < dim; ++j) out << ",x" << j;
  if (has_label) out << ",label";
  out << "\n";
  for (const auto& s : samples) {
    DiscreteMeasure c = s.input.compact();
    for (int64_t i = 0; i < c.rows(); ++i) {
      out << s.id << "," << i;
      for (int j = 0; j < dim; ++j) out << "," << format_double(c.points(i, j));
      if (has_label) {
        out << ",";
        if (s.label) out << *s.label;
      }
      out << "\n";
    }
  }
}

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "gaussian-mixture") return ShapeFamily::kGaussianMixture;
  if (s == "ring") return ShapeFamily::kRing;
  if (s == "cross") return ShapeFamily::kCross;
  if (s == "grid") return ShapeFamily::kGrid;
  throw ConfigError("unknown shape family '" + s + "'");
}

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kGaussianMixture: return "gaussian-mixture";
    case ShapeFamily::kRing: return "ring";
    case ShapeFamily::kCross: return "cross";
    case ShapeFamily::kGrid: return "grid";
  }
  return "?";
}

namespace {

// Raw (pre-normalization) cloud for one sample of a family. `variant`
// perturbs the template so repeated classes of the same family stay distinct.
Tensor synth_cloud(ShapeFamily family, int variant, int64_t n, int dim,
                   Rng& rng) {
  Tensor pts(n, dim);
  const double jitter = 0.08;
  switch (family) {
    case ShapeFamily::kRing: {
      double rx = 1.0, ry = variant % 2 == 0 ? 1.0 : 0.55;
      for (int64_t i = 0; i < n; ++i) {
        double a = 2.0 * M_PI * rng.uniform();
        pts(i, 0) = rx * std::cos(a) + jitter * rng.normal();
        pts(i, 1) = ry * std::sin(a) + jitter * rng.normal();
        for (int j = 2; j < dim; ++j) pts(i, j) = jitter * rng.normal();
      }
      break;
    }
    case ShapeFamily::kCross: {
      double tilt = variant % 2 == 0 ? 0.0 : M_PI / 4.0;
      for (int64_t i = 0; i < n; ++i) {
        double t = 2.0 * rng.uniform() - 1.0;
        bool horizontal = rng.uniform() < 0.5;
        double x = horizontal ? t : 0.0;
        double y = horizontal ? 0.0 : t;
        double c = std::cos(tilt), s = std::sin(tilt);
        pts(i, 0) = c * x - s * y + jitter * rng.normal();
        pts(i, 1) = s * x + c * y + jitter * rng.normal();
        for (int j = 2; j < dim; ++j) pts(i, j) = jitter * rng.normal();
      }
      break;
    }
    case ShapeFamily::kGaussianMixture: {
      int modes = 2 + variant % 3;
      for (int64_t i = 0; i < n; ++i) {
        int mode = static_cast<int>(rng.uniform_int(modes));
        double a = 2.0 * M_PI * mode / modes;
        pts(i, 0) = 1.1 * std::cos(a) + 0.25 * rng.normal();
        pts(i, 1) = 1.1 * std::sin(a) + 0.25 * rng.normal();
        for (int j = 2; j < dim; ++j) pts(i, j) = 0.25 * rng.normal();
      }
      break;
    }
    case ShapeFamily::kGrid: {
      int side = 3 + variant % 2;
      for (int64_t i = 0; i < n; ++i) {
        int cell = static_cast<int>(rng.uniform_int(side * side));
        double gx = cell % side, gy = cell / side;
        pts(i, 0) = (gx / (side - 1) * 2.0 - 1.0) + jitter * rng.normal();
        pts(i, 1) = (gy / (side - 1) * 2.0 - 1.0) + jitter * rng.normal();
        for (int j = 2; j < dim; ++j) pts(i, j) = jitter * rng.normal();
      }
      break;
    }
  }
  return pts;
}

}  // namespace

std::vector<Sample> synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 1) throw Error("synth_dataset: need at least one class");
  if (spec.dim < 2) throw Error("synth_dataset: dim must be >= 2");
  if (spec.families.empty()) throw Error("synth_dataset: no families");
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(spec.classes) * spec.samples_per_class);
  for (int c = 0; c < spec.classes; ++c) {
    ShapeFamily family = spec.families[c % spec.families.size()];
    int variant = c / static_cast<int>(spec.families.size());
    for (int s = 0; s < spec.samples_per_class; ++s) {
      Rng sample_rng(derive_seed(spec.seed, static_cast<uint64_t>(c),
                                 static_cast<uint64_t>(s)));
      // 70%..100% of the particle budget, per sample
      int64_t lo = std::max<int64_t>(8, spec.particles * 7 / 10);
      int64_t n = lo + sample_rng.uniform_int(spec.particles - lo + 1);
      Tensor pts = synth_cloud(family, variant, n, spec.dim, sample_rng);
      Sample sample;
      sample.input = normalize(DiscreteMeasure(std::move(pts)));
      if (spec.classes > 1) sample.label = c;
      sample.id = "c" + std::to_string(c) + "_s" + std::to_string(s);
      out.push_back(std::move(sample));
    }
  }
  return out;
}

}  // namespace ddeq
