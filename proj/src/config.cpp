#include "ddeq/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ddeq {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

KeyValueFile KeyValueFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

KeyValueFile KeyValueFile::parse_string(const std::string& text) {
  KeyValueFile kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (kv.values_.count(key))
      throw ConfigError("duplicate key '" + key + "'");
    kv.values_[key] = value;
    kv.consumed_[key] = false;
  }
  return kv;
}

std::string KeyValueFile::get_string(const std::string& key,
                                     const std::string& dflt) {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  consumed_[key] = true;
  return it->second;
}

int64_t KeyValueFile::get_int(const std::string& key, int64_t dflt) {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  consumed_[key] = true;
  int64_t v = 0;
  auto res = std::from_chars(it->second.data(),
                             it->second.data() + it->second.size(), v);
  if (res.ec != std::errc{} || res.ptr != it->second.data() + it->second.size())
    throw ConfigError("key '" + key + "': not an integer: " + it->second);
  return v;
}

double KeyValueFile::get_double(const std::string& key, double dflt) {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  consumed_[key] = true;
  double v = 0;
  auto res = std::from_chars(it->second.data(),
                             it->second.data() + it->second.size(), v);
  if (res.ec != std::errc{} || res.ptr != it->second.data() + it->second.size())
    throw ConfigError("key '" + key + "': not a number: " + it->second);
  return v;
}

bool KeyValueFile::get_bool(const std::string& key, bool dflt) {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  consumed_[key] = true;
  if (it->second == "true") return true;
  if (it->second == "false") return false;
  throw ConfigError("key '" + key + "': expected true or false");
}

void KeyValueFile::check_all_consumed() const {
  for (const auto& [key, used] : consumed_)
    if (!used) throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& path) {
  return run_config_from_kv(KeyValueFile::parse_file(path));
}

RunConfig run_config_from_kv(KeyValueFile kv) {
  RunConfig cfg;
  TrainConfig& t = cfg.train;

  std::string task = kv.get_string("task", "classify");
  if (task == "classify")
    t.task = TaskKind::kClassify;
  else if (task == "complete")
    t.task = TaskKind::kComplete;
  else
    throw ConfigError("task must be classify or complete");

  t.epochs = static_cast<int>(kv.get_int("epochs", 5));
  t.batch_size = static_cast<int>(kv.get_int("batch_size", 64));
  t.adam.lr = kv.get_double("adam_lr", 1e-3);
  t.adam.beta1 = kv.get_double("adam_beta1", 0.9);
  t.adam.beta2 = kv.get_double("adam_beta2", 0.999);
  t.adam.eps = kv.get_double("adam_eps", 1e-8);
  t.lr_drop1 = kv.get_double("lr_drop1_frac", 0.4);
  t.lr_drop2 = kv.get_double("lr_drop2_frac", 0.8);
  t.lr_drop_factor = kv.get_double("lr_drop_factor", 0.1);
  t.latent_particles = static_cast<int>(kv.get_int("latent_particles", 10));
  t.free_fraction = kv.get_double("free_fraction", 0.275);
  t.noise_fraction = kv.get_double(
      "noise_fraction", t.task == TaskKind::kComplete ? 0.05 : 0.0);
  t.phantom_damping = kv.get_double("phantom_damping", 1.0);
  t.grad_clip = kv.get_double("grad_clip", 0.0);
  t.threads = static_cast<int>(kv.get_int("threads", 0));
  t.diag_every = static_cast<int>(kv.get_int("diag_every", 0));
  t.seed = static_cast<uint64_t>(kv.get_int("seed", 0));

  t.flow.iterations = static_cast<int>(kv.get_int("flow_iterations", 200));
  t.flow.step_size = kv.get_double("flow_step_size", 5.0);
  t.flow.step_decay = kv.get_double("flow_step_decay", 1.0);
  t.flow.rescale_by_n = kv.get_bool("flow_rescale_by_n", true);
  t.flow.record_every = static_cast<int>(kv.get_int("flow_record_every", 0));
  std::string solver = kv.get_string("flow_solver", "wgd");
  if (solver == "wgd")
    t.flow.kind = SolverKind::kWgd;
  else if (solver == "fpi")
    t.flow.kind = SolverKind::kFixedPointIteration;
  else
    throw ConfigError("flow_solver must be wgd or fpi");
  std::string kernel = kv.get_string("kernel", "riesz");
  if (kernel == "riesz")
    t.flow.kernel = KernelSpec::riesz();
  else if (kernel == "gaussian")
    t.flow.kernel = KernelSpec::gaussian(kv.get_double("kernel_sigma", 1.0));
  else
    throw ConfigError("kernel must be riesz or gaussian");

  t.model.data_dim = static_cast<int>(kv.get_int("data_dim", 2));
  t.model.latent_dim = static_cast<int>(kv.get_int("latent_dim", 128));
  t.model.bilinear_dim = static_cast<int>(kv.get_int("bilinear_dim", 16));
  t.model.per_head_dim = static_cast<int>(kv.get_int("per_head_dim", 4));
  t.model.cross_encoder_layers =
      static_cast<int>(kv.get_int("cross_encoder_layers", 3));
  t.model.self_encoder_layers =
      static_cast<int>(kv.get_int("self_encoder_layers", 1));
  t.model.ffn_mult = static_cast<int>(kv.get_int("ffn_mult", 4));
  t.model.pushforward_only = kv.get_bool("pushforward_only", false);
  t.model.num_classes = static_cast<int>(kv.get_int("num_classes", 0));
  t.model.with_coupling = t.task == TaskKind::kComplete;

  std::string source = kv.get_string("data_source", "synth");
  if (source == "synth")
    cfg.data_source = DataSource::kSynth;
  else if (source == "manifest")
    cfg.data_source = DataSource::kManifest;
  else
    throw ConfigError("data_source must be synth or manifest");
  cfg.manifest_path = kv.get_string("data_manifest", "");
  cfg.partial_radius = kv.get_double("partial_radius", 0.6);

  cfg.synth_train.classes = static_cast<int>(kv.get_int(
      "synth_classes", t.task == TaskKind::kClassify ? 3 : 1));
  cfg.synth_train.samples_per_class =
      static_cast<int>(kv.get_int("synth_train_per_class", 100));
  cfg.synth_train.particles = static_cast<int>(kv.get_int("synth_particles", 40));
  cfg.synth_train.dim = t.model.data_dim;
  cfg.synth_train.seed = static_cast<uint64_t>(
      kv.get_int("synth_seed", static_cast<int64_t>(t.seed) + 1));
  std::string fams = kv.get_string("synth_families", "");
  if (!fams.empty()) {
    cfg.synth_train.families.clear();
    std::istringstream fs(fams);
    std::string f;
    while (std::getline(fs, f, ','))
      cfg.synth_train.families.push_back(shape_family_from_string(f));
  } else if (t.task == TaskKind::kComplete) {
    cfg.synth_train.families = {ShapeFamily::kRing};
  }
  cfg.synth_test = cfg.synth_train;
  cfg.synth_test.samples_per_class =
      static_cast<int>(kv.get_int("synth_test_per_class", 50));
  cfg.synth_test.seed = cfg.synth_train.seed + 7919;

  cfg.out_dir = kv.get_string("out_dir", "out");
  kv.check_all_consumed();

  if (t.task == TaskKind::kClassify && t.model.num_classes == 0 &&
      cfg.data_source == DataSource::kSynth)
    t.model.num_classes = cfg.synth_train.classes;
  return cfg;
}

std::string dump_run_config(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::ostringstream out;
  auto fmt = [](double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  out << "task = " << (t.task == TaskKind::kClassify ? "classify" : "complete")
      << "\n";
  out << "epochs = " << t.epochs << "\n";
  out << "batch_size = " << t.batch_size << "\n";
  out << "adam_lr = " << fmt(t.adam.lr) << "\n";
  out << "adam_beta1 = " << fmt(t.adam.beta1) << "\n";
  out << "adam_beta2 = " << fmt(t.adam.beta2) << "\n";
  out << "adam_eps = " << fmt(t.adam.eps) << "\n";
  out << "lr_drop1_frac = " << fmt(t.lr_drop1) << "\n";
  out << "lr_drop2_frac = " << fmt(t.lr_drop2) << "\n";
  out << "lr_drop_factor = " << fmt(t.lr_drop_factor) << "\n";
  out << "latent_particles = " << t.latent_particles << "\n";
  out << "free_fraction = " << fmt(t.free_fraction) << "\n";
  out << "noise_fraction = " << fmt(t.noise_fraction) << "\n";
  out << "phantom_damping = " << fmt(t.phantom_damping) << "\n";
  out << "grad_clip = " << fmt(t.grad_clip) << "\n";
  out << "threads = " << t.threads << "\n";
  out << "diag_every = " << t.diag_every << "\n";
  out << "seed = " << t.seed << "\n";
  out << "flow_iterations = " << t.flow.iterations << "\n";
  out << "flow_step_size = " << fmt(t.flow.step_size) << "\n";
  out << "flow_step_decay = " << fmt(t.flow.step_decay) << "\n";
  out << "flow_rescale_by_n = " << (t.flow.rescale_by_n ? "true" : "false")
      << "\n";
  out << "flow_record_every = " << t.flow.record_every << "\n";
  out << "flow_solver = "
      << (t.flow.kind == SolverKind::kWgd ? "wgd" : "fpi") << "\n";
  out << "kernel = "
      << (t.flow.kernel.family == KernelFamily::kRiesz ? "riesz" : "gaussian")
      << "\n";
  if (t.flow.kernel.family == KernelFamily::kGaussian)
    out << "kernel_sigma = " << fmt(t.flow.kernel.sigma) << "\n";
  out << "data_dim = " << t.model.data_dim << "\n";
  out << "latent_dim = " << t.model.latent_dim << "\n";
  out << "bilinear_dim = " << t.model.bilinear_dim << "\n";
  out << "per_head_dim = " << t.model.per_head_dim << "\n";
  out << "cross_encoder_layers = " << t.model.cross_encoder_layers << "\n";
  out << "self_encoder_layers = " << t.model.self_encoder_layers << "\n";
  out << "ffn_mult = " << t.model.ffn_mult << "\n";
  out << "pushforward_only = " << (t.model.pushforward_only ? "true" : "false")
      << "\n";
  out << "num_classes = " << t.model.num_classes << "\n";
  out << "data_source = "
      << (cfg.data_source == DataSource::kSynth ? "synth" : "manifest") << "\n";
  if (!cfg.manifest_path.empty())
    out << "data_manifest = " << cfg.manifest_path << "\n";
  out << "partial_radius = " << fmt(cfg.partial_radius) << "\n";
  out << "synth_classes = " << cfg.synth_train.classes << "\n";
  out << "synth_train_per_class = " << cfg.synth_train.samples_per_class
      << "\n";
  out << "synth_test_per_class = " << cfg.synth_test.samples_per_class << "\n";
  out << "synth_particles = " << cfg.synth_train.particles << "\n";
  out << "synth_seed = " << cfg.synth_train.seed << "\n";
  std::string fams;
  for (const auto& f : cfg.synth_train.families) {
    if (!fams.empty()) fams += ",";
    fams += to_string(f);
  }
  out << "synth_families = " << fams << "\n";
  out << "out_dir = " << cfg.out_dir << "\n";
  return out.str();
}

ManifestDataset load_manifest(const std::string& path, TaskKind task) {
  KeyValueFile kv = KeyValueFile::parse_file(path);
  std::string base;
  auto slash = path.find_last_of('/');
  if (slash != std::string::npos) base = path.substr(0, slash + 1);
  auto resolve = [&](const std::string& p) {
    return p.empty() || p.front() == '/' ? p : base + p;
  };
  ManifestDataset ds;
  std::string train_csv = kv.get_string("train.csv", "");
  std::string test_csv = kv.get_string("test.csv", "");
  if (train_csv.empty()) throw ConfigError("manifest: missing train.csv");
  ds.train = load_points_csv(resolve(train_csv));
  if (!test_csv.empty()) ds.test = load_points_csv(resolve(test_csv));
  if (task == TaskKind::kComplete) {
    std::string train_tgt = kv.get_string("train.target_csv", "");
    std::string test_tgt = kv.get_string("test.target_csv", "");
    if (train_tgt.empty())
      throw ConfigError("manifest: completion needs train.target_csv");
    auto attach = [](std::vector<Sample>& samples,
                     const std::vector<Sample>& targets) {
      if (samples.size() != targets.size())
        throw ConfigError("manifest: input/target sample count mismatch");
      for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].id != targets[i].id)
          throw ConfigError("manifest: input/target id mismatch at " +
                            samples[i].id);
        samples[i].target = targets[i].input;
      }
    };
    attach(ds.train, load_points_csv(resolve(train_tgt)));
    if (!ds.test.empty()) {
      if (test_tgt.empty())
        throw ConfigError("manifest: completion needs test.target_csv");
      attach(ds.test, load_points_csv(resolve(test_tgt)));
    }
  }
  // informational keys; validated for type only
  (void)kv.get_string("task", "");
  (void)kv.get_double("partial_radius", 0.0);
  (void)kv.get_double("free_fraction", 0.0);
  (void)kv.get_double("noise_fraction", 0.0);
  kv.check_all_consumed();
  return ds;
}

ManifestDataset build_datasets(const RunConfig& cfg) {
  if (cfg.data_source == DataSource::kManifest)
    return load_manifest(cfg.manifest_path, cfg.train.task);
  ManifestDataset ds;
  ds.train = synth_dataset(cfg.synth_train);
  ds.test = synth_dataset(cfg.synth_test);
  if (cfg.train.task == TaskKind::kComplete) {
    ds.train = make_completion_dataset(ds.train, cfg.partial_radius,
                                       derive_seed(cfg.train.seed, 0x9a37, 1));
    ds.test = make_completion_dataset(ds.test, cfg.partial_radius,
                                      derive_seed(cfg.train.seed, 0x9a37, 2));
  }
  return ds;
}

}  // namespace ddeq
