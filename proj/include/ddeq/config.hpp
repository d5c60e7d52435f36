#pragma once

#include <map>
#include <string>

#include "ddeq/measure.hpp"
#include "ddeq/train.hpp"

namespace ddeq {

// Flat `key = value` file; '#' starts a comment. Unknown keys are errors.
class KeyValueFile {
 public:
  static KeyValueFile parse_file(const std::string& path);
  static KeyValueFile parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& dflt);
  int64_t get_int(const std::string& key, int64_t dflt);
  double get_double(const std::string& key, double dflt);
  bool get_bool(const std::string& key, bool dflt);

  // Throws ConfigError when keys were never consumed by a getter.
  void check_all_consumed() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> consumed_;
};

enum class DataSource { kSynth, kManifest };

struct RunConfig {
  TrainConfig train;
  DataSource data_source = DataSource::kSynth;
  // synth settings
  SynthSpec synth_train;
  SynthSpec synth_test;
  double partial_radius = 0.6;  // completion dataset construction
  // manifest settings
  std::string manifest_path;
  std::string out_dir = "out";
};

// Parses a run config file; every key is validated, unknown keys fail.
RunConfig parse_run_config(const std::string& path);
RunConfig run_config_from_kv(KeyValueFile kv);

// Serializes the fully resolved configuration (all keys, current values).
std::string dump_run_config(const RunConfig& cfg);

struct ManifestDataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Dataset manifest: `split.csv`, `split.target_csv` (completion) plus the
// task and preprocessing keys; see README for the schema.
ManifestDataset load_manifest(const std::string& path, TaskKind task);

// Builds the train/test datasets a run config describes.
ManifestDataset build_datasets(const RunConfig& cfg);

}  // namespace ddeq
