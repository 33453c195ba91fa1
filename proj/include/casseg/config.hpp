#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "casseg/cascade.hpp"
#include "casseg/nets.hpp"
#include "casseg/preprocess.hpp"
#include "casseg/training.hpp"

namespace casseg {

// Everything one CLI run can be configured with. See docs/config.md.
struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;

  NetworkConfig stage1_net = default_stage1_net();
  NetworkConfig stage2_net = default_stage2_net();
  TrainConfig train1 = default_train(1);
  TrainConfig train2 = default_train(2);
  DatasetStats stats;  // only the clip percentiles and per_case are configurable
  CascadeConfig pipeline;
  double stage2_margin_jitter = 0.25;

  std::vector<std::string> train_cases;  // empty = every case in data_dir
  std::vector<std::string> infer_cases;  // empty = every case in data_dir
  std::vector<std::filesystem::path> stage1_checkpoints;
  std::vector<std::filesystem::path> stage2_checkpoints;

  static NetworkConfig default_stage1_net();
  static NetworkConfig default_stage2_net();
  static TrainConfig default_train(int stage);

  // Type invariants; paths are checked separately.
  void validate() const;
  // data_dir and checkpoints must exist; out_dir is created if missing.
  void check_paths() const;
};

// Strict parse: unknown keys and wrong types are config errors naming the key.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);  // also runs check_paths

// Canonical JSON with every field present.
std::string serialize_config(const RunConfig& cfg);

// JSON forms shared with other artefacts.
std::string network_config_json(const NetworkConfig& cfg);
std::string dataset_stats_json(const DatasetStats& stats);
DatasetStats parse_dataset_stats(const std::string& text);

}  // namespace casseg
