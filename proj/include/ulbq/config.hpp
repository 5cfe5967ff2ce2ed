#pragma once

#include <cstdint>
#include <string>

#include "ulbq/calibrator.hpp"
#include "ulbq/model.hpp"

namespace ulbq {

struct DataConfig {
  std::string corpus = "data/sample_corpus.txt";
  std::string dataset_id = "sample_corpus";
  double valid_fraction = 0.05;
  double test_fraction = 0.05;
};

struct SaliencyConfig {
  std::string split = "train";  // split the gradients are taken on
  std::size_t samples = 32;
  std::size_t seq_len = 128;
};

struct CalibrationDataConfig {
  std::string split = "train";
  std::size_t samples = 128;
  std::size_t seq_len = 128;
};

struct EvalConfig {
  std::string split = "test";
};

/// Complete declarative description of one experiment.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  ModelConfig model;  // vocab 0 = taken from the corpus
  PretrainConfig pretrain;
  DataConfig data;
  SaliencyConfig saliency;
  CalibrationDataConfig calibration_data;
  CalibrationConfig calibration;
  EvalConfig eval;

  ExperimentConfig();
  void validate() const;
};

/// Applies the keys of a JSON document on top of `base`. Unknown keys and
/// wrongly typed values are rejected with the offending path.
ExperimentConfig parse_config(const std::string& json_text, const ExperimentConfig& base = {});
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON (fixed key order) of the fully resolved configuration.
std::string config_to_json(const ExperimentConfig& cfg);

/// Identifier of the source tree this binary was built from.
const char* build_id();

}  // namespace ulbq
