#pragma once

// Configuration shared by every pfascan subcommand. Loaded from JSON;
// unknown keys are rejected. Relative paths inside a config file are
// resolved against the file's directory.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfa/pipeline.hpp"

namespace pfascan {

struct PatientInput {
  std::string id;
  std::vector<std::string> maps;  // 5
};

struct LabelledMap {
  std::string map;
  std::string node_class;
};

struct EvalSlide {
  std::string map;         // probability map, or
  std::string detections;  // JSON [[y, x, score], ...]
  std::string annotations;
};

struct RunConfig {
  std::string network;  // empty: built-in desk network
  std::string weights;
  std::string out = "out";
  std::uint64_t seed = 1;
  int threads = 0;  // 0: OpenMP default

  std::vector<std::string> slides, annotations, samples, maps;
  std::string forest;

  pfa::InferenceConfig inference;
  bool heatmap = false;
  pfa::LossConfig loss;
  pfa::SgdConfig sgd{0.002, 0.9, 400, 8, 1};
  pfa::SampleCounts sampling{24, 8, 8, 0.2};

  double candidate_threshold = 0.5;
  pfa::RfConfig rf;
  std::vector<PatientInput> patients;
  std::vector<LabelledMap> training_nodes;

  struct Verify {
    std::size_t trials = 10;
    std::vector<std::size_t> tiles{2, 4, 8};
    std::vector<std::size_t> alphas{1, 2, 4};
    pfa::Precision precision = pfa::Precision::mixed;
    std::size_t fault_offset = 0;
  } verify;

  struct Bench {
    std::size_t rois = 2;
    std::vector<std::size_t> tiles{1, 2, 4, 8};
    std::size_t alpha = 4;
  } bench;

  struct Eval {
    std::vector<std::string> metrics{"kappa", "froc", "auc"};
    std::string predicted, truth;
    std::vector<EvalSlide> slides;
  } eval;

  pfa::SyntheticSpec synth;

  struct Study {
    std::size_t train_patients = 5;
    std::size_t eval_patients = 5;
  } study;

  /// Throws pfa::ConfigError on any out-of-range value.
  void validate() const;
};

/// Parses a config document. A pfascan manifest is accepted as well; its
/// embedded config is used.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON form; parse_run_config(to_json(c)) == c.
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace pfascan
