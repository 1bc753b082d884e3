#pragma once

// Slide-level inference and the synthetic cohort used for end-to-end runs.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pfa/staging.hpp"
#include "pfa/training.hpp"

namespace pfa {

/// SHA-256 over the formatted spec and the weights bundle bytes.
std::string network_hash(const NetworkSpec& spec, const NetworkParams<float>& params);

struct InferenceConfig {
  std::size_t alpha = 4;
  std::size_t tile = 8;
  double min_tissue_fraction = 0.01;
};

/// FNV-1a of `id`, starting from the offset basis xor `seed`.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& id);

/// Only the tensors dense inference reads (drops the decoder and the
/// global convolutions of non-pooled levels).
NetworkParams<float> detector_params(const NetworkSpec& spec, const NetworkParams<float>& params);

/// One random augmentation per patch, then tumour patches are repeated until
/// the two classes are roughly even.
std::vector<TrainSample> prepare_training_set(std::vector<PatchSample> patches, std::uint64_t seed);

/// Otsu tissue mask -> scan plan -> dense tiles -> stitched map.
ProbabilityMap infer_slide(const SlideRaster& slide, const NetworkSpec& spec, const NetworkParams<float>& params,
                           const InferenceConfig& cfg, const std::string& net_hash, CostCounter* cost = nullptr);

/// Blue (0) to red (1) rendering, one pixel per cell.
RgbImage heatmap(const ProbabilityMap& map);

// ---- synthetic cohort --------------------------------------------------------

struct CohortConfig {
  std::size_t slide_extent = 1152;
  double spacing_um = 4.0;
  double itc_mm[2] = {0.12, 0.18};
  double micro_mm[2] = {0.5, 1.2};
  double macro_mm[2] = {2.2, 2.6};
};

struct SyntheticNode {
  SyntheticSpec spec;
  NodeClass truth = NodeClass::normal;
};

struct SyntheticPatient {
  std::string id;
  std::vector<SyntheticNode> nodes;  // 5
  PNStage truth = PNStage::pN0;
};

/// Patients cycle through the five stages; node contents are drawn from `seed`.
std::vector<SyntheticPatient> plan_cohort(std::size_t patients, std::uint64_t seed, const CohortConfig& cfg,
                                          const std::string& prefix = "patient");

/// Node class implied by the planted lesion sizes.
NodeClass planted_class(const std::vector<double>& diameters_mm);

// ---- full study ----------------------------------------------------------------

struct StudyConfig {
  std::uint64_t seed = 2024;
  std::size_t train_patients = 5;
  std::size_t eval_patients = 5;
  CohortConfig cohort;
  SampleCounts samples{24, 8, 8, 0.2};
  SgdConfig sgd{0.002, 0.9, 400, 8, 7};
  LossConfig loss;
  InferenceConfig inference;
  RfConfig forest;
  double candidate_threshold = 0.5;
};

struct StudyReport {
  double kappa = 0.0;
  double froc = 0.0;
  double auc = 0.0;
  std::vector<double> loss_curve;
  std::vector<PNStage> predicted, truth;
  std::vector<NodeClass> node_predicted, node_truth;  // eval nodes
  std::string digest;  // hash over every produced map and prediction
};

/// Generate, train, infer, stage. `log` receives progress lines.
StudyReport run_synthetic_study(const StudyConfig& cfg, const std::function<void(const std::string&)>& log = {});

}  // namespace pfa
