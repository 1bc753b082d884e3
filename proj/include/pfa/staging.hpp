#pragma once

// Probability map -> lesion candidates -> node class -> patient pN stage,
// and the slide / lesion / patient metrics.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pfa/scan.hpp"
#include "pfa/wsi.hpp"

namespace pfa {

enum class NodeClass { normal = 0, itc = 1, micro = 2, macro = 3 };
enum class PNStage { pN0 = 0, pN0_i = 1, pN1mi = 2, pN1 = 3, pN2 = 4 };

const char* to_string(NodeClass c);
const char* to_string(PNStage s);
NodeClass parse_node_class(const std::string& s);
PNStage parse_stage(const std::string& s);

struct Cell {
  std::size_t row = 0, col = 0;
};

struct LesionCandidate {
  int id = 0;
  std::vector<Cell> cells;
  float peak = 0.0f;
  Cell peak_cell;
  double peak_y_px = 0.0, peak_x_px = 0.0;  // centre of the peak cell
  double centroid_y_px = 0.0, centroid_x_px = 0.0;
  double area_mm2 = 0.0;
  double major_axis_mm = 0.0;  // largest centre-to-centre distance
};

/// 8-connected components of cells with probability >= threshold, ordered
/// by their first cell in row-major order.
std::vector<LesionCandidate> extract_candidates(const ProbabilityMap& map, double threshold = 0.5);

inline constexpr std::size_t kNodeFeatures = 4;
using NodeFeatures = std::array<double, kNodeFeatures>;

/// (max major axis mm, total area mm^2, candidate count, max peak)
NodeFeatures node_features(const std::vector<LesionCandidate>& candidates);

// ---- random forest -----------------------------------------------------------

struct RfConfig {
  std::size_t trees = 50;
  std::size_t max_depth = 8;
  std::uint64_t seed = 1;
};

struct TreeNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;  // go left when x[feature] <= threshold
  int left = -1, right = -1;
  int label = 0;
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // root first
  int predict(const std::vector<double>& x) const;
  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct RandomForest {
  std::size_t n_features = 0;
  int n_classes = 0;
  std::vector<DecisionTree> trees;

  /// Majority vote; ties go to the lowest class.
  int predict(const std::vector<double>& x) const;
  std::string serialize() const;  // JSON
  static RandomForest parse(const std::string& text);
  friend bool operator==(const RandomForest&, const RandomForest&) = default;
};

/// Bootstrap + Gini trees with sqrt(d) features per split. Samples are put
/// in a canonical order first, so the model does not depend on input order.
RandomForest rf_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                      const RfConfig& cfg);

/// Thresholds on the largest major axis: < 0.2 mm ITC, < 2 mm micro.
NodeClass rule_node_class(const NodeFeatures& f);

/// No candidates -> normal. Otherwise the forest decides, or the rule when
/// `forest` is null.
NodeClass classify_node(const std::vector<LesionCandidate>& candidates, const RandomForest* forest);

PNStage stage_patient(const std::vector<NodeClass>& nodes);

// ---- metrics -----------------------------------------------------------------

struct Detection {
  double y_px = 0.0, x_px = 0.0;
  double score = 0.0;
};

struct SlideDetections {
  std::vector<Detection> detections;
  std::vector<Polygon> lesions;
};

inline constexpr std::array<double, 6> kFrocRates = {0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct FrocResult {
  double average = 0.0;
  std::array<double, 6> sensitivity{};
};

/// A detection hits a lesion when its location lies inside the polygon;
/// each lesion counts once and repeat hits are ignored.
FrocResult froc(const std::vector<SlideDetections>& slides);

/// Mann-Whitney statistic with average ranks for ties.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Quadratic-weighted Cohen's kappa over classes 0..classes-1.
double quadratic_kappa(const std::vector<int>& predicted, const std::vector<int>& truth, int classes = 5);

}  // namespace pfa
