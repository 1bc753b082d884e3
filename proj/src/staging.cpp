#include "pfa/staging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace pfa {

const char* to_string(NodeClass c) {
  switch (c) {
    case NodeClass::normal: return "normal";
    case NodeClass::itc: return "itc";
    case NodeClass::micro: return "micro";
    case NodeClass::macro: return "macro";
  }
  return "?";
}

const char* to_string(PNStage s) {
  switch (s) {
    case PNStage::pN0: return "pN0";
    case PNStage::pN0_i: return "pN0(i+)";
    case PNStage::pN1mi: return "pN1mi";
    case PNStage::pN1: return "pN1";
    case PNStage::pN2: return "pN2";
  }
  return "?";
}

NodeClass parse_node_class(const std::string& s) {
  for (int i = 0; i < 4; ++i)
    if (s == to_string(static_cast<NodeClass>(i))) return static_cast<NodeClass>(i);
  if (s == "negative") return NodeClass::normal;
  throw ValidationError("unknown node class '" + s + "'");
}

PNStage parse_stage(const std::string& s) {
  for (int i = 0; i < 5; ++i)
    if (s == to_string(static_cast<PNStage>(i))) return static_cast<PNStage>(i);
  throw ValidationError("unknown pN stage '" + s + "'");
}

// ---- candidates --------------------------------------------------------------

std::vector<LesionCandidate> extract_candidates(const ProbabilityMap& map, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("candidate threshold must lie in (0, 1)");
  if (map.values.size() != map.rows * map.cols) throw DimensionError("probability map data does not match its extent");
  const std::size_t R = map.rows, C = map.cols;
  std::vector<int> label(R * C, 0);
  std::vector<LesionCandidate> out;
  const double cell_mm = map.cell_mm();
  std::vector<Cell> stack;
  for (std::size_t r0 = 0; r0 < R; ++r0) {
    for (std::size_t c0 = 0; c0 < C; ++c0) {
      if (label[r0 * C + c0] || map.at(r0, c0) < threshold) continue;
      LesionCandidate cand;
      cand.id = static_cast<int>(out.size()) + 1;
      stack.assign(1, {r0, c0});
      label[r0 * C + c0] = cand.id;
      while (!stack.empty()) {
        const Cell cell = stack.back();
        stack.pop_back();
        cand.cells.push_back(cell);
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const auto r = static_cast<std::ptrdiff_t>(cell.row) + dr, c = static_cast<std::ptrdiff_t>(cell.col) + dc;
            if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(R) || c >= static_cast<std::ptrdiff_t>(C)) continue;
            const std::size_t i = static_cast<std::size_t>(r) * C + static_cast<std::size_t>(c);
            if (label[i] || map.values[i] < threshold) continue;
            label[i] = cand.id;
            stack.push_back({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
          }
      }
      std::sort(cand.cells.begin(), cand.cells.end(),
                [](const Cell& a, const Cell& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
      double sy = 0, sx = 0;
      cand.peak = -1.0f;
      for (const auto& cell : cand.cells) {
        const float v = map.at(cell.row, cell.col);
        if (v > cand.peak) {
          cand.peak = v;
          cand.peak_cell = cell;
        }
        sy += static_cast<double>(cell.row);
        sx += static_cast<double>(cell.col);
      }
      const double n = static_cast<double>(cand.cells.size());
      cand.centroid_y_px = map.origin_y_px + sy / n * map.cell_pitch_px;
      cand.centroid_x_px = map.origin_x_px + sx / n * map.cell_pitch_px;
      cand.peak_y_px = map.origin_y_px + static_cast<double>(cand.peak_cell.row) * map.cell_pitch_px;
      cand.peak_x_px = map.origin_x_px + static_cast<double>(cand.peak_cell.col) * map.cell_pitch_px;
      cand.area_mm2 = n * cell_mm * cell_mm;
      double best = 0.0;
      for (std::size_t i = 0; i < cand.cells.size(); ++i)
        for (std::size_t j = i + 1; j < cand.cells.size(); ++j) {
          const double dy = static_cast<double>(cand.cells[i].row) - static_cast<double>(cand.cells[j].row);
          const double dx = static_cast<double>(cand.cells[i].col) - static_cast<double>(cand.cells[j].col);
          best = std::max(best, std::sqrt(dy * dy + dx * dx));
        }
      cand.major_axis_mm = best * cell_mm;
      out.push_back(std::move(cand));
    }
  }
  return out;
}

NodeFeatures node_features(const std::vector<LesionCandidate>& candidates) {
  NodeFeatures f{0, 0, static_cast<double>(candidates.size()), 0};
  for (const auto& c : candidates) {
    f[0] = std::max(f[0], c.major_axis_mm);
    f[1] += c.area_mm2;
    f[3] = std::max(f[3], static_cast<double>(c.peak));
  }
  return f;
}

// ---- random forest -----------------------------------------------------------

int DecisionTree::predict(const std::vector<double>& x) const {
  if (nodes.empty()) throw ConfigError("empty decision tree");
  std::size_t i = 0;
  for (;;) {
    const TreeNode& n = nodes.at(i);
    if (n.feature < 0) return n.label;
    i = static_cast<std::size_t>(x.at(static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right);
  }
}

int RandomForest::predict(const std::vector<double>& x) const {
  if (trees.empty() || n_classes <= 0) throw ConfigError("random forest has no trees");
  if (x.size() != n_features) {
    throw DimensionError("random forest expects " + std::to_string(n_features) + " features, got " + std::to_string(x.size()));
  }
  std::vector<int> votes(static_cast<std::size_t>(n_classes), 0);
  for (const auto& t : trees) ++votes.at(static_cast<std::size_t>(t.predict(x)));
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

std::string RandomForest::serialize() const {
  nlohmann::json trees_json = nlohmann::json::array();
  for (const auto& t : trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.label});
    trees_json.push_back(nodes);
  }
  nlohmann::json doc = {{"n_features", n_features}, {"n_classes", n_classes}, {"trees", trees_json}};
  return doc.dump() + "\n";
}

RandomForest RandomForest::parse(const std::string& text) {
  RandomForest f;
  try {
    const auto doc = nlohmann::json::parse(text);
    f.n_features = doc.at("n_features").get<std::size_t>();
    f.n_classes = doc.at("n_classes").get<int>();
    for (const auto& t : doc.at("trees")) {
      DecisionTree tree;
      for (const auto& n : t) {
        tree.nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(), n.at(4).get<int>()});
      }
      const int size = static_cast<int>(tree.nodes.size());
      if (size == 0) throw ValidationError("random forest: empty tree");
      for (int i = 0; i < size; ++i) {
        const TreeNode& n = tree.nodes[i];
        // Children always follow their parent, which also rules out cycles.
        if (n.feature >= static_cast<int>(f.n_features) ||
            (n.feature >= 0 && (n.left <= i || n.right <= i || n.left >= size || n.right >= size)) ||
            (n.feature < 0 && (n.label < 0 || n.label >= f.n_classes))) {
          throw ValidationError("random forest: malformed tree node");
        }
      }
      f.trees.push_back(std::move(tree));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("random forest: ") + e.what());
  }
  if (f.trees.empty()) throw ConfigError("random forest has no trees");
  return f;
}

namespace {

int majority(const std::vector<int>& labels, const std::vector<std::size_t>& idx, int classes) {
  std::vector<std::size_t> count(static_cast<std::size_t>(classes), 0);
  for (auto i : idx) ++count[static_cast<std::size_t>(labels[i])];
  return static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
}

double gini(const std::vector<std::size_t>& count, std::size_t n) {
  if (n == 0) return 0.0;
  double s = 1.0;
  for (auto c : count) {
    const double p = static_cast<double>(c) / static_cast<double>(n);
    s -= p * p;
  }
  return s;
}

struct TreeBuilder {
  const std::vector<std::vector<double>>& x;
  const std::vector<int>& y;
  int classes;
  std::size_t max_depth;
  std::size_t mtry;
  std::mt19937_64& rng;
  DecisionTree tree;

  int build(std::vector<std::size_t> idx, std::size_t depth) {
    const int node = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes[static_cast<std::size_t>(node)].label = majority(y, idx, classes);
    bool pure = std::all_of(idx.begin(), idx.end(), [&](std::size_t i) { return y[i] == y[idx[0]]; });
    if (pure || depth >= max_depth || idx.size() < 2) return node;

    const std::size_t d = x[0].size();
    std::vector<std::size_t> features(d);
    std::iota(features.begin(), features.end(), 0);
    std::shuffle(features.begin(), features.end(), rng);
    features.resize(mtry);
    std::sort(features.begin(), features.end());

    std::vector<std::size_t> total(static_cast<std::size_t>(classes), 0);
    for (auto i : idx) ++total[static_cast<std::size_t>(y[i])];
    const double parent = gini(total, idx.size());
    double best_score = parent;
    int best_feature = -1;
    double best_threshold = 0.0;
    for (std::size_t f : features) {
      std::vector<std::size_t> order = idx;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a][f] < x[b][f]; });
      std::vector<std::size_t> left(static_cast<std::size_t>(classes), 0), right = total;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        ++left[static_cast<std::size_t>(y[order[k]])];
        --right[static_cast<std::size_t>(y[order[k]])];
        const double a = x[order[k]][f], b = x[order[k + 1]][f];
        if (a == b) continue;
        const std::size_t nl = k + 1, nr = order.size() - nl;
        const double score = (static_cast<double>(nl) * gini(left, nl) + static_cast<double>(nr) * gini(right, nr)) /
                             static_cast<double>(order.size());
        if (score < best_score - 1e-12) {
          best_score = score;
          best_feature = static_cast<int>(f);
          best_threshold = a + 0.5 * (b - a);
        }
      }
    }
    if (best_feature < 0) return node;
    std::vector<std::size_t> li, ri;
    for (auto i : idx) (x[i][static_cast<std::size_t>(best_feature)] <= best_threshold ? li : ri).push_back(i);
    const int l = build(std::move(li), depth + 1);
    const int r = build(std::move(ri), depth + 1);
    TreeNode& n = tree.nodes[static_cast<std::size_t>(node)];
    n.feature = best_feature;
    n.threshold = best_threshold;
    n.left = l;
    n.right = r;
    return node;
  }
};

}  // namespace

RandomForest rf_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                      const RfConfig& cfg) {
  if (features.empty()) throw ValidationError("rf_train: no samples");
  if (features.size() != labels.size()) throw DimensionError("rf_train: feature and label counts differ");
  if (cfg.trees == 0) throw ConfigError("rf_train: trees must be >= 1");
  const std::size_t d = features[0].size();
  if (d == 0) throw ValidationError("rf_train: empty feature vectors");
  for (const auto& f : features)
    if (f.size() != d) throw DimensionError("rf_train: ragged feature vectors");
  int classes = 0;
  for (int l : labels) {
    if (l < 0) throw ValidationError("rf_train: negative label");
    classes = std::max(classes, l + 1);
  }

  // Canonical order: the bootstrap draws below depend on the sample count only.
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (features[a] != features[b]) return features[a] < features[b];
    return labels[a] < labels[b];
  });
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (auto i : order) {
    x.push_back(features[i]);
    y.push_back(labels[i]);
  }

  RandomForest forest;
  forest.n_features = d;
  forest.n_classes = classes;
  const std::size_t mtry = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(d)))));
  for (std::size_t t = 0; t < cfg.trees; ++t) {
    std::mt19937_64 rng(cfg.seed * 0x2545F4914F6CDD1DULL + t);
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    std::vector<std::size_t> boot(x.size());
    for (auto& b : boot) b = pick(rng);
    std::sort(boot.begin(), boot.end());
    TreeBuilder builder{x, y, classes, cfg.max_depth, mtry, rng, {}};
    builder.build(std::move(boot), 0);
    forest.trees.push_back(std::move(builder.tree));
  }
  return forest;
}

NodeClass rule_node_class(const NodeFeatures& f) {
  if (f[2] == 0) return NodeClass::normal;
  if (f[0] < 0.2) return NodeClass::itc;
  if (f[0] < 2.0) return NodeClass::micro;
  return NodeClass::macro;
}

NodeClass classify_node(const std::vector<LesionCandidate>& candidates, const RandomForest* forest) {
  if (candidates.empty()) return NodeClass::normal;
  const NodeFeatures f = node_features(candidates);
  if (!forest) return rule_node_class(f);
  const int c = forest->predict(std::vector<double>(f.begin(), f.end()));
  if (c < 0 || c > 3) throw ValidationError("random forest predicted unknown node class " + std::to_string(c));
  return static_cast<NodeClass>(c);
}

PNStage stage_patient(const std::vector<NodeClass>& nodes) {
  if (nodes.size() != 5) throw ValidationError("a patient has 5 nodes, got " + std::to_string(nodes.size()));
  int itc = 0, micro = 0, macro = 0;
  for (auto n : nodes) {
    itc += n == NodeClass::itc;
    micro += n == NodeClass::micro;
    macro += n == NodeClass::macro;
  }
  if (macro > 0) return micro + macro >= 4 ? PNStage::pN2 : PNStage::pN1;
  if (micro > 0) return PNStage::pN1mi;
  if (itc > 0) return PNStage::pN0_i;
  return PNStage::pN0;
}

// ---- metrics -----------------------------------------------------------------

FrocResult froc(const std::vector<SlideDetections>& slides) {
  if (slides.empty()) throw ValidationError("froc: no slides");
  struct Item {
    double score;
    std::size_t slide;
    int lesion;  // -1: false positive
  };
  std::vector<Item> items;
  std::size_t lesions = 0;
  for (std::size_t s = 0; s < slides.size(); ++s) {
    lesions += slides[s].lesions.size();
    for (const auto& d : slides[s].detections) {
      int hit = -1;
      for (std::size_t l = 0; l < slides[s].lesions.size() && hit < 0; ++l)
        if (point_in_polygon(slides[s].lesions[l], d.x_px, d.y_px)) hit = static_cast<int>(l);
      items.push_back({d.score, s, hit});
    }
  }
  if (lesions == 0) throw ValidationError("froc: sensitivity undefined without ground-truth lesions");
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  // Operating points after admitting every detection with score >= each distinct score.
  std::vector<std::pair<double, double>> curve = {{0.0, 0.0}};  // (fp per slide, sensitivity)
  std::vector<std::vector<bool>> found(slides.size());
  for (std::size_t s = 0; s < slides.size(); ++s) found[s].assign(slides[s].lesions.size(), false);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& it = items[i];
    if (it.lesion < 0) {
      ++fp;
    } else if (!found[it.slide][static_cast<std::size_t>(it.lesion)]) {
      found[it.slide][static_cast<std::size_t>(it.lesion)] = true;
      ++tp;
    }
    if (i + 1 == items.size() || items[i + 1].score != it.score) {
      curve.push_back({static_cast<double>(fp) / static_cast<double>(slides.size()),
                       static_cast<double>(tp) / static_cast<double>(lesions)});
    }
  }
  FrocResult r;
  for (std::size_t k = 0; k < kFrocRates.size(); ++k) {
    double best = 0.0;
    for (const auto& [rate, sens] : curve)
      if (rate <= kFrocRates[k]) best = std::max(best, sens);
    r.sensitivity[k] = best;
    r.average += best;
  }
  r.average /= static_cast<double>(kFrocRates.size());
  return r;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: score and label counts differ");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("auc: labels must be 0 or 1");
    if (labels[i]) {
      ++pos;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) throw ValidationError("auc: both classes must be present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double quadratic_kappa(const std::vector<int>& predicted, const std::vector<int>& truth, int classes) {
  if (predicted.size() != truth.size()) throw DimensionError("kappa: list lengths differ");
  if (predicted.size() < 2) throw ValidationError("kappa: at least 2 ratings required");
  if (classes < 2) throw ConfigError("kappa: at least 2 classes required");
  const auto K = static_cast<std::size_t>(classes);
  std::vector<double> O(K * K, 0.0), rows(K, 0.0), cols(K, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] < 0 || predicted[i] >= classes || truth[i] < 0 || truth[i] >= classes) {
      throw ValidationError("kappa: rating outside 0.." + std::to_string(classes - 1));
    }
    const auto a = static_cast<std::size_t>(truth[i]), b = static_cast<std::size_t>(predicted[i]);
    O[a * K + b] += 1.0;
    rows[a] += 1.0;
    cols[b] += 1.0;
  }
  const double N = static_cast<double>(predicted.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / static_cast<double>((K - 1) * (K - 1));
      num += w * O[i * K + j];
      den += w * rows[i] * cols[j] / N;
    }
  if (den == 0.0) {
    if (num == 0.0) return 1.0;
    throw ValidationError("kappa: degenerate marginals");
  }
  return 1.0 - num / den;
}

}  // namespace pfa
