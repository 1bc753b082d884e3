#include "commands.hpp"

#include <omp.h>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "pfa/hash.hpp"
#include "run_config.hpp"

namespace pfascan {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Inputs and outputs of one command run, recorded in its manifest.
class Manifest {
 public:
  Manifest(std::string command, const RunConfig& cfg) : command_(std::move(command)), cfg_(cfg) {}

  void input(const std::string& path) {
    if (!path.empty()) inputs_.emplace_back(path, pfa::sha256_file(path));
  }
  void output(const fs::path& path) { outputs_.emplace_back(path.string(), pfa::sha256_file(path)); }

  fs::path write() const {
    auto list = [](const std::vector<std::pair<std::string, std::string>>& v) {
      json a = json::array();
      for (const auto& [p, h] : v) a.push_back({{"path", p}, {"sha256", h}});
      return a;
    };
    const json config = to_json(cfg_);
    const json doc = {{"manifest", 1},
                      {"command", command_},
                      {"seed", cfg_.seed},
                      {"config", config},
                      {"config_sha256", pfa::sha256_hex(config.dump())},
                      {"inputs", list(inputs_)},
                      {"outputs", list(outputs_)}};
    const fs::path path = fs::path(cfg_.out) / ("manifest." + command_ + ".json");
    write_text(path, doc.dump(2) + "\n");
    return path;
  }

  static void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw pfa::IoError("cannot write " + path.string());
    out << text;
    if (!out) throw pfa::IoError("failed writing " + path.string());
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::vector<std::pair<std::string, std::string>> inputs_, outputs_;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw pfa::IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw pfa::ValidationError(path + " is not valid JSON: " + e.what());
  }
}

pfa::NetworkSpec network(const RunConfig& cfg, Manifest& m) {
  if (cfg.network.empty()) return pfa::desk_network_spec();
  m.input(cfg.network);
  pfa::NetworkSpec spec = pfa::load_network_spec(cfg.network);
  pfa::validate(spec);
  return spec;
}

pfa::NetworkParams<float> weights(const RunConfig& cfg, Manifest& m) {
  if (cfg.weights.empty()) throw pfa::ConfigError("no weights given (--weights or \"weights\")");
  m.input(cfg.weights);
  return pfa::from_bundle(pfa::load_bundle(cfg.weights));
}

void need(bool ok, const char* what) {
  if (!ok) throw pfa::ConfigError(what);
}

json candidates_json(const std::vector<pfa::LesionCandidate>& cands) {
  json a = json::array();
  for (const auto& c : cands) {
    a.push_back({{"id", c.id},
                 {"cells", c.cells.size()},
                 {"peak", c.peak},
                 {"peak_y_px", c.peak_y_px},
                 {"peak_x_px", c.peak_x_px},
                 {"centroid_y_px", c.centroid_y_px},
                 {"centroid_x_px", c.centroid_x_px},
                 {"area_mm2", c.area_mm2},
                 {"major_axis_mm", c.major_axis_mm}});
  }
  return a;
}

// ---- commands ------------------------------------------------------------------

int cmd_mask(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.slides.empty(), "mask: no slides given (--slide)");
  json summary = json::array();
  for (const auto& path : cfg.slides) {
    m.input(path);
    const pfa::SlideRaster slide = pfa::load_slide(path);
    pfa::Histogram hist{};
    for (auto v : pfa::saturation_channel(slide.image)) ++hist[v];
    const pfa::OtsuResult otsu = pfa::otsu_threshold(hist);
    const pfa::Mask mask = pfa::tissue_mask(slide.image);
    pfa::RgbImage img(slide.image.height, slide.image.width, 0);
    std::size_t tissue = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      ++tissue;
      img.rgb[3 * i] = img.rgb[3 * i + 1] = img.rgb[3 * i + 2] = 255;
    }
    const fs::path file = fs::path(cfg.out) / (slide.id + ".tissue.png");
    pfa::write_png(file, img);
    m.output(file);
    const double fraction = static_cast<double>(tissue) / static_cast<double>(mask.size());
    summary.push_back({{"slide_id", slide.id},
                       {"threshold", otsu.threshold},
                       {"degenerate", otsu.degenerate},
                       {"tissue_fraction", fraction}});
    out << slide.id << ": otsu threshold " << otsu.threshold << (otsu.degenerate ? " (degenerate)" : "")
        << ", tissue fraction " << fraction << "\n";
  }
  const fs::path file = fs::path(cfg.out) / "mask.json";
  Manifest::write_text(file, summary.dump(2) + "\n");
  m.output(file);
  return kOk;
}

int cmd_sample(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.slides.empty(), "sample: no slides given (--slide)");
  need(cfg.annotations.empty() || cfg.annotations.size() == cfg.slides.size(),
       "sample: give one annotation file per slide, or none");
  const pfa::NetworkSpec spec = network(cfg, m);
  for (std::size_t i = 0; i < cfg.slides.size(); ++i) {
    m.input(cfg.slides[i]);
    const pfa::SlideRaster slide = pfa::load_slide(cfg.slides[i]);
    pfa::AnnotationSet ann{slide.id, {}};
    if (!cfg.annotations.empty()) {
      m.input(cfg.annotations[i]);
      ann = pfa::load_annotations(cfg.annotations[i]);
    }
    const pfa::SampleResult r = pfa::sample_patches(slide, ann, cfg.sampling, spec.patch_size, spec.mask_extent,
                                                    pfa::derive_seed(cfg.seed, slide.id));
    pfa::NamedTensors bundle;
    json records = json::array();
    for (std::size_t k = 0; k < r.patches.size(); ++k) {
      const auto& p = r.patches[k];
      std::ostringstream key;
      key << std::setw(6) << std::setfill('0') << k;
      bundle.emplace_back(key.str() + ".image", p.image);
      if (p.mask.rank() == 2) bundle.emplace_back(key.str() + ".mask", p.mask.cast<float>());
      bundle.emplace_back(key.str() + ".label", pfa::Tensor({1}, static_cast<float>(p.label)));
      records.push_back({{"index", k},
                         {"label", p.label},
                         {"provenance", pfa::to_string(p.provenance)},
                         {"center_y", p.center_y},
                         {"center_x", p.center_x}});
    }
    const fs::path file = fs::path(cfg.out) / (slide.id + ".samples");
    pfa::save_bundle(file, bundle);
    m.output(file);
    const fs::path meta = fs::path(cfg.out) / (slide.id + ".samples.json");
    Manifest::write_text(meta, json{{"slide_id", slide.id}, {"patches", records}, {"warnings", r.warnings}}.dump(2) +
                                   "\n");
    m.output(meta);
    std::size_t positives = 0;
    for (const auto& p : r.patches) positives += p.label;
    out << slide.id << ": " << r.patches.size() << " patches (" << positives << " tumour)\n";
    for (const auto& w : r.warnings) out << "warning: " << w << "\n";
  }
  return kOk;
}

std::vector<pfa::PatchSample> load_samples(const std::string& path) {
  std::map<std::string, pfa::PatchSample> by_key;
  for (auto& [name, t] : pfa::load_bundle(path)) {
    const auto dot = name.rfind('.');
    if (dot == std::string::npos) throw pfa::ValidationError(path + ": unexpected tensor '" + name + "'");
    pfa::PatchSample& p = by_key[name.substr(0, dot)];
    const std::string part = name.substr(dot + 1);
    if (part == "image") {
      p.image = std::move(t);
    } else if (part == "mask") {
      p.mask = t.cast<std::uint8_t>();
    } else if (part == "label") {
      p.label = t[0] >= 0.5f ? 1 : 0;
    } else {
      throw pfa::ValidationError(path + ": unexpected tensor '" + name + "'");
    }
  }
  std::vector<pfa::PatchSample> out;
  for (auto& [k, p] : by_key) out.push_back(std::move(p));
  return out;
}

int cmd_train(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.samples.empty(), "train: no sample files given (--samples)");
  const pfa::NetworkSpec spec = network(cfg, m);
  std::vector<pfa::PatchSample> patches;
  for (const auto& path : cfg.samples) {
    m.input(path);
    for (auto& p : load_samples(path)) patches.push_back(std::move(p));
  }
  if (patches.empty()) throw pfa::ValidationError("train: sample files hold no patches");
  const auto data = pfa::prepare_training_set(std::move(patches), cfg.seed);
  pfa::SgdConfig sgd = cfg.sgd;
  sgd.seed = cfg.seed;
  const pfa::TrainResult r = pfa::train_toy(spec, pfa::init_params<float>(spec, cfg.seed, true), data, cfg.loss, sgd);

  const fs::path file = fs::path(cfg.out) / "weights.bin";
  pfa::save_bundle(file, pfa::to_bundle(r.params));
  m.output(file);
  std::ostringstream csv;
  csv << "step,total,cls,seg\n";
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    csv << i << ',' << r.curve[i].total << ',' << r.curve[i].cls << ',' << r.curve[i].seg << '\n';
  }
  const fs::path curve = fs::path(cfg.out) / "loss_curve.csv";
  Manifest::write_text(curve, csv.str());
  m.output(curve);
  out << "trained " << r.curve.size() << " steps on " << data.size() << " patches";
  if (!r.curve.empty()) out << ", cls loss " << r.curve.front().cls << " -> " << r.curve.back().cls;
  out << "\n";
  return kOk;
}

int cmd_infer(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.slides.empty(), "infer: no slides given (--slide)");
  const pfa::NetworkSpec spec = network(cfg, m);
  const auto params = pfa::detector_params(spec, weights(cfg, m));
  const std::string hash = pfa::network_hash(spec, params);
  for (const auto& path : cfg.slides) {
    m.input(path);
    const pfa::SlideRaster slide = pfa::load_slide(path);
    pfa::CostCounter cost;
    const pfa::ProbabilityMap map = pfa::infer_slide(slide, spec, params, cfg.inference, hash, &cost);
    const fs::path file = fs::path(cfg.out) / (slide.id + ".pmap");
    pfa::save_probability_map(file, map);
    m.output(file);
    if (cfg.heatmap) {
      const fs::path png = fs::path(cfg.out) / (slide.id + ".heatmap.png");
      pfa::write_png(png, pfa::heatmap(map));
      m.output(png);
    }
    float peak = 0.0f;
    for (float v : map.values) peak = std::max(peak, v);
    out << slide.id << ": " << map.rows << "x" << map.cols << " cells, pitch " << map.cell_pitch_px << " px, peak "
        << peak << ", " << cost.macs << " MACs\n";
  }
  return kOk;
}

int cmd_verify(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  const pfa::NetworkSpec spec = network(cfg, m);
  pfa::validate(spec);
  json rows = json::array();
  bool all = true;
  for (std::size_t alpha : cfg.verify.alphas)
    for (std::size_t tile : cfg.verify.tiles) {
      const pfa::TileGeometry g = pfa::solve_geometry(spec.patch_size, tile, spec.native_stride, alpha);
      pfa::CertifyOptions opt;
      opt.trials = cfg.verify.trials;
      opt.seed = cfg.seed;
      opt.precision = cfg.verify.precision;
      opt.fault_offset = cfg.verify.fault_offset;
      const pfa::CertifyReport r = pfa::certify_equivalence(spec, g, opt);
      all = all && r.passed;
      rows.push_back({{"alpha", alpha},
                      {"tile", tile},
                      {"roi", g.roi},
                      {"passed", r.passed},
                      {"tolerance", r.tolerance},
                      {"max_deviation", r.max_deviation},
                      {"worst", {{"trial", r.worst_trial}, {"row", r.worst_row}, {"col", r.worst_col}}},
                      {"trials", r.trials_run},
                      {"error", r.error}});
      out << (r.passed ? "PASS" : "FAIL") << " alpha=" << alpha << " tile=" << tile << " roi=" << g.roi
          << " max_dev=" << r.max_deviation << " tol=" << r.tolerance;
      if (!r.passed) out << " worst trial " << r.worst_trial << " cell (" << r.worst_row << "," << r.worst_col << ")";
      if (!r.error.empty()) out << " error: " << r.error;
      out << "\n";
    }
  const fs::path file = fs::path(cfg.out) / "verify.json";
  Manifest::write_text(file, json{{"passed", all}, {"runs", rows}}.dump(2) + "\n");
  m.output(file);
  return all ? kOk : kValidationError;
}

std::vector<double> node_feature_vector(const std::string& map_path, double threshold,
                                        std::vector<pfa::LesionCandidate>* cands_out = nullptr) {
  const auto cands = pfa::extract_candidates(pfa::load_probability_map(map_path), threshold);
  const pfa::NodeFeatures f = pfa::node_features(cands);
  if (cands_out) *cands_out = cands;
  return {f.begin(), f.end()};
}

int cmd_forest(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.training_nodes.empty(), "forest: no labelled maps given (--node MAP=CLASS)");
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& n : cfg.training_nodes) {
    m.input(n.map);
    x.push_back(node_feature_vector(n.map, cfg.candidate_threshold));
    y.push_back(static_cast<int>(pfa::parse_node_class(n.node_class)));
  }
  pfa::RfConfig rf = cfg.rf;
  rf.seed = cfg.seed;
  const pfa::RandomForest forest = pfa::rf_train(x, y, rf);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) correct += forest.predict(x[i]) == y[i];
  const fs::path file = fs::path(cfg.out) / "forest.json";
  Manifest::write_text(file, forest.serialize());
  m.output(file);
  out << "forest: " << forest.trees.size() << " trees on " << x.size() << " nodes, training accuracy " << correct
      << "/" << x.size() << "\n";
  return kOk;
}

int cmd_stage(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  need(!cfg.patients.empty(), "stage: no patients given (--patient with five --map)");
  std::optional<pfa::RandomForest> forest;
  if (!cfg.forest.empty()) {
    m.input(cfg.forest);
    std::ifstream in(cfg.forest);
    if (!in) throw pfa::IoError("cannot open " + cfg.forest);
    std::stringstream ss;
    ss << in.rdbuf();
    forest = pfa::RandomForest::parse(ss.str());
  }
  json patients = json::array();
  for (const auto& p : cfg.patients) {
    std::vector<pfa::NodeClass> classes;
    json nodes = json::array();
    for (const auto& map : p.maps) {
      m.input(map);
      std::vector<pfa::LesionCandidate> cands;
      const auto f = node_feature_vector(map, cfg.candidate_threshold, &cands);
      const pfa::NodeClass c = pfa::classify_node(cands, forest ? &*forest : nullptr);
      classes.push_back(c);
      nodes.push_back({{"map", map}, {"class", pfa::to_string(c)}, {"features", f}, {"candidates", candidates_json(cands)}});
    }
    const pfa::PNStage stage = pfa::stage_patient(classes);
    patients.push_back({{"id", p.id}, {"stage", pfa::to_string(stage)}, {"nodes", nodes}});
    out << p.id << ": " << pfa::to_string(stage) << " (";
    for (std::size_t i = 0; i < classes.size(); ++i) out << (i ? ", " : "") << pfa::to_string(classes[i]);
    out << ")\n";
  }
  const fs::path file = fs::path(cfg.out) / "stages.json";
  Manifest::write_text(file, json{{"classifier", forest ? "forest" : "rule"}, {"patients", patients}}.dump(2) + "\n");
  m.output(file);
  return kOk;
}

std::map<std::string, pfa::PNStage> read_stages(const std::string& path) {
  const json doc = read_json(path);
  std::map<std::string, pfa::PNStage> out;
  try {
    for (const auto& p : doc.at("patients")) {
      const std::string id = p.at("id").get<std::string>();
      if (!out.emplace(id, pfa::parse_stage(p.at("stage").get<std::string>())).second) {
        throw pfa::ValidationError(path + ": patient '" + id + "' listed twice");
      }
    }
  } catch (const json::exception& e) {
    throw pfa::ValidationError(path + ": expected {\"patients\": [{\"id\", \"stage\"}]}: " + e.what());
  }
  return out;
}

int cmd_eval(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  const auto wants = [&](const char* metric) {
    return std::find(cfg.eval.metrics.begin(), cfg.eval.metrics.end(), metric) != cfg.eval.metrics.end();
  };
  need(!cfg.eval.metrics.empty(), "eval: no metrics selected");
  json report;
  if (wants("kappa")) {
    need(!cfg.eval.predicted.empty() && !cfg.eval.truth.empty(), "eval: kappa needs --predicted and --truth");
    m.input(cfg.eval.predicted);
    m.input(cfg.eval.truth);
    const auto pred = read_stages(cfg.eval.predicted);
    const auto truth = read_stages(cfg.eval.truth);
    std::vector<int> p, t;
    for (const auto& [id, stage] : truth) {
      auto it = pred.find(id);
      if (it == pred.end()) throw pfa::ValidationError("eval: no prediction for patient '" + id + "'");
      p.push_back(static_cast<int>(it->second));
      t.push_back(static_cast<int>(stage));
    }
    if (pred.size() != truth.size()) throw pfa::ValidationError("eval: predictions list patients absent from truth");
    report["kappa"] = pfa::quadratic_kappa(p, t, 5);
    report["patients"] = p.size();
    out << "kappa " << report["kappa"].get<double>() << " over " << p.size() << " patients\n";
  }
  if (wants("froc") || wants("auc")) {
    need(!cfg.eval.slides.empty(), "eval: froc/auc need slides (--map or --detections with --annotations)");
    std::vector<pfa::SlideDetections> slides;
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : cfg.eval.slides) {
      pfa::SlideDetections sd;
      if (!s.map.empty()) {
        m.input(s.map);
        for (const auto& c : pfa::extract_candidates(pfa::load_probability_map(s.map), cfg.candidate_threshold)) {
          sd.detections.push_back({c.peak_y_px, c.peak_x_px, c.peak});
        }
      } else {
        m.input(s.detections);
        try {
          for (const auto& d : read_json(s.detections)) {
            sd.detections.push_back({d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()});
          }
        } catch (const json::exception& e) {
          throw pfa::ValidationError(s.detections + ": expected [[y, x, score], ...]: " + e.what());
        }
      }
      m.input(s.annotations);
      for (const auto& l : pfa::load_annotations(s.annotations).lesions) sd.lesions.push_back(l.polygon);
      double score = 0.0;
      for (const auto& d : sd.detections) score = std::max(score, d.score);
      scores.push_back(score);
      labels.push_back(sd.lesions.empty() ? 0 : 1);
      slides.push_back(std::move(sd));
    }
    report["slides"] = slides.size();
    if (wants("froc")) {
      const pfa::FrocResult f = pfa::froc(slides);
      report["froc"] = f.average;
      report["froc_sensitivity"] = f.sensitivity;
      out << "froc " << f.average << " (sensitivity at";
      for (std::size_t i = 0; i < f.sensitivity.size(); ++i) {
        out << ' ' << pfa::kFrocRates[i] << ':' << f.sensitivity[i];
      }
      out << ")\n";
    }
    if (wants("auc")) {
      report["auc"] = pfa::auc(scores, labels);
      out << "auc " << report["auc"].get<double>() << " over " << slides.size() << " slides\n";
    }
  }
  const fs::path file = fs::path(cfg.out) / "metrics.json";
  Manifest::write_text(file, report.dump(2) + "\n");
  m.output(file);
  return kOk;
}

int cmd_bench(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  using clock = std::chrono::steady_clock;
  const pfa::NetworkSpec spec = network(cfg, m);
  const auto params = pfa::init_params<float>(spec, cfg.seed, false);
  json rows = json::array();
  for (std::size_t tile : cfg.bench.tiles) {
    const pfa::TileGeometry g = pfa::solve_geometry(spec.patch_size, tile, spec.native_stride, cfg.bench.alpha);
    std::mt19937_64 rng(cfg.seed + tile);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    pfa::CostCounter dense_cost, patch_cost;
    double dense_s = 0.0, patch_s = 0.0;
    pfa::ForwardOptions opt;
    opt.mode = pfa::Mode::dense;
    opt.alpha = cfg.bench.alpha;
    for (std::size_t r = 0; r < cfg.bench.rois; ++r) {
      pfa::Tensor roi({1, spec.input_channels, g.roi, g.roi});
      for (auto& v : roi.data()) v = u(rng);
      auto t0 = clock::now();
      pfa::detector_forward(roi, spec, params, opt, &dense_cost);
      auto t1 = clock::now();
      pfa::patch_oracle(roi, spec, params, g, &patch_cost);
      auto t2 = clock::now();
      dense_s += std::chrono::duration<double>(t1 - t0).count();
      patch_s += std::chrono::duration<double>(t2 - t1).count();
    }
    const double mac_ratio = static_cast<double>(patch_cost.macs) / static_cast<double>(dense_cost.macs);
    const double speedup = patch_s / dense_s;
    rows.push_back({{"tile", tile},
                    {"alpha", cfg.bench.alpha},
                    {"roi", g.roi},
                    {"rois", cfg.bench.rois},
                    {"dense_macs", dense_cost.macs},
                    {"patch_macs", patch_cost.macs},
                    {"mac_ratio", mac_ratio},
                    {"dense_seconds", dense_s},
                    {"patch_seconds", patch_s},
                    {"speedup", speedup}});
    out << "tile " << tile << " (roi " << g.roi << " px): MACs dense " << dense_cost.macs << " patch " << patch_cost.macs
        << " ratio " << mac_ratio << "; time dense " << dense_s << " s patch " << patch_s << " s speedup " << speedup
        << "\n";
  }
  const fs::path file = fs::path(cfg.out) / "bench.json";
  Manifest::write_text(file, json{{"threads", omp_get_max_threads()}, {"runs", rows}}.dump(2) + "\n");
  m.output(file);
  return kOk;
}

int cmd_synth(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  const pfa::SyntheticSlide s = pfa::generate_synthetic_slide(cfg.synth, cfg.seed);
  const fs::path stem = fs::path(cfg.out) / cfg.synth.slide_id;
  pfa::save_slide(stem, s.slide);
  m.output(stem.string() + ".png");
  m.output(stem.string() + ".json");
  const fs::path ann = stem.string() + ".annotations.json";
  pfa::save_annotations(ann, s.annotations);
  m.output(ann);
  std::vector<double> d;
  for (const auto& l : s.annotations.lesions) d.push_back(pfa::polygon_diameter(l.polygon) * s.slide.spacing_um / 1000.0);
  out << s.slide.id << ": " << s.slide.image.height << "x" << s.slide.image.width << " px, " << d.size()
      << " lesions, planted class " << pfa::to_string(pfa::planted_class(d)) << "\n";
  return kOk;
}

int cmd_study(const RunConfig& cfg, Manifest& m, std::ostream& out) {
  pfa::StudyConfig sc;
  sc.seed = cfg.seed;
  sc.train_patients = cfg.study.train_patients;
  sc.eval_patients = cfg.study.eval_patients;
  sc.samples = cfg.sampling;
  sc.sgd = cfg.sgd;
  sc.sgd.seed = cfg.seed + 5;
  sc.loss = cfg.loss;
  sc.inference = cfg.inference;
  sc.forest = cfg.rf;
  sc.forest.seed = cfg.seed;
  sc.candidate_threshold = cfg.candidate_threshold;
  const pfa::StudyReport r = pfa::run_synthetic_study(sc, [&](const std::string& s) { out << s << "\n"; });
  json pred = json::array();
  for (std::size_t i = 0; i < r.predicted.size(); ++i) {
    pred.push_back({{"predicted", pfa::to_string(r.predicted[i])}, {"truth", pfa::to_string(r.truth[i])}});
  }
  const json doc = {{"kappa", r.kappa}, {"froc", r.froc}, {"auc", r.auc}, {"patients", pred}, {"digest", r.digest}};
  const fs::path file = fs::path(cfg.out) / "study.json";
  Manifest::write_text(file, doc.dump(2) + "\n");
  m.output(file);
  out << "kappa " << r.kappa << ", froc " << r.froc << ", auc " << r.auc << "\n";
  return kOk;
}

const char* kind(const pfa::Error& e) {
  if (dynamic_cast<const pfa::ConfigError*>(&e)) return "config";
  if (dynamic_cast<const pfa::IoError*>(&e)) return "io";
  if (dynamic_cast<const pfa::GeometryError*>(&e)) return "geometry";
  if (dynamic_cast<const pfa::DimensionError*>(&e)) return "dimension";
  return "validation";
}

int code(const pfa::Error& e) {
  if (dynamic_cast<const pfa::ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const pfa::IoError*>(&e)) return kIoError;
  return kValidationError;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"PFA scan pipeline: tissue masks, training, dense inference, staging and metrics", "pfascan"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int threads = 0;
  auto* o_seed = app.add_option("--seed", seed, "Random seed");
  auto* o_threads = app.add_option("--threads", threads, "OpenMP threads (0: default)");
  auto* o_out = app.add_option("--out", out_dir, "Output directory");
  app.add_option("--config", config_path, "JSON run config or a manifest from an earlier run");

  // Per-command overrides.
  std::vector<std::string> slides, annotations, samples, maps, detections, nodes, tiles_s, alphas_s, lesions_s, metrics;
  std::string network_path, weights_path, forest_path, patient, predicted, truth, precision, slide_id;
  std::size_t tile = 0, alpha = 0, steps = 0, trials = 0, fault = 0, rois = 0, extent = 0, train_p = 0, eval_p = 0;
  double lr = 0, threshold = 0, spacing = 0;
  bool heatmap = false;

  std::map<std::string, CLI::App*> sub;
  auto add = [&](const char* name, const char* help) { return sub[name] = app.add_subcommand(name, help); };
  auto net_opt = [&](CLI::App* c) { c->add_option("--network", network_path, "Network spec file"); };

  auto* c_mask = add("mask", "Otsu tissue masks");
  c_mask->add_option("--slide", slides, "Slide PNG (or stem)");

  auto* c_sample = add("sample", "Cut training patches (random, ITC and boundary)");
  c_sample->add_option("--slide", slides, "Slide PNG (or stem)");
  c_sample->add_option("--annotations", annotations, "Annotation JSON, one per slide");
  net_opt(c_sample);

  auto* c_train = add("train", "Joint detector/decoder training on sampled patches");
  c_train->add_option("--samples", samples, "Sample bundles from 'sample'");
  c_train->add_option("--steps", steps, "SGD steps");
  c_train->add_option("--lr", lr, "Learning rate");
  net_opt(c_train);

  auto* c_infer = add("infer", "Dense scan of slides into probability maps");
  c_infer->add_option("--slide", slides, "Slide PNG (or stem)");
  c_infer->add_option("--weights", weights_path, "Weights bundle");
  c_infer->add_option("--tile", tile, "Tile extent L_m in cells");
  c_infer->add_option("--alpha", alpha, "Dense coefficient");
  c_infer->add_flag("--heatmap", heatmap, "Also write a blue-to-red heatmap PNG");
  net_opt(c_infer);

  auto* c_verify = add("verify", "Certify dense scanning against the patch oracle");
  c_verify->add_option("--trials", trials, "Random trials per geometry");
  c_verify->add_option("--tile", tiles_s, "Tile extents")->delimiter(',');
  c_verify->add_option("--alpha", alphas_s, "Dense coefficients")->delimiter(',');
  c_verify->add_option("--precision", precision, "mixed or double");
  c_verify->add_option("--fault-offset", fault, "Test hook: shift the finest dense pooling window");
  net_opt(c_verify);

  auto* c_forest = add("forest", "Train the node classifier on labelled maps");
  c_forest->add_option("--node", nodes, "MAP=CLASS (normal, itc, micro, macro)");
  c_forest->add_option("--threshold", threshold, "Candidate threshold");

  auto* c_stage = add("stage", "Node classes and pN stage from five probability maps");
  c_stage->add_option("--patient", patient, "Patient id");
  c_stage->add_option("--map", maps, "Probability map (five per patient)");
  c_stage->add_option("--forest", forest_path, "Forest JSON (rule-based without)");
  c_stage->add_option("--threshold", threshold, "Candidate threshold");

  auto* c_eval = add("eval", "Kappa, FROC and AUC");
  c_eval->add_option("--metric", metrics, "kappa, froc or auc (repeatable; default all)");
  c_eval->add_option("--predicted", predicted, "Predicted stages JSON");
  c_eval->add_option("--truth", truth, "True stages JSON");
  c_eval->add_option("--map", maps, "Probability map per slide");
  c_eval->add_option("--detections", detections, "Detections JSON per slide");
  c_eval->add_option("--annotations", annotations, "Annotation JSON per slide");

  auto* c_bench = add("bench", "Dense vs patch-oracle timing and MAC counts");
  c_bench->add_option("--rois", rois, "ROIs per tile size");
  c_bench->add_option("--tile", tiles_s, "Tile extents")->delimiter(',');
  c_bench->add_option("--alpha", alpha, "Dense coefficient");
  net_opt(c_bench);

  auto* c_synth = add("synth", "Generate a synthetic slide with annotations");
  c_synth->add_option("--slide-id", slide_id, "Slide id");
  c_synth->add_option("--extent", extent, "Slide height and width (px)");
  c_synth->add_option("--spacing", spacing, "Microns per pixel");
  c_synth->add_option("--lesion", lesions_s, "Lesion diameter in mm (repeatable)")->delimiter(',');

  auto* c_study = add("study", "End-to-end synthetic cohort: train, infer, stage, score");
  c_study->add_option("--train-patients", train_p, "Training patients");
  c_study->add_option("--eval-patients", eval_p, "Evaluation patients");
  c_study->add_option("--steps", steps, "SGD steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: config: " << one_line(e.what()) << "\n";
    return kConfigError;
  }

  std::string name;
  for (const auto& [n, c] : sub)
    if (c->parsed()) name = n;

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    auto set = [](CLI::App* c, const char* opt) {
      const CLI::Option* o = c->get_option_no_throw(opt);
      return o != nullptr && o->count() > 0;
    };
    auto to_sizes = [](const std::vector<std::string>& v) {
      std::vector<std::size_t> out;
      for (const auto& s : v) {
        std::size_t pos = 0;
        unsigned long long x = 0;
        try {
          x = std::stoull(s, &pos);
        } catch (const std::exception&) {
          pos = 0;
        }
        if (pos != s.size() || s.empty() || s[0] == '-') throw pfa::ConfigError("not a non-negative integer: '" + s + "'");
        out.push_back(static_cast<std::size_t>(x));
      }
      return out;
    };
    CLI::App* c = sub.at(name);
    if (o_seed->count()) cfg.seed = seed;
    if (o_threads->count()) cfg.threads = threads;
    if (o_out->count()) cfg.out = out_dir;
    if (set(c, "--network")) cfg.network = network_path;
    if (set(c, "--slide")) cfg.slides = slides;
    if (set(c, "--annotations")) cfg.annotations = annotations;
    if (set(c, "--samples")) cfg.samples = samples;
    if (set(c, "--steps")) cfg.sgd.steps = steps;
    if (set(c, "--lr")) cfg.sgd.learning_rate = lr;
    if (set(c, "--weights")) cfg.weights = weights_path;
    if (name == "infer" && set(c, "--tile")) cfg.inference.tile = tile;
    if (name == "infer" && set(c, "--alpha")) cfg.inference.alpha = alpha;
    if (heatmap) cfg.heatmap = true;
    if (set(c, "--trials")) cfg.verify.trials = trials;
    if (name == "verify" && set(c, "--tile")) cfg.verify.tiles = to_sizes(tiles_s);
    if (name == "verify" && set(c, "--alpha")) cfg.verify.alphas = to_sizes(alphas_s);
    if (set(c, "--precision")) {
      if (precision == "mixed") cfg.verify.precision = pfa::Precision::mixed;
      else if (precision == "double") cfg.verify.precision = pfa::Precision::double_only;
      else throw pfa::ConfigError("--precision must be mixed or double");
    }
    if (set(c, "--fault-offset")) cfg.verify.fault_offset = fault;
    if (set(c, "--node")) {
      cfg.training_nodes.clear();
      for (const auto& n : nodes) {
        const auto eq = n.rfind('=');
        if (eq == std::string::npos) throw pfa::ConfigError("--node expects MAP=CLASS, got '" + n + "'");
        cfg.training_nodes.push_back({n.substr(0, eq), n.substr(eq + 1)});
      }
    }
    if (set(c, "--threshold")) cfg.candidate_threshold = threshold;
    if (set(c, "--forest")) cfg.forest = forest_path;
    if (name == "stage" && (set(c, "--patient") || set(c, "--map"))) {
      cfg.patients = {{patient.empty() ? "patient" : patient, maps}};
    }
    if (set(c, "--metric")) cfg.eval.metrics = metrics;
    if (set(c, "--predicted")) cfg.eval.predicted = predicted;
    if (set(c, "--truth")) cfg.eval.truth = truth;
    if (name == "eval" && (set(c, "--map") || set(c, "--detections"))) {
      const auto& src = set(c, "--map") ? maps : detections;
      if (set(c, "--map") && set(c, "--detections")) throw pfa::ConfigError("eval: give --map or --detections, not both");
      if (annotations.size() != src.size()) throw pfa::ConfigError("eval: give one --annotations per slide");
      cfg.eval.slides.clear();
      for (std::size_t i = 0; i < src.size(); ++i) {
        EvalSlide e;
        (set(c, "--map") ? e.map : e.detections) = src[i];
        e.annotations = annotations[i];
        cfg.eval.slides.push_back(e);
      }
    }
    if (set(c, "--rois")) cfg.bench.rois = rois;
    if (name == "bench" && set(c, "--tile")) cfg.bench.tiles = to_sizes(tiles_s);
    if (name == "bench" && set(c, "--alpha")) cfg.bench.alpha = alpha;
    if (set(c, "--slide-id")) cfg.synth.slide_id = slide_id;
    if (set(c, "--extent")) cfg.synth.height = cfg.synth.width = extent;
    if (set(c, "--spacing")) cfg.synth.spacing_um = spacing;
    if (set(c, "--lesion")) {
      cfg.synth.lesion_diameters_mm.clear();
      for (const auto& s : lesions_s) {
        try {
          cfg.synth.lesion_diameters_mm.push_back(std::stod(s));
        } catch (const std::exception&) {
          throw pfa::ConfigError("--lesion expects a diameter in mm, got '" + s + "'");
        }
      }
    }
    if (set(c, "--train-patients")) cfg.study.train_patients = train_p;
    if (set(c, "--eval-patients")) cfg.study.eval_patients = eval_p;
    cfg.validate();

    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    if (ec) throw pfa::IoError("cannot create output directory " + cfg.out + ": " + ec.message());

    Manifest manifest(name, cfg);
    manifest.input(config_path);
    static const std::map<std::string, int (*)(const RunConfig&, Manifest&, std::ostream&)> commands = {
        {"mask", cmd_mask},   {"sample", cmd_sample}, {"train", cmd_train}, {"infer", cmd_infer},
        {"verify", cmd_verify}, {"forest", cmd_forest}, {"stage", cmd_stage}, {"eval", cmd_eval},
        {"bench", cmd_bench}, {"synth", cmd_synth},   {"study", cmd_study}};
    const int status = commands.at(name)(cfg, manifest, out);
    manifest.write();
    if (status == kValidationError) err << "error: validation: " << name << " failed, see " << cfg.out << "\n";
    return status;
  } catch (const pfa::Error& e) {
    err << "error: " << kind(e) << ": " << one_line(e.what()) << "\n";
    return code(e);
  } catch (const std::bad_alloc&) {
    err << "error: io: out of memory\n";
    return kIoError;
  }
}

}  // namespace pfascan
