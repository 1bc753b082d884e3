#include "run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace pfascan {

using nlohmann::json;
using pfa::ConfigError;

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    const json* v = find(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) throw type_error(key, "a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) throw type_error(key, "a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) throw type_error(key, "an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) throw type_error(key, "a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) throw type_error(key, "a string");
    }
    out = v->get<T>();
  }

  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array()) throw type_error(key, "an array");
    std::vector<T> items;
    for (const auto& e : *v) {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!e.is_string()) throw type_error(key, "an array of strings");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!e.is_number_integer() || e.get<std::int64_t>() < 0) throw type_error(key, "an array of non-negative integers");
      } else {
        if (!e.is_number()) throw type_error(key, "an array of numbers");
      }
      items.push_back(e.get<T>());
    }
    out = std::move(items);
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "'" + where_ + "'"; }
  ConfigError type_error(const std::string& key, const char* what) const {
    return ConfigError("config key '" + path(key) + "' must be " + what);
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

void resolve_all(const std::filesystem::path& base, std::vector<std::string>& paths) {
  for (auto& p : paths) p = resolve(base, p);
}

const char* precision_name(pfa::Precision p) { return p == pfa::Precision::mixed ? "mixed" : "double"; }

}  // namespace

RunConfig parse_run_config(const json& doc_in, const std::filesystem::path& base) {
  const json* doc = &doc_in;
  if (doc_in.is_object() && doc_in.contains("manifest")) {
    if (!doc_in.contains("config")) throw ConfigError("manifest has no 'config' entry");
    doc = &doc_in.at("config");
  }
  RunConfig c;
  Section top(*doc, "");
  top.get("network", c.network);
  top.get("weights", c.weights);
  top.get("out", c.out);
  top.get("seed", c.seed);
  top.get("threads", c.threads);

  if (const json* j = top.find("inputs")) {
    Section s(*j, top.path("inputs"));
    s.get_list("slides", c.slides);
    s.get_list("annotations", c.annotations);
    s.get_list("samples", c.samples);
    s.get_list("maps", c.maps);
    s.get("forest", c.forest);
    s.finish();
  }
  if (const json* j = top.find("geometry")) {
    Section s(*j, "geometry");
    s.get("tile", c.inference.tile);
    s.get("alpha", c.inference.alpha);
    s.get("min_tissue_fraction", c.inference.min_tissue_fraction);
    s.get("heatmap", c.heatmap);
    s.finish();
  }
  if (const json* j = top.find("loss")) {
    Section s(*j, "loss");
    s.get("gamma", c.loss.gamma);
    s.get("lambda", c.loss.lambda);
    s.finish();
  }
  if (const json* j = top.find("sgd")) {
    Section s(*j, "sgd");
    s.get("learning_rate", c.sgd.learning_rate);
    s.get("momentum", c.sgd.momentum);
    s.get("steps", c.sgd.steps);
    s.get("batch_size", c.sgd.batch_size);
    s.finish();
  }
  if (const json* j = top.find("sampling")) {
    Section s(*j, "sampling");
    s.get("random", c.sampling.random);
    s.get("itc", c.sampling.itc);
    s.get("boundary", c.sampling.boundary);
    s.get("itc_max_mm", c.sampling.itc_max_mm);
    s.finish();
  }
  if (const json* j = top.find("staging")) {
    Section s(*j, "staging");
    s.get("threshold", c.candidate_threshold);
    s.get("trees", c.rf.trees);
    s.get("max_depth", c.rf.max_depth);
    if (const json* pj = s.find("patients")) {
      if (!pj->is_array()) throw ConfigError("config key 'staging.patients' must be an array");
      for (std::size_t i = 0; i < pj->size(); ++i) {
        Section ps(pj->at(i), "staging.patients[" + std::to_string(i) + "]");
        PatientInput p;
        ps.get("id", p.id);
        ps.get_list("maps", p.maps);
        ps.finish();
        resolve_all(base, p.maps);
        c.patients.push_back(std::move(p));
      }
    }
    if (const json* tj = s.find("training")) {
      if (!tj->is_array()) throw ConfigError("config key 'staging.training' must be an array");
      for (std::size_t i = 0; i < tj->size(); ++i) {
        Section ts(tj->at(i), "staging.training[" + std::to_string(i) + "]");
        LabelledMap m;
        ts.get("map", m.map);
        ts.get("class", m.node_class);
        ts.finish();
        m.map = resolve(base, m.map);
        c.training_nodes.push_back(std::move(m));
      }
    }
    s.finish();
  }
  if (const json* j = top.find("verify")) {
    Section s(*j, "verify");
    s.get("trials", c.verify.trials);
    s.get_list("tiles", c.verify.tiles);
    s.get_list("alphas", c.verify.alphas);
    std::string precision = precision_name(c.verify.precision);
    s.get("precision", precision);
    if (precision == "mixed") c.verify.precision = pfa::Precision::mixed;
    else if (precision == "double") c.verify.precision = pfa::Precision::double_only;
    else throw ConfigError("verify.precision must be \"mixed\" or \"double\", got \"" + precision + "\"");
    s.get("fault_offset", c.verify.fault_offset);
    s.finish();
  }
  if (const json* j = top.find("bench")) {
    Section s(*j, "bench");
    s.get("rois", c.bench.rois);
    s.get_list("tiles", c.bench.tiles);
    s.get("alpha", c.bench.alpha);
    s.finish();
  }
  if (const json* j = top.find("eval")) {
    Section s(*j, "eval");
    s.get_list("metrics", c.eval.metrics);
    s.get("predicted", c.eval.predicted);
    s.get("truth", c.eval.truth);
    if (const json* sj = s.find("slides")) {
      if (!sj->is_array()) throw ConfigError("config key 'eval.slides' must be an array");
      for (std::size_t i = 0; i < sj->size(); ++i) {
        Section es(sj->at(i), "eval.slides[" + std::to_string(i) + "]");
        EvalSlide e;
        es.get("map", e.map);
        es.get("detections", e.detections);
        es.get("annotations", e.annotations);
        es.finish();
        e.map = resolve(base, e.map);
        e.detections = resolve(base, e.detections);
        e.annotations = resolve(base, e.annotations);
        c.eval.slides.push_back(std::move(e));
      }
    }
    s.finish();
    c.eval.predicted = resolve(base, c.eval.predicted);
    c.eval.truth = resolve(base, c.eval.truth);
  }
  if (const json* j = top.find("synth")) {
    Section s(*j, "synth");
    s.get("slide_id", c.synth.slide_id);
    s.get("height", c.synth.height);
    s.get("width", c.synth.width);
    s.get("spacing_um", c.synth.spacing_um);
    s.get_list("lesions_mm", c.synth.lesion_diameters_mm);
    s.finish();
  }
  if (const json* j = top.find("study")) {
    Section s(*j, "study");
    s.get("train_patients", c.study.train_patients);
    s.get("eval_patients", c.study.eval_patients);
    s.finish();
  }
  top.finish();

  c.network = resolve(base, c.network);
  c.weights = resolve(base, c.weights);
  c.out = resolve(base, c.out);
  c.forest = resolve(base, c.forest);
  resolve_all(base, c.slides);
  resolve_all(base, c.annotations);
  resolve_all(base, c.samples);
  resolve_all(base, c.maps);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw pfa::IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

void RunConfig::validate() const {
  if (threads < 0) throw ConfigError("threads must be >= 0");
  if (out.empty()) throw ConfigError("out must not be empty");
  if (inference.tile == 0) throw ConfigError("geometry.tile must be >= 1");
  if (inference.alpha == 0) throw ConfigError("geometry.alpha must be >= 1");
  if (!(inference.min_tissue_fraction >= 0.0 && inference.min_tissue_fraction <= 1.0)) {
    throw ConfigError("geometry.min_tissue_fraction must lie in [0, 1]");
  }
  loss.validate();
  if (!(sgd.learning_rate >= 0.0)) throw ConfigError("sgd.learning_rate must be >= 0");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw ConfigError("sgd.momentum must lie in [0, 1)");
  if (sgd.batch_size == 0) throw ConfigError("sgd.batch_size must be >= 1");
  if (!(sampling.itc_max_mm > 0.0)) throw ConfigError("sampling.itc_max_mm must be > 0");
  if (!(candidate_threshold > 0.0 && candidate_threshold < 1.0)) {
    throw ConfigError("staging.threshold must lie in (0, 1)");
  }
  if (rf.trees == 0) throw ConfigError("staging.trees must be >= 1");
  for (const auto& p : patients) {
    if (p.maps.size() != 5) {
      throw ConfigError("patient '" + p.id + "' lists " + std::to_string(p.maps.size()) + " maps, expected 5");
    }
  }
  for (const auto& n : training_nodes) pfa::parse_node_class(n.node_class);
  if (verify.trials == 0) throw ConfigError("verify.trials must be >= 1");
  for (auto t : verify.tiles) if (t == 0) throw ConfigError("verify.tiles entries must be >= 1");
  for (auto a : verify.alphas) if (a == 0) throw ConfigError("verify.alphas entries must be >= 1");
  if (bench.rois == 0) throw ConfigError("bench.rois must be >= 1");
  for (auto t : bench.tiles) if (t == 0) throw ConfigError("bench.tiles entries must be >= 1");
  if (bench.alpha == 0) throw ConfigError("bench.alpha must be >= 1");
  for (const auto& m : eval.metrics) {
    if (m != "kappa" && m != "froc" && m != "auc") {
      throw ConfigError("eval.metrics: unknown metric '" + m + "' (known: kappa, froc, auc)");
    }
  }
  for (const auto& s : eval.slides) {
    if (s.map.empty() == s.detections.empty()) {
      throw ConfigError("each eval.slides entry needs exactly one of 'map' or 'detections'");
    }
    if (s.annotations.empty()) throw ConfigError("each eval.slides entry needs 'annotations'");
  }
  if (synth.height == 0 || synth.width == 0) throw ConfigError("synth extents must be >= 1");
  if (!(synth.spacing_um > 0.0)) throw ConfigError("synth.spacing_um must be > 0");
  if (study.train_patients == 0 || study.eval_patients == 0) throw ConfigError("study patient counts must be >= 1");
}

json to_json(const RunConfig& c) {
  json patients = json::array();
  for (const auto& p : c.patients) patients.push_back({{"id", p.id}, {"maps", p.maps}});
  json training = json::array();
  for (const auto& n : c.training_nodes) training.push_back({{"map", n.map}, {"class", n.node_class}});
  json slides = json::array();
  for (const auto& s : c.eval.slides) {
    json e = {{"annotations", s.annotations}};
    if (!s.map.empty()) e["map"] = s.map;
    if (!s.detections.empty()) e["detections"] = s.detections;
    slides.push_back(e);
  }
  return {
      {"network", c.network},
      {"weights", c.weights},
      {"out", c.out},
      {"seed", c.seed},
      {"threads", c.threads},
      {"inputs",
       {{"slides", c.slides}, {"annotations", c.annotations}, {"samples", c.samples}, {"maps", c.maps},
        {"forest", c.forest}}},
      {"geometry",
       {{"tile", c.inference.tile},
        {"alpha", c.inference.alpha},
        {"min_tissue_fraction", c.inference.min_tissue_fraction},
        {"heatmap", c.heatmap}}},
      {"loss", {{"gamma", c.loss.gamma}, {"lambda", c.loss.lambda}}},
      {"sgd",
       {{"learning_rate", c.sgd.learning_rate},
        {"momentum", c.sgd.momentum},
        {"steps", c.sgd.steps},
        {"batch_size", c.sgd.batch_size}}},
      {"sampling",
       {{"random", c.sampling.random},
        {"itc", c.sampling.itc},
        {"boundary", c.sampling.boundary},
        {"itc_max_mm", c.sampling.itc_max_mm}}},
      {"staging",
       {{"threshold", c.candidate_threshold},
        {"trees", c.rf.trees},
        {"max_depth", c.rf.max_depth},
        {"patients", patients},
        {"training", training}}},
      {"verify",
       {{"trials", c.verify.trials},
        {"tiles", c.verify.tiles},
        {"alphas", c.verify.alphas},
        {"precision", precision_name(c.verify.precision)},
        {"fault_offset", c.verify.fault_offset}}},
      {"bench", {{"rois", c.bench.rois}, {"tiles", c.bench.tiles}, {"alpha", c.bench.alpha}}},
      {"eval",
       {{"metrics", c.eval.metrics}, {"predicted", c.eval.predicted}, {"truth", c.eval.truth}, {"slides", slides}}},
      {"synth",
       {{"slide_id", c.synth.slide_id},
        {"height", c.synth.height},
        {"width", c.synth.width},
        {"spacing_um", c.synth.spacing_um},
        {"lesions_mm", c.synth.lesion_diameters_mm}}},
      {"study", {{"train_patients", c.study.train_patients}, {"eval_patients", c.study.eval_patients}}},
  };
}

}  // namespace pfascan
