#include "pfa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "pfa/hash.hpp"
#include "pfa/tensor_io.hpp"

namespace pfa {

std::string network_hash(const NetworkSpec& spec, const NetworkParams<float>& params) {
  std::ostringstream os;
  os << format_network_spec(spec);
  write_bundle(os, to_bundle(params));
  return sha256_hex(os.str());
}

NetworkParams<float> detector_params(const NetworkSpec& spec, const NetworkParams<float>& params) {
  NetworkParams<float> out;
  const auto levels = spec.inference_levels();
  for (const auto& [name, t] : params.tensors) {
    if (name.rfind("dec.", 0) == 0) continue;
    if (name.rfind("gconv.", 0) == 0) {
      const int level = std::stoi(name.substr(6));
      if (std::find(levels.begin(), levels.end(), level) == levels.end()) continue;
    }
    out.tensors.emplace(name, t);
  }
  check_params(spec, out, false);
  return out;
}

std::vector<TrainSample> prepare_training_set(std::vector<PatchSample> patches, std::uint64_t seed) {
  std::vector<TrainSample> data;
  std::mt19937_64 rng(seed ^ 0xa5a5a5a5ULL);
  for (auto& ps : patches) {
    augment(AugmentDraw::random(rng), ps.image, ps.mask);
    data.push_back({std::move(ps.image), ps.label, std::move(ps.mask)});
  }
  std::size_t positives = 0;
  for (const auto& d : data) positives += d.label == 1;
  if (positives > 0 && positives < data.size() - positives) {
    const std::size_t repeat = (data.size() - positives) / positives - 1;
    const std::size_t n = data.size();
    for (std::size_t i = 0; i < n; ++i)
      if (data[i].label == 1)
        for (std::size_t k = 0; k < repeat; ++k) data.push_back(data[i]);
  }
  return data;
}

ProbabilityMap infer_slide(const SlideRaster& slide, const NetworkSpec& spec, const NetworkParams<float>& params,
                           const InferenceConfig& cfg, const std::string& net_hash, CostCounter* cost) {
  slide.validate();
  const TileGeometry g = solve_geometry(spec.patch_size, cfg.tile, spec.native_stride, cfg.alpha);
  check_alpha(spec, cfg.alpha);
  const Mask tissue = tissue_mask(slide.image);
  const ScanPlan plan = plan_scan(slide.image.height, slide.image.width, g, &tissue, cfg.min_tissue_fraction);
  ProbabilityMap map = stitch(plan, scan_slide(to_tensor(slide.image), plan, spec, params, cost));
  map.slide_id = slide.id;
  map.spacing_um = slide.spacing_um;
  map.network_hash = net_hash;
  return map;
}

RgbImage heatmap(const ProbabilityMap& map) {
  RgbImage img(map.rows, map.cols);
  auto ch = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c) {
      const double t = std::clamp(static_cast<double>(map.at(r, c)), 0.0, 1.0);
      std::uint8_t* p = img.pixel(r, c);
      p[0] = ch(1.5 - std::abs(4.0 * t - 3.0));
      p[1] = ch(1.5 - std::abs(4.0 * t - 2.0));
      p[2] = ch(1.5 - std::abs(4.0 * t - 1.0));
    }
  return img;
}

// ---- cohort ------------------------------------------------------------------

NodeClass planted_class(const std::vector<double>& diameters_mm) {
  double largest = 0.0;
  for (double d : diameters_mm) largest = std::max(largest, d);
  if (diameters_mm.empty()) return NodeClass::normal;
  if (largest < 0.2) return NodeClass::itc;
  if (largest < 2.0) return NodeClass::micro;
  return NodeClass::macro;
}

std::vector<SyntheticPatient> plan_cohort(std::size_t patients, std::uint64_t seed, const CohortConfig& cfg,
                                          const std::string& prefix) {
  std::vector<SyntheticPatient> out;
  for (std::size_t p = 0; p < patients; ++p) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + p);
    auto uni = [&](const double range[2]) { return std::uniform_real_distribution<double>(range[0], range[1])(rng); };
    auto coin = [&] { return std::uniform_int_distribution<int>(0, 1)(rng) == 1; };
    const auto stage = static_cast<PNStage>(p % 5);
    std::vector<NodeClass> classes(5, NodeClass::normal);
    switch (stage) {
      case PNStage::pN0: break;
      case PNStage::pN0_i:
        classes[0] = NodeClass::itc;
        if (coin()) classes[1] = NodeClass::itc;
        break;
      case PNStage::pN1mi:
        classes[0] = NodeClass::micro;
        if (coin()) classes[1] = NodeClass::micro;
        if (coin()) classes[2] = NodeClass::itc;
        break;
      case PNStage::pN1:
        classes[0] = NodeClass::macro;
        if (coin()) classes[1] = NodeClass::micro;
        if (coin()) classes[2] = NodeClass::itc;
        break;
      case PNStage::pN2:
        classes[0] = NodeClass::macro;
        classes[1] = coin() ? NodeClass::macro : NodeClass::micro;
        classes[2] = NodeClass::micro;
        classes[3] = NodeClass::micro;
        break;
    }
    std::shuffle(classes.begin(), classes.end(), rng);

    SyntheticPatient patient;
    patient.id = prefix + "_" + std::to_string(p);
    for (std::size_t n = 0; n < 5; ++n) {
      SyntheticNode node;
      node.spec.slide_id = patient.id + "_node_" + std::to_string(n);
      node.spec.height = node.spec.width = cfg.slide_extent;
      node.spec.spacing_um = cfg.spacing_um;
      auto& d = node.spec.lesion_diameters_mm;
      switch (classes[n]) {
        case NodeClass::normal: break;
        case NodeClass::itc:
          d.push_back(uni(cfg.itc_mm));
          if (coin()) d.push_back(uni(cfg.itc_mm));
          break;
        case NodeClass::micro:
          d.push_back(uni(cfg.micro_mm));
          if (coin()) d.push_back(uni(cfg.itc_mm));
          break;
        case NodeClass::macro: d.push_back(uni(cfg.macro_mm)); break;
      }
      node.truth = planted_class(d);
      patient.nodes.push_back(std::move(node));
    }
    std::vector<NodeClass> truth;
    for (const auto& n : patient.nodes) truth.push_back(n.truth);
    patient.truth = stage_patient(truth);
    out.push_back(std::move(patient));
  }
  return out;
}

// ---- study ---------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, const std::string& id) {
  std::uint64_t h = 14695981039346656037ULL ^ seed;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

StudyReport run_synthetic_study(const StudyConfig& cfg, const std::function<void(const std::string&)>& log) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const NetworkSpec spec = desk_network_spec();
  const auto train = plan_cohort(cfg.train_patients, cfg.seed, cfg.cohort, "train");
  const auto eval = plan_cohort(cfg.eval_patients, cfg.seed + 1, cfg.cohort, "eval");

  // 1. training patches
  std::vector<PatchSample> patches;
  for (const auto& p : train)
    for (const auto& n : p.nodes) {
      const SyntheticSlide s = generate_synthetic_slide(n.spec, derive_seed(cfg.seed, n.spec.slide_id));
      SampleResult r = sample_patches(s.slide, s.annotations, cfg.samples, spec.patch_size, spec.mask_extent,
                                      derive_seed(cfg.seed + 7, n.spec.slide_id));
      for (auto& ps : r.patches) patches.push_back(std::move(ps));
    }
  const std::size_t sampled = patches.size();
  const std::vector<TrainSample> data = prepare_training_set(std::move(patches), cfg.seed);
  say("training patches: " + std::to_string(sampled) + " sampled, " + std::to_string(data.size()) + " after balancing");

  // 2. synergistic training
  const TrainResult trained = train_toy(spec, init_params<float>(spec, cfg.seed, true), data, cfg.loss, cfg.sgd);
  StudyReport rep;
  for (const auto& l : trained.curve) rep.loss_curve.push_back(l.cls);
  {
    std::ostringstream os;
    os << "training: cls loss " << trained.curve.front().cls << " -> " << trained.curve.back().cls;
    say(os.str());
  }
  const NetworkParams<float> detector = detector_params(spec, trained.params);
  const std::string net_hash = network_hash(spec, detector);

  // 3. forest on the training cohort's inferred maps
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  for (const auto& p : train)
    for (const auto& n : p.nodes) {
      const SyntheticSlide s = generate_synthetic_slide(n.spec, derive_seed(cfg.seed, n.spec.slide_id));
      const ProbabilityMap map = infer_slide(s.slide, spec, detector, cfg.inference, net_hash);
      const NodeFeatures f = node_features(extract_candidates(map, cfg.candidate_threshold));
      features.emplace_back(f.begin(), f.end());
      labels.push_back(static_cast<int>(n.truth));
    }
  const RandomForest forest = rf_train(features, labels, cfg.forest);
  say("forest trained on " + std::to_string(features.size()) + " nodes");

  // 4. evaluation cohort
  std::vector<SlideDetections> detections;
  std::vector<double> slide_scores;
  std::vector<int> slide_labels;
  std::ostringstream digest;
  for (const auto& p : eval) {
    std::vector<NodeClass> nodes;
    for (const auto& n : p.nodes) {
      const SyntheticSlide s = generate_synthetic_slide(n.spec, derive_seed(cfg.seed, n.spec.slide_id));
      const ProbabilityMap map = infer_slide(s.slide, spec, detector, cfg.inference, net_hash);
      write_probability_map(digest, map);
      const auto cands = extract_candidates(map, cfg.candidate_threshold);
      const NodeClass c = classify_node(cands, &forest);
      nodes.push_back(c);
      rep.node_predicted.push_back(c);
      rep.node_truth.push_back(n.truth);
      SlideDetections sd;
      double score = 0.0;
      for (const auto& k : cands) {
        sd.detections.push_back({k.peak_y_px, k.peak_x_px, k.peak});
        score = std::max(score, static_cast<double>(k.peak));
      }
      for (const auto& l : s.annotations.lesions) sd.lesions.push_back(l.polygon);
      slide_scores.push_back(score);
      slide_labels.push_back(s.annotations.lesions.empty() ? 0 : 1);
      detections.push_back(std::move(sd));
    }
    rep.predicted.push_back(stage_patient(nodes));
    rep.truth.push_back(p.truth);
    say(p.id + ": predicted " + to_string(rep.predicted.back()) + ", planted " + to_string(p.truth));
  }
  std::vector<int> pi, ti;
  for (auto s : rep.predicted) pi.push_back(static_cast<int>(s));
  for (auto s : rep.truth) ti.push_back(static_cast<int>(s));
  rep.kappa = quadratic_kappa(pi, ti, 5);
  rep.froc = froc(detections).average;
  rep.auc = auc(slide_scores, slide_labels);
  for (int v : pi) digest << v;
  rep.digest = sha256_hex(digest.str());
  return rep;
}

}  // namespace pfa
