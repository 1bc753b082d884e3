#include "pfa/training.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace pfa {

template <typename T>
LossBreakdown synergy_loss(const NetworkSpec& spec, const NetworkParams<T>& params, const BasicTensor<T>& image,
                           int label, const Mask& mask, const LossConfig& cfg, NetworkParams<T>* grads,
                           double weight) {
  cfg.validate();
  const bool use_decoder = spec.has_decoder() && mask.rank() == 2 &&
                           params.contains(param_names::decoder(spec.decoder.front().level, "bm1.w"));
  ForwardOptions opt;
  opt.mode = Mode::train;
  opt.decoder_features = use_decoder;
  DetectorCache<T> cache;
  detector_forward(image, spec, params, opt, nullptr, &cache);

  LossBreakdown out;
  LossValue<T> cls = classification_loss(cache.logits, {label});
  out.cls = cls.value;

  std::map<int, BasicTensor<T>> grad_refined;
  if (use_decoder) {
    if (mask.extent(0) != spec.mask_extent) {
      throw DimensionError("mask extent " + std::to_string(mask.extent(0)) + " differs from decoder output " +
                           std::to_string(spec.mask_extent));
    }
    std::map<int, BasicTensor<T>> refined;
    for (const auto& d : spec.decoder) refined.emplace(d.level, cache.refined.at(d.level));
    DecoderCache<T> dcache;
    std::vector<ScoreMap<T>> maps = decoder_forward(refined, spec, params, grads ? &dcache : nullptr);
    std::vector<BasicTensor<T>> grad_maps;
    for (const auto& m : maps) {
      const Mask gt = m.final ? mask : downscale_mask(mask, m.logits.height());
      LossValue<T> seg = segmentation_loss(m.logits, gt, cfg.gamma);
      out.seg += m.weight * seg.value;
      grad_maps.push_back(scale(seg.grad_logits, static_cast<T>(cfg.lambda * m.weight * weight)));
    }
    if (grads) grad_refined = decoder_backward(dcache, grad_maps, spec, params, *grads);
  }
  out.total = out.cls + cfg.lambda * out.seg;
  if (grads) {
    BasicTensor<T> g = scale(cls.grad_logits, static_cast<T>(weight));
    detector_backward(cache, &g, grad_refined, spec, params, *grads);
  }
  return out;
}

template LossBreakdown synergy_loss<float>(const NetworkSpec&, const NetworkParams<float>&, const BasicTensor<float>&,
                                           int, const Mask&, const LossConfig&, NetworkParams<float>*, double);
template LossBreakdown synergy_loss<double>(const NetworkSpec&, const NetworkParams<double>&,
                                            const BasicTensor<double>&, int, const Mask&, const LossConfig&,
                                            NetworkParams<double>*, double);

void Sgd::step(NetworkParams<float>& params, const NetworkParams<float>& grads) {
  if (velocity_.tensors.empty()) velocity_ = params.zeros_like();
  const float lr = static_cast<float>(cfg_.learning_rate);
  const float mu = static_cast<float>(cfg_.momentum);
  for (auto& [name, p] : params.tensors) {
    const auto& g = grads.at(name);
    auto& v = velocity_.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
}

TrainResult train_toy(const NetworkSpec& spec, NetworkParams<float> params, const std::vector<TrainSample>& data,
                      const LossConfig& loss, const SgdConfig& sgd) {
  loss.validate();
  if (data.empty()) throw ValidationError("train_toy: no training samples");
  if (sgd.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(sgd.learning_rate >= 0.0) || !(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) {
    throw ConfigError("learning_rate must be >= 0 and momentum in [0, 1)");
  }
  TrainResult result;
  Sgd opt(sgd);
  std::mt19937_64 rng(sgd.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const double inv = 1.0 / static_cast<double>(sgd.batch_size);
  for (std::size_t step = 0; step < sgd.steps; ++step) {
    NetworkParams<float> grads = params.zeros_like();
    LossBreakdown mean;
    for (std::size_t b = 0; b < sgd.batch_size; ++b) {
      const std::size_t idx = pick(rng);
      const TrainSample& s = data[idx];
      const LossBreakdown l = synergy_loss(spec, params, s.image, s.label, s.mask, loss, &grads, inv);
      if (!std::isfinite(l.total)) {
        std::ostringstream os;
        os << "training diverged at step " << step << " (sample " << idx << "): loss " << l.total << ", cls " << l.cls
           << ", seg " << l.seg << ", lr " << sgd.learning_rate;
        throw ValidationError(os.str());
      }
      mean.total += l.total * inv;
      mean.cls += l.cls * inv;
      mean.seg += l.seg * inv;
    }
    opt.step(params, grads);
    result.curve.push_back(mean);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace pfa
