#include "pfa/detector.hpp"

#include <string>

namespace pfa {

namespace {

namespace pn = param_names;

template <typename T>
BasicTensor<T> conv_counted(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                            std::size_t stride, CostCounter* cost) {
  if (cost) cost->macs += conv2d_macs(x.shape(), w.shape(), stride);
  return conv2d_valid(x, w, bias, stride);
}

}  // namespace

template <typename T>
BasicTensor<T> global_conv(const BasicTensor<T>& x, const NetworkParams<T>& params, int level, GconvCache<T>* cache,
                           CostCounter* cost) {
  const auto& a1 = params.at(pn::gconv(level, "a1"));
  const auto& a2 = params.at(pn::gconv(level, "a2"));
  const auto& b1 = params.at(pn::gconv(level, "b1"));
  const auto& b2 = params.at(pn::gconv(level, "b2"));
  const std::size_t k = a2.extent(2);
  if (x.height() < k || x.width() < k) {
    throw GeometryError("global convolution at level " + std::to_string(level) + ": extent " +
                        std::to_string(x.height()) + "x" + std::to_string(x.width()) + " smaller than kernel " +
                        std::to_string(k));
  }
  BasicTensor<T> mid_a = conv_counted(x, a1, {}, 1, cost);
  BasicTensor<T> mid_b = conv_counted(x, b1, {}, 1, cost);
  BasicTensor<T> out = conv_counted(mid_a, a2, params.at(pn::gconv(level, "bias")).data(), 1, cost);
  add_inplace(out, conv_counted(mid_b, b2, {}, 1, cost));
  if (cache) *cache = {std::move(mid_a), std::move(mid_b)};
  return out;
}

template <typename T>
BasicTensor<T> global_conv_backward(const BasicTensor<T>& x, const GconvCache<T>& cache, const NetworkParams<T>& params,
                                    int level, const BasicTensor<T>& grad_out, NetworkParams<T>& grads) {
  const auto& a1 = params.at(pn::gconv(level, "a1"));
  const auto& a2 = params.at(pn::gconv(level, "a2"));
  const auto& b1 = params.at(pn::gconv(level, "b1"));
  const auto& b2 = params.at(pn::gconv(level, "b2"));
  ConvGrads<T> ga2 = conv2d_backward(cache.mid_a, a2, grad_out, 1);
  ConvGrads<T> gb2 = conv2d_backward(cache.mid_b, b2, grad_out, 1);
  ConvGrads<T> ga1 = conv2d_backward(x, a1, ga2.input, 1);
  ConvGrads<T> gb1 = conv2d_backward(x, b1, gb2.input, 1);
  add_inplace(grads.at(pn::gconv(level, "a1")), ga1.weight);
  add_inplace(grads.at(pn::gconv(level, "a2")), ga2.weight);
  add_inplace(grads.at(pn::gconv(level, "b1")), gb1.weight);
  add_inplace(grads.at(pn::gconv(level, "b2")), gb2.weight);
  add_inplace(grads.at(pn::gconv(level, "bias")), ga2.bias);
  add_inplace(ga1.input, gb1.input);
  return std::move(ga1.input);
}

template <typename T>
BasicTensor<T> pfe_pool(const BasicTensor<T>& refined, const NetworkSpec& spec, int level, const ForwardOptions& opt,
                        std::size_t tile, const ShapeReport& patch_shapes, CostCounter* cost) {
  const PfeLevel& p = spec.pfe_level(level);
  if (!p.pooled()) throw ConfigError("level " + std::to_string(level) + " is not pooled");
  const CropWindow w = center_crop_window(patch_shapes.levels.at(level).refined_extent, *p.crop);
  BasicTensor<T> out;
  if (opt.mode == Mode::train) {
    if (refined.height() != patch_shapes.levels.at(level).refined_extent) {
      throw GeometryError("train-mode pooling at level " + std::to_string(level) + " expects extent " +
                          std::to_string(patch_shapes.levels.at(level).refined_extent) + ", got " +
                          std::to_string(refined.height()));
    }
    out = avg_pool(crop(refined, w.offset, w.offset, w.size, w.size), w.size, 1, 0);
  } else {
    const std::size_t stride = dense_pool_stride(p, opt.alpha);
    std::size_t offset = w.offset;
    if (opt.fault_offset && level == spec.pooled_levels().front()) offset += opt.fault_offset;
    out = avg_pool(refined, w.size, stride, offset);
    if (out.height() < tile || out.width() < tile) {
      throw GeometryError("dense pooling at level " + std::to_string(level) + " yields " +
                          std::to_string(out.height()) + " cells, tile needs " + std::to_string(tile));
    }
    if (out.height() != tile || out.width() != tile) out = crop(out, 0, 0, tile, tile);
  }
  if (cost) cost->pool_adds += avg_pool_adds(out.shape(), w.size);
  return out;
}

std::size_t tile_for_extent(const NetworkSpec& spec, std::size_t alpha, std::size_t extent) {
  check_alpha(spec, alpha);
  const std::size_t pitch = spec.native_stride / alpha;
  if (extent >= spec.patch_size && (extent - spec.patch_size) % pitch == 0) return (extent - spec.patch_size) / pitch + 1;
  std::string msg = "ROI extent " + std::to_string(extent) + " is not patch + (tile - 1) * " + std::to_string(pitch) +
                    " for alpha " + std::to_string(alpha) + "; nearest valid extent ";
  if (extent < spec.patch_size) {
    msg += std::to_string(spec.patch_size);
  } else {
    const std::size_t below = extent - (extent - spec.patch_size) % pitch;
    msg += std::to_string(below) + " or " + std::to_string(below + pitch);
  }
  throw GeometryError(msg);
}

template <typename T>
BasicTensor<T> detector_forward(const BasicTensor<T>& input, const NetworkSpec& spec, const NetworkParams<T>& params,
                                const ForwardOptions& opt, CostCounter* cost, DetectorCache<T>* cache) {
  if (input.rank() != 4) throw DimensionError("detector input must be NCHW, got " + to_string(input.shape()));
  if (input.channels() != spec.input_channels) {
    throw DimensionError("detector input: axis channel: got " + std::to_string(input.channels()) + ", expected " +
                         std::to_string(spec.input_channels));
  }
  if (input.height() != input.width()) throw GeometryError("detector input must be square, got " + to_string(input.shape()));
  std::size_t tile = 1;
  if (opt.mode == Mode::train) {
    if (input.height() != spec.patch_size) {
      throw GeometryError("train-mode input extent " + std::to_string(input.height()) + " differs from patch size " +
                          std::to_string(spec.patch_size));
    }
  } else {
    tile = tile_for_extent(spec, opt.alpha, input.height());
  }
  const ShapeReport patch_shapes = propagate_shapes(spec, spec.patch_size);

  if (cache) {
    cache->input = input;
    cache->layers.clear();
    cache->gconv.clear();
    cache->refined.clear();
  }
  std::map<int, BasicTensor<T>> features;
  BasicTensor<T> h = input;
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    h = relu(conv_counted(h, params.at(pn::trunk_weight(i)), params.at(pn::trunk_bias(i)).data(), spec.trunk[i].stride, cost));
    for (const auto& [lv, idx] : spec.level_layer)
      if (idx == i) features.emplace(lv, h);
    if (cache) cache->layers.push_back(h);
  }

  const std::vector<int> pooled = spec.pooled_levels();
  BasicTensor<T> merged;
  bool have_merged = false;
  for (auto it = pooled.rbegin(); it != pooled.rend(); ++it) {
    const int lv = *it;
    GconvCache<T> gc;
    BasicTensor<T> refined = global_conv(features.at(lv), params, lv, cache ? &gc : nullptr, cost);
    BasicTensor<T> m = pfe_pool(refined, spec, lv, opt, tile, patch_shapes, cost);
    if (!have_merged) {
      merged = std::move(m);
      have_merged = true;
    } else {
      if (m.shape() != merged.shape()) {
        throw GeometryError("level " + std::to_string(lv) + " contribution " + to_string(m.shape()) +
                            " does not match " + to_string(merged.shape()));
      }
      add_inplace(merged, m);
    }
    if (cache) {
      cache->gconv.emplace(lv, std::move(gc));
      cache->refined.emplace(lv, std::move(refined));
    }
  }
  if (opt.decoder_features) {
    for (const auto& p : spec.pfe) {
      if (p.pooled()) continue;
      GconvCache<T> gc;
      BasicTensor<T> refined = global_conv(features.at(p.level), params, p.level, cache ? &gc : nullptr, cost);
      if (cache) {
        cache->gconv.emplace(p.level, std::move(gc));
        cache->refined.emplace(p.level, std::move(refined));
      }
    }
  }
  BasicTensor<T> logits = conv_counted(merged, params.at(pn::head_weight), params.at(pn::head_bias).data(), 1, cost);
  BasicTensor<T> prob = softmax_channels(logits);
  if (cache) {
    cache->merged = std::move(merged);
    cache->logits = std::move(logits);
  }
  return prob;
}

template <typename T>
void detector_backward(const DetectorCache<T>& cache, const BasicTensor<T>* grad_logits,
                       const std::map<int, BasicTensor<T>>& grad_refined, const NetworkSpec& spec,
                       const NetworkParams<T>& params, NetworkParams<T>& grads) {
  if (cache.layers.size() != spec.trunk.size()) throw DimensionError("detector_backward: cache does not match network");
  const ShapeReport patch_shapes = propagate_shapes(spec, spec.patch_size);
  if (cache.input.height() != spec.patch_size) throw GeometryError("detector_backward supports train-mode forwards only");

  // d loss / d X_i' per level
  std::map<int, BasicTensor<T>> g_ref;
  for (const auto& [lv, g] : grad_refined) g_ref.emplace(lv, g);
  if (grad_logits) {
    ConvGrads<T> gh = conv2d_backward(cache.merged, params.at(pn::head_weight), *grad_logits, 1);
    add_inplace(grads.at(pn::head_weight), gh.weight);
    add_inplace(grads.at(pn::head_bias), gh.bias);
    for (int lv : spec.pooled_levels()) {
      const auto& refined = cache.refined.at(lv);
      const CropWindow w = center_crop_window(patch_shapes.levels.at(lv).refined_extent, *spec.pfe_level(lv).crop);
      const Shape cropped{refined.batch(), refined.channels(), w.size, w.size};
      BasicTensor<T> g = crop_backward(avg_pool_backward(gh.input, cropped, w.size, 1, 0), refined.shape(), w.offset, w.offset);
      auto [it, inserted] = g_ref.emplace(lv, g);
      if (!inserted) add_inplace(it->second, g);
    }
  }

  // d loss / d trunk layer outputs (post-ReLU)
  std::vector<BasicTensor<T>> g_layer(spec.trunk.size());
  std::vector<bool> have(spec.trunk.size(), false);
  for (const auto& [lv, g] : g_ref) {
    auto gc = cache.gconv.find(lv);
    if (gc == cache.gconv.end()) throw DimensionError("detector_backward: no cached global convolution at level " + std::to_string(lv));
    const std::size_t idx = spec.level_layer.at(lv);
    BasicTensor<T> gx = global_conv_backward(cache.layers[idx], gc->second, params, lv, g, grads);
    if (have[idx]) {
      add_inplace(g_layer[idx], gx);
    } else {
      g_layer[idx] = std::move(gx);
      have[idx] = true;
    }
  }
  BasicTensor<T> carry;
  bool have_carry = false;
  for (std::size_t r = spec.trunk.size(); r-- > 0;) {
    BasicTensor<T> g;
    if (have[r] && have_carry) {
      g = std::move(g_layer[r]);
      add_inplace(g, carry);
    } else if (have[r]) {
      g = std::move(g_layer[r]);
    } else if (have_carry) {
      g = std::move(carry);
    } else {
      continue;
    }
    const BasicTensor<T>& in = r == 0 ? cache.input : cache.layers[r - 1];
    ConvGrads<T> gc = conv2d_backward(in, params.at(pn::trunk_weight(r)), relu_backward(cache.layers[r], g),
                                      spec.trunk[r].stride);
    add_inplace(grads.at(pn::trunk_weight(r)), gc.weight);
    add_inplace(grads.at(pn::trunk_bias(r)), gc.bias);
    if (r > 0) {
      carry = std::move(gc.input);
      have_carry = true;
    }
  }
}

#define PFA_INSTANTIATE_DETECTOR(T)                                                                                   \
  template BasicTensor<T> global_conv<T>(const BasicTensor<T>&, const NetworkParams<T>&, int, GconvCache<T>*,        \
                                         CostCounter*);                                                               \
  template BasicTensor<T> global_conv_backward<T>(const BasicTensor<T>&, const GconvCache<T>&,                       \
                                                  const NetworkParams<T>&, int, const BasicTensor<T>&,               \
                                                  NetworkParams<T>&);                                                 \
  template BasicTensor<T> pfe_pool<T>(const BasicTensor<T>&, const NetworkSpec&, int, const ForwardOptions&,         \
                                      std::size_t, const ShapeReport&, CostCounter*);                                 \
  template BasicTensor<T> detector_forward<T>(const BasicTensor<T>&, const NetworkSpec&, const NetworkParams<T>&,    \
                                              const ForwardOptions&, CostCounter*, DetectorCache<T>*);               \
  template void detector_backward<T>(const DetectorCache<T>&, const BasicTensor<T>*,                                 \
                                     const std::map<int, BasicTensor<T>>&, const NetworkSpec&,                       \
                                     const NetworkParams<T>&, NetworkParams<T>&);

PFA_INSTANTIATE_DETECTOR(float)
PFA_INSTANTIATE_DETECTOR(double)

#undef PFA_INSTANTIATE_DETECTOR

}  // namespace pfa
