#include "pfa/decoder.hpp"

#include <string>

namespace pfa {

namespace {

constexpr std::size_t kUpStride = 2;

std::size_t bm_output_extent(std::size_t extent, std::size_t k, int level) {
  if (extent < 2 * k - 1) {
    throw GeometryError("boundary-aware module at level " + std::to_string(level) + ": extent " +
                        std::to_string(extent) + " too small for two " + std::to_string(k) + "x" + std::to_string(k) +
                        " valid convolutions");
  }
  return extent - 2 * (k - 1);
}

Lattice upsampled(const Lattice& l, std::size_t k) {
  return {l.origin - l.pitch * static_cast<double>(k - 1) / 4.0, l.pitch / 2.0};
}

// Returns {cropped extent, offset}, cropping whichever operand is larger.
struct Alignment {
  std::size_t extent;
  std::size_t offset;
  bool crop_up;
};

Alignment align(std::size_t up, std::size_t skip, int level) {
  const std::size_t big = std::max(up, skip), small = std::min(up, skip);
  if ((big - small) % 2 != 0) {
    throw GeometryError("decoder level " + std::to_string(level) + ": upsampled extent " + std::to_string(up) +
                        " and skip extent " + std::to_string(skip) + " cannot be centre-aligned");
  }
  return {small, (big - small) / 2, up > skip};
}

}  // namespace

DecoderShapes decoder_shapes(const NetworkSpec& spec, const ShapeReport& report) {
  DecoderShapes out;
  if (!spec.has_decoder()) return out;
  std::size_t ext = 0;
  Lattice lat;
  for (std::size_t i = 0; i < spec.decoder.size(); ++i) {
    const auto& d = spec.decoder[i];
    const auto& ls = report.levels.at(d.level);
    if (i == 0) {
      ext = ls.refined_extent;
      lat = ls.lattice;
    } else {
      if (spec.level_stride(d.level + 1) != kUpStride * spec.level_stride(d.level)) {
        throw ConfigError("decoder levels " + std::to_string(d.level + 1) + " and " + std::to_string(d.level) +
                          " are not a factor 2 apart in stride");
      }
      const std::size_t up = (ext - 1) * kUpStride + spec.decoder[i - 1].up_kernel;
      const Alignment a = align(up, ls.refined_extent, d.level);
      lat = ls.lattice;
      if (!a.crop_up) lat.origin += static_cast<double>(a.offset) * lat.pitch;
      ext = a.extent;
    }
    ext = bm_output_extent(ext, d.bm_kernel, d.level);
    lat.origin += static_cast<double>(d.bm_kernel - 1) * lat.pitch;
    const bool last = i + 1 == spec.decoder.size();
    if (d.aux_weight > 0 && !last) out.heads.push_back({d.level, d.aux_weight, false, ext, lat});
    if (last) {
      const std::size_t fe = (ext - 1) * kUpStride + d.up_kernel;
      out.heads.push_back({d.level, spec.final_weight, true, fe, upsampled(lat, d.up_kernel)});
      out.final_extent = fe;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> boundary_aware(const BasicTensor<T>& x, const BasicTensor<T>& w1, const BasicTensor<T>& b1,
                              const BasicTensor<T>& w2, const BasicTensor<T>& b2, BmCache<T>* cache) {
  if (w1.extent(0) != x.channels() || w2.extent(0) != x.channels() || w1.extent(1) != x.channels()) {
    throw DimensionError("boundary_aware: axis channel: input has " + std::to_string(x.channels()) +
                         " channels, module expects " + std::to_string(w1.extent(1)));
  }
  const std::size_t k = w1.extent(2);
  const std::size_t out_h = bm_output_extent(x.height(), k, 0);
  const std::size_t out_w = bm_output_extent(x.width(), k, 0);
  BasicTensor<T> hidden = relu(conv2d_valid(x, w1, b1, 1));
  BasicTensor<T> out = conv2d_valid(hidden, w2, b2, 1);
  add_inplace(out, crop_center_to(x, out_h, out_w));
  if (cache) *cache = {x, std::move(hidden)};
  return out;
}

template <typename T>
BmGrads<T> boundary_aware_backward(const BmCache<T>& cache, const BasicTensor<T>& w1, const BasicTensor<T>& w2,
                                   const BasicTensor<T>& grad_out) {
  const auto& x = cache.input;
  BmGrads<T> g;
  ConvGrads<T> g2 = conv2d_backward(cache.hidden, w2, grad_out, 1);
  ConvGrads<T> g1 = conv2d_backward(x, w1, relu_backward(cache.hidden, g2.input), 1);
  const CropWindow wy = center_crop_window(x.height(), grad_out.height());
  const CropWindow wx = center_crop_window(x.width(), grad_out.width());
  g.input = crop_backward(grad_out, x.shape(), wy.offset, wx.offset);
  add_inplace(g.input, g1.input);
  g.w1 = std::move(g1.weight);
  g.b1 = std::move(g1.bias);
  g.w2 = std::move(g2.weight);
  g.b2 = std::move(g2.bias);
  return g;
}

template <typename T>
std::vector<ScoreMap<T>> decoder_forward(const std::map<int, BasicTensor<T>>& refined, const NetworkSpec& spec,
                                         const NetworkParams<T>& params, DecoderCache<T>* cache) {
  namespace pn = param_names;
  if (!spec.has_decoder()) throw ConfigError("network has no decoder");
  std::vector<ScoreMap<T>> maps;
  if (cache) cache->steps.clear();
  BasicTensor<T> prev;
  for (std::size_t i = 0; i < spec.decoder.size(); ++i) {
    const auto& d = spec.decoder[i];
    const bool last = i + 1 == spec.decoder.size();
    typename DecoderCache<T>::Step step;
    step.level = d.level;
    auto it = refined.find(d.level);
    if (it == refined.end()) throw DimensionError("decoder_forward: missing refined features for level " + std::to_string(d.level));
    const BasicTensor<T>& skip = it->second;

    BasicTensor<T> sum;
    if (i == 0) {
      sum = skip;
    } else {
      const int upper = spec.decoder[i - 1].level;
      BasicTensor<T> up = transposed_conv2d(prev, params.at(pn::decoder(upper, "up.w")),
                                            params.at(pn::decoder(upper, "up.b")).data(), kUpStride);
      if (up.height() != up.width() || skip.height() != skip.width()) {
        throw GeometryError("decoder_forward: non-square features at level " + std::to_string(d.level));
      }
      const Alignment a = align(up.height(), skip.height(), d.level);
      step.has_skip = true;
      step.up_cropped = a.crop_up;
      step.crop_y = step.crop_x = a.offset;
      step.up_shape = up.shape();
      step.skip_shape = skip.shape();
      if (a.crop_up) {
        sum = crop(up, a.offset, a.offset, a.extent, a.extent);
        add_inplace(sum, skip);
      } else {
        sum = std::move(up);
        add_inplace(sum, crop(skip, a.offset, a.offset, a.extent, a.extent));
      }
    }

    BasicTensor<T> out = boundary_aware(sum, params.at(pn::decoder(d.level, "bm1.w")), params.at(pn::decoder(d.level, "bm1.b")),
                                        params.at(pn::decoder(d.level, "bm2.w")), params.at(pn::decoder(d.level, "bm2.b")),
                                        cache ? &step.bm : nullptr);
    if (d.aux_weight > 0 && !last) {
      step.aux_index = static_cast<int>(maps.size());
      maps.push_back({d.level, d.aux_weight, false,
                      conv2d_valid(out, params.at(pn::decoder(d.level, "aux.w")), params.at(pn::decoder(d.level, "aux.b")), 1)});
    }
    if (last) {
      step.final_index = static_cast<int>(maps.size());
      maps.push_back({d.level, spec.final_weight, true,
                      transposed_conv2d(out, params.at(pn::decoder(d.level, "final.w")),
                                        params.at(pn::decoder(d.level, "final.b")).data(), kUpStride)});
    }
    if (cache) {
      step.bm_out = out;
      cache->steps.push_back(std::move(step));
    }
    prev = std::move(out);
  }
  return maps;
}

template <typename T>
std::map<int, BasicTensor<T>> decoder_backward(const DecoderCache<T>& cache, const std::vector<BasicTensor<T>>& grad_maps,
                                               const NetworkSpec& spec, const NetworkParams<T>& params,
                                               NetworkParams<T>& grads) {
  namespace pn = param_names;
  std::map<int, BasicTensor<T>> grad_refined;
  BasicTensor<T> carried;  // d loss / d (BM output) arriving from the step below
  bool have_carried = false;
  for (std::size_t r = cache.steps.size(); r-- > 0;) {
    const auto& step = cache.steps[r];
    const int L = step.level;
    BasicTensor<T> g_out(step.bm_out.shape());
    if (have_carried) add_inplace(g_out, carried);
    if (step.final_index >= 0) {
      ConvGrads<T> g = transposed_conv2d_backward(step.bm_out, params.at(pn::decoder(L, "final.w")),
                                                  grad_maps.at(static_cast<std::size_t>(step.final_index)), kUpStride);
      add_inplace(g_out, g.input);
      add_inplace(grads.at(pn::decoder(L, "final.w")), g.weight);
      add_inplace(grads.at(pn::decoder(L, "final.b")), g.bias);
    }
    if (step.aux_index >= 0) {
      ConvGrads<T> g = conv2d_backward(step.bm_out, params.at(pn::decoder(L, "aux.w")),
                                       grad_maps.at(static_cast<std::size_t>(step.aux_index)), 1);
      add_inplace(g_out, g.input);
      add_inplace(grads.at(pn::decoder(L, "aux.w")), g.weight);
      add_inplace(grads.at(pn::decoder(L, "aux.b")), g.bias);
    }
    BmGrads<T> bm = boundary_aware_backward(step.bm, params.at(pn::decoder(L, "bm1.w")), params.at(pn::decoder(L, "bm2.w")), g_out);
    add_inplace(grads.at(pn::decoder(L, "bm1.w")), bm.w1);
    add_inplace(grads.at(pn::decoder(L, "bm1.b")), bm.b1);
    add_inplace(grads.at(pn::decoder(L, "bm2.w")), bm.w2);
    add_inplace(grads.at(pn::decoder(L, "bm2.b")), bm.b2);

    BasicTensor<T> g_skip;
    if (!step.has_skip) {
      g_skip = std::move(bm.input);
      have_carried = false;
    } else {
      BasicTensor<T> g_up;
      if (step.up_cropped) {
        g_up = crop_backward(bm.input, step.up_shape, step.crop_y, step.crop_x);
        g_skip = std::move(bm.input);
      } else {
        g_skip = crop_backward(bm.input, step.skip_shape, step.crop_y, step.crop_x);
        g_up = std::move(bm.input);
      }
      const auto& upper = cache.steps[r - 1];
      ConvGrads<T> g = transposed_conv2d_backward(upper.bm_out, params.at(pn::decoder(upper.level, "up.w")), g_up, kUpStride);
      add_inplace(grads.at(pn::decoder(upper.level, "up.w")), g.weight);
      add_inplace(grads.at(pn::decoder(upper.level, "up.b")), g.bias);
      carried = std::move(g.input);
      have_carried = true;
    }
    auto [it, inserted] = grad_refined.emplace(L, g_skip);
    if (!inserted) add_inplace(it->second, g_skip);
  }
  (void)spec;
  return grad_refined;
}

#define PFA_INSTANTIATE_DECODER(T)                                                                                   \
  template BasicTensor<T> boundary_aware<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                            const BasicTensor<T>&, const BasicTensor<T>&, BmCache<T>*);              \
  template BmGrads<T> boundary_aware_backward<T>(const BmCache<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                                 const BasicTensor<T>&);                                             \
  template std::vector<ScoreMap<T>> decoder_forward<T>(const std::map<int, BasicTensor<T>>&, const NetworkSpec&,    \
                                                       const NetworkParams<T>&, DecoderCache<T>*);                   \
  template std::map<int, BasicTensor<T>> decoder_backward<T>(const DecoderCache<T>&,                                \
                                                             const std::vector<BasicTensor<T>>&, const NetworkSpec&, \
                                                             const NetworkParams<T>&, NetworkParams<T>&);

PFA_INSTANTIATE_DECODER(float)
PFA_INSTANTIATE_DECODER(double)

#undef PFA_INSTANTIATE_DECODER

}  // namespace pfa
