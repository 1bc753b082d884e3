#include "pfa/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pfa/ops.hpp"

namespace pfa {

namespace {

void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 0.5)) throw ConfigError("truncation point gamma must lie in [0, 0.5], got " + std::to_string(gamma));
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

// Per-pixel loss and d loss / d logits for one location. probs/grad are the
// two channel values.
template <typename T>
double pixel_term(T p0, T p1, int label, double gamma, T& g0, T& g1) {
  const double pt = clamp_prob(label ? p1 : p0);
  const double dl = truncated_bce_grad(pt, gamma);
  // dl/dz_c = l'(p_t) * p_t * (delta_ct - p_c)
  const double d0 = dl * pt * ((label == 0 ? 1.0 : 0.0) - p0);
  const double d1 = dl * pt * ((label == 1 ? 1.0 : 0.0) - p1);
  g0 = static_cast<T>(d0);
  g1 = static_cast<T>(d1);
  return truncated_bce(pt, gamma);
}

}  // namespace

void LossConfig::validate() const {
  check_gamma(gamma);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("trade-off weight lambda must be >= 0");
}

double truncated_bce(double p, double gamma) {
  check_gamma(gamma);
  p = clamp_prob(p);
  if (p >= gamma) return -std::log(p);
  return -std::log(gamma) + 0.5 * (1.0 - p * p / (gamma * gamma));
}

double truncated_bce_grad(double p, double gamma) {
  check_gamma(gamma);
  p = clamp_prob(p);
  if (p >= gamma) return -1.0 / p;
  return -p / (gamma * gamma);
}

template <typename T>
LossValue<T> classification_loss(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 4 || logits.channels() != 2 || logits.height() != 1 || logits.width() != 1) {
    throw DimensionError("classification_loss: logits must be [N,2,1,1], got " + to_string(logits.shape()));
  }
  if (labels.size() != logits.batch()) {
    throw DimensionError("classification_loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(logits.batch()));
  }
  const BasicTensor<T> prob = softmax_channels(logits);
  LossValue<T> out{0.0, BasicTensor<T>(logits.shape())};
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (std::size_t n = 0; n < labels.size(); ++n) {
    T g0, g1;
    out.value += pixel_term(prob(n, 0, 0, 0), prob(n, 1, 0, 0), labels[n], 0.0, g0, g1) * inv;
    out.grad_logits(n, 0, 0, 0) = static_cast<T>(g0 * inv);
    out.grad_logits(n, 1, 0, 0) = static_cast<T>(g1 * inv);
  }
  return out;
}

template <typename T>
LossValue<T> segmentation_loss(const BasicTensor<T>& logits, const Mask& mask, double gamma) {
  check_gamma(gamma);
  if (logits.rank() != 4 || logits.batch() != 1 || logits.channels() != 2) {
    throw DimensionError("segmentation_loss: logits must be [1,2,h,w], got " + to_string(logits.shape()));
  }
  if (mask.rank() != 2 || mask.extent(0) != logits.height() || mask.extent(1) != logits.width()) {
    throw DimensionError("segmentation_loss: mask " + to_string(mask.shape()) + " vs logits " + to_string(logits.shape()));
  }
  const BasicTensor<T> prob = softmax_channels(logits);
  LossValue<T> out{0.0, BasicTensor<T>(logits.shape())};
  const std::size_t h = logits.height(), w = logits.width();
  const double inv = 1.0 / static_cast<double>(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      T g0, g1;
      out.value += pixel_term(prob(0, 0, y, x), prob(0, 1, y, x), mask[y * w + x] ? 1 : 0, gamma, g0, g1) * inv;
      out.grad_logits(0, 0, y, x) = static_cast<T>(g0 * inv);
      out.grad_logits(0, 1, y, x) = static_cast<T>(g1 * inv);
    }
  }
  return out;
}

Mask downscale_mask(const Mask& mask, std::size_t extent) {
  if (mask.rank() != 2 || mask.extent(0) != mask.extent(1)) throw DimensionError("downscale_mask: square [h,w] mask required");
  if (extent == 0) throw GeometryError("downscale_mask: extent must be >= 1");
  const std::size_t m = mask.extent(0);
  Mask out({extent, extent});
  for (std::size_t y = 0; y < extent; ++y) {
    const std::size_t sy = (2 * y + 1) * m / (2 * extent);
    for (std::size_t x = 0; x < extent; ++x) {
      const std::size_t sx = (2 * x + 1) * m / (2 * extent);
      out[y * extent + x] = mask[sy * m + sx];
    }
  }
  return out;
}

template LossValue<float> classification_loss<float>(const BasicTensor<float>&, const std::vector<int>&);
template LossValue<double> classification_loss<double>(const BasicTensor<double>&, const std::vector<int>&);
template LossValue<float> segmentation_loss<float>(const BasicTensor<float>&, const Mask&, double);
template LossValue<double> segmentation_loss<double>(const BasicTensor<double>&, const Mask&, double);

}  // namespace pfa
