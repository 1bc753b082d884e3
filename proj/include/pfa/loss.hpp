#pragma once

// Truncated cross-entropy for the segmentation heads and plain
// cross-entropy for the detector, evaluated on 2-channel logits.
//
//   l(p) = -ln p                              p >= gamma
//   l(p) = -ln gamma + (1 - p^2 / gamma^2)/2  p <  gamma
//
// p is the softmax probability of the true class, clamped to
// [eps, 1 - eps] first. The quadratic branch caps |dl/dp| at 1/gamma.

#include <cstdint>

#include "pfa/tensor.hpp"

namespace pfa {

inline constexpr double kProbEpsilon = 1e-7;

struct LossConfig {
  double gamma = 0.04;
  double lambda = 0.5;

  /// Throws ConfigError unless gamma in [0, 0.5] and lambda >= 0.
  void validate() const;
};

double truncated_bce(double p, double gamma);
/// d truncated_bce / d p
double truncated_bce_grad(double p, double gamma);

using Mask = BasicTensor<std::uint8_t>;  // [h, w], values 0 / 1

template <typename T>
struct LossValue {
  double value = 0.0;
  BasicTensor<T> grad_logits;  // same shape as the logits
};

/// Mean cross-entropy over the batch; logits [N, 2, 1, 1], labels 0 / 1.
template <typename T>
LossValue<T> classification_loss(const BasicTensor<T>& logits, const std::vector<int>& labels);

/// Mean truncated loss over the pixels of a [1, 2, h, w] logit map.
template <typename T>
LossValue<T> segmentation_loss(const BasicTensor<T>& logits, const Mask& mask, double gamma);

/// Nearest-neighbour resampling of a square mask to extent x extent:
/// out[j] = in[floor((j + 0.5) * M / extent)].
Mask downscale_mask(const Mask& mask, std::size_t extent);

}  // namespace pfa
