#pragma once

// Joint detector / decoder training: L = L_cls + lambda * sum_h w_h L_seg,h.
// The decoder only shares the trunk and global convolutions with the
// detector; it never feeds back into the classifier.

#include <cstdint>
#include <vector>

#include "pfa/decoder.hpp"
#include "pfa/detector.hpp"
#include "pfa/loss.hpp"

namespace pfa {

struct TrainSample {
  Tensor image;  // [1, C, patch, patch], values in [0, 1]
  int label = 0;
  Mask mask;     // [mask_extent, mask_extent]; shape {1} when absent
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double seg = 0.0;  // weighted sum over heads, before lambda
};

/// Loss of one sample and its parameter gradients (accumulated into `grads`,
/// scaled by `weight`). The decoder runs when params hold decoder tensors
/// and the sample has a mask.
template <typename T>
LossBreakdown synergy_loss(const NetworkSpec& spec, const NetworkParams<T>& params, const BasicTensor<T>& image,
                           int label, const Mask& mask, const LossConfig& cfg, NetworkParams<T>* grads,
                           double weight = 1.0);

struct SgdConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}
  /// v = momentum * v + g; p -= lr * v
  void step(NetworkParams<float>& params, const NetworkParams<float>& grads);

 private:
  SgdConfig cfg_;
  NetworkParams<float> velocity_;
};

struct TrainResult {
  NetworkParams<float> params;
  std::vector<LossBreakdown> curve;  // mean over each step's batch
};

/// Minibatch SGD over `data`; batches are drawn with a seeded generator.
/// Throws ValidationError (with step and loss parts) on a non-finite loss.
TrainResult train_toy(const NetworkSpec& spec, NetworkParams<float> params, const std::vector<TrainSample>& data,
                      const LossConfig& loss, const SgdConfig& sgd);

}  // namespace pfa
