#pragma once

// The detector: valid-convolution trunk, per-level global convolution,
// crop + average pooling, top-down sum M5 -> M4 -> M3 and the 1x1 softmax
// head.
//
// In train mode the input is one patch and every pooled level contributes a
// single cell. In dense mode the input is an ROI of extent
// patch + (tile - 1) * pitch, pitch = native_stride / alpha, and each level
// is average-pooled with the training crop as window and
// pool_stride / alpha as stride, yielding a tile x tile probability map.

#include <cstdint>
#include <map>
#include <vector>

#include "pfa/network.hpp"

namespace pfa {

enum class Mode { train, dense };

struct CostCounter {
  std::uint64_t macs = 0;       // convolution multiply-accumulates
  std::uint64_t pool_adds = 0;  // additions inside average pooling
};

struct ForwardOptions {
  Mode mode = Mode::train;
  std::size_t alpha = 1;
  /// Test hook: shifts the dense pooling window of the finest pooled level
  /// by this many cells. Zero in every production path.
  std::size_t fault_offset = 0;
  /// Also evaluate the global convolution on non-pooled levels (decoder input).
  bool decoder_features = false;
};

template <typename T>
struct GconvCache {
  BasicTensor<T> mid_a;  // after the first 1 x k conv
  BasicTensor<T> mid_b;  // after the first k x 1 conv
};

template <typename T>
struct DetectorCache {
  BasicTensor<T> input;
  std::vector<BasicTensor<T>> layers;  // trunk outputs after ReLU
  std::map<int, GconvCache<T>> gconv;
  std::map<int, BasicTensor<T>> refined;  // X_i'
  std::map<int, CropWindow> pool;         // pooled window per level (train mode)
  BasicTensor<T> merged;                  // M at the finest pooled level
  BasicTensor<T> logits;
};

/// Sum of the (1 x k then k x 1) and (k x 1 then 1 x k) branches plus bias.
template <typename T>
BasicTensor<T> global_conv(const BasicTensor<T>& x, const NetworkParams<T>& params, int level,
                           GconvCache<T>* cache = nullptr, CostCounter* cost = nullptr);

/// Accumulates parameter gradients into `grads`, returns d loss / d x.
template <typename T>
BasicTensor<T> global_conv_backward(const BasicTensor<T>& x, const GconvCache<T>& cache,
                                    const NetworkParams<T>& params, int level, const BasicTensor<T>& grad_out,
                                    NetworkParams<T>& grads);

/// Pools one refined level to its M contribution.
template <typename T>
BasicTensor<T> pfe_pool(const BasicTensor<T>& refined, const NetworkSpec& spec, int level, const ForwardOptions& opt,
                        std::size_t tile, const ShapeReport& patch_shapes, CostCounter* cost = nullptr);

/// Tile extent for an ROI of `extent` pixels in dense mode; throws
/// GeometryError naming the nearest valid extents when it does not fit.
std::size_t tile_for_extent(const NetworkSpec& spec, std::size_t alpha, std::size_t extent);

/// Returns softmax probabilities [N, 2, tile, tile] (tile = 1 in train mode).
template <typename T>
BasicTensor<T> detector_forward(const BasicTensor<T>& input, const NetworkSpec& spec, const NetworkParams<T>& params,
                                const ForwardOptions& opt = {}, CostCounter* cost = nullptr,
                                DetectorCache<T>* cache = nullptr);

/// Backward through the head, pooling, global convolutions and trunk of a
/// train-mode forward. `grad_logits` may be empty (shape {1}) when only the
/// decoder contributes; `grad_refined` adds d loss / d X_i' from the decoder.
/// Parameter gradients are accumulated into `grads`.
template <typename T>
void detector_backward(const DetectorCache<T>& cache, const BasicTensor<T>* grad_logits,
                       const std::map<int, BasicTensor<T>>& grad_refined, const NetworkSpec& spec,
                       const NetworkParams<T>& params, NetworkParams<T>& grads);

}  // namespace pfa
