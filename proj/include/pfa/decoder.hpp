#pragma once

// Auxiliary segmentation decoder. Starting from the deepest configured
// level, each step refines features with a Boundary-aware Module, upsamples
// x2 with a transposed convolution and adds the centre-aligned refined
// features of the next finer level. Auxiliary 1x1 heads may follow any
// intermediate BM; a final transposed convolution emits the full-resolution
// 2-channel score map. The decoder is only used in training.

#include <map>
#include <vector>

#include "pfa/network.hpp"

namespace pfa {

struct DecoderHeadShape {
  int level = 0;
  double weight = 0.0;
  bool final = false;
  std::size_t extent = 0;
  Lattice lattice;  // centre of cell j in input pixels: origin + j * pitch
};

struct DecoderShapes {
  std::vector<DecoderHeadShape> heads;  // emission order: aux heads top-down, final last
  std::size_t final_extent = 0;
};

/// Shape and lattice propagation through the decoder for the trunk shapes in
/// `report`. Throws GeometryError on a misaligned skip connection.
DecoderShapes decoder_shapes(const NetworkSpec& spec, const ShapeReport& report);

// ---- Boundary-aware Module -------------------------------------------------

template <typename T>
struct BmCache {
  BasicTensor<T> input;
  BasicTensor<T> hidden;  // after ReLU
};

template <typename T>
struct BmGrads {
  BasicTensor<T> input, w1, b1, w2, b2;
};

/// x + Conv(ReLU(Conv(x))), both convs k x k valid and channel-preserving; x is
/// centre-cropped to the branch output so the residual sum aligns.
template <typename T>
BasicTensor<T> boundary_aware(const BasicTensor<T>& x, const BasicTensor<T>& w1, const BasicTensor<T>& b1,
                              const BasicTensor<T>& w2, const BasicTensor<T>& b2, BmCache<T>* cache = nullptr);

template <typename T>
BmGrads<T> boundary_aware_backward(const BmCache<T>& cache, const BasicTensor<T>& w1, const BasicTensor<T>& w2,
                                   const BasicTensor<T>& grad_out);

// ---- full decoder ------------------------------------------------------------

template <typename T>
struct ScoreMap {
  int level = 0;
  double weight = 0.0;
  bool final = false;
  BasicTensor<T> logits;  // [1, 2, h, w]
};

template <typename T>
struct DecoderCache {
  struct Step {
    int level = 0;
    BmCache<T> bm;
    BasicTensor<T> bm_out;
    bool has_skip = false;    // false only for the deepest step
    bool up_cropped = false;  // which operand of the skip sum was cropped
    std::size_t crop_y = 0, crop_x = 0;
    Shape up_shape, skip_shape;
    int aux_index = -1;       // position in the returned score maps
    int final_index = -1;
  };
  std::vector<Step> steps;
};

/// `refined` maps level -> X_i' for every decoder level.
template <typename T>
std::vector<ScoreMap<T>> decoder_forward(const std::map<int, BasicTensor<T>>& refined, const NetworkSpec& spec,
                                         const NetworkParams<T>& params, DecoderCache<T>* cache = nullptr);

/// `grad_maps` holds d loss / d logits for each map returned by
/// decoder_forward, in the same order. Parameter gradients are accumulated
/// into `grads`; returns d loss / d X_i'.
template <typename T>
std::map<int, BasicTensor<T>> decoder_backward(const DecoderCache<T>& cache, const std::vector<BasicTensor<T>>& grad_maps,
                                               const NetworkSpec& spec, const NetworkParams<T>& params,
                                               NetworkParams<T>& grads);

}  // namespace pfa
