#pragma once

// Network primitives on NCHW tensors. Every spatial op uses "valid"
// geometry: windows must lie fully inside the input, nothing is padded.
//
// Kernels are OpenMP-parallel over (batch, channel) slices. Each output
// element is owned by exactly one thread and accumulated in a fixed order
// (input channel, kernel row, kernel column), so results do not depend on
// the thread count or on the spatial extent of the input.

#include <cstddef>
#include <cstdint>
#include <span>

#include "pfa/tensor.hpp"

namespace pfa {

/// Rational crop fraction such as 1/4.
struct Fraction {
  std::size_t num = 1;
  std::size_t den = 1;

  /// round(num/den * extent), halves rounded up.
  std::size_t of(std::size_t extent) const { return (2 * num * extent + den) / (2 * den); }
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

/// Centered sub-window of one axis. Odd slack puts the extra cell on the
/// bottom/right, i.e. the window leans toward the top-left.
struct CropWindow {
  std::size_t offset = 0;
  std::size_t size = 0;
};

CropWindow center_crop_window(std::size_t extent, Fraction fraction);
CropWindow center_crop_window(std::size_t extent, std::size_t size);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // shape [Cout]
};

/// Output extent of a valid window of size k stepped by stride; throws if
/// the window does not fit.
std::size_t valid_extent(std::size_t in, std::size_t k, std::size_t stride, const char* axis);

// ---- convolution ---------------------------------------------------------

/// Cross-correlation. x: [N,Ci,H,W], w: [Co,Ci,kh,kw], bias: empty or Co values.
template <typename T>
BasicTensor<T> conv2d_valid(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            std::span<const T> bias, std::size_t stride);

template <typename T>
BasicTensor<T> conv2d_valid(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            const BasicTensor<T>& bias, std::size_t stride) {
  return conv2d_valid<T>(x, w, bias.data(), stride);
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>& grad_out, std::size_t stride);

/// Adjoint of conv2d_valid with respect to its input. x: [N,Co,h,w],
/// w: [Co,Ci,kh,kw] (the forward convolution's layout), output [N,Ci,H,W]
/// with H = (h-1)*stride + kh.
template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                 std::span<const T> bias, std::size_t stride);

template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride) {
  return transposed_conv2d<T>(x, w, std::span<const T>{}, stride);
}

/// Gradients of transposed_conv2d; `bias` in the result has Ci entries.
template <typename T>
ConvGrads<T> transposed_conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                        const BasicTensor<T>& grad_out, std::size_t stride);

// ---- pooling / reshaping -------------------------------------------------

/// Mean over kernel x kernel windows whose top-left corners sit at
/// offset + i*stride on both axes.
template <typename T>
BasicTensor<T> avg_pool(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t offset);

template <typename T>
BasicTensor<T> avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                 std::size_t kernel, std::size_t stride, std::size_t offset);

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

/// Scatters grad into a zero tensor of `input_shape` at (y0, x0).
template <typename T>
BasicTensor<T> crop_backward(const BasicTensor<T>& grad, const Shape& input_shape, std::size_t y0,
                             std::size_t x0);

template <typename T>
BasicTensor<T> crop_center(const BasicTensor<T>& x, Fraction fraction);

/// Crops x symmetrically to h x w (see center_crop_window).
template <typename T>
BasicTensor<T> crop_center_to(const BasicTensor<T>& x, std::size_t h, std::size_t w);

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t factor);

// ---- elementwise ---------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// grad * [x > 0]
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

/// Softmax across the channel axis at every (n, y, x).
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x);

// ---- cost accounting -------------------------------------------------------

/// Multiply-accumulates performed by conv2d_valid for these shapes.
std::uint64_t conv2d_macs(const Shape& x, const Shape& w, std::size_t stride);
/// Additions performed by avg_pool (kernel^2 per output element).
std::uint64_t avg_pool_adds(const Shape& out, std::size_t kernel);

}  // namespace pfa
