#pragma once

// Serial, loop-for-loop reference kernels. They follow the textbook
// definitions directly and are kept for tests and benchmarks; nothing in
// the production path calls them.

#include <span>

#include "pfa/tensor.hpp"

namespace pfa::reference {

template <typename T>
BasicTensor<T> conv2d_valid(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                            std::size_t stride) {
  const std::size_t N = x.batch(), Ci = x.channels(), H = x.height(), W = x.width();
  const std::size_t Co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != Ci) throw DimensionError("reference::conv2d_valid: channel mismatch");
  if (H < kh || W < kw) throw DimensionError("reference::conv2d_valid: kernel larger than input");
  const std::size_t oh = (H - kh) / stride + 1, ow = (W - kw) / stride + 1;
  BasicTensor<T> out({N, Co, oh, ow});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          T acc{};
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) acc += x(n, ci, y * stride + ky, xo * stride + kx) * w(co, ci, ky, kx);
          out(n, co, y, xo) = acc + (bias.empty() ? T{} : bias[co]);
        }
  return out;
}

/// Gather form of the transposed convolution: every output pixel collects
/// the taps that land on it.
template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride) {
  const std::size_t N = x.batch(), Co = x.channels(), h = x.height(), wd = x.width();
  const std::size_t Ci = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const std::size_t H = (h - 1) * stride + kh, W = (wd - 1) * stride + kw;
  BasicTensor<T> out({N, Ci, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ci = 0; ci < Ci; ++ci)
      for (std::size_t Y = 0; Y < H; ++Y)
        for (std::size_t X = 0; X < W; ++X) {
          T acc{};
          for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t ky = 0; ky < kh && ky <= Y; ++ky)
              for (std::size_t kx = 0; kx < kw && kx <= X; ++kx) {
                if ((Y - ky) % stride || (X - kx) % stride) continue;
                const std::size_t y = (Y - ky) / stride, xi = (X - kx) / stride;
                if (y < h && xi < wd) acc += x(n, co, y, xi) * w(co, ci, ky, kx);
              }
          out(n, ci, Y, X) = acc;
        }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t offset) {
  const std::size_t oh = (x.height() - offset - kernel) / stride + 1;
  const std::size_t ow = (x.width() - offset - kernel) / stride + 1;
  BasicTensor<T> out({x.batch(), x.channels(), oh, ow});
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          T acc{};
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) acc += x(n, c, offset + y * stride + ky, offset + xo * stride + kx);
          out(n, c, y, xo) = acc / static_cast<T>(kernel * kernel);
        }
  return out;
}

}  // namespace pfa::reference
