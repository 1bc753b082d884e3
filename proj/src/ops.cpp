#include "pfa/ops.hpp"

#include <string>

namespace pfa {

namespace {

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw DimensionError(std::string(what) + ": expected rank-4 NCHW tensor, got " + to_string(s));
  }
}

using Index = std::ptrdiff_t;

// y[n, ci, oy*s+ky, ox*s+kx] += w[co, ci, ky, kx] * g[n, co, oy, ox]
// `out` must already be sized and zeroed (or hold a bias).
template <typename T>
void scatter_transposed(const BasicTensor<T>& g, const BasicTensor<T>& w, std::size_t stride,
                        BasicTensor<T>& out) {
  const std::size_t n_batch = g.batch(), co_n = g.channels(), gh = g.height(), gw = g.width();
  const std::size_t ci_n = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const std::size_t ow = out.width();
  const Index slices = static_cast<Index>(n_batch * ci_n);
#pragma omp parallel for schedule(static)
  for (Index s = 0; s < slices; ++s) {
    const std::size_t n = static_cast<std::size_t>(s) / ci_n, ci = static_cast<std::size_t>(s) % ci_n;
    T* dst = &out(n, ci, 0, 0);
    for (std::size_t co = 0; co < co_n; ++co) {
      const T* src = &g(n, co, 0, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = w(co, ci, ky, kx);
          for (std::size_t y = 0; y < gh; ++y) {
            T* row = dst + (y * stride + ky) * ow + kx;
            const T* grow = src + y * gw;
            for (std::size_t x = 0; x < gw; ++x) row[x * stride] += wv * grow[x];
          }
        }
      }
    }
  }
}

}  // namespace

CropWindow center_crop_window(std::size_t extent, Fraction fraction) {
  if (fraction.den == 0 || fraction.num == 0 || fraction.num > fraction.den) {
    throw GeometryError("crop fraction " + std::to_string(fraction.num) + "/" + std::to_string(fraction.den) +
                        " must lie in (0, 1]");
  }
  const std::size_t size = fraction.of(extent);
  if (size == 0) {
    throw GeometryError("crop of extent " + std::to_string(extent) + " by " + std::to_string(fraction.num) + "/" +
                        std::to_string(fraction.den) + " is empty");
  }
  return center_crop_window(extent, size);
}

CropWindow center_crop_window(std::size_t extent, std::size_t size) {
  if (size == 0 || size > extent) {
    throw GeometryError("crop size " + std::to_string(size) + " does not fit extent " + std::to_string(extent));
  }
  return {(extent - size) / 2, size};
}

std::size_t valid_extent(std::size_t in, std::size_t k, std::size_t stride, const char* axis) {
  if (stride == 0) throw ConfigError("stride must be >= 1");
  if (k == 0) throw ConfigError("kernel extent must be >= 1");
  if (in < k) {
    throw DimensionError(std::string("axis ") + axis + ": input extent " + std::to_string(in) +
                         " is smaller than kernel extent " + std::to_string(k));
  }
  return (in - k) / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d_valid(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                            std::size_t stride) {
  require_rank4(x.shape(), "conv2d_valid input");
  require_rank4(w.shape(), "conv2d_valid weight");
  if (x.channels() != w.extent(1)) {
    throw DimensionError("conv2d_valid: axis channel: input has " + std::to_string(x.channels()) +
                         " channels, kernel expects " + std::to_string(w.extent(1)));
  }
  const std::size_t co_n = w.extent(0), ci_n = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (!bias.empty() && bias.size() != co_n) {
    throw DimensionError("conv2d_valid: bias has " + std::to_string(bias.size()) + " entries for " +
                         std::to_string(co_n) + " output channels");
  }
  const std::size_t oh = valid_extent(x.height(), kh, stride, "height");
  const std::size_t ow = valid_extent(x.width(), kw, stride, "width");
  BasicTensor<T> out({x.batch(), co_n, oh, ow});
  const std::size_t xw = x.width();
  const Index slices = static_cast<Index>(x.batch() * co_n);
#pragma omp parallel for schedule(static)
  for (Index s = 0; s < slices; ++s) {
    const std::size_t n = static_cast<std::size_t>(s) / co_n, co = static_cast<std::size_t>(s) % co_n;
    T* dst = &out(n, co, 0, 0);
    if (!bias.empty()) std::fill(dst, dst + oh * ow, bias[co]);
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const T* src = &x(n, ci, 0, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = w(co, ci, ky, kx);
          for (std::size_t y = 0; y < oh; ++y) {
            T* row = dst + y * ow;
            const T* in = src + (y * stride + ky) * xw + kx;
            if (stride == 1) {
              for (std::size_t xo = 0; xo < ow; ++xo) row[xo] += wv * in[xo];
            } else {
              for (std::size_t xo = 0; xo < ow; ++xo) row[xo] += wv * in[xo * stride];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& grad_out,
                             std::size_t stride) {
  require_rank4(grad_out.shape(), "conv2d_backward grad_out");
  const std::size_t co_n = w.extent(0), ci_n = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const Shape expected{x.batch(), co_n, valid_extent(x.height(), kh, stride, "height"),
                       valid_extent(x.width(), kw, stride, "width")};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d_backward: grad_out shape " + to_string(grad_out.shape()) +
                         " differs from forward output " + to_string(expected));
  }
  if (x.channels() != ci_n) throw DimensionError("conv2d_backward: axis channel mismatch");
  const std::size_t oh = expected[2], ow = expected[3], xw = x.width();

  ConvGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(w.shape()), BasicTensor<T>({co_n})};
  scatter_transposed(grad_out, w, stride, g.input);

#pragma omp parallel for schedule(static)
  for (Index c = 0; c < static_cast<Index>(co_n); ++c) {
    const std::size_t co = static_cast<std::size_t>(c);
    T bsum{};
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const T* go = &grad_out(n, co, 0, 0);
      for (std::size_t i = 0; i < oh * ow; ++i) bsum += go[i];
    }
    g.bias[co] = bsum;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T acc{};
          for (std::size_t n = 0; n < x.batch(); ++n) {
            const T* go = &grad_out(n, co, 0, 0);
            const T* src = &x(n, ci, 0, 0);
            for (std::size_t y = 0; y < oh; ++y) {
              const T* in = src + (y * stride + ky) * xw + kx;
              const T* gr = go + y * ow;
              for (std::size_t xo = 0; xo < ow; ++xo) acc += gr[xo] * in[xo * stride];
            }
          }
          g.weight(co, ci, ky, kx) = acc;
        }
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                                 std::size_t stride) {
  require_rank4(x.shape(), "transposed_conv2d input");
  require_rank4(w.shape(), "transposed_conv2d weight");
  if (stride == 0) throw ConfigError("transposed_conv2d: stride must be >= 1");
  if (x.channels() != w.extent(0)) {
    throw DimensionError("transposed_conv2d: axis channel: input has " + std::to_string(x.channels()) +
                         " channels, kernel expects " + std::to_string(w.extent(0)));
  }
  const std::size_t ci_n = w.extent(1);
  if (!bias.empty() && bias.size() != ci_n) throw DimensionError("transposed_conv2d: bias length mismatch");
  BasicTensor<T> out({x.batch(), ci_n, (x.height() - 1) * stride + w.extent(2), (x.width() - 1) * stride + w.extent(3)});
  if (!bias.empty()) {
    for (std::size_t n = 0; n < out.batch(); ++n)
      for (std::size_t c = 0; c < ci_n; ++c) {
        T* p = &out(n, c, 0, 0);
        std::fill(p, p + out.height() * out.width(), bias[c]);
      }
  }
  scatter_transposed(x, w, stride, out);
  return out;
}

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                        const BasicTensor<T>& grad_out, std::size_t stride) {
  const Shape expected{x.batch(), w.extent(1), (x.height() - 1) * stride + w.extent(2),
                       (x.width() - 1) * stride + w.extent(3)};
  if (grad_out.shape() != expected) {
    throw DimensionError("transposed_conv2d_backward: grad_out shape " + to_string(grad_out.shape()) +
                         " differs from forward output " + to_string(expected));
  }
  // y = A^T x, so dL/dx = A g and dL/dw is conv2d's weight gradient with the
  // roles of input and output gradient exchanged.
  ConvGrads<T> g;
  g.input = conv2d_valid<T>(grad_out, w, std::span<const T>{}, stride);
  g.weight = conv2d_backward<T>(grad_out, w, x, stride).weight;
  g.bias = BasicTensor<T>({w.extent(1)});
  for (std::size_t n = 0; n < grad_out.batch(); ++n)
    for (std::size_t c = 0; c < grad_out.channels(); ++c) {
      const T* p = &grad_out(n, c, 0, 0);
      T acc{};
      for (std::size_t i = 0; i < grad_out.height() * grad_out.width(); ++i) acc += p[i];
      g.bias[c] += acc;
    }
  return g;
}

template <typename T>
BasicTensor<T> avg_pool(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t offset) {
  require_rank4(x.shape(), "avg_pool");
  if (kernel == 0 || stride == 0) throw ConfigError("avg_pool: kernel and stride must be >= 1");
  if (offset + kernel > x.height() || offset + kernel > x.width()) {
    throw GeometryError("avg_pool: window of " + std::to_string(kernel) + " at offset " + std::to_string(offset) +
                        " exceeds spatial extent " + std::to_string(x.height()) + "x" + std::to_string(x.width()));
  }
  const std::size_t oh = (x.height() - offset - kernel) / stride + 1;
  const std::size_t ow = (x.width() - offset - kernel) / stride + 1;
  BasicTensor<T> out({x.batch(), x.channels(), oh, ow});
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  const Index slices = static_cast<Index>(x.batch() * x.channels());
#pragma omp parallel for schedule(static)
  for (Index s = 0; s < slices; ++s) {
    const std::size_t n = static_cast<std::size_t>(s) / x.channels(), c = static_cast<std::size_t>(s) % x.channels();
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T acc{};
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += x(n, c, offset + y * stride + ky, offset + xo * stride + kx);
        out(n, c, y, xo) = acc * inv;
      }
  }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape, std::size_t kernel,
                                 std::size_t stride, std::size_t offset) {
  require_rank4(input_shape, "avg_pool_backward");
  BasicTensor<T> gx(input_shape);
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  for (std::size_t n = 0; n < grad_out.batch(); ++n)
    for (std::size_t c = 0; c < grad_out.channels(); ++c)
      for (std::size_t y = 0; y < grad_out.height(); ++y)
        for (std::size_t xo = 0; xo < grad_out.width(); ++xo) {
          const T g = grad_out(n, c, y, xo) * inv;
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) gx(n, c, offset + y * stride + ky, offset + xo * stride + kx) += g;
        }
  return gx;
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  require_rank4(x.shape(), "crop");
  if (h == 0 || w == 0) throw GeometryError("crop: zero-extent window");
  if (y0 + h > x.height() || x0 + w > x.width()) {
    throw GeometryError("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y0) +
                        "," + std::to_string(x0) + ") exceeds " + std::to_string(x.height()) + "x" +
                        std::to_string(x.width()));
  }
  BasicTensor<T> out({x.batch(), x.channels(), h, w});
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const T* src = &x(n, c, y0 + y, x0);
        std::copy(src, src + w, &out(n, c, y, 0));
      }
  return out;
}

template <typename T>
BasicTensor<T> crop_backward(const BasicTensor<T>& grad, const Shape& input_shape, std::size_t y0, std::size_t x0) {
  BasicTensor<T> gx(input_shape);
  for (std::size_t n = 0; n < grad.batch(); ++n)
    for (std::size_t c = 0; c < grad.channels(); ++c)
      for (std::size_t y = 0; y < grad.height(); ++y) {
        const T* src = &grad(n, c, y, 0);
        std::copy(src, src + grad.width(), &gx(n, c, y0 + y, x0));
      }
  return gx;
}

template <typename T>
BasicTensor<T> crop_center(const BasicTensor<T>& x, Fraction fraction) {
  require_rank4(x.shape(), "crop_center");
  const CropWindow wy = center_crop_window(x.height(), fraction);
  const CropWindow wx = center_crop_window(x.width(), fraction);
  return crop(x, wy.offset, wx.offset, wy.size, wx.size);
}

template <typename T>
BasicTensor<T> crop_center_to(const BasicTensor<T>& x, std::size_t h, std::size_t w) {
  require_rank4(x.shape(), "crop_center_to");
  const CropWindow wy = center_crop_window(x.height(), h);
  const CropWindow wx = center_crop_window(x.width(), w);
  return crop(x, wy.offset, wx.offset, h, w);
}

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t factor) {
  require_rank4(x.shape(), "upsample_nearest");
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be >= 1");
  BasicTensor<T> out({x.batch(), x.channels(), x.height() * factor, x.width() * factor});
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c)
      for (std::size_t y = 0; y < out.height(); ++y)
        for (std::size_t xo = 0; xo < out.width(); ++xo) out(n, c, y, xo) = x(n, c, y / factor, xo / factor);
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out = x;
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad) {
  if (x.shape() != grad.shape()) throw DimensionError("relu_backward: shape mismatch");
  BasicTensor<T> out = grad;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!(x[i] > T(0))) out[i] = T(0);
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  BasicTensor<T> out = x;
  for (auto& v : out.data()) v *= factor;
  return out;
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x) {
  require_rank4(x.shape(), "softmax_channels");
  if (x.channels() < 2) throw DimensionError("softmax_channels: axis channel: need at least 2 channels");
  BasicTensor<T> out(x.shape());
  const std::size_t plane = x.height() * x.width();
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = n * x.channels() * plane + i;
      T m = x[base];
      for (std::size_t c = 1; c < x.channels(); ++c) m = std::max(m, x[base + c * plane]);
      T sum{};
      for (std::size_t c = 0; c < x.channels(); ++c) {
        const T e = std::exp(x[base + c * plane] - m);
        out[base + c * plane] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < x.channels(); ++c) out[base + c * plane] /= sum;
    }
  return out;
}

std::uint64_t conv2d_macs(const Shape& x, const Shape& w, std::size_t stride) {
  const std::uint64_t oh = valid_extent(x[2], w[2], stride, "height");
  const std::uint64_t ow = valid_extent(x[3], w[3], stride, "width");
  return x[0] * oh * ow * w[0] * w[1] * w[2] * w[3];
}

std::uint64_t avg_pool_adds(const Shape& out, std::size_t kernel) {
  return static_cast<std::uint64_t>(out[0]) * out[1] * out[2] * out[3] * kernel * kernel;
}

#define PFA_INSTANTIATE_OPS(T)                                                                                      \
  template BasicTensor<T> conv2d_valid<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>,        \
                                          std::size_t);                                                             \
  template ConvGrads<T> conv2d_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                           std::size_t);                                                            \
  template BasicTensor<T> transposed_conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>,   \
                                               std::size_t);                                                        \
  template ConvGrads<T> transposed_conv2d_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                                      const BasicTensor<T>&, std::size_t);                          \
  template BasicTensor<T> avg_pool<T>(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);                \
  template BasicTensor<T> avg_pool_backward<T>(const BasicTensor<T>&, const Shape&, std::size_t, std::size_t,      \
                                               std::size_t);                                                        \
  template BasicTensor<T> crop<T>(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);       \
  template BasicTensor<T> crop_backward<T>(const BasicTensor<T>&, const Shape&, std::size_t, std::size_t);          \
  template BasicTensor<T> crop_center<T>(const BasicTensor<T>&, Fraction);                                          \
  template BasicTensor<T> crop_center_to<T>(const BasicTensor<T>&, std::size_t, std::size_t);                       \
  template BasicTensor<T> upsample_nearest<T>(const BasicTensor<T>&, std::size_t);                                  \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> relu_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                     \
  template void add_inplace<T>(BasicTensor<T>&, const BasicTensor<T>&);                                             \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                                       \
  template BasicTensor<T> softmax_channels<T>(const BasicTensor<T>&);

PFA_INSTANTIATE_OPS(float)
PFA_INSTANTIATE_OPS(double)

#undef PFA_INSTANTIATE_OPS

}  // namespace pfa
