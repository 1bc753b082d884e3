#include "pfa/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pfa {

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.rgb.size() != image.height * image.width * 3 || image.height == 0 || image.width == 0) {
    throw DimensionError("write_png: raster size does not match its extent");
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  RgbImage out(png.height, png.width);
  if (!png_image_finish_read(&png, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return out;
}

Tensor to_tensor(const RgbImage& image) {
  Tensor t({1, 3, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) t(0, c, y, x) = static_cast<float>(image.pixel(y, x)[c]) / 255.0f;
  return t;
}

RgbImage from_tensor(const Tensor& t) {
  if (t.rank() != 4 || t.batch() != 1 || t.channels() != 3) throw DimensionError("from_tensor: expected [1,3,H,W], got " + to_string(t.shape()));
  RgbImage out(t.height(), t.width());
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(t(0, c, y, x), 0.0f, 1.0f);
        out.pixel(y, x)[c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return out;
}

}  // namespace pfa
