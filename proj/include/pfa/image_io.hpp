#pragma once

// 8-bit RGB rasters and their PNG encoding.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pfa/tensor.hpp"

namespace pfa {

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> rgb;  // height x width x 3, row-major

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, std::uint8_t fill = 255) : height(h), width(w), rgb(h * w * 3, fill) {}

  std::uint8_t* pixel(std::size_t y, std::size_t x) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return &rgb[(y * width + x) * 3]; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

/// [1, 3, H, W] with values v / 255.
Tensor to_tensor(const RgbImage& image);
/// Rounds and clamps [1, 3, H, W] values in [0, 1] back to 8 bits.
RgbImage from_tensor(const Tensor& t);

}  // namespace pfa
