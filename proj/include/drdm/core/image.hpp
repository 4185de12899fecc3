#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "drdm/core/tensor.hpp"

namespace drdm {

/// 8-bit RGB image, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t& at(int y, int x, int c) {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  static Image filled(int w, int h, std::uint8_t v = 0);
};

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// Image -> (3,H,W) tensor with values mapped from [0,255] to [-1,1].
Tensor image_to_tensor(const Image& img);
/// Inverse of image_to_tensor; values are clamped to [-1,1] before mapping.
Image tensor_to_image(const Tensor& t);

/// Bilinear resize (the only image transform the pipeline applies).
Image resize_bilinear(const Image& img, int out_w, int out_h);

}  // namespace drdm
