#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bat/tensor.hpp"

namespace bat {

// Binary lesion mask, row-major, values exactly 0 or 1 (1 = lesion).
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> v;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), v(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * width + c]; }
  bool inside(int r, int c) const { return r >= 0 && r < height && c >= 0 && c < width; }
  // out-of-image counts as background
  bool lesion(int r, int c) const { return inside(r, c) && at(r, c) != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto x : v) n += x;
    return n;
  }
};

// H x W x 3 image, values in [0,1]
using ImageTensor = Tensor;

// 8-bit binary PGM (P5). Writing maps 1 -> 255; reading maps >=128 -> 1.
void write_mask_pgm(const BinaryMask& mask, const std::string& path);
BinaryMask read_mask_pgm(const std::string& path);

// Probability map as 8-bit PGM, value = round(p * 255).
void write_prob_pgm(const Tensor& prob, const std::string& path);
Tensor read_prob_pgm(const std::string& path);

// 8-bit RGB PPM (P6), value = round(v * 255).
void write_image_ppm(const ImageTensor& img, const std::string& path);
ImageTensor read_image_ppm(const std::string& path);

}  // namespace bat
