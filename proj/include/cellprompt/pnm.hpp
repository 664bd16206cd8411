// SPDX-License-Identifier: Apache-2.0
//
// Netpbm readers/writers: binary PGM (P5, 8- or 16-bit, big-endian samples),
// ASCII PGM (P2, read only) and binary PPM (P6, 8-bit).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellprompt/tensor.hpp"

namespace cellprompt {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 255;
  std::vector<std::uint16_t> pixels;  // row-major
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    std::uint8_t* p = &rgb[3 * (y * width + x)];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

/// Throws FormatError on malformed input.
GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);
RgbImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RgbImage& img);

/// H×W tensor of pixel/maxval.
Tensor gray_to_tensor(const GrayImage& img);
/// Quantizes [0,1] values (clamped) to round(v·maxval).
GrayImage tensor_to_gray(const Tensor& values, unsigned maxval);

void write_pgm8(const std::string& path, const Tensor& values);
void write_pgm16(const std::string& path, const Tensor& values);
/// Binary mask → 0/255 P5.
void write_mask_pgm(const std::string& path, const Tensor& mask);
/// Reads a P5 mask, any nonzero pixel is foreground.
Tensor read_mask_pgm(const std::string& path);

}  // namespace cellprompt
