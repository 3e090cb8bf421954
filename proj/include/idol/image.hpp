#pragma once

#include <stdexcept>
#include <string>

#include "idol/tensor.hpp"

namespace idol {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bilinear resample of a [C, H, W] image to [C, out_h, out_w] using
// half-pixel sample centers. Resampling to the input size is the identity.
TensorF resize_bilinear(const TensorF& img, int out_h, int out_w);

// Quantize a float in [0,1] to one 8-bit level (round to nearest).
inline unsigned char to_u8(float v) {
  float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<unsigned char>(c * 255.0f + 0.5f);
}
inline float from_u8(unsigned char v) { return static_cast<float>(v) / 255.0f; }

// 8-bit PNG round trip for [C, H, W] tensors with values in [0,1].
// C = 1 writes grayscale, C = 3 writes RGB. Reading returns C matching the
// file (alpha channels are dropped).
void write_png(const std::string& path, const TensorF& img);
TensorF read_png(const std::string& path);

}  // namespace idol
