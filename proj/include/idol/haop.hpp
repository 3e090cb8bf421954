#pragma once

#include "idol/rng.hpp"
#include "idol/tensor.hpp"

namespace idol {

// Masks are [H, W] tensors holding exactly 0 or 1; 1 marks foreground.
struct HaopParams {
  int dilation_radius = 2;
  double crop_scale_low = 0.6;
  double crop_scale_high = 1.0;
};

// Morphological dilation with a (2r+1) x (2r+1) square structuring element.
TensorF dilate_background(const TensorF& fg_mask, int radius);

struct CropResult {
  TensorF image;             // [3, H, W]
  bool center_fallback = false;  // set when the mask was empty
};

// Random crop of side scale*min(H,W) overlapping the mask, resized back.
CropResult crop_resize_foreground(const TensorF& f, const TensorF& fg_mask, Rng& rng,
                                  const HaopParams& params);

struct HaopSample {
  TensorF f_aug;   // crop/resized masked foreground, [3, H, W]
  TensorF b_aug;   // frame with the dilated foreground region zeroed
  TensorF target;  // the unmodified input frame
  bool center_fallback = false;
};

HaopSample haop_sample(const TensorF& frame, const TensorF& fg_mask, Rng& rng,
                       const HaopParams& params);

}  // namespace idol
