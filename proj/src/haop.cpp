#include "idol/haop.hpp"

#include <algorithm>
#include <cmath>

#include "idol/image.hpp"

namespace idol {

namespace {

void check_mask(const TensorF& m) {
  if (m.ndim() != 2) throw ShapeError("mask must be [H, W]");
  for (float v : m.data)
    if (v != 0.0f && v != 1.0f) throw PreconditionError("mask must be exactly binary");
}

}  // namespace

TensorF dilate_background(const TensorF& fg_mask, int radius) {
  check_mask(fg_mask);
  if (radius < 0) throw PreconditionError("dilation radius must be >= 0");
  const int h = fg_mask.shape[0], w = fg_mask.shape[1];
  if (radius == 0) return fg_mask;

  // Separable square dilation: horizontal max run, then vertical.
  TensorF tmp({h, w}), out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = 0.0f;
      for (int k = std::max(0, x - radius); k <= std::min(w - 1, x + radius); ++k)
        v = std::max(v, fg_mask.data[y * w + k]);
      tmp.data[y * w + x] = v;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = 0.0f;
      for (int k = std::max(0, y - radius); k <= std::min(h - 1, y + radius); ++k)
        v = std::max(v, tmp.data[k * w + x]);
      out.data[y * w + x] = v;
    }
  return out;
}

CropResult crop_resize_foreground(const TensorF& f, const TensorF& fg_mask, Rng& rng,
                                  const HaopParams& params) {
  if (f.ndim() != 3) throw ShapeError("foreground image must be [C, H, W]");
  check_mask(fg_mask);
  if (f.shape[1] != fg_mask.shape[0] || f.shape[2] != fg_mask.shape[1])
    throw ShapeError("image and mask sizes disagree");
  if (params.crop_scale_low > params.crop_scale_high || params.crop_scale_low <= 0.0 ||
      params.crop_scale_high > 1.0)
    throw PreconditionError("crop scale range must satisfy 0 < low <= high <= 1");

  const int c = f.shape[0], h = f.shape[1], w = f.shape[2];
  const double scale = rng.uniform(params.crop_scale_low, params.crop_scale_high);
  const int side = std::max(1, static_cast<int>(std::lround(scale * std::min(h, w))));

  // Mask bounding box, if any.
  int ymin = h, ymax = -1, xmin = w, xmax = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (fg_mask.data[y * w + x] > 0.5f) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }

  CropResult res;
  int oy, ox;
  if (ymax < 0) {
    res.center_fallback = true;
    oy = (h - side) / 2;
    ox = (w - side) / 2;
  } else {
    // A window [oy, oy+side) intersects the mask's bounding rows iff
    // oy <= ymax and oy + side > ymin; sample uniformly over that range.
    const int oy_lo = std::max(0, ymin - side + 1);
    const int oy_hi = std::min(h - side, ymax);
    const int ox_lo = std::max(0, xmin - side + 1);
    const int ox_hi = std::min(w - side, xmax);
    oy = oy_lo + static_cast<int>(rng.uniform_below(
                     static_cast<uint64_t>(std::max(0, oy_hi - oy_lo)) + 1));
    ox = ox_lo + static_cast<int>(rng.uniform_below(
                     static_cast<uint64_t>(std::max(0, ox_hi - ox_lo)) + 1));
  }

  TensorF crop({c, side, side});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        crop.data[(static_cast<int64_t>(ch) * side + y) * side + x] =
            f.data[(static_cast<int64_t>(ch) * h + (oy + y)) * w + (ox + x)];
  res.image = (side == std::min(h, w) && h == w) ? crop : resize_bilinear(crop, h, w);
  return res;
}

HaopSample haop_sample(const TensorF& frame, const TensorF& fg_mask, Rng& rng,
                       const HaopParams& params) {
  if (frame.ndim() != 3 || frame.shape[0] != 3)
    throw ShapeError("frame must be [3, H, W]");
  check_mask(fg_mask);
  const int h = frame.shape[1], w = frame.shape[2];
  const int64_t plane = static_cast<int64_t>(h) * w;

  HaopSample out;
  out.target = frame;

  // Masked foreground: the frame under the mask, zero elsewhere.
  TensorF fg_only({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      fg_only.data[c * plane + i] =
          fg_mask.data[i] > 0.5f ? frame.data[c * plane + i] : 0.0f;
  CropResult crop = crop_resize_foreground(fg_only, fg_mask, rng, params);
  out.f_aug = std::move(crop.image);
  out.center_fallback = crop.center_fallback;

  const TensorF dilated = dilate_background(fg_mask, params.dilation_radius);
  out.b_aug = frame;
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      if (dilated.data[i] > 0.5f) out.b_aug.data[c * plane + i] = 0.0f;
  return out;
}

}  // namespace idol
