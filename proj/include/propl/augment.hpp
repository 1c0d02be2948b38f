#pragma once

// Paired geometric augmentation: one rotation + isotropic scale applied to an
// image and its mask about the image center, on the same canvas size. The
// image is resampled bilinearly, the mask with nearest neighbor and then
// re-binarized, and anything mapped from outside the source is zero.

#include <cmath>
#include <cstdint>
#include <utility>

#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

inline constexpr double kAugMaxAngleDeg = 25.0;
inline constexpr double kAugScaleLo = 0.8;
inline constexpr double kAugScaleHi = 1.25;

template <typename S>
struct AugmentedPair {
  Tensor<S> image;
  Tensor<std::uint8_t> mask;
  double angle_deg = 0.0;
  double scale = 1.0;
};

template <typename S>
S bilinear_at(const Tensor<S>& img, double y, double x, int ch) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  const auto tap = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return 0.0;
    return static_cast<double>(img.at(yy, xx, ch));
  };
  const double top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx;
  const double bot = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx;
  return static_cast<S>(top * (1.0 - fy) + bot * fy);
}

// Deterministic core with explicit parameters; the forward transform is
// rotate-then-scale about the center, so each output pixel pulls from
// source = R(-angle) * (out - center) / scale + center.
template <typename S>
AugmentedPair<S> augment_with(const Tensor<S>& image, const Tensor<std::uint8_t>& mask,
                              double angle_deg, double scale) {
  require(image.h == mask.h && image.w == mask.w, "augment: image/mask size mismatch");
  require(mask.c == 1, "augment: mask must be single channel");
  require(scale > 0.0, "augment: scale must be positive");

  AugmentedPair<S> out;
  out.angle_deg = angle_deg;
  out.scale = scale;
  out.image = Tensor<S>(image.h, image.w, image.c);
  out.mask = Tensor<std::uint8_t>(mask.h, mask.w, 1);

  const double th = angle_deg * std::acos(-1.0) / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (image.w - 1) / 2.0, cy = (image.h - 1) / 2.0;
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = (c * dx + s * dy) / scale + cx;
      const double sy = (-s * dx + c * dy) / scale + cy;
      for (int ch = 0; ch < image.c; ++ch)
        out.image.at(y, x, ch) = bilinear_at(image, sy, sx, ch);
      const int nx = static_cast<int>(std::lround(sx));
      const int ny = static_cast<int>(std::lround(sy));
      double mv = 0.0;
      if (ny >= 0 && ny < mask.h && nx >= 0 && nx < mask.w)
        mv = static_cast<double>(mask.at(ny, nx, 0));
      out.mask.at(y, x, 0) = mv >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

// Random draw: angle first, then scale, so a given rng state maps to exactly
// one transform.
template <typename S>
AugmentedPair<S> augment(const Tensor<S>& image, const Tensor<std::uint8_t>& mask,
                         Rng& rng) {
  const double angle = rng.uniform(-kAugMaxAngleDeg, kAugMaxAngleDeg);
  const double scale = rng.uniform(kAugScaleLo, kAugScaleHi);
  return augment_with(image, mask, angle, scale);
}

}  // namespace propl
