#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "dcn/data/dataset.hpp"

namespace dcn {

struct AugmentConfig {
  std::size_t out_size = 32;
  double scale_min = 0.6;  // smallest crop area as a fraction of the image
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
};

/// One random draw: integer crop box and a flip decision.
struct AugmentDraw {
  std::size_t x = 0, y = 0, width = 0, height = 0;
  bool flip = false;

  static AugmentDraw identity(std::size_t size) { return {0, 0, size, size, false}; }
};

inline AugmentDraw draw_augment(std::mt19937_64& rng, std::size_t size, const AugmentConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double area = static_cast<double>(size * size);
  AugmentDraw d = AugmentDraw::identity(size);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (cfg.scale_min + (1.0 - cfg.scale_min) * u(rng));
    const double log_ratio = std::log(cfg.ratio_min) + (std::log(cfg.ratio_max) - std::log(cfg.ratio_min)) * u(rng);
    const double ratio = std::exp(log_ratio);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= size && h <= size) {
      d.width = w;
      d.height = h;
      d.x = static_cast<std::size_t>(u(rng) * static_cast<double>(size - w + 1));
      d.y = static_cast<std::size_t>(u(rng) * static_cast<double>(size - h + 1));
      d.x = std::min(d.x, size - w);
      d.y = std::min(d.y, size - h);
      break;
    }
  }
  d.flip = u(rng) < 0.5;
  return d;
}

/// Bilinear resample (half-pixel centres) of a CHW image to size x size.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t x0, std::size_t y0, std::size_t w,
                                     std::size_t h, std::size_t size) {
  const std::size_t c = img.dim(0), src_h = img.dim(1), src_w = img.dim(2);
  Tensor<float> out({c, size, size});
  const double sx = static_cast<double>(w) / static_cast<double>(size);
  const double sy = static_cast<double>(h) / static_cast<double>(size);
  for (std::size_t oy = 0; oy < size; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto iy = static_cast<std::size_t>(fy);
    const std::size_t iy1 = std::min(iy + 1, h - 1);
    const double ty = fy - static_cast<double>(iy);
    for (std::size_t ox = 0; ox < size; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto ix = static_cast<std::size_t>(fx);
      const std::size_t ix1 = std::min(ix + 1, w - 1);
      const double tx = fx - static_cast<double>(ix);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(img[(ch * src_h + y0 + yy) * src_w + x0 + xx]);
        };
        const double top = px(iy, ix) * (1 - tx) + px(iy, ix1) * tx;
        const double bottom = px(iy1, ix) * (1 - tx) + px(iy1, ix1) * tx;
        out[(ch * size + oy) * size + ox] = static_cast<float>(top * (1 - ty) + bottom * ty);
      }
    }
  }
  return out;
}

inline Tensor<float> apply_augment(const Tensor<float>& img, const AugmentDraw& d, std::size_t out_size) {
  Tensor<float> out = resize_bilinear(img, d.x, d.y, d.width, d.height, out_size);
  if (d.flip) {
    const std::size_t c = out.dim(0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < out_size; ++y) {
        float* row = out.data() + (ch * out_size + y) * out_size;
        std::reverse(row, row + out_size);
      }
  }
  return out;
}

inline Tensor<float> augment_pixels(const Tensor<float>& pixels, std::mt19937_64& rng, const AugmentConfig& cfg) {
  return apply_augment(pixels, draw_augment(rng, pixels.dim(1), cfg), cfg.out_size);
}

/// Random resized crop plus horizontal flip with probability 0.5; identity when disabled.
inline LabeledImage augment(const LabeledImage& image, std::mt19937_64& rng, bool enabled, const AugmentConfig& cfg) {
  if (!enabled) return image;
  return {augment_pixels(image.pixels, rng, cfg), image.label, image.source_id};
}

}  // namespace dcn
