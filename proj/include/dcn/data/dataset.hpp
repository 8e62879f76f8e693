#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

/// One image (channels x height x width) after mean subtraction.
struct LabeledImage {
  Tensor<float> pixels;
  std::size_t label = 0;
  std::string source_id;
};

struct Dataset {
  std::size_t image_size = 0;
  std::size_t channels = 3;
  std::vector<std::string> class_names;
  std::vector<LabeledImage> images;
  /// Per-channel mean that was subtracted from the [0, 1] pixels.
  std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
  /// Image indices grouped by label.
  std::vector<std::vector<std::size_t>> by_class;

  std::size_t num_classes() const { return class_names.size(); }

  void index() {
    by_class.assign(class_names.size(), {});
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& img = images[i];
      if (img.label >= class_names.size()) throw Error("image " + img.source_id + " has an unknown label");
      if (img.pixels.shape() != Shape{channels, image_size, image_size})
        throw Error("image " + img.source_id + " has shape " + to_string(img.pixels.shape()));
      by_class[img.label].push_back(i);
    }
  }
};

/// Per-channel mean of the given images, in the dataset's current pixel space.
inline std::array<double, 3> channel_means(const Dataset& ds, const std::vector<std::size_t>& image_ids) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t count = 0;
  const std::size_t hw = ds.image_size * ds.image_size;
  for (auto id : image_ids) {
    const auto& px = ds.images[id].pixels;
    for (std::size_t c = 0; c < ds.channels; ++c)
      for (std::size_t j = 0; j < hw; ++j) sum[c] += px[c * hw + j];
    count += hw;
  }
  for (auto& s : sum) s /= static_cast<double>(std::max<std::size_t>(count, 1));
  return sum;
}

/// Re-centres pixels so that the mean over `classes` is zero per channel.
inline void center_on_classes(Dataset& ds, const std::vector<std::size_t>& classes) {
  std::vector<std::size_t> ids;
  for (auto c : classes) ids.insert(ids.end(), ds.by_class.at(c).begin(), ds.by_class.at(c).end());
  const auto shift = channel_means(ds, ids);
  const std::size_t hw = ds.image_size * ds.image_size;
  for (auto& img : ds.images)
    for (std::size_t c = 0; c < ds.channels; ++c)
      for (std::size_t j = 0; j < hw; ++j) img.pixels[c * hw + j] -= static_cast<float>(shift[c]);
  for (std::size_t c = 0; c < ds.channels; ++c) ds.channel_mean[c] += static_cast<float>(shift[c]);
}

/// Subtracts a known channel mean from raw [0, 1] pixels.
inline void apply_channel_mean(Dataset& ds, const std::array<float, 3>& mean) {
  const std::size_t hw = ds.image_size * ds.image_size;
  for (auto& img : ds.images)
    for (std::size_t c = 0; c < ds.channels; ++c)
      for (std::size_t j = 0; j < hw; ++j) img.pixels[c * hw + j] += ds.channel_mean[c] - mean[c];
  ds.channel_mean = mean;
}

inline void center_on_all(Dataset& ds) {
  std::vector<std::size_t> all(ds.num_classes());
  for (std::size_t c = 0; c < all.size(); ++c) all[c] = c;
  center_on_classes(ds, all);
}

namespace detail {

struct PatternParams {
  std::array<double, 3> background;
  std::array<double, 3> foreground;
  double frequency;
  double orientation;
  double amplitude;
  int shape;
  double radius;
  double cx, cy;
};

inline std::string class_name(std::size_t c) {
  std::string s = std::to_string(c);
  return "class_" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

inline bool inside_shape(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;                          // disc
    case 1: return ax <= r * 0.85 && ay <= r * 0.85;                    // square
    case 2: { const double d = std::sqrt(dx * dx + dy * dy); return d <= r && d >= 0.55 * r; }  // ring
    case 3: return ax + ay <= r;                                        // diamond
    default: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);  // cross
  }
}

}  // namespace detail

/// Parametric pattern classes: a coloured sinusoidal grating behind a coloured
/// shape. Every image of a class perturbs the class parameters by jitter
/// proportional to `difficulty`; difficulty 0 makes a class's images identical.
/// Pixels are centred on the whole-dataset channel mean.
inline Dataset make_synthetic_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                                      double difficulty, std::uint64_t seed) {
  if (num_classes < 2) throw Error("synthetic dataset needs at least 2 classes");
  if (per_class < 2) throw Error("synthetic dataset needs at least 2 images per class");
  if (image_size < 1) throw Error("synthetic dataset needs a positive image size");
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw Error("difficulty must lie in [0, 1]");

  Dataset ds;
  ds.image_size = image_size;
  ds.channels = 3;
  const double size = static_cast<double>(image_size);
  for (std::size_t c = 0; c < num_classes; ++c) {
    ds.class_names.push_back(detail::class_name(c));
    std::seed_seq class_seq{seed, static_cast<std::uint64_t>(c), std::uint64_t{0x5eed}};
    std::mt19937_64 crng(class_seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    detail::PatternParams p{};
    for (auto& v : p.background) v = 0.1 + 0.8 * u(crng);
    for (auto& v : p.foreground) v = 0.1 + 0.8 * u(crng);
    p.frequency = 1.0 + 2.5 * u(crng);
    p.orientation = std::numbers::pi * u(crng);
    p.amplitude = 0.1 + 0.25 * u(crng);
    p.shape = static_cast<int>(crng() % 5);
    p.radius = 0.2 + 0.18 * u(crng);
    p.cx = 0.35 + 0.3 * u(crng);
    p.cy = 0.35 + 0.3 * u(crng);

    for (std::size_t i = 0; i < per_class; ++i) {
      std::seed_seq img_seq{seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i), std::uint64_t{0x1a6e}};
      std::mt19937_64 irng(img_seq);
      std::normal_distribution<double> n(0.0, 1.0);
      const double d = difficulty;
      std::array<double, 3> bg, fg;
      for (int k = 0; k < 3; ++k) bg[k] = p.background[k] + 0.15 * d * n(irng);
      for (int k = 0; k < 3; ++k) fg[k] = p.foreground[k] + 0.15 * d * n(irng);
      const double theta = p.orientation + 0.5 * d * n(irng);
      const double phase = 2.0 * std::numbers::pi * d * u(irng);
      const double cx = (p.cx + 0.12 * d * n(irng)) * size;
      const double cy = (p.cy + 0.12 * d * n(irng)) * size;
      const double radius = p.radius * size * std::max(0.3, 1.0 + 0.2 * d * n(irng));
      const double ct = std::cos(theta), st = std::sin(theta);

      Tensor<float> px({3, image_size, image_size});
      for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
          const double xs = (static_cast<double>(x) + 0.5) / size, ys = (static_cast<double>(y) + 0.5) / size;
          const double wave = std::sin(2.0 * std::numbers::pi * p.frequency * (xs * ct + ys * st) + phase);
          const bool in = detail::inside_shape(p.shape, static_cast<double>(x) + 0.5 - cx,
                                               static_cast<double>(y) + 0.5 - cy, radius);
          for (std::size_t k = 0; k < 3; ++k) {
            double v = in ? fg[k] : bg[k] * (1.0 + p.amplitude * wave);
            v += 0.08 * d * n(irng);
            px[(k * image_size + y) * image_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      ds.images.push_back({std::move(px), c, "synthetic/" + ds.class_names[c] + "/" + std::to_string(i)});
    }
  }
  ds.index();
  center_on_all(ds);
  return ds;
}

}  // namespace dcn
