#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dcn/data/dataset.hpp"

namespace dcn {

namespace detail {
inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool directories) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}
}  // namespace detail

/// Reads `root/<class>/<image>` (PNG or JPEG). Classes get labels in
/// lexicographic folder order; images are resized to image_size square and
/// centred on the whole-dataset channel mean.
inline Dataset load_directory_dataset(const std::filesystem::path& root, std::size_t image_size) {
  if (!std::filesystem::exists(root)) throw Error("dataset path does not exist: " + root.string());
  if (!std::filesystem::is_directory(root)) throw Error("dataset path is not a directory: " + root.string());
  if (image_size < 1) throw Error("image_size must be positive");
  const auto class_dirs = detail::sorted_entries(root, true);
  if (class_dirs.empty()) throw Error("no class folders in " + root.string());

  Dataset ds;
  ds.image_size = image_size;
  ds.channels = 3;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const auto& dir = class_dirs[label];
    const std::string name = dir.filename().string();
    ds.class_names.push_back(name);
    const auto files = detail::sorted_entries(dir, false);
    if (files.empty()) throw Error("class folder '" + name + "' contains no images");
    for (const auto& file : files) {
      cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
      if (bgr.empty()) throw Error("cannot decode image " + file.string());
      cv::Mat rgb;
      cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
      if (rgb.rows != static_cast<int>(image_size) || rgb.cols != static_cast<int>(image_size)) {
        const bool shrink = rgb.rows > static_cast<int>(image_size);
        cv::resize(rgb, rgb, cv::Size(static_cast<int>(image_size), static_cast<int>(image_size)), 0, 0,
                   shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
      }
      Tensor<float> px({3, image_size, image_size});
      for (std::size_t y = 0; y < image_size; ++y) {
        const auto* row = rgb.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < image_size; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            px[(c * image_size + y) * image_size + x] = static_cast<float>(row[x][static_cast<int>(c)]) / 255.0f;
      }
      ds.images.push_back({std::move(px), label, name + "/" + file.filename().string()});
    }
  }
  ds.index();
  center_on_all(ds);
  return ds;
}

/// Writes every image as `root/<class>/img_NNNN.png`, undoing the mean subtraction.
inline void write_dataset_directory(const Dataset& ds, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  const int size = static_cast<int>(ds.image_size);
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    const auto dir = root / ds.class_names[c];
    std::filesystem::create_directories(dir);
    std::size_t k = 0;
    for (auto id : ds.by_class[c]) {
      const auto& px = ds.images[id].pixels;
      cv::Mat bgr(size, size, CV_8UC3);
      for (int y = 0; y < size; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < size; ++x)
          for (int ch = 0; ch < 3; ++ch) {
            const float v = px[(static_cast<std::size_t>(ch) * ds.image_size + static_cast<std::size_t>(y)) *
                                   ds.image_size +
                               static_cast<std::size_t>(x)] +
                            ds.channel_mean[static_cast<std::size_t>(ch)];
            row[x][2 - ch] = cv::saturate_cast<uchar>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
          }
      }
      std::string num = std::to_string(k++);
      num.insert(0, num.size() < 4 ? 4 - num.size() : 0, '0');
      const auto file = dir / ("img_" + num + ".png");
      if (!cv::imwrite(file.string(), bgr)) throw Error("cannot write image " + file.string());
    }
  }
}

}  // namespace dcn
