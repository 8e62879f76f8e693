#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#include "dcn/data/dataset.hpp"

namespace dcn {

enum class SplitPart { meta_train, meta_val, meta_test };

inline const char* to_string(SplitPart part) {
  switch (part) {
    case SplitPart::meta_train: return "meta_train";
    case SplitPart::meta_val: return "meta_val";
    case SplitPart::meta_test: return "meta_test";
  }
  return "?";
}

inline SplitPart parse_split_part(const std::string& s) {
  if (s == "meta_train" || s == "train") return SplitPart::meta_train;
  if (s == "meta_val" || s == "val") return SplitPart::meta_val;
  if (s == "meta_test" || s == "test") return SplitPart::meta_test;
  throw Error("unknown split part '" + s + "'");
}

/// Three pairwise-disjoint class sets, each sorted ascending.
struct DatasetSplit {
  std::vector<std::size_t> meta_train;
  std::vector<std::size_t> meta_val;
  std::vector<std::size_t> meta_test;

  const std::vector<std::size_t>& classes(SplitPart part) const {
    switch (part) {
      case SplitPart::meta_train: return meta_train;
      case SplitPart::meta_val: return meta_val;
      default: return meta_test;
    }
  }

  std::vector<std::size_t>& classes(SplitPart part) {
    return const_cast<std::vector<std::size_t>&>(std::as_const(*this).classes(part));
  }

  /// meta_train and meta_val merged, for retraining once the stop point is known.
  std::vector<std::size_t> train_and_val() const {
    std::vector<std::size_t> out = meta_train;
    out.insert(out.end(), meta_val.begin(), meta_val.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  void check_disjoint() const {
    std::set<std::size_t> seen;
    for (const auto* part : {&meta_train, &meta_val, &meta_test})
      for (auto c : *part)
        if (!seen.insert(c).second) throw Error("split: class " + std::to_string(c) + " appears in two parts");
  }

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Shuffles class ids with `seed` and cuts them by `fractions`. Sizes are
/// floor(n * f) first; leftover classes go to the parts with the largest
/// fractional remainders (ties: train, val, test order).
inline DatasetSplit split_classes(std::size_t num_classes, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw Error("split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw Error("split: fractions must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(num_classes);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b] + 1e-12; });
  for (std::size_t k = 0; assigned < num_classes; ++k, ++assigned) ++sizes[order[k % 3]];

  static constexpr const char* names[] = {"meta_train", "meta_val", "meta_test"};
  for (int i = 0; i < 3; ++i)
    if (sizes[i] == 0)
      throw Error(std::string("split: fractions leave ") + names[i] + " empty for " + std::to_string(num_classes) +
                  " classes");

  std::vector<std::size_t> ids(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) ids[c] = c;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  DatasetSplit split;
  auto take = [&](std::size_t begin, std::size_t count) {
    std::vector<std::size_t> part(ids.begin() + begin, ids.begin() + begin + count);
    std::sort(part.begin(), part.end());
    return part;
  };
  split.meta_train = take(0, sizes[0]);
  split.meta_val = take(sizes[0], sizes[1]);
  split.meta_test = take(sizes[0] + sizes[1], sizes[2]);
  return split;
}

/// Plain-text manifest: `[meta_train]`, `[meta_val]`, `[meta_test]` sections, one class name per line.
inline std::string split_manifest(const DatasetSplit& split, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  for (auto part : {SplitPart::meta_train, SplitPart::meta_val, SplitPart::meta_test}) {
    os << '[' << to_string(part) << "]\n";
    for (auto c : split.classes(part)) os << class_names.at(c) << '\n';
  }
  return os.str();
}

inline void write_split_manifest(const std::filesystem::path& path, const DatasetSplit& split,
                                 const std::vector<std::string>& class_names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write split manifest " + path.string());
  out << split_manifest(split, class_names);
}

inline DatasetSplit parse_split_manifest(const std::string& text, const std::vector<std::string>& class_names) {
  std::map<std::string, std::size_t> lookup;
  for (std::size_t c = 0; c < class_names.size(); ++c) lookup[class_names[c]] = c;
  DatasetSplit split;
  std::vector<std::size_t>* current = nullptr;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      current = &split.classes(parse_split_part(line.substr(1, line.size() - 2)));
      continue;
    }
    if (!current) throw Error("split manifest: class listed before any section");
    auto it = lookup.find(line);
    if (it == lookup.end()) throw Error("split manifest: unknown class '" + line + "'");
    current->push_back(it->second);
  }
  for (auto* part : {&split.meta_train, &split.meta_val, &split.meta_test}) std::sort(part->begin(), part->end());
  split.check_disjoint();
  return split;
}

inline DatasetSplit read_split_manifest(const std::filesystem::path& path, const std::vector<std::string>& class_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read split manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_split_manifest(buf.str(), class_names);
}

}  // namespace dcn
