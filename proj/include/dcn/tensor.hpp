#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcn {

/// Raised for any shape, range, or data-contract violation inside the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Feature maps use NCHW order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_))
      throw Error("tensor data size " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same storage, new shape; element count must agree.
  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size())
      throw Error("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_)
      throw Error(std::string(what) + ": shape mismatch " + to_string(shape_) + " vs " + to_string(other.shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Copies sample `n` of a rank-4 tensor into slot `dst_n` of another with matching CHW.
template <typename T>
void copy_sample(const Tensor<T>& src, std::size_t n, Tensor<T>& dst, std::size_t dst_n) {
  const std::size_t chw = src.dim(1) * src.dim(2) * src.dim(3);
  std::copy_n(src.data() + n * chw, chw, dst.data() + dst_n * chw);
}

/// Concatenates rank-4 tensors with equal N, H, W along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const auto& first = *parts.front();
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::size_t channels = 0;
  for (const auto* p : parts) {
    if (p->rank() != 4 || p->dim(0) != n || p->dim(2) != h || p->dim(3) != w)
      throw Error("concat_channels: incompatible shapes " + to_string(first.shape()) + " and " + to_string(p->shape()));
    channels += p->dim(1);
  }
  Tensor<T> out({n, channels, h, w});
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = out.data() + i * channels * hw;
    for (const auto* p : parts) {
      const std::size_t block = p->dim(1) * hw;
      std::copy_n(p->data() + i * block, block, dst);
      dst += block;
    }
  }
  return out;
}

/// Channel range [begin, end) of a rank-4 tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin > end || end > c) throw Error("slice_channels: bad range");
  Tensor<T> out({n, end - begin, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data() + (i * c + begin) * hw, (end - begin) * hw, out.data() + i * (end - begin) * hw);
  return out;
}

/// Samples [begin, end) along the leading axis.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) throw Error("slice_rows: bad range");
  Shape shape = x.shape();
  const std::size_t stride = x.size() / shape[0];
  shape[0] = end - begin;
  Tensor<T> out(shape);
  std::copy_n(x.data() + begin * stride, (end - begin) * stride, out.data());
  return out;
}

/// FNV-style fingerprint of the raw bytes; used to audit that parameters stay untouched.
template <typename T>
std::uint64_t checksum(std::span<const T> values, std::uint64_t seed = 1469598103934665603ull) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace dcn
