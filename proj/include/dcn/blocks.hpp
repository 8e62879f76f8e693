#pragma once

#include <optional>
#include <string>

#include "dcn/layers.hpp"
#include "dcn/stochastic.hpp"

namespace dcn {

enum class BlockKind { plain_conv, residual, squeeze_excite };

inline std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::plain_conv: return "plain_conv";
    case BlockKind::residual: return "residual";
    case BlockKind::squeeze_excite: return "squeeze_excite";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "plain_conv") return BlockKind::plain_conv;
  if (s == "residual") return BlockKind::residual;
  if (s == "squeeze_excite") return BlockKind::squeeze_excite;
  throw Error("unknown block kind '" + s + "' (expected plain_conv, residual or squeeze_excite)");
}

/// Pre-activation of the std head is init'd here so the initial noise is small.
inline constexpr double kStdHeadInitBias = -3.0;

/// Output of one block. `std` is empty unless the block carries a noise head.
template <typename T>
struct BlockOutput {
  Tensor<T> mean;
  Tensor<T> std;
};

/// Two 3x3 convolutions with batch norm. Residual kinds add a shortcut
/// (projected when stride or width changes); squeeze_excite gates the branch.
/// With a noise head the second convolution emits one extra channel that
/// becomes the shared std after a sigmoid; it bypasses the gate.
template <typename T>
class Block {
 public:
  Block(const std::string& name, BlockKind kind, std::size_t in, std::size_t mid, std::size_t out,
        std::size_t stride, std::size_t se_reduction, bool noise_head)
      : kind_(kind), in_(in), out_(out), stride_(stride), noise_(noise_head),
        conv1_(name + ".conv1", in, mid, 3, stride, 1), bn1_(name + ".bn1", mid),
        conv2_(name + ".conv2", mid, out + (noise_head ? 1 : 0), 3, 1, 1),
        bn2_(name + ".bn2", out + (noise_head ? 1 : 0)) {
    if (kind_ == BlockKind::squeeze_excite) se_.emplace(name + ".se", out, se_reduction);
    if (kind_ != BlockKind::plain_conv && (stride != 1 || in != out)) {
      proj_conv_.emplace(name + ".shortcut.conv", in, out, 1, stride, 0);
      proj_bn_.emplace(name + ".shortcut.bn", out);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (se_) se_->init(rng);
    if (proj_conv_) proj_conv_->init(rng);
    if (noise_) bn2_.beta().value[out_] = static_cast<T>(kStdHeadInitBias);
  }

  bool has_noise_head() const { return noise_; }
  std::size_t out_channels() const { return out_; }
  std::size_t output_size(std::size_t in_size) const { return conv1_.output_size(in_size); }

  BlockOutput<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> branch = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x), train))), train);

    BlockOutput<T> result;
    Tensor<T> pre = noise_ ? slice_channels(branch, 0, out_) : std::move(branch);
    if (se_) pre = se_->forward(pre);
    if (kind_ != BlockKind::plain_conv) {
      if (proj_conv_)
        pre += proj_bn_->forward(proj_conv_->forward(x), train);
      else
        pre += x;
    }
    result.mean = relu_out_.forward(pre);
    if (noise_) {
      result.std = std_from_preactivation(slice_channels(branch, out_, out_ + 1));
      std_ = result.std;
    }
    return result;
  }

  /// `d_std` may be empty (no gradient reaches the std head).
  Tensor<T> backward(const Tensor<T>& d_mean, const Tensor<T>& d_std = {}) {
    Tensor<T> d_pre = relu_out_.backward(d_mean);
    Tensor<T> d_branch = se_ ? se_->backward(d_pre) : d_pre;
    if (noise_) {
      Tensor<T> d_std_pre = d_std.empty() ? Tensor<T>(std_.shape()) : std_preactivation_backward(std_, d_std);
      d_branch = concat_channels<T>({&d_branch, &d_std_pre});
    }
    Tensor<T> dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(d_branch)))));
    if (kind_ != BlockKind::plain_conv) {
      if (proj_conv_)
        dx += proj_conv_->backward(proj_bn_->backward(d_pre));
      else
        dx += d_pre;
    }
    return dx;
  }

  void collect(ParameterList<T>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    if (se_) se_->collect(out);
    if (proj_conv_) {
      proj_conv_->collect(out);
      proj_bn_->collect(out);
    }
  }

  /// Zeroes every weight that reads input channels [begin, end).
  void zero_input_channels(std::size_t begin, std::size_t end) {
    zero_conv_inputs(conv1_, begin, end);
    if (proj_conv_) zero_conv_inputs(*proj_conv_, begin, end);
  }

 private:
  static void zero_conv_inputs(Conv2d<T>& conv, std::size_t begin, std::size_t end) {
    auto& w = conv.weight().value;
    const std::size_t out = w.dim(0), in = w.dim(1), kk = w.dim(2) * w.dim(3);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = begin; i < end && i < in; ++i)
        std::fill_n(w.data() + (o * in + i) * kk, kk, T{0});
  }

  BlockKind kind_;
  std::size_t in_, out_, stride_;
  bool noise_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Relu<T> relu1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  std::optional<SqueezeExcite<T>> se_;
  std::optional<Conv2d<T>> proj_conv_;
  std::optional<BatchNorm2d<T>> proj_bn_;
  Relu<T> relu_out_;
  Tensor<T> std_;
};

}  // namespace dcn
