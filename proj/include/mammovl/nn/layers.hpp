#pragma once

#include "mammovl/nn/ops.hpp"
#include "mammovl/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mammovl::nn {

struct NamedParameter {
  std::string name;
  Var var;
};
using ParameterList = std::vector<NamedParameter>;

/// Creates a trainable leaf with N(0, std^2) entries.
Var normal_parameter(std::vector<int> shape, double stddev, Rng& rng);
Var constant_parameter(std::vector<int> shape, float value);

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true);

  Var forward(const Var& x) const { return linear(x, weight_, bias_); }
  void collect(const std::string& prefix, ParameterList& out) const;
  /// Zeroes weight and bias (used for zero-output initialization).
  void zero();

  int in_features() const { return weight_.rows(); }
  int out_features() const { return weight_.cols(); }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

 private:
  Var weight_;  // [in, out]
  Var bias_;    // [out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int width);
  Var forward(const Var& x) const { return layer_norm(x, gamma_, beta_); }
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Var gamma_;
  Var beta_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng);
  Var forward(const Var& x) const { return conv2d(x, weight_, bias_, kernel_, stride_, pad_); }
  void collect(const std::string& prefix, ParameterList& out) const;
  int out_channels() const { return weight_.rows(); }

 private:
  Var weight_;  // [out, in*k*k]
  Var bias_;
  int kernel_ = 3;
  int stride_ = 1;
  int pad_ = 1;
};

/// Pre-norm transformer encoder block with multi-head self-attention and a
/// GELU feed-forward layer.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(int width, int heads, int ff_width, Rng& rng);

  /// x is [batch*seq, width]; mask has one byte per row (1 = attendable key).
  Var forward(const Var& x, int batch, int seq, std::span<const std::uint8_t> mask) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  int heads_ = 1;
  LayerNorm ln1_, ln2_;
  Linear q_, k_, v_, o_, ff1_, ff2_;
};

}  // namespace mammovl::nn
