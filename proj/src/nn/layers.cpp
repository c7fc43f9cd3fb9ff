#include "mammovl/nn/layers.hpp"

#include <cmath>

namespace mammovl::nn {

Var normal_parameter(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * stddev);
  return Var(std::move(t), true);
}

Var constant_parameter(std::vector<int> shape, float value) {
  return Var(Tensor(std::move(shape), value), true);
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias)
    : weight_(normal_parameter({in, out}, std::sqrt(1.0 / in), rng)) {
  if (with_bias) bias_ = constant_parameter({out}, 0.0f);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight_});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
}

void Linear::zero() {
  weight_.value().fill(0.0f);
  if (bias_.defined()) bias_.value().fill(0.0f);
}

LayerNorm::LayerNorm(int width)
    : gamma_(constant_parameter({width}, 1.0f)), beta_(constant_parameter({width}, 0.0f)) {}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng)
    : weight_(normal_parameter({out_channels, in_channels * kernel * kernel},
                               std::sqrt(2.0 / (in_channels * kernel * kernel)), rng)),
      bias_(constant_parameter({out_channels}, 0.0f)),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

TransformerBlock::TransformerBlock(int width, int heads, int ff_width, Rng& rng)
    : heads_(heads),
      ln1_(width),
      ln2_(width),
      q_(width, width, rng),
      k_(width, width, rng),
      v_(width, width, rng),
      o_(width, width, rng),
      ff1_(width, ff_width, rng),
      ff2_(ff_width, width, rng) {}

Var TransformerBlock::forward(const Var& x, int batch, int seq,
                              std::span<const std::uint8_t> mask) const {
  const Var h = ln1_.forward(x);
  const Var attn = attention(q_.forward(h), k_.forward(h), v_.forward(h), batch, seq, heads_, mask);
  const Var x1 = add(x, o_.forward(attn));
  const Var f = ff2_.forward(gelu(ff1_.forward(ln2_.forward(x1))));
  return add(x1, f);
}

void TransformerBlock::collect(const std::string& prefix, ParameterList& out) const {
  ln1_.collect(prefix + ".ln1", out);
  q_.collect(prefix + ".attn.q", out);
  k_.collect(prefix + ".attn.k", out);
  v_.collect(prefix + ".attn.v", out);
  o_.collect(prefix + ".attn.o", out);
  ln2_.collect(prefix + ".ln2", out);
  ff1_.collect(prefix + ".ff1", out);
  ff2_.collect(prefix + ".ff2", out);
}

}  // namespace mammovl::nn
