#pragma once

#include "mammovl/nn/autograd.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mammovl::nn {

// All matrix ops use the Tensor matrix view: the last dimension is columns,
// leading dimensions fold into rows.

Var matmul(const Var& a, const Var& b);
/// x · W + b with W stored [in, out]; b may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var relu(const Var& x);
/// tanh approximation of GELU.
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var embedding(const Var& table, std::span<const int> ids);
Var reshape(const Var& x, std::vector<int> shape);

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int start, int count);
Var gather_rows(const Var& x, std::span<const int> rows);

/// Multi-head scaled dot-product attention over `batch` sequences of length
/// `seq` packed as rows of q/k/v ([batch*seq, width]). key_mask has one entry
/// per row; keys with mask 0 receive zero attention weight.
Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq, int heads,
              std::span<const std::uint8_t> key_mask);

/// 2-D convolution. x is [B, C, H, W]; weight is [Cout, C*k*k]; bias [Cout].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad);

/// Average-pools [B, C, H, W] onto a grid_h x grid_w grid and flattens to
/// [B, C*grid_h*grid_w]. Cell boundaries follow floor/ceil partitioning.
Var adaptive_avg_pool_flat(const Var& x, int grid_h, int grid_w);

/// Per-channel spatial maximum of [B, C, H, W] -> [B, C]. The gradient goes
/// to the first maximal position.
Var global_max_pool(const Var& x);

Var concat_cols(const std::vector<Var>& parts);

/// Row-wise x / max(||x||, eps).
Var l2_normalize_rows(const Var& x, float eps = 1e-12f);

/// Mean softmax cross-entropy over rows; accumulation in double.
Var softmax_cross_entropy(const Var& logits, std::span<const int> targets);

}  // namespace mammovl::nn
