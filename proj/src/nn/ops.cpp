#include "mammovl/nn/ops.hpp"

#include "mammovl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mammovl::nn {

namespace {

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ (" + a.value().shape_string() +
                                    " x " + b.value().shape_string() + ")");
  Tensor out({a.rows(), b.cols()});
  out.mat().noalias() = a.value().mat() * b.value().mat();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto g = self.grad.mat();
    if (pa.requires_grad) pa.ensure_grad().mat().noalias() += g * pb.value.mat().transpose();
    if (pb.requires_grad) pb.ensure_grad().mat().noalias() += pa.value.mat().transpose() * g;
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.cols() == weight.rows(),
          "linear: input width " + std::to_string(x.cols()) + " does not match weight " +
              weight.value().shape_string());
  std::vector<int> shape = x.shape();
  shape.back() = weight.cols();
  Tensor out(shape);
  out.mat().noalias() = x.value().mat() * weight.value().mat();
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(static_cast<int>(bias.value().numel()) == weight.cols(), "linear: bias size mismatch");
    out.mat().rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.value().data(), weight.cols());
  }
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    const auto g = self.grad.mat();
    if (px.requires_grad) px.ensure_grad().mat().noalias() += g * pw.value.mat().transpose();
    if (pw.requires_grad) pw.ensure_grad().mat().noalias() += px.value.mat().transpose() * g;
    if (has_bias) {
      Node& pb = parent(self, 2);
      if (pb.requires_grad) {
        Eigen::Map<Eigen::RowVectorXf>(pb.ensure_grad().data(), g.cols()) += g.colwise().sum();
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require(a.value().numel() == b.value().numel(), "add: size mismatch " +
                                                      a.value().shape_string() + " vs " +
                                                      b.value().shape_string());
  Tensor out = a.value();
  out.mat() += b.value().mat().reshaped(out.rows(), out.cols());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      Node& p = parent(self, i);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad().storage();
      const auto& up = self.grad.storage();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += up[j];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor out = a.value();
  out.mat() *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Node& p = parent(self, 0);
    p.ensure_grad().mat() += s * self.grad.mat();
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0f ? v : 0.0f;
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    auto& g = p.ensure_grad().storage();
    const auto& in = p.value.storage();
    const auto& up = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0f) g[i] += up[i];
    }
  });
}

Var gelu(const Var& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out = x.value();
  for (auto& v : out.storage()) {
    const float u = kC * (v + kA * v * v * v);
    v = 0.5f * v * (1.0f + std::tanh(u));
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    auto& g = p.ensure_grad().storage();
    const auto& in = p.value.storage();
    const auto& up = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float v = in[i];
      const float t = std::tanh(kC * (v + kA * v * v * v));
      const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kC * (1.0f + 3.0f * kA * v * v);
      g[i] += up[i] * d;
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const int rows = x.rows();
  const int cols = x.cols();
  require(static_cast<int>(gamma.value().numel()) == cols &&
              static_cast<int>(beta.value().numel()) == cols,
          "layer_norm: affine parameter width mismatch");
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<float> rstd(rows);
  const auto in = x.value().mat();
  const float* ga = gamma.value().data();
  const float* be = beta.value().data();
  for (int r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += in(r, c);
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = in(r, c) - mean;
      var += d * d;
    }
    var /= cols;
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (int c = 0; c < cols; ++c) {
      const float xh = (in(r, c) - static_cast<float>(mean)) * rs;
      xhat.at(r, c) = xh;
      out.at(r, c) = xh * ga[c] + be[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pg = parent(self, 1);
                       Node& pb = parent(self, 2);
                       const int rows = xhat.rows();
                       const int cols = xhat.cols();
                       const auto g = self.grad.mat();
                       if (pg.requires_grad) {
                         float* dg = pg.ensure_grad().data();
                         for (int r = 0; r < rows; ++r)
                           for (int c = 0; c < cols; ++c) dg[c] += g(r, c) * xhat.at(r, c);
                       }
                       if (pb.requires_grad) {
                         float* db = pb.ensure_grad().data();
                         for (int r = 0; r < rows; ++r)
                           for (int c = 0; c < cols; ++c) db[c] += g(r, c);
                       }
                       if (px.requires_grad) {
                         auto dx = px.ensure_grad().mat();
                         const float* ga = pg.value.data();
                         std::vector<float> dxhat(cols);
                         for (int r = 0; r < rows; ++r) {
                           double m1 = 0.0;
                           double m2 = 0.0;
                           for (int c = 0; c < cols; ++c) {
                             dxhat[c] = g(r, c) * ga[c];
                             m1 += dxhat[c];
                             m2 += dxhat[c] * xhat.at(r, c);
                           }
                           m1 /= cols;
                           m2 /= cols;
                           for (int c = 0; c < cols; ++c) {
                             dx(r, c) += rstd[r] * (dxhat[c] - static_cast<float>(m1) -
                                                    xhat.at(r, c) * static_cast<float>(m2));
                           }
                         }
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const int vocab = table.rows();
  const int width = table.cols();
  Tensor out({static_cast<int>(ids.size()), width});
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vocab) {
      throw VocabularyError("token id " + std::to_string(idx[i]) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    out.mat().row(static_cast<Eigen::Index>(i)) = table.value().mat().row(idx[i]);
  }
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    Node& p = parent(self, 0);
    auto g = p.ensure_grad().mat();
    const auto up = self.grad.mat();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += up.row(static_cast<Eigen::Index>(i));
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    auto& g = p.ensure_grad().storage();
    const auto& up = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int cols = parts.front().cols();
  int rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor out({rows, cols});
  std::vector<int> offsets;
  int r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.mat().middleRows(r, p.rows()) = p.value().mat();
    r += p.rows();
  }
  return make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    const auto up = self.grad.mat();
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      auto g = p.ensure_grad().mat();
      g += up.middleRows(offsets[i], g.rows());
    }
  });
}

Var slice_rows(const Var& x, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  Tensor out({count, x.cols()});
  out.mat() = x.value().mat().middleRows(start, count);
  return make_result(std::move(out), {x}, [start, count](Node& self) {
    Node& p = parent(self, 0);
    p.ensure_grad().mat().middleRows(start, count) += self.grad.mat();
  });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Tensor out({static_cast<int>(idx.size()), x.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < x.rows(), "gather_rows: row out of range");
    out.mat().row(static_cast<Eigen::Index>(i)) = x.value().mat().row(idx[i]);
  }
  return make_result(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& p = parent(self, 0);
    auto g = p.ensure_grad().mat();
    const auto up = self.grad.mat();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += up.row(static_cast<Eigen::Index>(i));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq, int heads,
              std::span<const std::uint8_t> key_mask) {
  const int width = q.cols();
  require(q.rows() == batch * seq && k.rows() == batch * seq && v.rows() == batch * seq,
          "attention: row count must equal batch*seq");
  require(k.cols() == width && v.cols() == width, "attention: q/k/v width mismatch");
  require(heads > 0 && width % heads == 0, "attention: width not divisible by heads");
  require(static_cast<int>(key_mask.size()) == batch * seq, "attention: key mask size mismatch");
  const int dh = width / heads;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor out({batch * seq, width});
  std::vector<RowMatrix> probs(static_cast<std::size_t>(batch) * heads);
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  const auto Q = q.value().mat();
  const auto K = k.value().mat();
  const auto V = v.value().mat();
  auto O = out.mat();
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = Q.block(b * seq, h * dh, seq, dh);
      const auto kb = K.block(b * seq, h * dh, seq, dh);
      const auto vb = V.block(b * seq, h * dh, seq, dh);
      RowMatrix s = (qb * kb.transpose()) * inv;
      for (int i = 0; i < seq; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < seq; ++j)
          if (mask[b * seq + j]) mx = std::max(mx, s(i, j));
        double denom = 0.0;
        for (int j = 0; j < seq; ++j) {
          if (mask[b * seq + j]) {
            s(i, j) = std::exp(s(i, j) - mx);
            denom += s(i, j);
          } else {
            s(i, j) = 0.0f;
          }
        }
        if (denom > 0.0) s.row(i) /= static_cast<float>(denom);
      }
      O.block(b * seq, h * dh, seq, dh).noalias() = s * vb;
      probs[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  }
  return make_result(std::move(out), {q, k, v},
                     [probs = std::move(probs), batch, seq, heads, dh, inv](Node& self) {
                       Node& pq = parent(self, 0);
                       Node& pk = parent(self, 1);
                       Node& pv = parent(self, 2);
                       const auto Q = pq.value.mat();
                       const auto K = pk.value.mat();
                       const auto V = pv.value.mat();
                       const auto G = self.grad.mat();
                       auto dQ = pq.ensure_grad().mat();
                       auto dK = pk.ensure_grad().mat();
                       auto dV = pv.ensure_grad().mat();
                       for (int b = 0; b < batch; ++b) {
                         for (int h = 0; h < heads; ++h) {
                           const RowMatrix& P = probs[static_cast<std::size_t>(b) * heads + h];
                           const auto gb = G.block(b * seq, h * dh, seq, dh);
                           dV.block(b * seq, h * dh, seq, dh).noalias() += P.transpose() * gb;
                           RowMatrix dP = gb * V.block(b * seq, h * dh, seq, dh).transpose();
                           RowMatrix dS(seq, seq);
                           for (int i = 0; i < seq; ++i) {
                             const float dot = P.row(i).dot(dP.row(i));
                             dS.row(i) = P.row(i).cwiseProduct(dP.row(i).array().matrix()) -
                                         dot * P.row(i);
                           }
                           dS *= inv;
                           dQ.block(b * seq, h * dh, seq, dh).noalias() +=
                               dS * K.block(b * seq, h * dh, seq, dh);
                           dK.block(b * seq, h * dh, seq, dh).noalias() +=
                               dS.transpose() * Q.block(b * seq, h * dh, seq, dh);
                         }
                       }
                     });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad) {
  require(x.value().rank() == 4, "conv2d: input must be [B, C, H, W], got " + x.value().shape_string());
  const int B = x.value().dim(0);
  const int C = x.value().dim(1);
  const int H = x.value().dim(2);
  const int W = x.value().dim(3);
  const int cout = weight.rows();
  require(weight.cols() == C * kernel * kernel, "conv2d: weight shape " +
                                                    weight.value().shape_string() +
                                                    " does not match input channels");
  require(static_cast<int>(bias.value().numel()) == cout, "conv2d: bias size mismatch");
  const int Ho = (H + 2 * pad - kernel) / stride + 1;
  const int Wo = (W + 2 * pad - kernel) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: output would be empty");
  const int patch = C * kernel * kernel;
  const int npos = Ho * Wo;

  Tensor out({B, cout, Ho, Wo});
  std::vector<RowMatrix> cols(B);
  const float* in = x.value().data();
  const auto Wm = weight.value().mat();
  const auto bvec = Eigen::Map<const Eigen::VectorXf>(bias.value().data(), cout);
  for (int b = 0; b < B; ++b) {
    RowMatrix& col = cols[b];
    col.setZero(patch, npos);
    const float* img = in + static_cast<std::size_t>(b) * C * H * W;
    for (int c = 0; c < C; ++c) {
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          const int row = (c * kernel + ky) * kernel + kx;
          float* dst = col.row(row).data();
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const float* src = img + (static_cast<std::size_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) dst[oy * Wo + ox] = src[ix];
            }
          }
        }
      }
    }
    MatrixMap ob(out.data() + static_cast<std::size_t>(b) * cout * npos, cout, npos);
    ob.noalias() = Wm * col;
    ob.colwise() += bvec;
  }
  return make_result(
      std::move(out), {x, weight, bias},
      [cols = std::move(cols), B, C, H, W, Ho, Wo, kernel, stride, pad, cout](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        Node& pb = parent(self, 2);
        const int npos = Ho * Wo;
        for (int b = 0; b < B; ++b) {
          ConstMatrixMap gb(self.grad.data() + static_cast<std::size_t>(b) * cout * npos, cout, npos);
          if (pw.requires_grad) pw.ensure_grad().mat().noalias() += gb * cols[b].transpose();
          if (pb.requires_grad) {
            Eigen::Map<Eigen::VectorXf>(pb.ensure_grad().data(), cout) += gb.rowwise().sum();
          }
          if (px.requires_grad) {
            RowMatrix dcol = pw.value.mat().transpose() * gb;
            float* dimg = px.ensure_grad().data() + static_cast<std::size_t>(b) * C * H * W;
            for (int c = 0; c < C; ++c) {
              for (int ky = 0; ky < kernel; ++ky) {
                for (int kx = 0; kx < kernel; ++kx) {
                  const int row = (c * kernel + ky) * kernel + kx;
                  const float* src = dcol.row(row).data();
                  for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    float* dst = dimg + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Var adaptive_avg_pool_flat(const Var& x, int grid_h, int grid_w) {
  require(x.value().rank() == 4, "adaptive_avg_pool_flat: input must be [B, C, H, W]");
  const int B = x.value().dim(0);
  const int C = x.value().dim(1);
  const int H = x.value().dim(2);
  const int W = x.value().dim(3);
  require(grid_h > 0 && grid_w > 0 && grid_h <= H && grid_w <= W,
          "adaptive_avg_pool_flat: grid larger than feature map");
  auto lo = [](int i, int n, int g) { return (i * n) / g; };
  auto hi = [](int i, int n, int g) { return ((i + 1) * n + g - 1) / g; };
  Tensor out({B, C * grid_h * grid_w});
  const float* in = x.value().data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
          const int y0 = lo(gy, H, grid_h), y1 = hi(gy, H, grid_h);
          const int x0 = lo(gx, W, grid_w), x1 = hi(gx, W, grid_w);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx)
              acc += in[((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx];
          out[static_cast<std::size_t>(b) * C * grid_h * grid_w + (c * grid_h + gy) * grid_w + gx] =
              static_cast<float>(acc / ((y1 - y0) * (x1 - x0)));
        }
  return make_result(std::move(out), {x}, [B, C, H, W, grid_h, grid_w, lo, hi](Node& self) {
    Node& p = parent(self, 0);
    float* g = p.ensure_grad().data();
    const float* up = self.grad.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int gy = 0; gy < grid_h; ++gy)
          for (int gx = 0; gx < grid_w; ++gx) {
            const int y0 = lo(gy, H, grid_h), y1 = hi(gy, H, grid_h);
            const int x0 = lo(gx, W, grid_w), x1 = hi(gx, W, grid_w);
            const float share =
                up[static_cast<std::size_t>(b) * C * grid_h * grid_w + (c * grid_h + gy) * grid_w + gx] /
                static_cast<float>((y1 - y0) * (x1 - x0));
            for (int y = y0; y < y1; ++y)
              for (int xx = x0; xx < x1; ++xx)
                g[((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx] += share;
          }
  });
}

Var global_max_pool(const Var& x) {
  require(x.value().rank() == 4, "global_max_pool: input must be [B, C, H, W]");
  const int B = x.value().dim(0);
  const int C = x.value().dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.value().dim(2)) * x.value().dim(3);
  Tensor out({B, C});
  std::vector<std::size_t> argmax(static_cast<std::size_t>(B) * C);
  const float* in = x.value().data();
  for (std::size_t bc = 0; bc < argmax.size(); ++bc) {
    const float* src = in + bc * plane;
    std::size_t best = 0;
    for (std::size_t i = 1; i < plane; ++i)
      if (src[i] > src[best]) best = i;
    argmax[bc] = bc * plane + best;
    out[bc] = src[best];
  }
  return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    float* g = parent(self, 0).ensure_grad().data();
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int rows = parts.front().rows();
  int cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Tensor out({rows, cols});
  std::vector<int> offsets;
  int c = 0;
  for (const auto& p : parts) {
    offsets.push_back(c);
    out.mat().middleCols(c, p.cols()) = p.value().mat();
    c += p.cols();
  }
  return make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    const auto up = self.grad.mat();
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      auto g = p.ensure_grad().mat();
      g += up.middleCols(offsets[i], g.cols());
    }
  });
}

Var l2_normalize_rows(const Var& x, float eps) {
  const int rows = x.rows();
  Tensor out = x.value();
  std::vector<float> norms(rows);
  std::vector<std::uint8_t> clamped(rows);
  auto m = out.mat();
  for (int r = 0; r < rows; ++r) {
    const double n = std::sqrt(static_cast<double>(m.row(r).cast<double>().squaredNorm()));
    clamped[r] = n <= eps;
    norms[r] = clamped[r] ? eps : static_cast<float>(n);
    m.row(r) /= norms[r];
  }
  return make_result(std::move(out), {x},
                     [norms = std::move(norms), clamped = std::move(clamped)](Node& self) {
                       Node& p = parent(self, 0);
                       auto g = p.ensure_grad().mat();
                       const auto up = self.grad.mat();
                       const auto y = self.value.mat();
                       for (int r = 0; r < y.rows(); ++r) {
                         if (clamped[r]) {
                           g.row(r) += up.row(r) / norms[r];
                         } else {
                           const float dot = y.row(r).dot(up.row(r));
                           g.row(r) += (up.row(r) - dot * y.row(r)) / norms[r];
                         }
                       }
                     });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> targets) {
  const int rows = logits.rows();
  const int cols = logits.cols();
  require(static_cast<int>(targets.size()) == rows, "softmax_cross_entropy: target count mismatch");
  std::vector<int> tgt(targets.begin(), targets.end());
  RowMatrix grad(rows, cols);
  double total = 0.0;
  const auto L = logits.value().mat();
  for (int r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || tgt[r] >= cols) throw ContractError("softmax_cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(L(r, c)));
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(L(r, c)) - mx);
    const double lse = mx + std::log(denom);
    total += lse - L(r, tgt[r]);
    for (int c = 0; c < cols; ++c) {
      const double p = std::exp(static_cast<double>(L(r, c)) - lse);
      grad(r, c) = static_cast<float>((p - (c == tgt[r] ? 1.0 : 0.0)) / rows);
    }
  }
  Tensor out({1}, static_cast<float>(rows ? total / rows : 0.0));
  return make_result(std::move(out), {logits}, [grad = std::move(grad)](Node& self) {
    Node& p = parent(self, 0);
    p.ensure_grad().mat() += self.grad[0] * grad;
  });
}

}  // namespace mammovl::nn
