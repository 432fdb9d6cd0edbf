#pragma once

// Primitive differentiable operations over Tape-recorded tensors. Every op
// records its own backward rule; gradients accumulate (+=) into inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lpa/autodiff.hpp"

namespace lpa {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) throw ConfigError(op + ": " + msg);
}

inline std::string dim_mismatch(const char* what, std::size_t got, std::size_t want) {
  return std::string(what) + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& op) {
  if (!t.all_finite()) throw NumericError(op + ": produced a non-finite value");
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const std::string& op, const char* name) {
  if (t.rank() != rank)
    throw ConfigError(op + ": " + name + " must have rank " + std::to_string(rank) + ", got shape " +
                      shape_string(t.shape()));
}

// 3x3, padding 1, stride 1: cols is [C*9, H*W].
template <typename T>
void im2col3x3(const T* img, std::size_t C, std::size_t H, std::size_t W, T* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = img + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + ((c * 3 + ky) * 3 + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          T* out = row + y * W;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(out, out + W, T(0));
            continue;
          }
          const T* src = plane + sy * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            out[x] = (sx < 0 || sx >= static_cast<long>(W)) ? T(0) : src[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* cols, std::size_t C, std::size_t H, std::size_t W, T* img) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = img + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 3 + ky) * 3 + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          T* dst = plane + sy * W;
          const T* in = row + y * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += in[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Direct-loop 3x3 cross-correlation (padding 1, stride 1). Slow; kept as the
/// reference the im2col path is tested against.
template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = kernel.dim(0);
  Tensor<T> out({N, F, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          T acc = bias[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long sy = static_cast<long>(y + ky) - 1;
                const long sx = static_cast<long>(x + kx) - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                acc += input.at(n, c, sy, sx) * kernel.at(f, c, ky, kx);
              }
          out.at(n, f, y, x) = acc;
        }
  return out;
}

/// 3x3 convolution, zero padding 1, stride 1: [N,C,H,W] x [F,C,3,3] + [F] -> [N,F,H,W].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  const std::string op = "conv2d";
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  const Tensor<T>& b = bias.value();
  detail::require_rank(x, 4, op, "input");
  detail::require_rank(k, 4, op, "kernel");
  detail::require_rank(b, 1, op, "bias");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = k.dim(0);
  detail::require(k.dim(2) == 3 && k.dim(3) == 3, op, "kernel spatial size must be 3x3, got " + shape_string(k.shape()));
  detail::require(k.dim(1) == C, op, detail::dim_mismatch("kernel input-channel dimension", k.dim(1), C));
  detail::require(b.dim(0) == F, op, detail::dim_mismatch("bias length", b.dim(0), F));

  const std::size_t HW = H * W, K9 = C * 9;
  Tensor<T> out({N, F, H, W});
  AlignedVector<T> cols(K9 * HW);
  detail::ConstMatrixMap<T> kmat(k.data(), F, K9);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(b.data(), F);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col3x3(x.data() + n * C * HW, C, H, W, cols.data());
    detail::MatrixMap<T> o(out.data() + n * F * HW, F, HW);
    o.noalias() = kmat * detail::ConstMatrixMap<T>(cols.data(), K9, HW);
    o.colwise() += bvec;
  }
  detail::require_finite(out, op);

  return input.tape->record(std::move(out), [in = input.id, ker = kernel.id, bi = bias.id, N, C, H, W, F](Tape<T>& t,
                                                                                                          std::size_t self) {
    const std::size_t HW = H * W, K9 = C * 9;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(in);
    const Tensor<T>& kv = t.value(ker);
    Tensor<T>& gx = t.grad(in);
    Tensor<T>& gk = t.grad(ker);
    Tensor<T>& gb = t.grad(bi);
    detail::ConstMatrixMap<T> kmat(kv.data(), F, K9);
    detail::MatrixMap<T> gkmat(gk.data(), F, K9);
    AlignedVector<T> cols(K9 * HW), dcols(K9 * HW);
    for (std::size_t n = 0; n < N; ++n) {
      detail::ConstMatrixMap<T> go(g.data() + n * F * HW, F, HW);
      detail::im2col3x3(xv.data() + n * C * HW, C, H, W, cols.data());
      gkmat.noalias() += go * detail::ConstMatrixMap<T>(cols.data(), K9, HW).transpose();
      detail::MatrixMap<T>(dcols.data(), K9, HW).noalias() = kmat.transpose() * go;
      detail::col2im3x3(dcols.data(), C, H, W, gx.data() + n * C * HW);
      for (std::size_t f = 0; f < F; ++f) gb[f] += go.row(f).sum();
    }
  });
}

/// Per-pixel channel projection: [N,C,H,W] x [F,C,1,1] + [F] -> [N,F,H,W].
template <typename T>
Var<T> conv1x1(Var<T> input, Var<T> kernel, Var<T> bias) {
  const std::string op = "conv1x1";
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  const Tensor<T>& b = bias.value();
  detail::require_rank(x, 4, op, "input");
  detail::require_rank(k, 4, op, "kernel");
  detail::require_rank(b, 1, op, "bias");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = k.dim(0);
  detail::require(k.dim(2) == 1 && k.dim(3) == 1, op, "kernel spatial size must be 1x1, got " + shape_string(k.shape()));
  detail::require(k.dim(1) == C, op, detail::dim_mismatch("kernel input-channel dimension", k.dim(1), C));
  detail::require(b.dim(0) == F, op, detail::dim_mismatch("bias length", b.dim(0), F));

  const std::size_t HW = H * W;
  Tensor<T> out({N, F, H, W});
  detail::ConstMatrixMap<T> kmat(k.data(), F, C);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(b.data(), F);
  for (std::size_t n = 0; n < N; ++n) {
    detail::MatrixMap<T> o(out.data() + n * F * HW, F, HW);
    o.noalias() = kmat * detail::ConstMatrixMap<T>(x.data() + n * C * HW, C, HW);
    o.colwise() += bvec;
  }
  detail::require_finite(out, op);

  return input.tape->record(std::move(out), [in = input.id, ker = kernel.id, bi = bias.id, N, C, HW, F](
                                                Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(in);
    detail::ConstMatrixMap<T> kmat(t.value(ker).data(), F, C);
    Tensor<T>& gx = t.grad(in);
    detail::MatrixMap<T> gkmat(t.grad(ker).data(), F, C);
    Tensor<T>& gb = t.grad(bi);
    for (std::size_t n = 0; n < N; ++n) {
      detail::ConstMatrixMap<T> go(g.data() + n * F * HW, F, HW);
      gkmat.noalias() += go * detail::ConstMatrixMap<T>(xv.data() + n * C * HW, C, HW).transpose();
      detail::MatrixMap<T>(gx.data() + n * C * HW, C, HW).noalias() += kmat.transpose() * go;
      for (std::size_t f = 0; f < F; ++f) gb[f] += go.row(f).sum();
    }
  });
}

/// Non-overlapping 2x2 max pooling. Ties resolve to the first element in
/// row-major window order.
template <typename T>
Var<T> maxpool2x2(Var<T> input) {
  const std::string op = "maxpool2x2";
  const Tensor<T>& x = input.value();
  detail::require_rank(x, 4, op, "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(H % 2 == 0, op, "height must be even, got " + std::to_string(H));
  detail::require(W % 2 == 0, op, "width must be even, got " + std::to_string(W));
  const std::size_t OH = H / 2, OW = W / 2;
  Tensor<T> out({N, C, OH, OW});
  std::vector<std::uint32_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x.data() + nc * H * W;
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx, ++o) {
        std::size_t best = (2 * y) * W + 2 * xx;
        for (std::size_t idx : {best + 1, best + W, best + W + 1})
          if (plane[idx] > plane[best]) best = idx;
        out[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(nc * H * W + best);
      }
  }
  return input.tape->record(std::move(out), [in = input.id, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(in);
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
  });
}

/// Affine map [N,D] x [D,K] + [K] -> [N,K].
template <typename T>
Var<T> dense(Var<T> input, Var<T> weights, Var<T> bias) {
  const std::string op = "dense";
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weights.value();
  const Tensor<T>& b = bias.value();
  detail::require_rank(x, 2, op, "input");
  detail::require_rank(w, 2, op, "weights");
  detail::require_rank(b, 1, op, "bias");
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
  detail::require(w.dim(0) == D, op, detail::dim_mismatch("weights input dimension", w.dim(0), D));
  detail::require(b.dim(0) == K, op, detail::dim_mismatch("bias length", b.dim(0), K));

  Tensor<T> out({N, K});
  detail::MatrixMap<T> o(out.data(), N, K);
  o.noalias() = detail::ConstMatrixMap<T>(x.data(), N, D) * detail::ConstMatrixMap<T>(w.data(), D, K);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), K);
  detail::require_finite(out, op);

  return input.tape->record(std::move(out), [in = input.id, wi = weights.id, bi = bias.id, N, D, K](Tape<T>& t,
                                                                                                 std::size_t self) {
    detail::ConstMatrixMap<T> go(t.grad(self).data(), N, K);
    detail::ConstMatrixMap<T> xv(t.value(in).data(), N, D);
    detail::ConstMatrixMap<T> wv(t.value(wi).data(), D, K);
    detail::MatrixMap<T>(t.grad(in).data(), N, D).noalias() += go * wv.transpose();
    detail::MatrixMap<T>(t.grad(wi).data(), D, K).noalias() += xv.transpose() * go;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.grad(bi).data(), K) += go.colwise().sum();
  });
}

template <typename T>
Var<T> relu(Var<T> input) {
  const Tensor<T>& x = input.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return input.tape->record(std::move(out), [in = input.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(in);
    Tensor<T>& gx = t.grad(in);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

namespace detail {

template <typename T>
void softmax_rows(const T* in, T* out, std::size_t rows, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = in + r * m;
    T* y = out + r * m;
    const T mx = *std::max_element(a, a + m);
    T total = 0;
    for (std::size_t j = 0; j < m; ++j) total += (y[j] = std::exp(a[j] - mx));
    // floor at the smallest normal so every entry stays strictly positive
    for (std::size_t j = 0; j < m; ++j) y[j] = std::max(y[j] / total, std::numeric_limits<T>::min());
  }
}

}  // namespace detail

/// Softmax along the last axis with max subtraction.
template <typename T>
Var<T> softmax(Var<T> input) {
  const Tensor<T>& x = input.value();
  if (x.rank() == 0) throw ConfigError("softmax: input must have at least one axis");
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.size() / m;
  Tensor<T> out(x.shape());
  detail::softmax_rows(x.data(), out.data(), rows, m);
  detail::require_finite(out, "softmax");
  return input.tape->record(std::move(out), [in = input.id, rows, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad(in);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += y[r * m + j] * (g[r * m + j] - dot);
    }
  });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of the true labels; probabilities are clamped
/// below at 1e-12 before the log.
template <typename T>
Var<T> cross_entropy(Var<T> probs, std::span<const int> labels) {
  const Tensor<T>& p = probs.value();
  detail::require_rank(p, 2, "cross_entropy", "probs");
  const std::size_t N = p.dim(0), K = p.dim(1);
  if (labels.size() != N)
    throw ConfigError("cross_entropy: " + detail::dim_mismatch("label count", labels.size(), N));
  std::vector<int> y(labels.begin(), labels.end());
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (y[n] < 0 || static_cast<std::size_t>(y[n]) >= K)
      throw InputError("cross_entropy: label " + std::to_string(y[n]) + " at row " + std::to_string(n) +
                       " outside [0, " + std::to_string(K) + ")");
    loss -= std::log(std::max(p[n * K + y[n]], static_cast<T>(kProbabilityFloor)));
  }
  Tensor<T> out(Shape{}, std::vector<T>{loss / static_cast<T>(N)});
  detail::require_finite(out, "cross_entropy");
  return probs.tape->record(std::move(out), [in = probs.id, y = std::move(y), N, K](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    const Tensor<T>& pv = t.value(in);
    Tensor<T>& gp = t.grad(in);
    for (std::size_t n = 0; n < N; ++n) {
      const T pn = pv[n * K + y[n]];
      if (pn > static_cast<T>(kProbabilityFloor)) gp[n * K + y[n]] -= g / (static_cast<T>(N) * pn);
    }
  });
}

/// [N, ...] -> [N, prod(...)]
template <typename T>
Var<T> flatten(Var<T> input) {
  const Tensor<T>& x = input.value();
  const std::size_t n = x.dim(0);
  return input.tape->record(x.reshaped({n, x.size() / n}), [in = input.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(in);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Concatenate rank-2 tensors along axis 1.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const std::size_t N = parts.front().value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    detail::require_rank(p.value(), 2, "concat", "input");
    if (p.value().dim(0) != N) throw ConfigError("concat: " + detail::dim_mismatch("batch dimension", p.value().dim(0), N));
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor<T> out({N, total});
  for (std::size_t n = 0, off = 0; n < N; ++n, off = 0)
    for (std::size_t i = 0; i < parts.size(); off += widths[i], ++i)
      std::copy_n(parts[i].value().data() + n * widths[i], widths[i], out.data() + n * total + off);
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(std::move(out), [ids, widths, N, total](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ids.size(); off += widths[i], ++i) {
      Tensor<T>& gp = t.grad(ids[i]);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < widths[i]; ++j) gp[n * widths[i] + j] += g[n * total + off + j];
    }
  });
}

/// Elementwise mean of same-shaped tensors.
template <typename T>
Var<T> mean(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("mean: no inputs");
  const Shape shape = parts.front().shape();
  Tensor<T> out(shape);
  for (const Var<T>& p : parts) {
    if (p.shape() != shape)
      throw ConfigError("mean: shape " + shape_string(p.shape()) + " differs from " + shape_string(shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.value()[i];
  }
  const T inv = T(1) / static_cast<T>(parts.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(std::move(out), [ids, inv](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t id : ids) {
      Tensor<T>& gp = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += inv * g[i];
    }
  });
}

/// Sum of all elements as a scalar.
template <typename T>
Var<T> sum(Var<T> input) {
  const Tensor<T>& x = input.value();
  T total = 0;
  for (T v : x.values()) total += v;
  return input.tape->record(Tensor<T>(Shape{}, std::vector<T>{total}), [in = input.id](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(in);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// Elementwise product of same-shaped tensors.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ConfigError("mul: shape " + shape_string(a.shape()) + " differs from " + shape_string(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return a.tape->record(std::move(out), [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T av = t.value(ai)[i], bv = t.value(bi)[i];
      t.grad(ai)[i] += g[i] * bv;
      t.grad(bi)[i] += g[i] * av;
    }
  });
}

template <typename T>
Var<T> scale(Var<T> input, T factor) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.value()[i] * factor;
  return input.tape->record(std::move(out), [in = input.id, factor](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(in);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

}  // namespace lpa
