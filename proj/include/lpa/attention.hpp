#pragma once

// Spatial attention over local feature maps, conditioned on a global feature.
//
// Local features L are [N,D,H,W] (one D-vector l_i per position i of the
// n = H*W grid), the global feature g is [N,D]. Scores are [N,n]:
//   dot-product:    c_i = <l_i, g>
//   parametrised:   c_i = <u, l_i + g>      (one learned u in R^D per level)
// The attention map is a row-wise softmax of the scores, and the attended
// descriptor is g_a = sum_i a_i l_i.

#include <optional>
#include <string>

#include "lpa/ops.hpp"

namespace lpa {

enum class Compatibility { dot_product, parametrised };

inline const char* to_string(Compatibility c) { return c == Compatibility::dot_product ? "dp" : "pc"; }

/// Learned parameters of one attention level. `u` is bound only for the
/// parametrised variant; the projection only when the tap width differs from D.
template <typename T>
struct CompatParams {
  std::optional<Var<T>> u;
  std::optional<Var<T>> projection_kernel;
  std::optional<Var<T>> projection_bias;
};

/// Aligns the channel count of a local feature map to `global_dim`.
template <typename T>
Var<T> project_local(Var<T> local, std::size_t global_dim, const CompatParams<T>& params) {
  const std::size_t channels = local.value().dim(1);
  const bool has_projection = params.projection_kernel.has_value();
  if (channels == global_dim) {
    if (has_projection) throw ConfigError("project_local: projection given but local width already equals D");
    return local;
  }
  if (!has_projection || !params.projection_bias)
    throw ConfigError("project_local: local width " + std::to_string(channels) + " differs from D = " +
                      std::to_string(global_dim) + " and no projection was supplied");
  Var<T> out = conv1x1(local, *params.projection_kernel, *params.projection_bias);
  if (out.value().dim(1) != global_dim)
    throw ConfigError("project_local: projection produces " + std::to_string(out.value().dim(1)) +
                      " channels, expected " + std::to_string(global_dim));
  return out;
}

namespace detail {

template <typename T>
void require_local_global(const Tensor<T>& local, const Tensor<T>& global, const std::string& op) {
  require_rank(local, 4, op, "local features");
  require_rank(global, 2, op, "global feature");
  require(global.dim(0) == local.dim(0), op, dim_mismatch("global batch dimension", global.dim(0), local.dim(0)));
  require(global.dim(1) == local.dim(1), op, dim_mismatch("global feature dimension", global.dim(1), local.dim(1)));
}

}  // namespace detail

/// c_i = <l_i, g>
template <typename T>
Var<T> compat_dp(Var<T> local, Var<T> global) {
  const Tensor<T>& l = local.value();
  const Tensor<T>& g = global.value();
  detail::require_local_global(l, g, "compat_dp");
  const std::size_t N = l.dim(0), D = l.dim(1), n = l.dim(2) * l.dim(3);
  Tensor<T> scores({N, n});
  for (std::size_t b = 0; b < N; ++b) {
    detail::MatrixMap<T>(scores.data() + b * n, 1, n).noalias() =
        detail::ConstMatrixMap<T>(g.data() + b * D, 1, D) * detail::ConstMatrixMap<T>(l.data() + b * D * n, D, n);
  }
  detail::require_finite(scores, "compat_dp");
  return local.tape->record(std::move(scores), [li = local.id, gi = global.id, N, D, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gs = t.grad(self);
    const Tensor<T>& lv = t.value(li);
    const Tensor<T>& gv = t.value(gi);
    Tensor<T>& gl = t.grad(li);
    Tensor<T>& gg = t.grad(gi);
    for (std::size_t b = 0; b < N; ++b) {
      detail::ConstMatrixMap<T> dc(gs.data() + b * n, 1, n);
      // dL/dl_i = dc_i * g ; dL/dg = sum_i dc_i * l_i
      detail::MatrixMap<T>(gl.data() + b * D * n, D, n).noalias() +=
          detail::ConstMatrixMap<T>(gv.data() + b * D, 1, D).transpose() * dc;
      detail::MatrixMap<T>(gg.data() + b * D, 1, D).noalias() +=
          dc * detail::ConstMatrixMap<T>(lv.data() + b * D * n, D, n).transpose();
    }
  });
}

/// c_i = <u, l_i + g>
template <typename T>
Var<T> compat_pc(Var<T> local, Var<T> global, Var<T> u) {
  const Tensor<T>& l = local.value();
  const Tensor<T>& g = global.value();
  const Tensor<T>& uv = u.value();
  detail::require_local_global(l, g, "compat_pc");
  detail::require_rank(uv, 1, "compat_pc", "u");
  const std::size_t N = l.dim(0), D = l.dim(1), n = l.dim(2) * l.dim(3);
  detail::require(uv.dim(0) == D, "compat_pc", detail::dim_mismatch("u length", uv.dim(0), D));
  Tensor<T> scores({N, n});
  detail::ConstMatrixMap<T> urow(uv.data(), 1, D);
  for (std::size_t b = 0; b < N; ++b) {
    const T ug = (urow * detail::ConstMatrixMap<T>(g.data() + b * D, 1, D).transpose())(0, 0);
    detail::MatrixMap<T> s(scores.data() + b * n, 1, n);
    s.noalias() = urow * detail::ConstMatrixMap<T>(l.data() + b * D * n, D, n);
    s.array() += ug;
  }
  detail::require_finite(scores, "compat_pc");
  return local.tape->record(std::move(scores), [li = local.id, gi = global.id, ui = u.id, N, D, n](Tape<T>& t,
                                                                                                  std::size_t self) {
    const Tensor<T>& gs = t.grad(self);
    const Tensor<T>& lv = t.value(li);
    const Tensor<T>& gv = t.value(gi);
    detail::ConstMatrixMap<T> urow(t.value(ui).data(), 1, D);
    Tensor<T>& gl = t.grad(li);
    Tensor<T>& gg = t.grad(gi);
    detail::MatrixMap<T> gu(t.grad(ui).data(), 1, D);
    for (std::size_t b = 0; b < N; ++b) {
      detail::ConstMatrixMap<T> dc(gs.data() + b * n, 1, n);
      const T total = dc.sum();
      detail::MatrixMap<T>(gl.data() + b * D * n, D, n).noalias() += urow.transpose() * dc;
      detail::MatrixMap<T>(gg.data() + b * D, 1, D) += total * urow;
      gu.noalias() += dc * detail::ConstMatrixMap<T>(lv.data() + b * D * n, D, n).transpose();
      gu += total * detail::ConstMatrixMap<T>(gv.data() + b * D, 1, D);
    }
  });
}

/// Softmax over the n spatial positions of each row.
template <typename T>
Var<T> attention_normalize(Var<T> scores) {
  detail::require_rank(scores.value(), 2, "attention_normalize", "scores");
  return softmax(scores);
}

/// g_a = sum_i a_i * l_i, producing [N,D].
template <typename T>
Var<T> attend(Var<T> local, Var<T> attention) {
  const Tensor<T>& l = local.value();
  const Tensor<T>& a = attention.value();
  detail::require_rank(l, 4, "attend", "local features");
  detail::require_rank(a, 2, "attend", "attention map");
  const std::size_t N = l.dim(0), D = l.dim(1), n = l.dim(2) * l.dim(3);
  detail::require(a.dim(0) == N, "attend", detail::dim_mismatch("attention batch dimension", a.dim(0), N));
  detail::require(a.dim(1) == n, "attend", detail::dim_mismatch("attention length", a.dim(1), n));
  Tensor<T> out({N, D});
  for (std::size_t b = 0; b < N; ++b) {
    detail::MatrixMap<T>(out.data() + b * D, D, 1).noalias() =
        detail::ConstMatrixMap<T>(l.data() + b * D * n, D, n) * detail::ConstMatrixMap<T>(a.data() + b * n, n, 1);
  }
  detail::require_finite(out, "attend");
  return local.tape->record(std::move(out), [li = local.id, ai = attention.id, N, D, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    const Tensor<T>& lv = t.value(li);
    const Tensor<T>& av = t.value(ai);
    Tensor<T>& gl = t.grad(li);
    Tensor<T>& ga = t.grad(ai);
    for (std::size_t b = 0; b < N; ++b) {
      detail::ConstMatrixMap<T> dg(go.data() + b * D, D, 1);
      detail::MatrixMap<T>(gl.data() + b * D * n, D, n).noalias() +=
          dg * detail::ConstMatrixMap<T>(av.data() + b * n, 1, n);
      detail::MatrixMap<T>(ga.data() + b * n, 1, n).noalias() +=
          dg.transpose() * detail::ConstMatrixMap<T>(lv.data() + b * D * n, D, n);
    }
  });
}

/// Everything one attention level produces in a forward pass.
template <typename T>
struct AttentionLevel {
  Var<T> scores;
  Var<T> attention;
  Var<T> descriptor;
};

/// project -> score -> normalize -> pool, for one level.
template <typename T>
AttentionLevel<T> attention_level(Var<T> local, Var<T> global, Compatibility compat, const CompatParams<T>& params) {
  const Var<T> projected = project_local(local, global.value().dim(1), params);
  Var<T> scores = [&] {
    if (compat == Compatibility::dot_product) return compat_dp(projected, global);
    if (!params.u) throw ConfigError("attention_level: parametrised compatibility requires u");
    return compat_pc(projected, global, *params.u);
  }();
  Var<T> att = attention_normalize(scores);
  return {scores, att, attend(projected, att)};
}

}  // namespace lpa
