#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mlcaps/ops.hpp"
#include "mlcaps/tensor.hpp"

namespace mlcaps {

inline constexpr double kSquashEpsilon = 1e-7;

namespace detail {

// v = (|s|^2 / (1 + |s|^2)) * s / (|s| + eps)
template <typename T>
void squash_vector(const T* s, T* v, std::size_t dim) {
  T n2 = T(0);
  for (std::size_t d = 0; d < dim; ++d) n2 += s[d] * s[d];
  const T n = std::sqrt(n2);
  const T a = n2 / ((T(1) + n2) * (n + T(kSquashEpsilon)));
  for (std::size_t d = 0; d < dim; ++d) v[d] = a * s[d];
}

// gs += J_squash(s)^T gv
template <typename T>
void squash_vector_backward(const T* s, const T* gv, T* gs, std::size_t dim) {
  T n2 = T(0), sg = T(0);
  for (std::size_t d = 0; d < dim; ++d) {
    n2 += s[d] * s[d];
    sg += s[d] * gv[d];
  }
  const T n = std::sqrt(n2);
  const T eps = T(kSquashEpsilon);
  const T den = (T(1) + n2) * (n + eps);
  const T a = n2 / den;
  // a'(n) / n, finite at n = 0.
  const T da_over_n = (T(2) * den - n * (T(2) * n * (n + eps) + T(1) + n2)) / (den * den);
  const T radial = da_over_n * sg;
  for (std::size_t d = 0; d < dim; ++d) gs[d] += a * gv[d] + radial * s[d];
}

// Routing by agreement for one batch item.
//   uhat: [I, K, D] predictions, logits: scratch [I, K]
//   coupling: final coefficients [I, K], s_out / v_out: [K, D]
// If history is non-null, the coefficients of every iteration are appended.
template <typename T>
void route_item(const T* uhat, std::size_t in_caps, std::size_t classes, std::size_t dim,
                std::size_t iters, T* logits, T* coupling, T* s_out, T* v_out,
                std::vector<T>* history = nullptr) {
  std::fill_n(logits, in_caps * classes, T(0));
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < in_caps; ++i) {
      const T* b = logits + i * classes;
      T* c = coupling + i * classes;
      T mx = b[0];
      for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, b[k]);
      T z = T(0);
      for (std::size_t k = 0; k < classes; ++k) z += (c[k] = std::exp(b[k] - mx));
      for (std::size_t k = 0; k < classes; ++k) c[k] /= z;
    }
    if (history) history->insert(history->end(), coupling, coupling + in_caps * classes);
    std::fill_n(s_out, classes * dim, T(0));
    for (std::size_t i = 0; i < in_caps; ++i)
      for (std::size_t k = 0; k < classes; ++k) {
        const T c = coupling[i * classes + k];
        const T* u = uhat + (i * classes + k) * dim;
        T* s = s_out + k * dim;
        for (std::size_t d = 0; d < dim; ++d) s[d] += c * u[d];
      }
    for (std::size_t k = 0; k < classes; ++k) squash_vector(s_out + k * dim, v_out + k * dim, dim);
    if (it + 1 == iters) break;
    for (std::size_t i = 0; i < in_caps; ++i)
      for (std::size_t k = 0; k < classes; ++k) {
        const T* u = uhat + (i * classes + k) * dim;
        const T* v = v_out + k * dim;
        T agree = T(0);
        for (std::size_t d = 0; d < dim; ++d) agree += u[d] * v[d];
        logits[i * classes + k] += agree;
      }
  }
}

inline void check_iters(std::size_t iters) {
  if (iters < 1) throw config_error("routing: iteration count must be >= 1");
}

}  // namespace detail

// Squash along the trailing axis.
template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  const std::size_t dim = s.shape().back();
  const std::size_t rows = s.size() / dim;
  std::vector<T> out(s.size());
  for (std::size_t r = 0; r < rows; ++r)
    detail::squash_vector(s.data().data() + r * dim, out.data() + r * dim, dim);
  return make_result<T>(s.shape(), std::move(out), "squash", {s}, [dim, rows](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      detail::squash_vector_backward(p.data.data() + r * dim, self.grad.data() + r * dim,
                                     g.data() + r * dim, dim);
  });
}

// Prediction vectors u_hat[b,i,k,:] = u[b,i,:] * W[i,k,:,:].
template <typename T>
Tensor<T> capsule_predict(const Tensor<T>& u, const Tensor<T>& weight) {
  if (u.rank() != 3 || weight.rank() != 4 || weight.dim(0) != u.dim(1) ||
      weight.dim(2) != u.dim(2))
    throw dimension_error("capsule_predict: input " + shape_str(u.shape()) + " vs weights " +
                          shape_str(weight.shape()));
  const std::size_t batch = u.dim(0), in_caps = u.dim(1), din = u.dim(2);
  const std::size_t classes = weight.dim(1), dout = weight.dim(3);
  std::vector<T> out(batch * in_caps * classes * dout, T(0));
  const T* w = weight.data().data();
  const T* x = u.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < in_caps; ++i)
      for (std::size_t k = 0; k < classes; ++k) {
        T* o = out.data() + ((b * in_caps + i) * classes + k) * dout;
        for (std::size_t d = 0; d < din; ++d) {
          const T ud = x[(b * in_caps + i) * din + d];
          const T* wr = w + ((i * classes + k) * din + d) * dout;
          for (std::size_t e = 0; e < dout; ++e) o[e] += ud * wr[e];
        }
      }
  return make_result<T>(
      {batch, in_caps, classes, dout}, std::move(out), "capsule_predict", {u, weight},
      [=](Node<T>& self) {
        auto& pu = *self.parents[0];
        auto& pw = *self.parents[1];
        T* gu = pu.requires_grad ? pu.ensure_grad().data() : nullptr;
        T* gw = pw.requires_grad ? pw.ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < in_caps; ++i)
            for (std::size_t k = 0; k < classes; ++k) {
              const T* g = self.grad.data() + ((b * in_caps + i) * classes + k) * dout;
              for (std::size_t d = 0; d < din; ++d) {
                const std::size_t ui = (b * in_caps + i) * din + d;
                const std::size_t wi = ((i * classes + k) * din + d) * dout;
                if (gw)
                  for (std::size_t e = 0; e < dout; ++e) gw[wi + e] += pu.data[ui] * g[e];
                if (gu) {
                  T acc = T(0);
                  for (std::size_t e = 0; e < dout; ++e) acc += pw.data[wi + e] * g[e];
                  gu[ui] += acc;
                }
              }
            }
      });
}

template <typename T>
struct RouteResult {
  Tensor<T> v;                    // [B, K, D]
  std::vector<T> coupling;        // final coefficients, [B, I, K]
  std::vector<T> coupling_trace;  // every iteration, [B, iters, I, K]
};

// Routing by agreement over precomputed predictions u_hat[B, I, K, D].
// Coupling coefficients are constants for differentiation.
template <typename T>
RouteResult<T> route(const Tensor<T>& uhat, std::size_t iters) {
  detail::check_iters(iters);
  if (uhat.rank() != 4) throw dimension_error("route: expected u_hat [B,I,K,D]");
  const std::size_t batch = uhat.dim(0), in_caps = uhat.dim(1), classes = uhat.dim(2),
                    dim = uhat.dim(3);
  std::vector<T> coupling(batch * in_caps * classes), trace, s(batch * classes * dim),
      v(batch * classes * dim), logits(in_caps * classes);
  trace.reserve(batch * iters * in_caps * classes);
  for (std::size_t b = 0; b < batch; ++b)
    detail::route_item(uhat.data().data() + b * in_caps * classes * dim, in_caps, classes, dim,
                       iters, logits.data(), coupling.data() + b * in_caps * classes,
                       s.data() + b * classes * dim, v.data() + b * classes * dim, &trace);
  Tensor<T> out = make_result<T>(
      {batch, classes, dim}, std::move(v), "route", {uhat},
      [=, s = std::move(s)](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto g = p.ensure_grad();
        std::vector<T> gs(classes * dim);
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(gs.begin(), gs.end(), T(0));
          for (std::size_t k = 0; k < classes; ++k)
            detail::squash_vector_backward(s.data() + (b * classes + k) * dim,
                                           self.grad.data() + (b * classes + k) * dim,
                                           gs.data() + k * dim, dim);
          for (std::size_t i = 0; i < in_caps; ++i)
            for (std::size_t k = 0; k < classes; ++k) {
              const T c = coupling[(b * in_caps + i) * classes + k];
              T* gu = g.data() + ((b * in_caps + i) * classes + k) * dim;
              for (std::size_t d = 0; d < dim; ++d) gu[d] += c * gs[k * dim + d];
            }
        }
      });
  return {out, coupling, std::move(trace)};
}

// The same procedure assembled from graph ops. With differentiate_coupling
// the coefficients (and so every iteration) stay on the tape.
template <typename T>
Tensor<T> route_composed(const Tensor<T>& uhat, std::size_t iters, bool differentiate_coupling) {
  detail::check_iters(iters);
  if (uhat.rank() != 4) throw dimension_error("route: expected u_hat [B,I,K,D]");
  const std::size_t batch = uhat.dim(0), in_caps = uhat.dim(1), classes = uhat.dim(2);
  Tensor<T> logits(Shape{batch, in_caps, classes});
  Tensor<T> v;
  for (std::size_t it = 0; it < iters; ++it) {
    Tensor<T> c = softmax(logits, 2);
    if (!differentiate_coupling) c = c.detach();
    v = squash(sum_axis(scale_vectors(uhat, c), 1));
    if (it + 1 == iters) break;
    Tensor<T> agreement = sum_axis(mul(uhat, broadcast_axis(v, 1, in_caps)), 3);
    logits = add(logits, agreement);
  }
  return v;
}

// Prediction and routing fused: u[B,I,Din], W[I,K,Din,Dout] -> v[B,K,Dout].
// u_hat is never materialized for the whole batch and coupling coefficients
// are constants for differentiation, so backward only needs the coefficients.
template <typename T>
Tensor<T> secondary_capsules(const Tensor<T>& u, const Tensor<T>& weight, std::size_t iters) {
  detail::check_iters(iters);
  if (u.rank() != 3 || weight.rank() != 4 || weight.dim(0) != u.dim(1) ||
      weight.dim(2) != u.dim(2))
    throw dimension_error("secondary_capsules: input " + shape_str(u.shape()) +
                          " vs weights " + shape_str(weight.shape()));
  const std::size_t batch = u.dim(0), in_caps = u.dim(1), din = u.dim(2);
  const std::size_t classes = weight.dim(1), dout = weight.dim(3);
  const std::size_t per_item = in_caps * classes * dout;
  const std::size_t chunk =
      std::clamp<std::size_t>((std::size_t{16} << 20) / std::max<std::size_t>(per_item, 1), 1, 16);

  std::vector<T> coupling(batch * in_caps * classes), s(batch * classes * dout),
      v(batch * classes * dout);
  std::vector<T> uhat(std::min(chunk, batch) * per_item), logits(in_caps * classes);
  const T* w = weight.data().data();
  const T* x = u.data().data();
  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, batch - b0);
    std::fill(uhat.begin(), uhat.begin() + static_cast<std::ptrdiff_t>(nb * per_item), T(0));
    // W_i stays in cache while it is applied to every item of the chunk.
    for (std::size_t i = 0; i < in_caps; ++i) {
      const T* wi = w + i * classes * din * dout;
      for (std::size_t bb = 0; bb < nb; ++bb) {
        const T* ui = x + ((b0 + bb) * in_caps + i) * din;
        T* o = uhat.data() + bb * per_item + i * classes * dout;
        for (std::size_t k = 0; k < classes; ++k) {
          T* ok = o + k * dout;
          for (std::size_t d = 0; d < din; ++d) {
            const T ud = ui[d];
            const T* wr = wi + (k * din + d) * dout;
            for (std::size_t e = 0; e < dout; ++e) ok[e] += ud * wr[e];
          }
        }
      }
    }
    for (std::size_t bb = 0; bb < nb; ++bb) {
      const std::size_t b = b0 + bb;
      detail::route_item(uhat.data() + bb * per_item, in_caps, classes, dout, iters,
                         logits.data(), coupling.data() + b * in_caps * classes,
                         s.data() + b * classes * dout, v.data() + b * classes * dout);
    }
  }
  return make_result<T>(
      {batch, classes, dout}, std::move(v), "secondary_capsules", {u, weight},
      [=, s = std::move(s), coupling = std::move(coupling)](Node<T>& self) {
        auto& pu = *self.parents[0];
        auto& pw = *self.parents[1];
        std::vector<T> gs(batch * classes * dout, T(0));
        for (std::size_t r = 0; r < batch * classes; ++r)
          detail::squash_vector_backward(s.data() + r * dout, self.grad.data() + r * dout,
                                         gs.data() + r * dout, dout);
        T* gu = pu.requires_grad ? pu.ensure_grad().data() : nullptr;
        T* gw = pw.requires_grad ? pw.ensure_grad().data() : nullptr;
        std::vector<T> tmp(dout);
        for (std::size_t i = 0; i < in_caps; ++i) {
          const T* wi = pw.data.data() + i * classes * din * dout;
          T* gwi = gw ? gw + i * classes * din * dout : nullptr;
          for (std::size_t b = 0; b < batch; ++b) {
            const T* ui = pu.data.data() + (b * in_caps + i) * din;
            T* gui = gu ? gu + (b * in_caps + i) * din : nullptr;
            for (std::size_t k = 0; k < classes; ++k) {
              const T c = coupling[(b * in_caps + i) * classes + k];
              const T* g = gs.data() + (b * classes + k) * dout;
              for (std::size_t e = 0; e < dout; ++e) tmp[e] = c * g[e];
              for (std::size_t d = 0; d < din; ++d) {
                const std::size_t off = (k * din + d) * dout;
                if (gwi) {
                  const T ud = ui[d];
                  for (std::size_t e = 0; e < dout; ++e) gwi[off + e] += ud * tmp[e];
                }
                if (gui) {
                  T acc = T(0);
                  for (std::size_t e = 0; e < dout; ++e) acc += wi[off + e] * tmp[e];
                  gui[d] += acc;
                }
              }
            }
          }
        }
      });
}

// Conv over the shared feature maps, regrouped so that every spatial position
// of every capsule channel becomes one squashed capsule vector.
template <typename T>
struct PrimaryCapsuleLayer {
  Tensor<T> kernel;  // [capsule_channels * dim, C, 3, 3]
  Tensor<T> bias;
  std::size_t capsule_channels = 32;
  std::size_t dim = 8;

  std::size_t num_capsules(std::size_t height, std::size_t width) const {
    return capsule_channels * height * width;
  }

  Tensor<T> forward(const Tensor<T>& features) const {
    const std::size_t batch = features.dim(0), h = features.dim(2), w = features.dim(3);
    Tensor<T> maps = conv2d(features, kernel, bias);  // [B, cc*dim, H, W]
    maps = reshape(maps, {batch, capsule_channels, dim, h * w});
    maps = permute(maps, {0, 1, 3, 2});  // [B, cc, HW, dim]
    return squash(reshape(maps, {batch, capsule_channels * h * w, dim}));
  }
};

template <typename T>
struct SecondaryCapsuleLayer {
  Tensor<T> weight;  // [num_in, K, in_dim, out_dim]
  std::size_t routing_iters = 3;
  bool differentiate_coupling = false;

  std::size_t classes() const { return weight.dim(1); }

  Tensor<T> forward(const Tensor<T>& u) const {
    if (differentiate_coupling)
      return route_composed(capsule_predict(u, weight), routing_iters, true);
    return secondary_capsules(u, weight, routing_iters);
  }
};

}  // namespace mlcaps
