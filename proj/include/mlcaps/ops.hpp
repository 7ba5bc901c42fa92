#pragma once

// Products always take the GEMM path. Eigen reductions (including the
// small-size product path) sum in an order that depends on buffer alignment.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mlcaps/tensor.hpp"

namespace mlcaps {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                          shape_str(b));
}

inline std::size_t check_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank)
    throw dimension_error(std::string(op) + ": axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(rank));
  return axis;
}

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void accumulate(Node<T>& target, std::span<const T> delta) {
  if (!target.requires_grad) return;
  auto g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

template <typename T, typename F, typename DF>
Tensor<T> unary_map(const Tensor<T>& x, const char* name, F f, DF df) {
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(x.shape(), std::move(out), name, {x}, [df](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  // Subgradient 0 at the kink; NaN passes through.
  return unary_map(
      x, "relu", [](T v) { return v > T(0) || std::isnan(v) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_map(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_map(
      x, "square", [](T v) { return v * v; }, [](T in, T) { return T(2) * in; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_map(
      x, "scale", [factor](T v) { return factor * v; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    detail::accumulate<T>(*self.parents[0], self.grad);
    detail::accumulate<T>(*self.parents[1], self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    detail::accumulate<T>(*self.parents[0], self.grad);
    auto& p = *self.parents[1];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, "sum", {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// Sums out one axis; the result drops that axis (rank-1 results keep [1]).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "sum_axis");
  auto s = detail::split_at(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> out(s.outer * s.inner, T(0));
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.extent; ++a)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += in[(o * s.extent + a) * s.inner + i];
  return make_result<T>(out_shape, std::move(out), "sum_axis", {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t a = 0; a < s.extent; ++a)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[(o * s.extent + a) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

// Inserts a new axis of extent n at `axis`, repeating the values.
template <typename T>
Tensor<T> broadcast_axis(const Tensor<T>& x, std::size_t axis, std::size_t n) {
  if (axis > x.rank()) detail::check_axis(axis, x.rank() + 1, "broadcast_axis");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  auto s = detail::split_at(out_shape, axis);
  std::vector<T> out(shape_size(out_shape));
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.extent; ++a)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * s.extent + a) * s.inner + i] = in[o * s.inner + i];
  return make_result<T>(out_shape, std::move(out), "broadcast_axis", {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t a = 0; a < s.extent; ++a)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[o * s.inner + i] += self.grad[(o * s.extent + a) * s.inner + i];
  });
}

// v[..., D] * c[...] with c broadcast along the trailing axis.
template <typename T>
Tensor<T> scale_vectors(const Tensor<T>& v, const Tensor<T>& c) {
  Shape lead(v.shape().begin(), v.shape().end() - 1);
  if (v.rank() < 2 || lead != c.shape())
    throw dimension_error("scale_vectors: " + shape_str(v.shape()) + " vs coefficients " +
                          shape_str(c.shape()));
  const std::size_t d = v.shape().back();
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < c.size(); ++r)
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = v[r * d + k] * c[r];
  return make_result<T>(v.shape(), std::move(out), "scale_vectors", {v, c}, [d](Node<T>& self) {
    auto& pv = *self.parents[0];
    auto& pc = *self.parents[1];
    const std::size_t rows = pc.data.size();
    if (pv.requires_grad) {
      auto g = pv.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) g[r * d + k] += self.grad[r * d + k] * pc.data[r];
    }
    if (pc.requires_grad) {
      auto g = pc.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (std::size_t k = 0; k < d; ++k) acc += self.grad[r * d + k] * pv.data[r * d + k];
        g[r] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw dimension_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                          shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), "reshape", {x}, [](Node<T>& self) {
    detail::accumulate<T>(*self.parents[0], self.grad);
  });
}

// out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  std::vector<bool> used(rank, false);
  if (perm.size() != rank) throw dimension_error("permute: permutation rank mismatch");
  for (auto p : perm) {
    if (p >= rank || used[p]) throw dimension_error("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Source offset of each output element.
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[perm[i]];
    src[flat] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[src[i]];
  return make_result<T>(out_shape, std::move(out), "permute", {x},
                        [src = std::move(src)](Node<T>& self) {
                          auto& p = *self.parents[0];
                          if (!p.requires_grad) return;
                          auto g = p.ensure_grad();
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw dimension_error("concat: no inputs");
  const Shape& first = parts[0].shape();
  detail::check_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw dimension_error("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i])
        throw dimension_error("concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                              shape_str(first) + " off axis " + std::to_string(axis));
    out_shape[axis] += p.dim(axis);
  }
  auto s = detail::split_at(out_shape, axis);
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.dim(axis));
  std::vector<T> out(shape_size(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].data();
    const std::size_t e = extents[k];
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * e * s.inner), e * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
    offset += e;
  }
  return make_result<T>(out_shape, std::move(out), "concat", parts, [s, extents](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      auto& p = *self.parents[k];
      const std::size_t e = extents[k];
      if (p.requires_grad) {
        auto g = p.ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t j = 0; j < e * s.inner; ++j)
            g[o * e * s.inner + j] += self.grad[(o * s.extent + offset) * s.inner + j];
      }
      offset += e;
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "softmax");
  auto s = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * s.extent + a) * s.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < s.extent; ++a) mx = std::max(mx, in[at(a)]);
      T z = T(0);
      for (std::size_t a = 0; a < s.extent; ++a) z += (out[at(a)] = std::exp(in[at(a)] - mx));
      for (std::size_t a = 0; a < s.extent; ++a) out[at(a)] /= z;
    }
  return make_result<T>(x.shape(), std::move(out), "softmax", {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t a) { return (o * s.extent + a) * s.inner + i; };
        T dot = T(0);
        for (std::size_t a = 0; a < s.extent; ++a) dot += self.grad[at(a)] * self.data[at(a)];
        for (std::size_t a = 0; a < s.extent; ++a)
          g[at(a)] += self.data[at(a)] * (self.grad[at(a)] - dot);
      }
  });
}

// Euclidean norm along `axis`, which is removed. Gradient at the zero vector is 0.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "l2_norm");
  auto s = detail::split_at(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> out(s.outer * s.inner, T(0));
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      T acc = T(0);
      for (std::size_t a = 0; a < s.extent; ++a) {
        T v = in[(o * s.extent + a) * s.inner + i];
        acc += v * v;
      }
      out[o * s.inner + i] = std::sqrt(acc);
    }
  return make_result<T>(out_shape, std::move(out), "l2_norm", {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        T n = self.data[o * s.inner + i];
        if (n == T(0)) continue;
        T f = self.grad[o * s.inner + i] / n;
        for (std::size_t a = 0; a < s.extent; ++a) {
          auto k = (o * s.extent + a) * s.inner + i;
          g[k] += f * p.data[k];
        }
      }
  });
}

// x[B,I] * weight[I,O] + bias[O].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1))
    throw dimension_error("dense: input " + shape_str(x.shape()) + ", weight " +
                          shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  const std::size_t b = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  using detail::ConstMatrixMap;
  using detail::MatrixMap;
  std::vector<T> out(b * out_dim);
  MatrixMap<T> y(out.data(), b, out_dim);
  y.noalias() = ConstMatrixMap<T>(x.data().data(), b, in) *
                ConstMatrixMap<T>(weight.data().data(), in, out_dim);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out_dim);
  return make_result<T>({b, out_dim}, std::move(out), "dense", {x, weight, bias},
                        [b, in, out_dim](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          auto& pb = *self.parents[2];
                          ConstMatrixMap<T> g(self.grad.data(), b, out_dim);
                          if (px.requires_grad)
                            MatrixMap<T>(px.ensure_grad().data(), b, in).noalias() +=
                                g * ConstMatrixMap<T>(pw.data.data(), in, out_dim).transpose();
                          if (pw.requires_grad)
                            MatrixMap<T>(pw.ensure_grad().data(), in, out_dim).noalias() +=
                                ConstMatrixMap<T>(px.data.data(), b, in).transpose() * g;
                          if (pb.requires_grad) {
                            auto gb = pb.ensure_grad();
                            for (std::size_t r = 0; r < b; ++r)
                              for (std::size_t j = 0; j < out_dim; ++j) gb[j] += self.grad[r * out_dim + j];
                          }
                        });
}

namespace detail {

// col[(c*9 + ky*3 + kx), y*W + x] = input[c, y+ky-1, x+kx-1] (zero outside).
template <typename T>
void im2col_3x3(const T* img, std::size_t channels, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          T* dst = row + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, w, T(0));
            continue;
          }
          const T* src = img + (c * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
            dst[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? T(0)
                                                                      : src[static_cast<std::size_t>(sx)];
          }
        }
      }
}

template <typename T>
void col2im_3x3(const T* col, std::size_t channels, std::size_t h, std::size_t w, T* img) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = img + (c * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w))
              dst[static_cast<std::size_t>(sx)] += row[y * w + x];
          }
        }
      }
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1: [B,C,H,W] -> [B,F,H,W].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (input.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1)
    throw dimension_error("conv2d: expected input [B,C,H,W], kernel [F,C,3,3], bias [F]");
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3)
    throw dimension_error("conv2d: kernel must be 3x3, got " + shape_str(kernel.shape()));
  if (kernel.dim(1) != input.dim(1))
    throw dimension_error("conv2d: input has " + std::to_string(input.dim(1)) +
                          " channels, kernel expects " + std::to_string(kernel.dim(1)));
  if (bias.dim(0) != kernel.dim(0))
    throw dimension_error("conv2d: bias " + shape_str(bias.shape()) + " vs " +
                          std::to_string(kernel.dim(0)) + " filters");
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t filters = kernel.dim(0), hw = h * w, k = ch * 9;
  using detail::ConstMatrixMap;
  using detail::MatrixMap;
  std::vector<T> out(batch * filters * hw);
  std::vector<T> col(k * hw);
  ConstMatrixMap<T> kmat(kernel.data().data(), filters, k);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.data().data(), filters);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col_3x3(input.data().data() + b * ch * hw, ch, h, w, col.data());
    MatrixMap<T> y(out.data() + b * filters * hw, filters, hw);
    y.noalias() = kmat * ConstMatrixMap<T>(col.data(), k, hw);
    y.colwise() += bvec;
  }
  return make_result<T>(
      {batch, filters, h, w}, std::move(out), "conv2d", {input, kernel, bias},
      [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        std::vector<T> col(k * hw), gcol;
        if (px.requires_grad) gcol.resize(k * hw);
        ConstMatrixMap<T> kmat(pk.data.data(), filters, k);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMatrixMap<T> g(self.grad.data() + b * filters * hw, filters, hw);
          if (pk.requires_grad) {
            detail::im2col_3x3(px.data.data() + b * ch * hw, ch, h, w, col.data());
            MatrixMap<T>(pk.ensure_grad().data(), filters, k).noalias() +=
                g * ConstMatrixMap<T>(col.data(), k, hw).transpose();
          }
          if (pb.requires_grad) {
            auto gb = pb.ensure_grad();
            const T* gp = self.grad.data() + b * filters * hw;
            for (std::size_t f = 0; f < filters; ++f) {
              T acc = T(0);
              for (std::size_t i = 0; i < hw; ++i) acc += gp[f * hw + i];
              gb[f] += acc;
            }
          }
          if (px.requires_grad) {
            MatrixMap<T>(gcol.data(), k, hw).noalias() = kmat.transpose() * g;
            detail::col2im_3x3(gcol.data(), ch, h, w, px.ensure_grad().data() + b * ch * hw);
          }
        }
      });
}

}  // namespace mlcaps
