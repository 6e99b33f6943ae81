#pragma once

// Differentiable kernels used by the network. Image tensors are NHWC:
// [N x H x W x C], row-major. Every op checks its shapes and throws
// ShapeError on mismatch.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "eeg4d/diff/tensor.hpp"

namespace eeg4d::diff {

enum class Padding { same, valid };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  require(s.size() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <class T>
void accumulate(Node<T>& dst, const std::vector<T>& src) {
  if (!dst.requires_grad) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

// Geometry of a stride-1 2D correlation.
struct ConvGeom {
  int n, h, w, cin, k, cout, pad, ho, wo;
  int patch() const { return k * k * cin; }
};

// Unfolds rows [first, first+count) of the batch into a (count*ho*wo) x patch matrix.
template <class T>
void im2col(const T* x, const ConvGeom& g, int first, int count, T* cols) {
  const int patch = g.patch();
  for (int b = 0; b < count; ++b) {
    const T* img = x + static_cast<std::size_t>(first + b) * g.h * g.w * g.cin;
    for (int oy = 0; oy < g.ho; ++oy) {
      for (int ox = 0; ox < g.wo; ++ox) {
        T* row = cols + (static_cast<std::size_t>(b) * g.ho * g.wo + oy * g.wo + ox) * patch;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy + ky - g.pad;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox + kx - g.pad;
            T* dst = row + (ky * g.k + kx) * g.cin;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill(dst, dst + g.cin, T(0));
            } else {
              const T* src = img + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin;
              std::copy(src, src + g.cin, dst);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, int first, int count, T* dx) {
  const int patch = g.patch();
  for (int b = 0; b < count; ++b) {
    T* img = dx + static_cast<std::size_t>(first + b) * g.h * g.w * g.cin;
    for (int oy = 0; oy < g.ho; ++oy) {
      for (int ox = 0; ox < g.wo; ++ox) {
        const T* row = cols + (static_cast<std::size_t>(b) * g.ho * g.wo + oy * g.wo + ox) * patch;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            const T* src = row + (ky * g.k + kx) * g.cin;
            T* dst = img + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin;
            for (int c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

// Images per im2col chunk, keeping the unfolded buffer near 4M entries.
inline int conv_chunk(const ConvGeom& g) {
  const std::size_t per = static_cast<std::size_t>(g.ho) * g.wo * g.patch();
  return static_cast<int>(std::clamp<std::size_t>((std::size_t{1} << 22) / std::max<std::size_t>(per, 1), 1, g.n));
}

template <class F>
Var<F> unary(const Var<F>& x, F (*fwd)(F), F (*dfdx_from_y)(F, F)) {
  std::vector<F> y(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
  return make_result<F>(x.shape(), std::move(y), {x}, [dfdx_from_y](Node<F>& self) {
    Node<F>& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * dfdx_from_y(p.value[i], self.value[i]);
  });
}

}  // namespace detail

// 2D cross-correlation, stride 1, no kernel flip.
// x: [N,H,W,Cin], kernel: [k,k,Cin,Cout], bias: [Cout] or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, Padding padding = Padding::same) {
  using namespace detail;
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const int k = kernel.dim(0);
  require(k == kernel.dim(1) && k % 2 == 1, "conv2d: kernel must be square with odd size, got " + shape_str(kernel.shape()));
  require(kernel.dim(2) == x.dim(3),
          "conv2d: kernel " + shape_str(kernel.shape()) + " does not match input " + shape_str(x.shape()));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, kernel.dim(3), 0, 0, 0};
  g.pad = padding == Padding::same ? k / 2 : 0;
  g.ho = g.h + 2 * g.pad - k + 1;
  g.wo = g.w + 2 * g.pad - k + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than valid input " + shape_str(x.shape()));
  if (bias.defined()) require(bias.size() == static_cast<std::size_t>(g.cout), "conv2d: bias size mismatch");

  const int patch = g.patch();
  const int chunk = conv_chunk(g);
  const std::size_t out_rows = static_cast<std::size_t>(g.ho) * g.wo;
  std::vector<T> out(static_cast<std::size_t>(g.n) * out_rows * g.cout);
  std::vector<T> cols(static_cast<std::size_t>(chunk) * out_rows * patch);
  CMapMat<T> K(kernel.value().data(), patch, g.cout);
  for (int first = 0; first < g.n; first += chunk) {
    const int count = std::min(chunk, g.n - first);
    const auto rows = static_cast<Eigen::Index>(count * out_rows);
    im2col(x.value().data(), g, first, count, cols.data());
    MapMat<T> Y(out.data() + first * out_rows * g.cout, rows, g.cout);
    Y.noalias() = CMapMat<T>(cols.data(), rows, patch) * K;
    if (bias.defined())
      Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), g.cout);
  }

  std::vector<Var<T>> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result<T>({g.n, g.ho, g.wo, g.cout}, std::move(out), std::move(inputs),
                        [g, chunk, has_bias, out_rows](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& kn = *self.parents[1];
    const int patch = g.patch();
    std::vector<T> cols(static_cast<std::size_t>(chunk) * out_rows * patch);
    CMapMat<T> K(kn.value.data(), patch, g.cout);
    for (int first = 0; first < g.n; first += chunk) {
      const int count = std::min(chunk, g.n - first);
      const auto rows = static_cast<Eigen::Index>(count * out_rows);
      CMapMat<T> dY(self.grad.data() + first * out_rows * g.cout, rows, g.cout);
      if (kn.requires_grad) {
        im2col(xn.value.data(), g, first, count, cols.data());
        MapMat<T>(kn.grad.data(), patch, g.cout).noalias() += CMapMat<T>(cols.data(), rows, patch).transpose() * dY;
      }
      if (xn.requires_grad) {
        MapMat<T> dcols(cols.data(), rows, patch);
        dcols.noalias() = dY * K.transpose();
        col2im_add(cols.data(), g, first, count, xn.grad.data());
      }
      if (has_bias && self.parents[2]->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(self.parents[2]->grad.data(), g.cout) += dY.colwise().sum();
      }
    }
  });
}

// Affine map y = x W^T + b. x: [N,in] or [in]; W: [out,in]; b: [out] or undefined.
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& W, const Var<T>& b = {}) {
  using namespace detail;
  require_rank(W.shape(), 2, "dense weight");
  const bool vec = x.rank() == 1;
  require(vec || x.rank() == 2, "dense: input must be rank 1 or 2, got " + shape_str(x.shape()));
  const int n = vec ? 1 : x.dim(0);
  const int in = vec ? x.dim(0) : x.dim(1);
  const int out = W.dim(0);
  require(W.dim(1) == in, "dense: weight " + shape_str(W.shape()) + " does not match input " + shape_str(x.shape()));
  if (b.defined()) require(b.size() == static_cast<std::size_t>(out), "dense: bias size mismatch");

  std::vector<T> y(static_cast<std::size_t>(n) * out);
  MapMat<T> Y(y.data(), n, out);
  Y.noalias() = CMapMat<T>(x.value().data(), n, in) * CMapMat<T>(W.value().data(), out, in).transpose();
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), out);

  std::vector<Var<T>> inputs{x, W};
  if (b.defined()) inputs.push_back(b);
  const bool has_bias = b.defined();
  Shape shape = vec ? Shape{out} : Shape{n, out};
  return make_result<T>(std::move(shape), std::move(y), std::move(inputs), [n, in, out, has_bias](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    CMapMat<T> dY(self.grad.data(), n, out);
    if (wn.requires_grad)
      MapMat<T>(wn.grad.data(), out, in).noalias() += dY.transpose() * CMapMat<T>(xn.value.data(), n, in);
    if (xn.requires_grad)
      MapMat<T>(xn.grad.data(), n, in).noalias() += dY * CMapMat<T>(wn.value.data(), out, in);
    if (has_bias && self.parents[2]->requires_grad)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(self.parents[2]->grad.data(), out) += dY.colwise().sum();
  });
}

// Subgradient at 0 is 0.
template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <class T>
T sigmoid_scalar(T v) {
  // Split on sign so exp never overflows.
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(x, &sigmoid_scalar<T>, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// Softmax over the last axis, max-subtracted.
template <class T>
Var<T> softmax(const Var<T>& x) {
  const int n = x.shape().back();
  detail::require(n > 0, "softmax: empty last axis");
  const std::size_t rows = x.size() / n;
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * n;
    T* out = y.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T sum = 0;
    for (int i = 0; i < n; ++i) sum += out[i] = std::exp(in[i] - mx);
    for (int i = 0; i < n; ++i) out[i] /= sum;
  }
  return make_result<T>(x.shape(), std::move(y), {x}, [n, rows](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = 0;
      for (int i = 0; i < n; ++i) dot += g[i] * yv[i];
      for (int i = 0; i < n; ++i) p.grad[r * n + i] += yv[i] * (g[i] - dot);
    }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  std::vector<T> y(x.value());
  for (auto& v : y) v *= s;
  return make_result<T>(x.shape(), std::move(y), {x}, [s](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value()) s += v;
  return make_result<T>({1}, {s}, {x}, [](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  detail::require(shape_size(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), x.value(), {x},
                        [](Node<T>& self) { detail::accumulate(*self.parents[0], self.grad); });
}

// Columns [begin, begin+len) of the last axis.
template <class T>
Var<T> slice_last(const Var<T>& x, int begin, int len) {
  const int n = x.shape().back();
  detail::require(begin >= 0 && len > 0 && begin + len <= n, "slice_last: range out of bounds for " + shape_str(x.shape()));
  const std::size_t rows = x.size() / n;
  std::vector<T> y(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.value().data() + r * n + begin, len, y.data() + r * len);
  Shape shape = x.shape();
  shape.back() = len;
  return make_result<T>(std::move(shape), std::move(y), {x}, [n, begin, len, rows](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (int i = 0; i < len; ++i) p.grad[r * n + begin + i] += self.grad[r * len + i];
  });
}

// Concatenates along the last axis; leading dims must agree.
template <class T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  detail::require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
                  "concat_last: " + shape_str(sa) + " vs " + shape_str(sb));
  const int na = sa.back(), nb = sb.back();
  const std::size_t rows = a.size() / na;
  std::vector<T> y(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * na, na, y.data() + r * (na + nb));
    std::copy_n(b.value().data() + r * nb, nb, y.data() + r * (na + nb) + na);
  }
  Shape shape = sa;
  shape.back() = na + nb;
  return make_result<T>(std::move(shape), std::move(y), {a, b}, [na, nb, rows](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * (na + nb);
      if (pa.requires_grad)
        for (int i = 0; i < na; ++i) pa.grad[r * na + i] += g[i];
      if (pb.requires_grad)
        for (int i = 0; i < nb; ++i) pb.grad[r * nb + i] += g[na + i];
    }
  });
}

// 2x2 max-pool, stride 2. Odd trailing row/column dropped; ties go to the
// first element in row-major order.
template <class T>
Var<T> max_pool2d(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "max_pool2d");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int ho = h / 2, wo = w / 2;
  detail::require(ho > 0 && wo > 0, "max_pool2d: input smaller than window " + shape_str(x.shape()));
  std::vector<T> y(static_cast<std::size_t>(n) * ho * wo * c);
  std::vector<std::size_t> arg(y.size());
  const T* xv = x.value().data();
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t o = ((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * c + ch;
          std::size_t best = ((static_cast<std::size_t>(b) * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t i = ((static_cast<std::size_t>(b) * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (xv[i] > xv[best]) best = i;
            }
          y[o] = xv[best];
          arg[o] = best;
        }
  return make_result<T>({n, ho, wo, c}, std::move(y), {x}, [arg = std::move(arg)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t o = 0; o < arg.size(); ++o) p.grad[arg[o]] += self.grad[o];
  });
}

// [N,H,W,C] -> [N,C], mean over H and W.
template <class T>
Var<T> global_avg_spatial(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_spatial");
  const int n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  std::vector<T> y(static_cast<std::size_t>(n) * c, T(0));
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) y[b * c + ch] += x.value()[(static_cast<std::size_t>(b) * hw + p) * c + ch];
  for (auto& v : y) v /= static_cast<T>(hw);
  return make_result<T>({n, c}, std::move(y), {x}, [n, hw, c](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    const T inv = T(1) / static_cast<T>(hw);
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) px.grad[(static_cast<std::size_t>(b) * hw + p) * c + ch] += self.grad[b * c + ch] * inv;
  });
}

// [N,H,W,C] -> [N,C], max over H and W (first maximum wins).
template <class T>
Var<T> global_max_spatial(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_max_spatial");
  const int n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  std::vector<T> y(static_cast<std::size_t>(n) * c);
  std::vector<std::size_t> arg(y.size());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      std::size_t best = static_cast<std::size_t>(b) * hw * c + ch;
      for (int p = 1; p < hw; ++p) {
        const std::size_t i = (static_cast<std::size_t>(b) * hw + p) * c + ch;
        if (x.value()[i] > x.value()[best]) best = i;
      }
      y[b * c + ch] = x.value()[best];
      arg[b * c + ch] = best;
    }
  return make_result<T>({n, c}, std::move(y), {x}, [arg = std::move(arg)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t o = 0; o < arg.size(); ++o) p.grad[arg[o]] += self.grad[o];
  });
}

// [N,H,W,C] -> [N,H,W,1], mean over channels.
template <class T>
Var<T> avg_over_channels(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "avg_over_channels");
  const int c = x.dim(3);
  const std::size_t cells = x.size() / c;
  std::vector<T> y(cells, T(0));
  for (std::size_t p = 0; p < cells; ++p) {
    for (int ch = 0; ch < c; ++ch) y[p] += x.value()[p * c + ch];
    y[p] /= static_cast<T>(c);
  }
  return make_result<T>({x.dim(0), x.dim(1), x.dim(2), 1}, std::move(y), {x}, [c, cells](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    const T inv = T(1) / static_cast<T>(c);
    for (std::size_t p = 0; p < cells; ++p)
      for (int ch = 0; ch < c; ++ch) px.grad[p * c + ch] += self.grad[p] * inv;
  });
}

// [N,H,W,C] -> [N,H,W,1], max over channels (first maximum wins).
template <class T>
Var<T> max_over_channels(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "max_over_channels");
  const int c = x.dim(3);
  const std::size_t cells = x.size() / c;
  std::vector<T> y(cells);
  std::vector<std::size_t> arg(cells);
  for (std::size_t p = 0; p < cells; ++p) {
    std::size_t best = p * c;
    for (int ch = 1; ch < c; ++ch)
      if (x.value()[p * c + ch] > x.value()[best]) best = p * c + ch;
    y[p] = x.value()[best];
    arg[p] = best;
  }
  return make_result<T>({x.dim(0), x.dim(1), x.dim(2), 1}, std::move(y), {x}, [arg = std::move(arg)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (std::size_t o = 0; o < arg.size(); ++o) p.grad[arg[o]] += self.grad[o];
  });
}

// V [N,H,W,C] times a per-channel gate A [N,C].
template <class T>
Var<T> scale_channels(const Var<T>& v, const Var<T>& a) {
  detail::require_rank(v.shape(), 4, "scale_channels");
  const int n = v.dim(0), c = v.dim(3);
  detail::require(a.shape() == Shape{n, c}, "scale_channels: gate " + shape_str(a.shape()) + " for " + shape_str(v.shape()));
  const std::size_t hw = static_cast<std::size_t>(v.dim(1)) * v.dim(2);
  std::vector<T> y(v.size());
  for (int b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = (b * hw + p) * c + ch;
        y[i] = v.value()[i] * a.value()[b * c + ch];
      }
  return make_result<T>(v.shape(), std::move(y), {v, a}, [n, c, hw](Node<T>& self) {
    Node<T>& pv = *self.parents[0];
    Node<T>& pa = *self.parents[1];
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = (b * hw + p) * c + ch;
          if (pv.requires_grad) pv.grad[i] += self.grad[i] * pa.value[b * c + ch];
          if (pa.requires_grad) pa.grad[b * c + ch] += self.grad[i] * pv.value[i];
        }
  });
}

// V [N,H,W,C] times a per-cell gate A [N,H,W,1].
template <class T>
Var<T> scale_spatial(const Var<T>& v, const Var<T>& a) {
  detail::require_rank(v.shape(), 4, "scale_spatial");
  const int c = v.dim(3);
  detail::require(a.shape() == Shape{v.dim(0), v.dim(1), v.dim(2), 1},
                  "scale_spatial: gate " + shape_str(a.shape()) + " for " + shape_str(v.shape()));
  const std::size_t cells = v.size() / c;
  std::vector<T> y(v.size());
  for (std::size_t p = 0; p < cells; ++p)
    for (int ch = 0; ch < c; ++ch) y[p * c + ch] = v.value()[p * c + ch] * a.value()[p];
  return make_result<T>(v.shape(), std::move(y), {v, a}, [c, cells](Node<T>& self) {
    Node<T>& pv = *self.parents[0];
    Node<T>& pa = *self.parents[1];
    for (std::size_t p = 0; p < cells; ++p)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = p * c + ch;
        if (pv.requires_grad) pv.grad[i] += self.grad[i] * pa.value[p];
        if (pa.requires_grad) pa.grad[p] += self.grad[i] * pv.value[i];
      }
  });
}

// x [N,T,F] -> [N,F] at time t.
template <class T>
Var<T> time_step(const Var<T>& x, int t) {
  detail::require_rank(x.shape(), 3, "time_step");
  const int n = x.dim(0), steps = x.dim(1), f = x.dim(2);
  detail::require(t >= 0 && t < steps, "time_step: index out of range");
  std::vector<T> y(static_cast<std::size_t>(n) * f);
  for (int b = 0; b < n; ++b) std::copy_n(x.value().data() + (static_cast<std::size_t>(b) * steps + t) * f, f, y.data() + b * f);
  return make_result<T>({n, f}, std::move(y), {x}, [n, steps, f, t](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < f; ++i) p.grad[(static_cast<std::size_t>(b) * steps + t) * f + i] += self.grad[b * f + i];
  });
}

// Stacks T tensors of shape [N,F] into [N,T,F].
template <class T>
Var<T> stack_time(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "stack_time: no inputs");
  detail::require_rank(xs[0].shape(), 2, "stack_time");
  const int n = xs[0].dim(0), f = xs[0].dim(1), steps = static_cast<int>(xs.size());
  std::vector<T> y(static_cast<std::size_t>(n) * steps * f);
  for (int t = 0; t < steps; ++t) {
    detail::require(xs[t].shape() == xs[0].shape(), "stack_time: mismatched step shapes");
    for (int b = 0; b < n; ++b)
      std::copy_n(xs[t].value().data() + b * f, f, y.data() + (static_cast<std::size_t>(b) * steps + t) * f);
  }
  return make_result<T>({n, steps, f}, std::move(y), xs, [n, steps, f](Node<T>& self) {
    for (int t = 0; t < steps; ++t) {
      Node<T>& p = *self.parents[t];
      if (!p.requires_grad) continue;
      for (int b = 0; b < n; ++b)
        for (int i = 0; i < f; ++i) p.grad[b * f + i] += self.grad[(static_cast<std::size_t>(b) * steps + t) * f + i];
    }
  });
}

// Attention-weighted sum over time: Y [N,T,F], A [N,T] -> [N,F].
template <class T>
Var<T> weighted_time_sum(const Var<T>& y, const Var<T>& a) {
  detail::require_rank(y.shape(), 3, "weighted_time_sum");
  const int n = y.dim(0), steps = y.dim(1), f = y.dim(2);
  detail::require(a.shape() == Shape{n, steps}, "weighted_time_sum: weights " + shape_str(a.shape()) + " for " + shape_str(y.shape()));
  std::vector<T> out(static_cast<std::size_t>(n) * f, T(0));
  for (int b = 0; b < n; ++b)
    for (int t = 0; t < steps; ++t) {
      const T w = a.value()[b * steps + t];
      for (int i = 0; i < f; ++i) out[b * f + i] += w * y.value()[(static_cast<std::size_t>(b) * steps + t) * f + i];
    }
  return make_result<T>({n, f}, std::move(out), {y, a}, [n, steps, f](Node<T>& self) {
    Node<T>& py = *self.parents[0];
    Node<T>& pa = *self.parents[1];
    for (int b = 0; b < n; ++b)
      for (int t = 0; t < steps; ++t)
        for (int i = 0; i < f; ++i) {
          const std::size_t yi = (static_cast<std::size_t>(b) * steps + t) * f + i;
          if (py.requires_grad) py.grad[yi] += self.grad[b * f + i] * pa.value[b * steps + t];
          if (pa.requires_grad) pa.grad[b * steps + t] += self.grad[b * f + i] * py.value[yi];
        }
  });
}

// Mean negative log-likelihood of the labelled class; probabilities are
// floored at 1e-12 (no gradient through the floor).
template <class T>
Var<T> nll_loss(const Var<T>& probs, const std::vector<int>& labels) {
  detail::require_rank(probs.shape(), 2, "nll_loss");
  const int n = probs.dim(0), c = probs.dim(1);
  detail::require(static_cast<int>(labels.size()) == n, "nll_loss: label count mismatch");
  constexpr T floor = T(1e-12);
  T total = 0;
  for (int b = 0; b < n; ++b) {
    detail::require(labels[b] >= 0 && labels[b] < c, "nll_loss: label out of range");
    total -= std::log(std::max(probs.value()[b * c + labels[b]], floor));
  }
  return make_result<T>({1}, {total / static_cast<T>(n)}, {probs}, [labels, n, c](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (int b = 0; b < n; ++b) {
      const T pv = p.value[b * c + labels[b]];
      if (pv > floor) p.grad[b * c + labels[b]] -= self.grad[0] / (static_cast<T>(n) * pv);
    }
  });
}

}  // namespace eeg4d::diff
