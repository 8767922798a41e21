#pragma once

// Differentiable primitives recorded on a Tape.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mixprune/autodiff.hpp"

namespace mixprune {

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
}

template <typename Scalar>
void accumulate(Tape<Scalar>& tape, std::size_t id, const Array<Scalar>& g) {
  if (auto* target = tape.grad_target(id)) *target += g;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto& tape = *a.tape;
  return tape.record(a.value() + b.value(), a.shape(), {a, b},
                     [a = a.id, b = b.id](Tape<Scalar>& t, std::size_t self) {
                       detail::accumulate(t, a, t.grad(self));
                       detail::accumulate(t, b, t.grad(self));
                     });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto& tape = *a.tape;
  return tape.record(a.value() - b.value(), a.shape(), {a, b},
                     [a = a.id, b = b.id](Tape<Scalar>& t, std::size_t self) {
                       detail::accumulate(t, a, t.grad(self));
                       detail::accumulate<Scalar>(t, b, -t.grad(self));
                     });
}

/// Elementwise product. A one-element operand broadcasts over the other.
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& tape = *a.tape;
  if (a.size() == 1 && (b.size() != 1 || (a.shape().empty() && !b.shape().empty()))) return b * a;
  if (b.size() == 1 && a.shape() != b.shape()) {
    const Scalar s = b.value()(0);
    return tape.record(a.value() * s, a.shape(), {a, b},
                       [a = a.id, b = b.id, s](Tape<Scalar>& t, std::size_t self) {
                         const auto& g = t.grad(self);
                         if (auto* ga = t.grad_target(a)) *ga += g * s;
                         if (auto* gb = t.grad_target(b)) (*gb)(0) += (g * t.value(a)).sum();
                       });
  }
  detail::require_same_shape(a, b, "mul");
  return tape.record(a.value() * b.value(), a.shape(), {a, b},
                     [a = a.id, b = b.id](Tape<Scalar>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (auto* ga = t.grad_target(a)) *ga += g * t.value(b);
                       if (auto* gb = t.grad_target(b)) *gb += g * t.value(a);
                     });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return a.tape->record(a.value() * s, a.shape(), {a},
                        [a = a.id, s](Tape<Scalar>& t, std::size_t self) {
                          detail::accumulate<Scalar>(t, a, t.grad(self) * s);
                        });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  return a.tape->record(a.value() + s, a.shape(), {a},
                        [a = a.id](Tape<Scalar>& t, std::size_t self) {
                          detail::accumulate(t, a, t.grad(self));
                        });
}

/// 1 - a, elementwise.
template <typename Scalar>
Var<Scalar> one_minus(const Var<Scalar>& a) {
  return add_scalar(scale(a, Scalar(-1)), Scalar(1));
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return a * a;
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return a.tape->record(a.value().max(Scalar(0)), a.shape(), {a},
                        [a = a.id](Tape<Scalar>& t, std::size_t self) {
                          auto mask = (t.value(a) > Scalar(0)).template cast<Scalar>();
                          detail::accumulate<Scalar>(t, a, t.grad(self) * mask);
                        });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Array<Scalar> v(1);
  v(0) = a.value().sum();
  return a.tape->record(std::move(v), Shape{}, {a},
                        [a = a.id](Tape<Scalar>& t, std::size_t self) {
                          if (auto* ga = t.grad_target(a)) *ga += t.grad(self)(0);
                        });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

/// Sum of a list of same-shaped terms.
template <typename Scalar>
Var<Scalar> add_n(const std::vector<Var<Scalar>>& terms) {
  if (terms.empty()) fail(ErrorKind::contract, "add_n of an empty list");
  Var<Scalar> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
  return acc;
}

template <typename Scalar>
Var<Scalar> dot_const(const Var<Scalar>& a, const Array<Scalar>& c) {
  if (a.size() != c.size()) fail(ErrorKind::shape, "dot_const: length mismatch");
  Array<Scalar> v(1);
  v(0) = (a.value() * c).sum();
  return a.tape->record(std::move(v), Shape{}, {a},
                        [a = a.id, c](Tape<Scalar>& t, std::size_t self) {
                          detail::accumulate<Scalar>(t, a, c * t.grad(self)(0));
                        });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  if (numel(shape) != a.size())
    fail(ErrorKind::shape, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return a.tape->record(a.value(), std::move(shape), {a},
                        [a = a.id](Tape<Scalar>& t, std::size_t self) {
                          detail::accumulate(t, a, t.grad(self));
                        });
}

/// Column j of a [rows, cols] matrix, as a [rows] vector.
/// Flat slice [offset, offset + count) as a vector.
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, Index offset, Index count) {
  if (offset < 0 || count < 0 || offset + count > a.size()) fail(ErrorKind::shape, "slice out of range");
  return a.tape->record(Array<Scalar>(a.value().segment(offset, count)), Shape{count}, {a},
                        [a = a.id, offset, count](Tape<Scalar>& t, std::size_t self) {
                          if (auto* g = t.grad_target(a)) g->segment(offset, count) += t.grad(self);
                        });
}

template <typename Scalar>
Var<Scalar> column(const Var<Scalar>& m, Index j) {
  if (m.shape().size() != 2) fail(ErrorKind::shape, "column: expected a matrix");
  const Index rows = m.shape()[0], cols = m.shape()[1];
  if (j < 0 || j >= cols) fail(ErrorKind::shape, "column index out of range");
  Array<Scalar> v(rows);
  for (Index r = 0; r < rows; ++r) v(r) = m.value()(r * cols + j);
  return m.tape->record(std::move(v), Shape{rows}, {m},
                        [m = m.id, rows, cols, j](Tape<Scalar>& t, std::size_t self) {
                          auto* g = t.grad_target(m);
                          if (!g) return;
                          const auto& gs = t.grad(self);
                          for (Index r = 0; r < rows; ++r) (*g)(r * cols + j) += gs(r);
                        });
}

/// Per-column sums of a [rows, cols] matrix.
template <typename Scalar>
Var<Scalar> col_sums(const Var<Scalar>& m) {
  if (m.shape().size() != 2) fail(ErrorKind::shape, "col_sums: expected a matrix");
  const Index rows = m.shape()[0], cols = m.shape()[1];
  Eigen::Map<const RowMatrix<Scalar>> mat(m.value().data(), rows, cols);
  Array<Scalar> v = mat.colwise().sum().transpose().array();
  return m.tape->record(std::move(v), Shape{cols}, {m},
                        [m = m.id, rows, cols](Tape<Scalar>& t, std::size_t self) {
                          auto* g = t.grad_target(m);
                          if (!g) return;
                          const auto& gs = t.grad(self);
                          for (Index r = 0; r < rows; ++r) g->segment(r * cols, cols) += gs;
                        });
}

/// Element k of a vector as a scalar.
template <typename Scalar>
Var<Scalar> element(const Var<Scalar>& v, Index k) {
  if (k < 0 || k >= v.size()) fail(ErrorKind::shape, "element index out of range");
  Array<Scalar> out(1);
  out(0) = v.value()(k);
  return v.tape->record(std::move(out), Shape{}, {v},
                        [v = v.id, k](Tape<Scalar>& t, std::size_t self) {
                          if (auto* g = t.grad_target(v)) (*g)(k) += t.grad(self)(0);
                        });
}

/// Multiplies row r of `x` (leading dimension) by `factors[r]`.
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& x, const Var<Scalar>& factors) {
  if (x.shape().empty() || x.shape()[0] != factors.size())
    fail(ErrorKind::shape, "scale_rows: " + shape_str(x.shape()) + " by " +
                               shape_str(factors.shape()));
  const Index rows = x.shape()[0];
  const Index inner = x.size() / std::max<Index>(rows, 1);
  Array<Scalar> out(x.size());
  for (Index r = 0; r < rows; ++r)
    out.segment(r * inner, inner) = x.value().segment(r * inner, inner) * factors.value()(r);
  return x.tape->record(std::move(out), x.shape(), {x, factors},
                        [x = x.id, f = factors.id, rows, inner](Tape<Scalar>& t, std::size_t self) {
                          const auto& g = t.grad(self);
                          auto* gx = t.grad_target(x);
                          auto* gf = t.grad_target(f);
                          for (Index r = 0; r < rows; ++r) {
                            if (gx) gx->segment(r * inner, inner) += g.segment(r * inner, inner) * t.value(f)(r);
                            if (gf)
                              (*gf)(r) += (g.segment(r * inner, inner) *
                                           t.value(x).segment(r * inner, inner)).sum();
                          }
                        });
}

/// Fully connected layer: x [N, in], weight [out, in], bias [out] -> [N, out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[1] ||
      bias.size() != weight.shape()[0])
    fail(ErrorKind::shape, "linear: x " + shape_str(x.shape()) + ", weight " +
                               shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  const Index n = x.shape()[0], in = x.shape()[1], out = weight.shape()[0];
  using Mat = RowMatrix<Scalar>;
  Eigen::Map<const Mat> xm(x.value().data(), n, in);
  Eigen::Map<const Mat> wm(weight.value().data(), out, in);
  Mat y = xm * wm.transpose();
  y.rowwise() += bias.value().matrix().transpose();
  Array<Scalar> values = Eigen::Map<const Array<Scalar>>(y.data(), y.size());
  return x.tape->record(
      std::move(values), Shape{n, out}, {x, weight, bias},
      [x = x.id, w = weight.id, b = bias.id, n, in, out](Tape<Scalar>& t, std::size_t self) {
        Eigen::Map<const Mat> g(t.grad(self).data(), n, out);
        if (auto* gx = t.grad_target(x)) {
          Eigen::Map<const Mat> wm(t.value(w).data(), out, in);
          Eigen::Map<Mat>(gx->data(), n, in) += g * wm;
        }
        if (auto* gw = t.grad_target(w)) {
          Eigen::Map<const Mat> xm(t.value(x).data(), n, in);
          Eigen::Map<Mat>(gw->data(), out, in) += g.transpose() * xm;
        }
        if (auto* gb = t.grad_target(b)) *gb += g.colwise().sum().transpose().array();
      });
}

struct Conv2dGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel_y, kernel_x;
  Index stride, padding;
  Index out_height() const { return (height + 2 * padding - kernel_y) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel_x) / stride + 1; }
};

namespace detail {

/// Unfolds x [N,C,H,W] into columns [C*Ky*Kx, N*Ho*Wo] (column-major).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> im2col(const Scalar* x,
                                                             const Conv2dGeometry& g) {
  const Index ho = g.out_height(), wo = g.out_width(), spatial = ho * wo;
  const Index rows = g.in_channels * g.kernel_y * g.kernel_x;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cols(rows, g.batch * spatial);
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < g.in_channels; ++c) {
      const Scalar* plane = x + (n * g.in_channels + c) * g.height * g.width;
      for (Index ky = 0; ky < g.kernel_y; ++ky) {
        for (Index kx = 0; kx < g.kernel_x; ++kx) {
          const Index r = (c * g.kernel_y + ky) * g.kernel_x + kx;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * g.stride - g.padding + ky;
            for (Index ox = 0; ox < wo; ++ox) {
              const Index ix = ox * g.stride - g.padding + kx;
              const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
              cols(r, n * spatial + oy * wo + ox) = inside ? plane[iy * g.width + ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cols,
            const Conv2dGeometry& g, Scalar* dx) {
  const Index ho = g.out_height(), wo = g.out_width(), spatial = ho * wo;
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < g.in_channels; ++c) {
      Scalar* plane = dx + (n * g.in_channels + c) * g.height * g.width;
      for (Index ky = 0; ky < g.kernel_y; ++ky) {
        for (Index kx = 0; kx < g.kernel_x; ++kx) {
          const Index r = (c * g.kernel_y + ky) * g.kernel_x + kx;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * g.stride - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < wo; ++ox) {
              const Index ix = ox * g.stride - g.padding + kx;
              if (ix < 0 || ix >= g.width) continue;
              plane[iy * g.width + ix] += cols(r, n * spatial + oy * wo + ox);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Dense 2-D convolution: x [N,C,H,W], weight [O,C,Ky,Kx], bias [O].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   Index stride, Index padding) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || bias.size() != ws[0] || stride < 1)
    fail(ErrorKind::shape, "conv2d: x " + shape_str(xs) + ", weight " + shape_str(ws));
  const Conv2dGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, padding};
  const Index ho = g.out_height(), wo = g.out_width(), spatial = ho * wo;
  if (ho < 1 || wo < 1) fail(ErrorKind::shape, "conv2d: empty output");
  const Index k = g.in_channels * g.kernel_y * g.kernel_x;

  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat cols = detail::im2col(x.value().data(), g);
  Eigen::Map<const RowMatrix<Scalar>> wm(weight.value().data(), g.out_channels, k);
  Mat y = wm * cols;

  Array<Scalar> out(g.batch * g.out_channels * spatial);
  for (Index n = 0; n < g.batch; ++n)
    for (Index o = 0; o < g.out_channels; ++o)
      for (Index s = 0; s < spatial; ++s)
        out((n * g.out_channels + o) * spatial + s) = y(o, n * spatial + s) + bias.value()(o);

  return x.tape->record(
      std::move(out), Shape{g.batch, g.out_channels, ho, wo}, {x, weight, bias},
      [x = x.id, w = weight.id, b = bias.id, g, k, spatial,
       cols = std::move(cols)](Tape<Scalar>& t, std::size_t self) {
        const auto& gout = t.grad(self);
        Mat dy(g.out_channels, g.batch * spatial);
        for (Index n = 0; n < g.batch; ++n)
          for (Index o = 0; o < g.out_channels; ++o)
            for (Index s = 0; s < spatial; ++s)
              dy(o, n * spatial + s) = gout((n * g.out_channels + o) * spatial + s);
        if (auto* gw = t.grad_target(w))
          Eigen::Map<RowMatrix<Scalar>>(gw->data(), g.out_channels, k) += dy * cols.transpose();
        if (auto* gb = t.grad_target(b)) *gb += dy.rowwise().sum().array();
        if (auto* gx = t.grad_target(x)) {
          Eigen::Map<const RowMatrix<Scalar>> wm(t.value(w).data(), g.out_channels, k);
          Mat dcols = wm.transpose() * dy;
          detail::col2im(dcols, g, gx->data());
        }
      });
}

/// Depthwise 2-D convolution: x [N,C,H,W], weight [C,1,Ky,Kx], bias [C].
template <typename Scalar>
Var<Scalar> depthwise2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                        Index stride, Index padding) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[0] != xs[1] || ws[1] != 1 || bias.size() != xs[1])
    fail(ErrorKind::shape, "depthwise2d: x " + shape_str(xs) + ", weight " + shape_str(ws));
  const Conv2dGeometry g{xs[0], xs[1], xs[2], xs[3], xs[1], ws[2], ws[3], stride, padding};
  const Index ho = g.out_height(), wo = g.out_width();
  if (ho < 1 || wo < 1) fail(ErrorKind::shape, "depthwise2d: empty output");

  auto run = [g, ho, wo](const Scalar* in, const Scalar* w, const Scalar* b, Scalar* out) {
    for (Index n = 0; n < g.batch; ++n)
      for (Index c = 0; c < g.in_channels; ++c) {
        const Scalar* plane = in + (n * g.in_channels + c) * g.height * g.width;
        const Scalar* k = w + c * g.kernel_y * g.kernel_x;
        Scalar* o = out + (n * g.in_channels + c) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy)
          for (Index ox = 0; ox < wo; ++ox) {
            Scalar acc = b[c];
            for (Index ky = 0; ky < g.kernel_y; ++ky) {
              const Index iy = oy * g.stride - g.padding + ky;
              if (iy < 0 || iy >= g.height) continue;
              for (Index kx = 0; kx < g.kernel_x; ++kx) {
                const Index ix = ox * g.stride - g.padding + kx;
                if (ix < 0 || ix >= g.width) continue;
                acc += k[ky * g.kernel_x + kx] * plane[iy * g.width + ix];
              }
            }
            o[oy * wo + ox] = acc;
          }
      }
  };

  Array<Scalar> out(g.batch * g.in_channels * ho * wo);
  run(x.value().data(), weight.value().data(), bias.value().data(), out.data());
  return x.tape->record(
      std::move(out), Shape{g.batch, g.in_channels, ho, wo}, {x, weight, bias},
      [x = x.id, w = weight.id, b = bias.id, g, ho, wo](Tape<Scalar>& t, std::size_t self) {
        const auto& gout = t.grad(self);
        auto* gx = t.grad_target(x);
        auto* gw = t.grad_target(w);
        auto* gb = t.grad_target(b);
        const auto& xv = t.value(x);
        const auto& wv = t.value(w);
        for (Index n = 0; n < g.batch; ++n)
          for (Index c = 0; c < g.in_channels; ++c) {
            const Index plane_off = (n * g.in_channels + c) * g.height * g.width;
            const Index k_off = c * g.kernel_y * g.kernel_x;
            const Index o_off = (n * g.in_channels + c) * ho * wo;
            for (Index oy = 0; oy < ho; ++oy)
              for (Index ox = 0; ox < wo; ++ox) {
                const Scalar go = gout(o_off + oy * wo + ox);
                if (gb) (*gb)(c) += go;
                for (Index ky = 0; ky < g.kernel_y; ++ky) {
                  const Index iy = oy * g.stride - g.padding + ky;
                  if (iy < 0 || iy >= g.height) continue;
                  for (Index kx = 0; kx < g.kernel_x; ++kx) {
                    const Index ix = ox * g.stride - g.padding + kx;
                    if (ix < 0 || ix >= g.width) continue;
                    const Index xi = plane_off + iy * g.width + ix;
                    const Index wi = k_off + ky * g.kernel_x + kx;
                    if (gw) (*gw)(wi) += go * xv(xi);
                    if (gx) (*gx)(xi) += go * wv(wi);
                  }
                }
              }
          }
      });
}

/// Global average pooling: [N,C,H,W] -> [N,C].
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4) fail(ErrorKind::shape, "global_avg_pool: expected [N,C,H,W]");
  const Index nc = xs[0] * xs[1], spatial = xs[2] * xs[3];
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> m(x.value().data(),
                                                                             spatial, nc);
  Array<Scalar> out = (m.colwise().sum().transpose() / static_cast<Scalar>(spatial)).array();
  return x.tape->record(std::move(out), Shape{xs[0], xs[1]}, {x},
                        [x = x.id, nc, spatial](Tape<Scalar>& t, std::size_t self) {
                          auto* gx = t.grad_target(x);
                          if (!gx) return;
                          const auto& g = t.grad(self);
                          for (Index i = 0; i < nc; ++i)
                            gx->segment(i * spatial, spatial) += g(i) / static_cast<Scalar>(spatial);
                        });
}

/// Concatenates [N, C_i, ...] tensors along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_channels of nothing");
  Shape shape = parts.front().shape();
  if (shape.size() < 2) fail(ErrorKind::shape, "concat_channels: rank < 2");
  const Index n = shape[0];
  const Index inner = numel(shape) / (shape[0] * std::max<Index>(shape[1], 1));
  Index channels = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size() || s[0] != n) fail(ErrorKind::shape, "concat_channels: mismatch");
    for (std::size_t d = 2; d < s.size(); ++d)
      if (s[d] != shape[d]) fail(ErrorKind::shape, "concat_channels: spatial mismatch");
    channels += s[1];
  }
  shape[1] = channels;
  Array<Scalar> out(numel(shape));
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const Index c = p.shape()[1];
    for (Index b = 0; b < n; ++b)
      out.segment((b * channels + offset) * inner, c * inner) = p.value().segment(b * c * inner, c * inner);
    offset += c;
  }
  std::vector<std::pair<std::size_t, Index>> ids;
  for (std::size_t i = 0; i < parts.size(); ++i) ids.emplace_back(parts[i].id, parts[i].shape()[1]);
  return parts.front().tape->record(
      std::move(out), shape, parts,
      [ids, offsets, n, channels, inner](Tape<Scalar>& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          auto* gp = t.grad_target(ids[i].first);
          if (!gp) continue;
          const Index c = ids[i].second;
          for (Index b = 0; b < n; ++b)
            gp->segment(b * c * inner, c * inner) += g.segment((b * channels + offsets[i]) * inner, c * inner);
        }
      });
}

/// Mean (optionally class-weighted) softmax cross-entropy of logits [N, K].
///
/// With class weights the loss is sum_i w_{y_i} * ce_i / sum_i w_{y_i}.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels,
                                  std::span<const Scalar> class_weights = {}) {
  if (logits.shape().size() != 2 || logits.shape()[0] != static_cast<Index>(labels.size()))
    fail(ErrorKind::shape, "softmax_cross_entropy: logits " + shape_str(logits.shape()));
  const Index n = logits.shape()[0], k = logits.shape()[1];
  Eigen::Map<const RowMatrix<Scalar>> z(logits.value().data(), n, k);
  RowMatrix<Scalar> probs(n, k);
  Array<Scalar> weights(n);
  Scalar total = 0, weight_sum = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) fail(ErrorKind::contract, "label out of range");
    const Scalar zmax = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - zmax).exp();
    const Scalar denom = e.sum();
    probs.row(i) = e / denom;
    const Scalar w = class_weights.empty() ? Scalar(1) : class_weights[y];
    weights(i) = w;
    weight_sum += w;
    total += w * (std::log(denom) + zmax - z(i, y));
  }
  Array<Scalar> v(1);
  v(0) = total / weight_sum;
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(
      std::move(v), Shape{}, {logits},
      [lg = logits.id, probs = std::move(probs), weights, weight_sum, ys = std::move(ys), n,
       k](Tape<Scalar>& t, std::size_t self) {
        auto* g = t.grad_target(lg);
        if (!g) return;
        const Scalar up = t.grad(self)(0) / weight_sum;
        Eigen::Map<RowMatrix<Scalar>> gm(g->data(), n, k);
        for (Index i = 0; i < n; ++i) {
          gm.row(i) += probs.row(i) * (weights(i) * up);
          gm(i, ys[i]) -= weights(i) * up;
        }
      });
}

}  // namespace mixprune
