#include "kpp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace kpp {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

Index normalize_axis(const char* op, Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return axis;
}

struct ConvGeometry {
  Index channels, height, width;  // image side
  Index kh, kw, stride, padding;
  Index out_h, out_w;             // column side
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

// cols[c*kh*kw + ki*kw + kj, oy*out_w + ox] = image[c, oy*s - p + ki, ox*s - p + kj]
void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const Index ncols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj;
            const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
            row[oy * g.out_w + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const double* cols, const ConvGeometry& g, double* image) {
  const Index ncols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj;
            if (ix < 0 || ix >= g.width) continue;
            image[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <class Fwd, class Deriv>
Var unary(const char* op, Var x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape(), fwd(x.value().array()));
  return x.tape().record(op, std::move(out), {x}, [deriv](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.array() * deriv(ctx.in[0]->array(), ctx.out.array());
  });
}

// For each flat input index, the flat index of the output cell it reduces into.
std::vector<Index> reduction_map(const Shape& in, const std::vector<bool>& reduced, Shape& out_shape, bool keepdims) {
  const Index rank = static_cast<Index>(in.size());
  out_shape.clear();
  for (Index d = 0; d < rank; ++d) {
    if (!reduced[static_cast<std::size_t>(d)]) out_shape.push_back(in[static_cast<std::size_t>(d)]);
    else if (keepdims) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<Index> out_stride(static_cast<std::size_t>(rank), 0);
  Index stride = 1;
  for (Index d = rank - 1; d >= 0; --d) {
    if (!reduced[static_cast<std::size_t>(d)]) {
      out_stride[static_cast<std::size_t>(d)] = stride;
      stride *= in[static_cast<std::size_t>(d)];
    }
  }

  const Index n = shape_size(in);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> idx(static_cast<std::size_t>(rank), 0);
  Index target = 0;
  for (Index i = 0; i < n; ++i) {
    map[static_cast<std::size_t>(i)] = target;
    for (Index d = rank - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      target += out_stride[du];
      if (idx[du] < in[du]) break;
      target -= out_stride[du] * idx[du];
      idx[du] = 0;
    }
  }
  return map;
}

// Splits a shape around an axis into (outer, axis extent, inner) block sizes.
struct AxisBlocks {
  Index outer = 1, extent = 1, inner = 1;
};

AxisBlocks axis_blocks(const Shape& shape, Index axis) {
  AxisBlocks b;
  for (Index d = 0; d < axis; ++d) b.outer *= shape[static_cast<std::size_t>(d)];
  b.extent = shape[static_cast<std::size_t>(axis)];
  for (Index d = axis + 1; d < static_cast<Index>(shape.size()); ++d) b.inner *= shape[static_cast<std::size_t>(d)];
  return b;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out(a.shape(), a.value().array() + b.value().array());
  return a.tape().record("add", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.array();
    if (ctx.in_grad[1]) ctx.in_grad[1]->array() += ctx.out_grad.array();
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out(a.shape(), a.value().array() - b.value().array());
  return a.tape().record("sub", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.array();
    if (ctx.in_grad[1]) ctx.in_grad[1]->array() -= ctx.out_grad.array();
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out(a.shape(), a.value().array() * b.value().array());
  return a.tape().record("mul", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.array() * ctx.in[1]->array();
    if (ctx.in_grad[1]) ctx.in_grad[1]->array() += ctx.out_grad.array() * ctx.in[0]->array();
  });
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  }
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  out.matrix(m, n).noalias() = av.matrix(m, k) * bv.matrix(k, n);
  return a.tape().record("matmul", std::move(out), {a, b}, [m, k, n](const BackwardContext& ctx) {
    auto g = ctx.out_grad.matrix(m, n);
    if (ctx.in_grad[0]) ctx.in_grad[0]->matrix(m, k).noalias() += g * ctx.in[1]->matrix(k, n).transpose();
    if (ctx.in_grad[1]) ctx.in_grad[1]->matrix(k, n).noalias() += ctx.in[0]->matrix(m, k).transpose() * g;
  });
}

Var conv2d(Var x, Var weight, Var bias, Index stride, Index padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank("conv2d", xv, 4, "input");
  require_rank("conv2d", wv, 4, "weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(xv.shape()) + " has " + std::to_string(xv.dim(1)) +
                     " channels but weight " + to_string(wv.shape()) + " expects " + std::to_string(wv.dim(1)));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  const Index batch = xv.dim(0), out_ch = wv.dim(0);
  ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), stride, padding, 0, 0};
  g.out_h = conv_out_size(g.height, g.kh, stride, padding);
  g.out_w = conv_out_size(g.width, g.kw, stride, padding);
  if (g.out_h < 1 || g.out_w < 1) {
    throw ShapeError("conv2d: kernel " + to_string(wv.shape()) + " larger than padded input " + to_string(xv.shape()));
  }
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().shape() != Shape{out_ch}) {
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(wv.shape()));
  }

  const Index in_size = g.channels * g.height * g.width;
  const Index out_size = out_ch * g.cols();
  Tensor out(Shape{batch, out_ch, g.out_h, g.out_w});
  RowMatrix cols(g.rows(), g.cols());
  auto wm = wv.matrix(out_ch, g.rows());
  for (Index n = 0; n < batch; ++n) {
    im2col(xv.data() + n * in_size, g, cols.data());
    MatrixMap o(out.data() + n * out_size, out_ch, g.cols());
    o.noalias() = wm * cols;
    if (has_bias) o.colwise() += bias.value().array().matrix();
  }

  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return x.tape().record(
      "conv2d", std::move(out), parents, [g, batch, out_ch, in_size, out_size, has_bias](const BackwardContext& ctx) {
        RowMatrix cols(g.rows(), g.cols());
        RowMatrix dcols(g.rows(), g.cols());
        auto wm = ctx.in[1]->matrix(out_ch, g.rows());
        for (Index n = 0; n < batch; ++n) {
          ConstMatrixMap go(ctx.out_grad.data() + n * out_size, out_ch, g.cols());
          if (ctx.in_grad[1]) {
            im2col(ctx.in[0]->data() + n * in_size, g, cols.data());
            ctx.in_grad[1]->matrix(out_ch, g.rows()).noalias() += go * cols.transpose();
          }
          if (ctx.in_grad[0]) {
            dcols.noalias() = wm.transpose() * go;
            col2im(dcols.data(), g, ctx.in_grad[0]->data() + n * in_size);
          }
          if (has_bias && ctx.in_grad[2]) ctx.in_grad[2]->array() += go.rowwise().sum().array();
        }
      });
}

Var conv_transpose2d(Var x, Var weight, Var bias, Index stride, Index padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank("conv_transpose2d", xv, 4, "input");
  require_rank("conv_transpose2d", wv, 4, "weight");
  if (xv.dim(1) != wv.dim(0)) {
    throw ShapeError("conv_transpose2d: input " + to_string(xv.shape()) + " has " + std::to_string(xv.dim(1)) +
                     " channels but weight " + to_string(wv.shape()) + " expects " + std::to_string(wv.dim(0)));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv_transpose2d: stride must be >= 1 and padding >= 0");
  const Index batch = xv.dim(0), in_ch = xv.dim(1), out_ch = wv.dim(1);
  const Index in_h = xv.dim(2), in_w = xv.dim(3);
  // Geometry of the equivalent forward convolution: image = our output, columns = our input.
  ConvGeometry g{out_ch, conv_transpose_out_size(in_h, wv.dim(2), stride, padding),
                 conv_transpose_out_size(in_w, wv.dim(3), stride, padding), wv.dim(2), wv.dim(3), stride, padding,
                 in_h, in_w};
  if (g.height < 1 || g.width < 1) {
    throw ShapeError("conv_transpose2d: padding too large for input " + to_string(xv.shape()));
  }
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().shape() != Shape{out_ch}) {
    throw ShapeError("conv_transpose2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(wv.shape()));
  }

  const Index in_size = in_ch * in_h * in_w;
  const Index out_size = out_ch * g.height * g.width;
  const Index plane = g.height * g.width;
  Tensor out(Shape{batch, out_ch, g.height, g.width});
  RowMatrix cols(g.rows(), g.cols());
  auto wm = wv.matrix(in_ch, g.rows());
  for (Index n = 0; n < batch; ++n) {
    cols.noalias() = wm.transpose() * xv.matrix(batch * in_ch, g.cols()).middleRows(n * in_ch, in_ch);
    double* o = out.data() + n * out_size;
    col2im(cols.data(), g, o);
    if (has_bias) {
      for (Index c = 0; c < out_ch; ++c) {
        Eigen::Map<Eigen::ArrayXd>(o + c * plane, plane) += bias.value()[c];
      }
    }
  }

  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return x.tape().record("conv_transpose2d", std::move(out), parents,
                         [g, batch, in_ch, out_ch, in_size, out_size, plane, has_bias](const BackwardContext& ctx) {
                           RowMatrix dcols(g.rows(), g.cols());
                           auto wm = ctx.in[1]->matrix(in_ch, g.rows());
                           for (Index n = 0; n < batch; ++n) {
                             im2col(ctx.out_grad.data() + n * out_size, g, dcols.data());
                             ConstMatrixMap xn(ctx.in[0]->data() + n * in_size, in_ch, g.cols());
                             if (ctx.in_grad[0]) {
                               MatrixMap(ctx.in_grad[0]->data() + n * in_size, in_ch, g.cols()).noalias() +=
                                   wm * dcols;
                             }
                             if (ctx.in_grad[1]) {
                               ctx.in_grad[1]->matrix(in_ch, g.rows()).noalias() += xn * dcols.transpose();
                             }
                             if (has_bias && ctx.in_grad[2]) {
                               ConstMatrixMap go(ctx.out_grad.data() + n * out_size, out_ch, plane);
                               ctx.in_grad[2]->array() += go.rowwise().sum().array();
                             }
                           }
                         });
}

Var sum(Var x, const std::vector<Index>& axes, bool keepdims) {
  const Shape& in_shape = x.shape();
  const Index rank = static_cast<Index>(in_shape.size());
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (Index a : axes) reduced[static_cast<std::size_t>(normalize_axis("sum", a, rank))] = true;
  Shape out_shape;
  auto map = reduction_map(in_shape, reduced, out_shape, keepdims);
  Tensor out(out_shape);
  const auto& in = x.value().array();
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += in[static_cast<Index>(i)];
  return x.tape().record("sum", std::move(out), {x}, [map = std::move(map)](const BackwardContext& ctx) {
    if (!ctx.in_grad[0]) return;
    auto& g = ctx.in_grad[0]->array();
    for (std::size_t i = 0; i < map.size(); ++i) g[static_cast<Index>(i)] += ctx.out_grad[map[i]];
  });
}

Var mean(Var x, const std::vector<Index>& axes, bool keepdims) {
  Var s = sum(x, axes, keepdims);
  const double count = static_cast<double>(x.value().size()) / static_cast<double>(s.value().size());
  return scale(s, 1.0 / count);
}

Var exp(Var x) {
  return unary(
      "exp", x, [](const auto& a) { return a.exp().eval(); }, [](const auto&, const auto& out) { return out; });
}

Var log(Var x) {
  if ((x.value().array() <= 0.0).any()) throw NonFiniteError("log: non-positive input");
  return unary(
      "log", x, [](const auto& a) { return a.log().eval(); }, [](const auto& in, const auto&) { return in.inverse(); });
}

Var softplus(Var x) {
  return unary(
      "softplus", x, [](const auto& a) { return (a.max(0.0) + (-a.abs()).exp().log1p()).eval(); },
      [](const auto& in, const auto&) { return (1.0 / (1.0 + (-in).exp())).eval(); });
}

Var tanh(Var x) {
  return unary(
      "tanh", x, [](const auto& a) { return a.tanh().eval(); },
      [](const auto&, const auto& out) { return (1.0 - out.square()).eval(); });
}

Var sigmoid(Var x) {
  return unary(
      "sigmoid", x, [](const auto& a) { return (1.0 / (1.0 + (-a).exp())).eval(); },
      [](const auto&, const auto& out) { return (out * (1.0 - out)).eval(); });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](const auto& a) { return a.max(0.0).eval(); },
      [](const auto& in, const auto&) { return (in > 0.0).template cast<double>().eval(); });
}

Var broadcast(Var x, Index batch) {
  if (batch < 1) throw ShapeError("broadcast: batch must be >= 1, got " + std::to_string(batch));
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const Index n = x.value().size();
  Tensor out(shape);
  out.matrix(batch, n).rowwise() = x.value().array().matrix().transpose();
  return x.tape().record("broadcast", std::move(out), {x}, [batch, n](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.matrix(batch, n).colwise().sum().transpose().array();
  });
}

Var concat(const std::vector<Var>& xs, Index axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  axis = normalize_axis("concat", axis, static_cast<Index>(first.size()));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<Index> extents;
  for (const Var& x : xs) {
    Shape s = x.shape();
    if (s.size() != first.size()) {
      throw ShapeError("concat: rank mismatch " + to_string(first) + " vs " + to_string(s));
    }
    extents.push_back(s[static_cast<std::size_t>(axis)]);
    s[static_cast<std::size_t>(axis)] = first[static_cast<std::size_t>(axis)];
    if (s != first) throw ShapeError("concat: shape mismatch " + to_string(first) + " vs " + to_string(x.shape()));
    out_shape[static_cast<std::size_t>(axis)] += extents.back();
  }
  const AxisBlocks ob = axis_blocks(out_shape, axis);
  Tensor out(out_shape);
  Index offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Index block = extents[k] * ob.inner;
    const double* src = xs[k].value().data();
    for (Index o = 0; o < ob.outer; ++o) {
      std::copy_n(src + o * block, block, out.data() + o * ob.extent * ob.inner + offset);
    }
    offset += block;
  }
  return xs.front().tape().record("concat", std::move(out), xs, [ob, extents](const BackwardContext& ctx) {
    Index offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const Index block = extents[k] * ob.inner;
      if (ctx.in_grad[k]) {
        double* dst = ctx.in_grad[k]->data();
        for (Index o = 0; o < ob.outer; ++o) {
          Eigen::Map<Eigen::ArrayXd>(dst + o * block, block) +=
              Eigen::Map<const Eigen::ArrayXd>(ctx.out_grad.data() + o * ob.extent * ob.inner + offset, block);
        }
      }
      offset += block;
    }
  });
}

Var slice(Var x, Index axis, Index begin, Index end) {
  const Shape& in_shape = x.shape();
  axis = normalize_axis("slice", axis, static_cast<Index>(in_shape.size()));
  const Index extent = in_shape[static_cast<std::size_t>(axis)];
  if (begin < 0 || end > extent || begin >= end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + to_string(in_shape));
  }
  const AxisBlocks ib = axis_blocks(in_shape, axis);
  Shape out_shape = in_shape;
  out_shape[static_cast<std::size_t>(axis)] = end - begin;
  const Index block = (end - begin) * ib.inner;
  const Index start = begin * ib.inner;
  Tensor out(out_shape);
  for (Index o = 0; o < ib.outer; ++o) {
    std::copy_n(x.value().data() + o * ib.extent * ib.inner + start, block, out.data() + o * block);
  }
  return x.tape().record("slice", std::move(out), {x}, [ib, block, start](const BackwardContext& ctx) {
    if (!ctx.in_grad[0]) return;
    for (Index o = 0; o < ib.outer; ++o) {
      Eigen::Map<Eigen::ArrayXd>(ctx.in_grad[0]->data() + o * ib.extent * ib.inner + start, block) +=
          Eigen::Map<const Eigen::ArrayXd>(ctx.out_grad.data() + o * block, block);
    }
  });
}

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return x.tape().record("reshape", x.value().reshaped(std::move(shape)), {x}, [](const BackwardContext& ctx) {
    if (ctx.in_grad[0]) ctx.in_grad[0]->array() += ctx.out_grad.array();
  });
}

Var full_like(Var x, double value) { return x.tape().constant(Tensor(x.shape(), value)); }

Var scale(Var x, double factor) { return mul(x, full_like(x, factor)); }

Var add_scalar(Var x, double value) { return add(x, full_like(x, value)); }

Var square(Var x) { return mul(x, x); }

Var sum_all(Var x) {
  std::vector<Index> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), Index{0});
  return sum(x, axes);
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

Var clamp(Var x, double lo, double hi) {
  if (!(lo < hi)) throw ShapeError("clamp: empty interval");
  return add_scalar(sub(relu(add_scalar(x, -lo)), relu(add_scalar(x, -hi))), lo);
}

}  // namespace kpp
