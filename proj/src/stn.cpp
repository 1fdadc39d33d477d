#include "kpp/stn.hpp"

#include <cmath>

namespace kpp {
namespace {

// The four bilinear neighbours of a pixel-space point; weights of out-of-range cells are kept
// (for the coordinate gradient) but their flat index is -1.
struct Stencil {
  Index idx[4];
  double wx0, wx1, wy0, wy1;
};

Stencil make_stencil(double px, double py, Index height, Index width) {
  const double fx = std::floor(px), fy = std::floor(py);
  const auto x0 = static_cast<Index>(fx), y0 = static_cast<Index>(fy);
  Stencil s{};
  s.wx1 = px - fx;
  s.wx0 = 1.0 - s.wx1;
  s.wy1 = py - fy;
  s.wy0 = 1.0 - s.wy1;
  const Index xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const bool inside = ys[a] >= 0 && ys[a] < height && xs[b] >= 0 && xs[b] < width;
      s.idx[a * 2 + b] = inside ? ys[a] * width + xs[b] : -1;
    }
  }
  return s;
}

double to_pixel(double c, Index size) { return (c + 1.0) * 0.5 * static_cast<double>(size - 1); }

}  // namespace

std::array<double, 3> KeyTriple::squashed() const { return {std::tanh(scale), std::tanh(x), std::tanh(y)}; }

Var TraceSet::stacked() const {
  if (traces.empty()) throw ShapeError("TraceSet::stacked: no traces");
  return traces.size() == 1 ? traces.front() : concat(traces, 0);
}

double normalized_coord(Index k, Index n) {
  return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(n - 1);
}

Tensor affine_grid(const std::array<double, 3>& key, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("affine_grid: output size must be >= 1");
  Tensor grid({out_h, out_w, 2});
  for (Index r = 0; r < out_h; ++r) {
    const double v = normalized_coord(r, out_h);
    for (Index c = 0; c < out_w; ++c) {
      const double u = normalized_coord(c, out_w);
      grid[(r * out_w + c) * 2] = key[0] * u + key[1];
      grid[(r * out_w + c) * 2 + 1] = key[0] * v + key[2];
    }
  }
  return grid;
}

Tensor affine_grid(const KeyTriple& key, Index out_h, Index out_w) { return affine_grid(key.squashed(), out_h, out_w); }

Var affine_grid(Var raw_key, Index out_h, Index out_w) {
  if (raw_key.shape() != Shape{3}) throw ShapeError("affine_grid: key must have shape [3], got " + to_string(raw_key.shape()));
  Var key = tanh(raw_key);
  const auto& k = key.value();
  Tensor grid = affine_grid(std::array<double, 3>{k[0], k[1], k[2]}, out_h, out_w);
  return key.tape().record("affine_grid", std::move(grid), {key}, [out_h, out_w](const BackwardContext& ctx) {
    if (!ctx.in_grad[0]) return;
    double ds = 0.0, dx = 0.0, dy = 0.0;
    for (Index r = 0; r < out_h; ++r) {
      const double v = normalized_coord(r, out_h);
      for (Index c = 0; c < out_w; ++c) {
        const double gu = ctx.out_grad[(r * out_w + c) * 2];
        const double gv = ctx.out_grad[(r * out_w + c) * 2 + 1];
        ds += gu * normalized_coord(c, out_w) + gv * v;
        dx += gu;
        dy += gv;
      }
    }
    auto& g = *ctx.in_grad[0];
    g[0] += ds;
    g[1] += dx;
    g[2] += dy;
  });
}

Var bilinear_sample(Var image, Var grid) {
  const Tensor& img = image.value();
  const Tensor& gr = grid.value();
  if (img.rank() != 3) throw ShapeError("bilinear_sample: image must be [C, H, W], got " + to_string(img.shape()));
  if (gr.rank() != 3 || gr.dim(2) != 2) {
    throw ShapeError("bilinear_sample: grid must be [h, w, 2], got " + to_string(gr.shape()));
  }
  const Index channels = img.dim(0), height = img.dim(1), width = img.dim(2);
  const Index out_h = gr.dim(0), out_w = gr.dim(1);
  const Index plane = height * width, out_plane = out_h * out_w;

  std::vector<Stencil> stencils(static_cast<std::size_t>(out_plane));
  Tensor out({channels, out_h, out_w});
  for (Index p = 0; p < out_plane; ++p) {
    const Stencil s = make_stencil(to_pixel(gr[p * 2], width), to_pixel(gr[p * 2 + 1], height), height, width);
    stencils[static_cast<std::size_t>(p)] = s;
    const double w[4] = {s.wy0 * s.wx0, s.wy0 * s.wx1, s.wy1 * s.wx0, s.wy1 * s.wx1};
    for (Index ch = 0; ch < channels; ++ch) {
      const double* src = img.data() + ch * plane;
      double acc = 0.0;
      for (int n = 0; n < 4; ++n) {
        if (s.idx[n] >= 0) acc += w[n] * src[s.idx[n]];
      }
      out[ch * out_plane + p] = acc;
    }
  }

  return image.tape().record(
      "bilinear_sample", std::move(out), {image, grid},
      [stencils = std::move(stencils), channels, height, width, plane, out_plane](const BackwardContext& ctx) {
        const Tensor& img = *ctx.in[0];
        const double sx = 0.5 * static_cast<double>(width - 1);
        const double sy = 0.5 * static_cast<double>(height - 1);
        for (Index p = 0; p < out_plane; ++p) {
          const Stencil& s = stencils[static_cast<std::size_t>(p)];
          const double w[4] = {s.wy0 * s.wx0, s.wy0 * s.wx1, s.wy1 * s.wx0, s.wy1 * s.wx1};
          double dpx = 0.0, dpy = 0.0;
          for (Index ch = 0; ch < channels; ++ch) {
            const double g = ctx.out_grad[ch * out_plane + p];
            if (g == 0.0) continue;
            if (ctx.in_grad[0]) {
              double* dst = ctx.in_grad[0]->data() + ch * plane;
              for (int n = 0; n < 4; ++n) {
                if (s.idx[n] >= 0) dst[s.idx[n]] += g * w[n];
              }
            }
            const double* src = img.data() + ch * plane;
            double v[4];
            for (int n = 0; n < 4; ++n) v[n] = s.idx[n] >= 0 ? src[s.idx[n]] : 0.0;
            dpx += g * (s.wy0 * (v[1] - v[0]) + s.wy1 * (v[3] - v[2]));
            dpy += g * (s.wx0 * (v[2] - v[0]) + s.wx1 * (v[3] - v[1]));
          }
          if (ctx.in_grad[1]) {
            (*ctx.in_grad[1])[p * 2] += dpx * sx;
            (*ctx.in_grad[1])[p * 2 + 1] += dpy * sy;
          }
        }
      });
}

TraceSet read_traces(Var memory, Var raw_keys, Index out_h, Index out_w) {
  if (raw_keys.value().rank() != 2 || raw_keys.dim(1) != 3) {
    throw ShapeError("read_traces: keys must be [K, 3], got " + to_string(raw_keys.shape()));
  }
  const Index k = raw_keys.dim(0);
  if (k < 1) throw ShapeError("read_traces: K must be >= 1");
  TraceSet set;
  for (Index i = 0; i < k; ++i) {
    Var key = reshape(slice(raw_keys, 0, i, i + 1), {3});
    set.traces.push_back(bilinear_sample(memory, affine_grid(key, out_h, out_w)));
  }
  return set;
}

}  // namespace kpp
