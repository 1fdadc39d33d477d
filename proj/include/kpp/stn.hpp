#pragma once

#include "kpp/ops.hpp"

#include <array>
#include <vector>

namespace kpp {

/// Raw read key (scale, x-shift, y-shift); unbounded, squashed by tanh before use.
struct KeyTriple {
  double scale = 0.0;
  double x = 0.0;
  double y = 0.0;

  std::array<double, 3> squashed() const;
};

/// The K sub-blocks read for one sample, each [C, h, w].
struct TraceSet {
  std::vector<Var> traces;

  std::size_t size() const { return traces.size(); }
  /// Traces concatenated along the channel axis: [K * C, h, w].
  Var stacked() const;
};

/// Normalized target coordinate of pixel k on an axis of n pixels; corners map to +-1.
double normalized_coord(Index k, Index n);

/// Source grid [out_h, out_w, 2] for a squashed key (s, x, y):
/// grid[r, c] = (s * u_c + x, s * v_r + y), with u along columns and v along rows.
Tensor affine_grid(const std::array<double, 3>& squashed_key, Index out_h, Index out_w);
Tensor affine_grid(const KeyTriple& key, Index out_h, Index out_w);

/// Differentiable grid from a raw key Var of shape [3] (tanh applied inside).
Var affine_grid(Var raw_key, Index out_h, Index out_w);

/// Bilinear sampling of image [C, H, W] at grid [out_h, out_w, 2] -> [C, out_h, out_w].
/// Normalized c maps to pixel (c + 1) / 2 * (size - 1); neighbours outside the image read as zero.
Var bilinear_sample(Var image, Var grid);

/// One trace per key row of raw_keys [K, 3].
TraceSet read_traces(Var memory, Var raw_keys, Index out_h, Index out_w);

}  // namespace kpp
