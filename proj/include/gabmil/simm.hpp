#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gabmil/autodiff.hpp"
#include "gabmil/nn.hpp"
#include "gabmil/rng.hpp"
#include "gabmil/tensor.hpp"

namespace gabmil {

/// Patch position on the slide grid.
struct GridCoord {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  bool operator==(const GridCoord&) const = default;
};

/// Bookkeeping for one bag's 2-D layout: tight bounding box after offset
/// normalization, per-item flat cell index, and the occupancy mask.
struct GridLayout {
  std::size_t rows = 0, cols = 0;
  std::uint32_t row_offset = 0, col_offset = 0;
  std::vector<std::size_t> item_row, item_col;   // normalized, per bag item
  std::vector<std::size_t> cell_of_item;         // row * cols + col
  std::vector<std::uint8_t> occupancy;           // rows * cols

  static GridLayout from_coords(const std::vector<GridCoord>& coords) {
    if (coords.empty()) throw std::invalid_argument("scatter: bag has no instances");
    std::uint32_t rmin = coords[0].row, rmax = coords[0].row;
    std::uint32_t cmin = coords[0].col, cmax = coords[0].col;
    for (const GridCoord& gc : coords) {
      rmin = std::min(rmin, gc.row);
      rmax = std::max(rmax, gc.row);
      cmin = std::min(cmin, gc.col);
      cmax = std::max(cmax, gc.col);
    }
    GridLayout g;
    g.rows = rmax - rmin + 1;
    g.cols = cmax - cmin + 1;
    g.row_offset = rmin;
    g.col_offset = cmin;
    g.occupancy.assign(g.rows * g.cols, 0);
    g.item_row.reserve(coords.size());
    g.item_col.reserve(coords.size());
    g.cell_of_item.reserve(coords.size());
    for (const GridCoord& gc : coords) {
      std::size_t r = gc.row - rmin, c = gc.col - cmin;
      std::size_t cell = r * g.cols + c;
      if (g.occupancy[cell]) {
        throw std::invalid_argument("scatter: duplicate coordinate (" + std::to_string(gc.row) +
                                    ", " + std::to_string(gc.col) + ")");
      }
      g.occupancy[cell] = 1;
      g.item_row.push_back(r);
      g.item_col.push_back(c);
      g.cell_of_item.push_back(cell);
    }
    return g;
  }

  std::size_t instance_count() const { return cell_of_item.size(); }

  /// Flat cell indices when the grid is padded to pitch `padded_cols`.
  std::vector<std::size_t> cells_with_pitch(std::size_t padded_cols) const {
    std::vector<std::size_t> out(cell_of_item.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = item_row[i] * padded_cols + item_col[i];
    return out;
  }
};

inline std::size_t round_up(std::size_t x, std::size_t unit) {
  return (x + unit - 1) / unit * unit;
}

/// A bag rearranged to its slide layout. Unoccupied cells hold zeros.
template <typename T>
struct SpatialGrid {
  Tensor<T> data;  // [rows, cols, C]
  GridLayout layout;
};

template <typename T>
SpatialGrid<T> scatter(const Tensor<T>& features, const std::vector<GridCoord>& coords) {
  if (features.rank() != 2 || features.dim(0) != coords.size()) {
    throw std::invalid_argument("scatter: features " + shape_str(features.shape()) +
                                " do not match " + std::to_string(coords.size()) + " coords");
  }
  GridLayout layout = GridLayout::from_coords(coords);
  std::size_t c = features.dim(1);
  Tensor<T> grid({layout.rows, layout.cols, c});
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const T* src = features.data() + i * c;
    T* dst = grid.data() + layout.cell_of_item[i] * c;
    for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
  }
  return SpatialGrid<T>{std::move(grid), std::move(layout)};
}

/// Inverse of scatter: embeddings back in original bag order; values in
/// unoccupied cells are discarded.
template <typename T>
Tensor<T> gather(const SpatialGrid<T>& grid) {
  std::size_t n = grid.layout.instance_count();
  std::size_t c = grid.data.dim(2);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = grid.data.data() + grid.layout.cell_of_item[i] * c;
    T* dst = out.data() + i * c;
    for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
  }
  return out;
}

// Window partitioning, reference index arithmetic. Inputs must already be
// padded to extents divisible by the unit; round trips are bitwise.

/// [R,S,C] -> [(R/P)(S/P), P*P, C]; windows and intra-window positions are
/// row-major.
template <typename T>
Tensor<T> block_partition(const Tensor<T>& grid, std::size_t window) {
  if (window < 1) throw std::invalid_argument("block_partition: window size must be >= 1");
  std::size_t r = grid.dim(0), s = grid.dim(1), c = grid.dim(2);
  if (r % window || s % window) {
    throw std::invalid_argument("block_partition: extents " + shape_str(grid.shape()) +
                                " not divisible by window " + std::to_string(window));
  }
  std::size_t wr = r / window, wc = s / window;
  Tensor<T> out({wr * wc, window * window, c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      std::size_t w = (i / window) * wc + (j / window);
      std::size_t p = (i % window) * window + (j % window);
      const T* src = grid.data() + (i * s + j) * c;
      T* dst = out.data() + (w * window * window + p) * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

template <typename T>
Tensor<T> block_unpartition(const Tensor<T>& part, std::size_t window, std::size_t rows,
                            std::size_t cols) {
  std::size_t c = part.dim(2);
  Tensor<T> out({rows, cols, c});
  std::size_t wc = cols / window;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::size_t w = (i / window) * wc + (j / window);
      std::size_t p = (i % window) * window + (j % window);
      const T* src = part.data() + (w * window * window + p) * c;
      T* dst = out.data() + (i * cols + j) * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

/// [R,S,C] -> [G*G, (R/G)(S/G), C]. The first axis walks the dilated G x G
/// pattern (cells a stride of R/G rows, S/G cols apart end up in one mixing
/// group); the second axis picks the group.
template <typename T>
Tensor<T> grid_partition(const Tensor<T>& grid, std::size_t gsize) {
  if (gsize < 1) throw std::invalid_argument("grid_partition: grid size must be >= 1");
  std::size_t r = grid.dim(0), s = grid.dim(1), c = grid.dim(2);
  if (r % gsize || s % gsize) {
    throw std::invalid_argument("grid_partition: extents " + shape_str(grid.shape()) +
                                " not divisible by grid size " + std::to_string(gsize));
  }
  std::size_t tr = r / gsize, tc = s / gsize;
  Tensor<T> out({gsize * gsize, tr * tc, c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      std::size_t a = (i / tr) * gsize + (j / tc);
      std::size_t b = (i % tr) * tc + (j % tc);
      const T* src = grid.data() + (i * s + j) * c;
      T* dst = out.data() + (a * tr * tc + b) * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

template <typename T>
Tensor<T> grid_unpartition(const Tensor<T>& part, std::size_t gsize, std::size_t rows,
                           std::size_t cols) {
  std::size_t c = part.dim(2);
  std::size_t tr = rows / gsize, tc = cols / gsize;
  Tensor<T> out({rows, cols, c});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::size_t a = (i / tr) * gsize + (j / tc);
      std::size_t b = (i % tr) * tc + (j % tc);
      const T* src = part.data() + (a * tr * tc + b) * c;
      T* dst = out.data() + (i * cols + j) * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

enum class SimmVariant { None, Block, Grid, Both };

inline const char* to_string(SimmVariant v) {
  switch (v) {
    case SimmVariant::None: return "NONE";
    case SimmVariant::Block: return "BLOCK";
    case SimmVariant::Grid: return "GRID";
    case SimmVariant::Both: return "BOTH";
  }
  return "?";
}

inline SimmVariant simm_variant_from(const std::string& s) {
  if (s == "NONE") return SimmVariant::None;
  if (s == "BLOCK") return SimmVariant::Block;
  if (s == "GRID") return SimmVariant::Grid;
  if (s == "BOTH") return SimmVariant::Both;
  throw std::invalid_argument("unknown SIMM variant '" + s + "' (NONE, BLOCK, GRID, BOTH)");
}

struct SimmConfig {
  SimmVariant variant = SimmVariant::None;
  std::size_t window_size = 2;  // BLOCK window edge
  std::size_t grid_size = 2;    // GRID pattern edge
  std::size_t channels = 512;
  std::size_t expansion = 1;  // 1 = single linear map

  void validate() const {
    if (window_size < 1) throw std::invalid_argument("simm: window size must be >= 1");
    if (grid_size < 1) throw std::invalid_argument("simm: grid size must be >= 1");
    if (channels < 1) throw std::invalid_argument("simm: channels must be >= 1");
    if (expansion < 1) throw std::invalid_argument("simm: expansion must be >= 1");
  }

  /// The sweep protocol covers sizes 1..10; larger values work but the CLI
  /// flags them.
  bool sizes_in_sweep_range() const { return window_size <= 10 && grid_size <= 10; }
};

enum class MixAxis { First, Second };

/// One shared MLP over spatial positions: a single square linear map by
/// default, optionally expanded to two layers with a ReLU between. All
/// windows and channels go through the same weights.
template <typename T>
struct TokenMixer {
  std::size_t positions = 0;
  std::size_t expansion = 1;
  LinearLayer<T> l1;
  LinearLayer<T> l2;  // unused when expansion == 1

  TokenMixer() = default;

  TokenMixer(std::size_t positions_, std::size_t expansion_, std::uint64_t seed,
             InitScheme scheme = InitScheme::UniformFanIn)
      : positions(positions_), expansion(expansion_) {
    if (expansion == 1) {
      l1 = LinearLayer<T>(positions, positions, seed, Activation::None, scheme);
    } else {
      l1 = LinearLayer<T>(positions, positions * expansion, Rng::derive(seed, "mixer.l1"),
                          Activation::Relu, scheme);
      l2 = LinearLayer<T>(positions * expansion, positions, Rng::derive(seed, "mixer.l2"),
                          Activation::None, scheme);
    }
  }

  Value<T> apply(Tape<T>& tape, Value<T> vecs) {
    Value<T> h = l1.forward(tape, vecs);
    if (expansion > 1) h = l2.forward(tape, h);
    return h;
  }

  NamedParams<T> named_params(const std::string& prefix) {
    NamedParams<T> out{{prefix + ".l1.weight", &l1.weight}, {prefix + ".l1.bias", &l1.bias}};
    if (expansion > 1) {
      out.push_back({prefix + ".l2.weight", &l2.weight});
      out.push_back({prefix + ".l2.bias", &l2.bias});
    }
    return out;
  }
};

namespace ops {

/// Applies the shared mixer along one axis of a partitioned [A,B,C] tensor:
/// every length-L fiber along `axis` (one per remaining index and channel)
/// goes through the same linear map.
template <typename T>
Value<T> mix(Value<T> part, TokenMixer<T>& mixer, MixAxis axis, Tape<T>& tape) {
  const Shape& s = part.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("mix: expected [windows, positions, channels] tensor, got " +
                                shape_str(s));
  }
  std::size_t mixed_extent = axis == MixAxis::First ? s[0] : s[1];
  if (mixed_extent != mixer.positions) {
    throw std::invalid_argument("mix: mixer size " + std::to_string(mixer.positions) +
                                " does not match axis extent " + std::to_string(mixed_extent) +
                                " of " + shape_str(s));
  }
  if (axis == MixAxis::Second) {
    Value<T> x = permute(part, {0, 2, 1});                       // [A, C, L]
    x = reshape(x, {s[0] * s[2], s[1]});                         // [A*C, L]
    x = mixer.apply(tape, x);
    x = reshape(x, {s[0], s[2], s[1]});
    return permute(x, {0, 2, 1});
  }
  Value<T> x = permute(part, {1, 2, 0});                         // [B, C, L]
  x = reshape(x, {s[1] * s[2], s[0]});                           // [B*C, L]
  x = mixer.apply(tape, x);
  x = reshape(x, {s[1], s[2], s[0]});
  return permute(x, {2, 0, 1});
}

}  // namespace ops

/// Per-forward capture of the SIMM stages, for feature-map export.
template <typename T>
struct SimmTrace {
  Tensor<T> input;   // [N,C] embeddings entering the SIMM
  Tensor<T> mixed;   // [N,C] last mixing stage's contribution, before residual
  Tensor<T> output;  // [N,C] after residual
};

/// Spatial Information Mixing Module: scatter to the slide layout, mix inside
/// BLOCK windows and/or across dilated GRID groups with shared MLPs, gather
/// back. Every stage is wrapped in its own residual connection.
template <typename T>
class Simm {
 public:
  SimmConfig cfg;

  Simm() = default;

  Simm(SimmConfig cfg_, std::uint64_t seed, InitScheme scheme = InitScheme::UniformFanIn)
      : cfg(cfg_) {
    cfg.validate();
    std::size_t p = cfg.window_size, g = cfg.grid_size;
    if (cfg.variant == SimmVariant::Block || cfg.variant == SimmVariant::Both) {
      block_mixer_.emplace(p * p, cfg.expansion, Rng::derive(seed, "simm.block"), scheme);
    }
    if (cfg.variant == SimmVariant::Grid || cfg.variant == SimmVariant::Both) {
      grid_mixer_.emplace(g * g, cfg.expansion, Rng::derive(seed, "simm.grid"), scheme);
    }
  }

  Value<T> forward(Tape<T>& tape, Value<T> bag, const GridLayout& layout,
                   SimmTrace<T>* trace = nullptr) {
    if (trace) trace->input = bag.tensor();
    if (cfg.variant == SimmVariant::None) {
      if (trace) {
        trace->mixed = Tensor<T>::zeros(bag.shape());
        trace->output = bag.tensor();
      }
      return bag;
    }
    Value<T> x = bag;
    if (cfg.variant == SimmVariant::Block || cfg.variant == SimmVariant::Both) {
      x = stage(tape, x, layout, cfg.window_size, MixAxis::Second, *block_mixer_, trace);
    }
    if (cfg.variant == SimmVariant::Grid || cfg.variant == SimmVariant::Both) {
      x = stage(tape, x, layout, cfg.grid_size, MixAxis::First, *grid_mixer_, trace);
    }
    if (trace) trace->output = x.tensor();
    return x;
  }

  NamedParams<T> named_params(const std::string& prefix) {
    NamedParams<T> out;
    if (block_mixer_) {
      for (auto& e : block_mixer_->named_params(prefix + ".block")) out.push_back(e);
    }
    if (grid_mixer_) {
      for (auto& e : grid_mixer_->named_params(prefix + ".grid")) out.push_back(e);
    }
    return out;
  }

  TokenMixer<T>* block_mixer() { return block_mixer_ ? &*block_mixer_ : nullptr; }
  TokenMixer<T>* grid_mixer() { return grid_mixer_ ? &*grid_mixer_ : nullptr; }

 private:
  // scatter -> pad -> partition -> shared MLP -> unpartition -> gather, then
  // the residual around the whole stage.
  Value<T> stage(Tape<T>& tape, Value<T> x, const GridLayout& layout, std::size_t unit,
                 MixAxis axis, TokenMixer<T>& mixer, SimmTrace<T>* trace) {
    std::size_t r = layout.rows, s = layout.cols;
    std::size_t rp = round_up(r, unit), sp = round_up(s, unit);
    std::size_t c = x.shape()[1];
    Value<T> g = ops::scatter_rows(x, layout.cell_of_item, r * s);
    Value<T> g3 = ops::reshape(g, {r, s, c});
    Value<T> padded = ops::pad2d(g3, rp - r, sp - s);
    Value<T> part, un;
    if (axis == MixAxis::Second) {
      std::size_t p = unit;
      part = ops::reshape(padded, {rp / p, p, sp / p, p, c});
      part = ops::permute(part, {0, 2, 1, 3, 4});
      part = ops::reshape(part, {(rp / p) * (sp / p), p * p, c});
      Value<T> mixed = ops::mix(part, mixer, axis, tape);
      un = ops::reshape(mixed, {rp / p, sp / p, p, p, c});
      un = ops::permute(un, {0, 2, 1, 3, 4});
      un = ops::reshape(un, {rp * sp, c});
    } else {
      std::size_t gz = unit;
      part = ops::reshape(padded, {gz, rp / gz, gz, sp / gz, c});
      part = ops::permute(part, {0, 2, 1, 3, 4});
      part = ops::reshape(part, {gz * gz, (rp / gz) * (sp / gz), c});
      Value<T> mixed = ops::mix(part, mixer, axis, tape);
      un = ops::reshape(mixed, {gz, gz, rp / gz, sp / gz, c});
      un = ops::permute(un, {0, 2, 1, 3, 4});
      un = ops::reshape(un, {rp * sp, c});
    }
    Value<T> y = ops::gather_rows(un, layout.cells_with_pitch(sp));
    if (trace) trace->mixed = y.tensor();
    return ops::add(x, y);
  }

  std::optional<TokenMixer<T>> block_mixer_;
  std::optional<TokenMixer<T>> grid_mixer_;
};

}  // namespace gabmil
