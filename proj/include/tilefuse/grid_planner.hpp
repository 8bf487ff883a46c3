#pragma once

// Logical tiling: independent per-dimension tile sizes, a multi-dimensional
// grid of tiles, and its row-major flattening onto one physical grid axis.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tilefuse/common.hpp"
#include "tilefuse/sketch.hpp"
#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

/// Physical launch-grid limits of the CUDA model. Only the X limit is ever
/// used for mapping; the Y/Z limit documents why multi-axis mapping is avoided.
struct GridLimits {
  static constexpr int64_t x_max = 2147483647;  // 2^31 - 1
  static constexpr int64_t yz_max = 65535;
};

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

class LogicalGrid {
 public:
  LogicalGrid() = default;

  explicit LogicalGrid(std::vector<std::pair<std::string, int64_t>> axes) : axes_(std::move(axes)) {
    total_ = 1;
    for (const auto& [name, n] : axes_) {
      if (n < 1) throw Error("grid axis '" + name + "' has trip count < 1");
      if (total_ > GridLimits::x_max / n)
        throw Error("logical grid exceeds the physical x-axis limit");
      total_ *= n;
    }
  }

  const std::vector<std::pair<std::string, int64_t>>& axes() const { return axes_; }
  int64_t total() const { return total_; }
  size_t rank() const { return axes_.size(); }

  /// True when a one-axis-per-dimension launch would violate the Y/Z limit.
  bool needs_linearization() const {
    for (size_t i = 0; i + 1 < axes_.size(); ++i)
      if (axes_[i].second > GridLimits::yz_max) return true;
    return axes_.size() > 3;
  }

 private:
  std::vector<std::pair<std::string, int64_t>> axes_;
  int64_t total_ = 1;
};

/// Row-major mixed-radix encoding, first axis outermost.
inline int64_t linearize(const LogicalGrid& grid, std::span<const int64_t> coords) {
  if (coords.size() != grid.rank()) throw Error("linearize: coordinate rank mismatch");
  int64_t id = 0;
  for (size_t i = 0; i < coords.size(); ++i) {
    const int64_t n = grid.axes()[i].second;
    if (coords[i] < 0 || coords[i] >= n)
      throw Error("linearize: coordinate " + std::to_string(coords[i]) + " out of range for axis '" +
                  grid.axes()[i].first + "'");
    id = id * n + coords[i];
  }
  return id;
}

inline std::vector<int64_t> delinearize(const LogicalGrid& grid, int64_t id) {
  if (id < 0 || id >= grid.total())
    throw Error("delinearize: block id " + std::to_string(id) + " out of range");
  std::vector<int64_t> coords(grid.rank());
  for (size_t i = grid.rank(); i-- > 0;) {
    const int64_t n = grid.axes()[i].second;
    coords[i] = id % n;
    id /= n;
  }
  return coords;
}

// ---------------------------------------------------------------------------
// Tile configuration

struct TileConfig {
  std::map<std::string, int64_t> tiles;
  std::string policy = "default";

  int64_t tile_for(const std::string& dim, int64_t extent) const {
    auto it = tiles.find(dim);
    int64_t t = it == tiles.end() ? std::min<int64_t>(extent, 64) : it->second;
    return std::max<int64_t>(1, std::min(t, extent));
  }

  void set(const std::string& dim, int64_t size) {
    if (size < 1) throw Error("tile size for '" + dim + "' must be >= 1");
    tiles[dim] = size;
  }

  friend bool operator==(const TileConfig&, const TileConfig&) = default;
};

inline constexpr int64_t kSmallExtent = 128;
inline constexpr int64_t kDefaultTile = 64;

/// Default policy for one sketch. Reduction dims and the innermost parallel
/// dim are taken whole when small (<= 128) so they can be eliminated, else
/// tiled by 64. Outer parallel dims (batch/head-like) are tiled by 1 when small,
/// by 64 otherwise.
inline TileConfig default_tiles(const ComputationSketch& s) {
  TileConfig cfg;
  auto whole_or_64 = [](int64_t e) { return e <= kSmallExtent ? e : kDefaultTile; };
  for (size_t i = 0; i < s.p_dims.size(); ++i) {
    const auto& d = s.p_dims[i];
    bool innermost = i + 1 == s.p_dims.size();
    cfg.tiles[d.name] = innermost ? whole_or_64(d.extent)
                                  : (d.extent <= kSmallExtent ? 1 : kDefaultTile);
  }
  for (const auto& d : s.r_dims) cfg.tiles[d.name] = whole_or_64(d.extent);
  return cfg;
}

/// Graph-wide defaults: per dim, the largest tile any node's sketch asks for.
inline TileConfig default_tiles(const TensorGraph& g) {
  TileConfig cfg;
  for (const auto& n : g.nodes) {
    if (n.kind == OpKind::Input || n.kind == OpKind::Output) continue;
    auto one = default_tiles(extract_sketch(g, n));
    for (const auto& [d, t] : one.tiles) cfg.tiles[d] = std::max(cfg.tiles[d], t);
  }
  for (const auto& [d, e] : g.extents)
    if (!cfg.tiles.count(d)) cfg.tiles[d] = e <= kSmallExtent ? e : kDefaultTile;
  return cfg;
}

inline TiledSketch tile_sketch(const ComputationSketch& s, const TileConfig& cfg) {
  TiledSketch t;
  auto make = [&](const SketchDim& d) {
    int64_t tile = cfg.tile_for(d.name, d.extent);
    return TiledDim{d.name, d.extent, tile, ceil_div(d.extent, tile)};
  };
  for (const auto& d : s.p_dims) {
    auto td = make(d);
    (td.trip_count == 1 ? t.eliminated : t.p_tiles).push_back(td);
  }
  for (const auto& d : s.r_dims) {
    auto td = make(d);
    (td.trip_count == 1 ? t.eliminated : t.r_tiles).push_back(td);
  }
  return t;
}

/// Logical grid of a kernel: one axis per surviving tiled p-dim, in sketch order.
inline LogicalGrid grid_for(const TiledSketch& t) {
  std::vector<std::pair<std::string, int64_t>> axes;
  for (const auto& d : t.p_tiles) axes.emplace_back(d.name, d.trip_count);
  return LogicalGrid(std::move(axes));
}

}  // namespace tilefuse
