#pragma once

#include <string>
#include <vector>

#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

struct SketchDim {
  std::string name;
  int64_t extent = 1;

  friend bool operator==(const SketchDim&, const SketchDim&) = default;
};

/// Loop-nest signature [(P0, P1, ...), (R0, R1, ...)]: parallel dims outermost,
/// reduction dims nested inside in list order.
struct ComputationSketch {
  std::vector<SketchDim> p_dims;
  std::vector<SketchDim> r_dims;

  std::vector<std::string> p_names() const { return names(p_dims); }
  std::vector<std::string> r_names() const { return names(r_dims); }

  std::string to_string() const { return "[(" + join(p_dims) + "), (" + join(r_dims) + ")]"; }

  friend bool operator==(const ComputationSketch&, const ComputationSketch&) = default;

 private:
  static std::vector<std::string> names(const std::vector<SketchDim>& v) {
    std::vector<std::string> out;
    for (const auto& d : v) out.push_back(d.name);
    return out;
  }
  static std::string join(const std::vector<SketchDim>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i].name;
    return s;
  }
};

struct TiledDim {
  std::string name;
  int64_t extent = 1;
  int64_t tile = 1;
  int64_t trip_count = 1;  // ceil(extent / tile)

  friend bool operator==(const TiledDim&, const TiledDim&) = default;
};

/// Tile-space sketch. Dims whose tile covers the whole extent run a single
/// iteration and are moved to `eliminated`.
struct TiledSketch {
  std::vector<TiledDim> p_tiles;
  std::vector<TiledDim> r_tiles;
  std::vector<TiledDim> eliminated;

  std::vector<std::string> p_names() const { return names(p_tiles); }
  std::vector<std::string> r_names() const { return names(r_tiles); }

  std::string to_string() const {
    auto join = [](const std::vector<TiledDim>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i].name + "_t";
      return s;
    };
    return "[(" + join(p_tiles) + "), (" + join(r_tiles) + ")]";
  }

  friend bool operator==(const TiledSketch&, const TiledSketch&) = default;

 private:
  static std::vector<std::string> names(const std::vector<TiledDim>& v) {
    std::vector<std::string> out;
    for (const auto& d : v) out.push_back(d.name);
    return out;
  }
};

inline ComputationSketch extract_sketch(const TensorGraph& g, const OpNode& n) {
  ComputationSketch s;
  for (const auto& d : n.dims) s.p_dims.push_back({d, g.extent(d)});
  if (n.is_reduction())
    for (const auto& d : n.reduce_dims) s.r_dims.push_back({d, g.extent(d)});
  return s;
}

}  // namespace tilefuse
