#pragma once

// Machine-readable reports (JSON) and the human-readable plan dump.

#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "tilefuse/executor.hpp"
#include "tilefuse/reduction_algebra.hpp"
#include "tilefuse/sketch_fusion.hpp"

namespace tilefuse {

using json = nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(KernelTraffic, name, global_reads, global_writes,
                                   tile_load_elements, intermediate_bytes, blocks,
                                   peak_scratch_bytes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrafficReport, global_reads, global_writes, tile_load_elements,
                                   intermediate_bytes_materialized, kernel_count, kernels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AxiomCheck, axiom, passed, worst_residual)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AlgebraReport, algebra, tolerance, checks)

inline json sketch_json(const ComputationSketch& s) {
  json j;
  j["p"] = s.p_names();
  j["r"] = s.r_names();
  j["text"] = s.to_string();
  return j;
}

inline json plan_json(const KernelSchedule& s) {
  json j;
  j["dtype"] = std::string(dtype_name(s.graph.dtype));
  j["tiles"] = s.tiles.tiles;
  j["semantic_rewrites"] = s.semantic_rewrites;
  j["options"] = {{"semantic", s.options.semantic},
                  {"structural", s.options.structural},
                  {"tiled", s.options.tiled}};
  j["kernels"] = json::array();
  for (size_t i = 0; i < s.kernels.size(); ++i) {
    const auto& k = s.kernels[i];
    json kj;
    kj["name"] = exec::kernel_name(s.graph, k, i);
    std::vector<std::string> members, exports, eliminated;
    for (NodeId m : k.members) members.push_back(s.graph.node(m).name);
    for (NodeId e : k.exports) exports.push_back(s.graph.node(e).name);
    for (const auto& d : k.tiled.eliminated) eliminated.push_back(d.name);
    kj["members"] = members;
    kj["exports"] = exports;
    kj["sketch"] = sketch_json(k.sketch);
    kj["tiled_sketch"] = k.tiled.to_string();
    kj["demoted_dims"] = k.demoted_dims;
    kj["eliminated_dims"] = eliminated;
    LogicalGrid grid = grid_for(k.tiled);
    json axes = json::array();
    for (const auto& [name, n] : grid.axes()) axes.push_back({{"dim", name}, {"trips", n}});
    kj["grid"] = {{"axes", axes}, {"total", grid.total()}};
    kj["copy"] = k.is_copy;
    j["kernels"].push_back(kj);
  }
  j["plans"] = json::array();
  for (const auto& p : s.plans) {
    json pj{{"kind", fusion_kind_name(p.kind)}};
    if (p.kind != FusionKind::Semantic) {
      pj["producer"] = s.graph.node(p.producer).name;
      pj["consumer"] = s.graph.node(p.consumer).name;
      pj["demoted_dims"] = p.demoted_dims;
      pj["eliminated_dims"] = p.eliminated_dims;
      pj["fused"] = p.fused.to_string();
    }
    j["plans"].push_back(pj);
  }
  j["diagnostics"] = json::array();
  for (const auto& d : s.diagnostics)
    j["diagnostics"].push_back(
        {{"node", d.node == kNoNode ? std::string() : s.graph.node(d.node).name},
         {"message", d.message}});
  return j;
}

inline std::string plan_text(const KernelSchedule& s) {
  std::ostringstream out;
  out << s.kernels.size() << " kernel(s), " << s.semantic_rewrites << " online rewrite(s)\n";
  for (size_t i = 0; i < s.kernels.size(); ++i) {
    const auto& k = s.kernels[i];
    out << exec::kernel_name(s.graph, k, i) << "\n";
    out << "  sketch " << k.sketch.to_string() << "  tiled " << k.tiled.to_string() << "\n";
    out << "  members";
    for (NodeId m : k.members) out << " " << s.graph.node(m).name;
    out << "\n  exports";
    for (NodeId e : k.exports) out << " " << s.graph.node(e).name;
    if (!k.demoted_dims.empty()) {
      out << "\n  demoted";
      for (const auto& d : k.demoted_dims) out << " " << d;
    }
    if (!k.tiled.eliminated.empty()) {
      out << "\n  eliminated";
      for (const auto& d : k.tiled.eliminated) out << " " << d.name;
    }
    LogicalGrid grid = grid_for(k.tiled);
    out << "\n  grid";
    for (const auto& [name, n] : grid.axes()) out << " " << name << ":" << n;
    out << " = " << grid.total() << " block(s)\n";
  }
  for (const auto& d : s.diagnostics)
    out << "note: " << (d.node == kNoNode ? "" : s.graph.node(d.node).name + ": ") << d.message
        << "\n";
  return out.str();
}

inline std::string traffic_text(const TrafficReport& t) {
  std::ostringstream out;
  out << "kernels " << t.kernel_count << "  reads " << t.global_reads << "  writes "
      << t.global_writes << "  tile loads " << t.tile_load_elements << "  intermediate bytes "
      << t.intermediate_bytes_materialized << "\n";
  for (const auto& k : t.kernels)
    out << "  " << k.name << ": reads " << k.global_reads << " writes " << k.global_writes
        << " tile loads " << k.tile_load_elements << " blocks " << k.blocks << " peak scratch "
        << k.peak_scratch_bytes << "B\n";
  return out.str();
}

}  // namespace tilefuse
