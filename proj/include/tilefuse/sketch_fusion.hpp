#pragma once

// Kernel formation. Three rewrites, applied to a fixpoint in the order
// semantic -> structural -> tiling-aware:
//   * semantic: two-pass max/sum reductions become online reductions;
//   * structural: producer [(Pc, Pd), (Rp)] + consumer [(Pc), (Pd, Rc...)]
//     fuse into [(Pc), (Rc..., Rp)], demoting Pd to reduction loops;
//   * tiling-aware: the same rule in tile space, where dims whose tile covers
//     the full extent drop out of both sketches.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tilefuse/grid_planner.hpp"
#include "tilefuse/reduction_algebra.hpp"
#include "tilefuse/sketch.hpp"
#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

enum class FusionKind { Structural, Semantic, TilingAware };

inline const char* fusion_kind_name(FusionKind k) {
  switch (k) {
    case FusionKind::Structural: return "structural";
    case FusionKind::Semantic: return "semantic";
    case FusionKind::TilingAware: return "tiling_aware";
  }
  return "?";
}

struct FusionPlan {
  NodeId producer = kNoNode;  // node whose value crosses the fused edge
  NodeId consumer = kNoNode;
  std::vector<std::string> demoted_dims;
  std::vector<std::string> eliminated_dims;  // tiling-aware only
  ComputationSketch fused;
  FusionKind kind = FusionKind::Structural;
};

struct FusionOptions {
  bool semantic = true;
  bool structural = true;
  bool tiled = true;
};

namespace detail {

inline bool subset(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::all_of(a.begin(), a.end(), [&](const std::string& x) { return contains(b, x); });
}

inline bool disjoint(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::none_of(a.begin(), a.end(), [&](const std::string& x) { return contains(b, x); });
}

struct RuleResult {
  std::vector<std::string> demoted;
};

/// The demotion rule on name lists: consumer p-dims must be a subset of the
/// producer's, every producer p-dim the consumer lacks must be one of its
/// reduction dims, and the two reduction lists must not share a loop.
inline std::optional<RuleResult> demotion_rule(const std::vector<std::string>& pp,
                                               const std::vector<std::string>& rp,
                                               const std::vector<std::string>& pc,
                                               const std::vector<std::string>& rc) {
  if (!subset(pc, pp)) return std::nullopt;
  RuleResult r;
  for (const auto& d : pp)
    if (!contains(pc, d)) r.demoted.push_back(d);
  if (!subset(r.demoted, rc)) return std::nullopt;
  if (!disjoint(rp, rc)) return std::nullopt;
  return r;
}

inline ComputationSketch fused_sketch(const ComputationSketch& producer,
                                      const ComputationSketch& consumer) {
  ComputationSketch f;
  f.p_dims = consumer.p_dims;
  f.r_dims = consumer.r_dims;
  // Producer reduction loops nest innermost.
  for (const auto& d : producer.r_dims)
    if (std::none_of(f.r_dims.begin(), f.r_dims.end(),
                     [&](const SketchDim& x) { return x.name == d.name; }))
      f.r_dims.push_back(d);
  return f;
}

}  // namespace detail

/// Element-space producer/consumer fusion with dimension demotion.
inline std::optional<FusionPlan> try_fuse_structural(const ComputationSketch& producer,
                                                     const ComputationSketch& consumer) {
  auto r = detail::demotion_rule(producer.p_names(), producer.r_names(), consumer.p_names(),
                                 consumer.r_names());
  if (!r) return std::nullopt;
  FusionPlan plan;
  plan.kind = FusionKind::Structural;
  plan.demoted_dims = r->demoted;
  plan.fused = detail::fused_sketch(producer, consumer);
  return plan;
}

/// Tile-space fusion. Only reports a plan when eliminating single-tile dims is
/// what makes the pair legal; pairs that are already structurally fusable are
/// left to the structural rewrite.
inline std::optional<FusionPlan> try_fuse_tiled(const ComputationSketch& producer,
                                                const ComputationSketch& consumer,
                                                const TileConfig& cfg) {
  if (try_fuse_structural(producer, consumer)) return std::nullopt;
  TiledSketch tp = tile_sketch(producer, cfg), tc = tile_sketch(consumer, cfg);
  auto r = detail::demotion_rule(tp.p_names(), tp.r_names(), tc.p_names(), tc.r_names());
  if (!r) return std::nullopt;
  FusionPlan plan;
  plan.kind = FusionKind::TilingAware;
  plan.demoted_dims = r->demoted;
  for (const auto* t : {&tp, &tc})
    for (const auto& d : t->eliminated)
      if (!contains(plan.eliminated_dims, d.name)) plan.eliminated_dims.push_back(d.name);
  plan.fused = detail::fused_sketch(producer, consumer);
  return plan;
}

// ---------------------------------------------------------------------------
// Semantic fusion over a whole graph

struct SemanticResult {
  TensorGraph graph;
  int rewrites = 0;
  std::vector<Diagnostic> skipped;
};

inline SemanticResult try_fuse_semantic(const TensorGraph& g, const RuntimeAlgebra& alg,
                                        const AlgebraReport& checked) {
  SemanticResult res{g, 0, {}};
  if (!checked.passed() || checked.algebra != alg.name()) {
    res.skipped.push_back({kNoNode, "algebra '" + alg.name() + "' has not passed check_algebra"});
    return res;
  }
  for (;;) {
    std::vector<Diagnostic> skipped;
    bool fired = false;
    for (const auto& n : res.graph.nodes) {
      if (n.kind != OpKind::Reduce || n.combiner != alg.stat_combiner) continue;
      auto m = match_two_pass(res.graph, n.id, alg);
      if (m.pattern) {
        res.graph = rewrite_two_pass_to_online(res.graph, *m.pattern, alg);
        ++res.rewrites;
        fired = true;
        break;
      }
      if (m.skipped) skipped.push_back(*m.skipped);
    }
    if (!fired) {
      res.skipped = std::move(skipped);
      return res;
    }
  }
}

/// Samples used when the scheduler validates an algebra before rewriting.
inline std::vector<double> default_algebra_samples() {
  return {-20.0, -7.5, -3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 2.0, 3.0, 8.0, 20.0};
}

inline constexpr double kAlgebraTolerance = 1e-12;

// ---------------------------------------------------------------------------
// Kernel schedule

struct FusedKernel {
  std::vector<NodeId> members;  // ascending id (= topological order)
  ComputationSketch sketch;     // element space
  TiledSketch tiled;
  std::vector<NodeId> exports;  // members whose values are written to global memory
  std::vector<std::string> demoted_dims;
  bool is_copy = false;         // output that aliases a graph input
};

struct KernelSchedule {
  TensorGraph graph;  // after semantic rewriting
  TileConfig tiles;
  FusionOptions options;
  std::vector<FusedKernel> kernels;  // execution order
  std::vector<FusionPlan> plans;     // accepted plans, in order
  std::vector<Diagnostic> diagnostics;
  int semantic_rewrites = 0;

  size_t kernel_count() const { return kernels.size(); }
};

struct ScheduleOptions {
  FusionOptions fusion;
  std::optional<TileConfig> tiles;              // full config; defaults derived when absent
  std::map<std::string, int64_t> tile_overrides;  // applied on top
  RuntimeAlgebra algebra = softmax_algebra();
};

namespace detail {

class KernelGraph {
 public:
  KernelGraph(const TensorGraph& g) : g_(g), users_(g.consumers()) {
    kernel_of_.assign(g.size(), -1);
    for (const auto& n : g.nodes) {
      if (n.kind == OpKind::Input) continue;
      if (n.kind == OpKind::Output) {
        const OpNode& src = g.node(n.inputs[0]);
        if (src.kind != OpKind::Input) continue;  // attached below
      }
      Group k;
      k.members = {n.id};
      k.sketch = extract_sketch(g, n);
      k.is_copy = n.kind == OpKind::Output;
      kernel_of_[static_cast<size_t>(n.id)] = static_cast<int>(groups_.size());
      groups_.push_back(std::move(k));
    }
    for (const auto& n : g.nodes) {
      if (n.kind != OpKind::Output || kernel_of_[static_cast<size_t>(n.id)] >= 0) continue;
      int k = kernel_of_[static_cast<size_t>(n.inputs[0])];
      kernel_of_[static_cast<size_t>(n.id)] = k;
      groups_[static_cast<size_t>(k)].members.push_back(n.id);
    }
  }

  struct Group {
    std::vector<NodeId> members;
    ComputationSketch sketch;
    std::vector<std::string> demoted;
    bool is_copy = false;
    bool alive = true;
  };

  struct Edge {
    NodeId value;     // producer node
    NodeId consumer;  // consuming node
    int kp, kc;
  };

  std::vector<Group>& groups() { return groups_; }
  int kernel_of(NodeId id) const { return kernel_of_[static_cast<size_t>(id)]; }

  std::vector<NodeId> exports(int k) const {
    std::vector<NodeId> out;
    for (NodeId m : groups_[static_cast<size_t>(k)].members) {
      const OpNode& n = g_.node(m);
      if (n.kind == OpKind::Output && !groups_[static_cast<size_t>(k)].is_copy) continue;
      bool needed = n.kind == OpKind::Output;
      for (NodeId u : users_[static_cast<size_t>(m)])
        if (kernel_of(u) != k || g_.node(u).kind == OpKind::Output) needed = true;
      if (needed) out.push_back(m);
    }
    return out;
  }

  /// Cross-kernel edges, sorted by (producer node id, consumer node id).
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (const auto& n : g_.nodes) {
      int kc = kernel_of(n.id);
      if (kc < 0) continue;
      for (NodeId in : n.inputs) {
        int kp = kernel_of(in);
        if (kp < 0 || kp == kc) continue;
        out.push_back({in, n.id, kp, kc});
      }
    }
    std::sort(out.begin(), out.end(), [](const Edge& a, const Edge& b) {
      return std::pair(a.value, a.consumer) < std::pair(b.value, b.consumer);
    });
    out.erase(std::unique(out.begin(), out.end(),
                          [](const Edge& a, const Edge& b) {
                            return a.value == b.value && a.consumer == b.consumer;
                          }),
              out.end());
    return out;
  }

  std::set<int> successors(int k) const {
    std::set<int> s;
    for (NodeId m : groups_[static_cast<size_t>(k)].members)
      for (NodeId u : users_[static_cast<size_t>(m)]) {
        int ku = kernel_of(u);
        if (ku != k) s.insert(ku);
      }
    return s;
  }

  /// True when kc is reachable from kp other than through a direct edge.
  bool indirect_path(int kp, int kc) const {
    std::vector<int> stack;
    for (int s : successors(kp))
      if (s != kc) stack.push_back(s);
    std::set<int> seen;
    while (!stack.empty()) {
      int k = stack.back();
      stack.pop_back();
      if (k == kc) return true;
      if (!seen.insert(k).second) continue;
      for (int s : successors(k)) stack.push_back(s);
    }
    return false;
  }

  bool can_produce(const Edge& e) const {
    const Group& p = groups_[static_cast<size_t>(e.kp)];
    if (p.is_copy || groups_[static_cast<size_t>(e.kc)].is_copy) return false;
    // Other values leaving the producer may only feed the same consumer kernel.
    for (NodeId x : exports(e.kp)) {
      if (x == e.value) continue;
      for (NodeId u : users_[static_cast<size_t>(x)]) {
        int ku = kernel_of(u);
        if ((ku != e.kp && ku != e.kc) || g_.node(u).kind == OpKind::Output) return false;
      }
    }
    return !indirect_path(e.kp, e.kc);
  }

  void merge(int kp, int kc, const FusionPlan& plan) {
    Group& p = groups_[static_cast<size_t>(kp)];
    Group& c = groups_[static_cast<size_t>(kc)];
    for (NodeId m : p.members) kernel_of_[static_cast<size_t>(m)] = kc;
    c.members.insert(c.members.end(), p.members.begin(), p.members.end());
    std::sort(c.members.begin(), c.members.end());
    for (const auto& d : p.demoted) c.demoted.push_back(d);
    for (const auto& d : plan.demoted_dims) c.demoted.push_back(d);
    c.sketch = plan.fused;
    p.members.clear();
    p.alive = false;
  }

 private:
  const TensorGraph& g_;
  std::vector<std::vector<NodeId>> users_;
  std::vector<int> kernel_of_;
  std::vector<Group> groups_;
};

}  // namespace detail

/// Builds the fused kernel schedule for a validated graph.
inline KernelSchedule schedule(const TensorGraph& input, const ScheduleOptions& opts = {}) {
  require_valid(input);
  KernelSchedule s;
  s.options = opts.fusion;
  s.graph = input;

  if (opts.fusion.semantic) {
    auto samples = default_algebra_samples();
    auto report = check_algebra(opts.algebra, samples, kAlgebraTolerance);
    auto sem = try_fuse_semantic(s.graph, opts.algebra, report);
    s.graph = std::move(sem.graph);
    s.semantic_rewrites = sem.rewrites;
    s.diagnostics = std::move(sem.skipped);
    for (int i = 0; i < sem.rewrites; ++i) {
      FusionPlan p;
      p.kind = FusionKind::Semantic;
      s.plans.push_back(p);
    }
  }

  s.tiles = opts.tiles ? *opts.tiles : default_tiles(s.graph);
  for (const auto& [d, t] : opts.tile_overrides) s.tiles.set(d, t);

  detail::KernelGraph kg(s.graph);
  auto try_pass = [&](FusionKind kind) {
    for (const auto& e : kg.edges()) {
      if (!kg.can_produce(e)) continue;
      // An edge legal in element space between its own two nodes belongs to
      // the structural rewrite; the tiling-aware rewrite only takes the rest.
      if (kind == FusionKind::TilingAware &&
          try_fuse_structural(extract_sketch(s.graph, s.graph.node(e.value)),
                              extract_sketch(s.graph, s.graph.node(e.consumer))))
        continue;
      const auto& gp = kg.groups()[static_cast<size_t>(e.kp)];
      const auto& gc = kg.groups()[static_cast<size_t>(e.kc)];
      auto plan = kind == FusionKind::Structural ? try_fuse_structural(gp.sketch, gc.sketch)
                                                 : try_fuse_tiled(gp.sketch, gc.sketch, s.tiles);
      if (!plan) continue;
      plan->producer = e.value;
      plan->consumer = e.consumer;
      kg.merge(e.kp, e.kc, *plan);
      s.plans.push_back(*plan);
      return true;
    }
    return false;
  };
  for (bool changed = true; changed;) {
    changed = false;
    if (opts.fusion.structural)
      while (try_pass(FusionKind::Structural)) changed = true;
    if (opts.fusion.tiled)
      while (try_pass(FusionKind::TilingAware)) changed = true;
  }

  // Kernel order: by smallest member id works because members are contiguous
  // in dependency terms only after a topological sort of the kernel DAG.
  std::vector<int> alive;
  for (int k = 0; k < static_cast<int>(kg.groups().size()); ++k)
    if (kg.groups()[static_cast<size_t>(k)].alive) alive.push_back(k);
  std::map<int, int> indeg;
  for (int k : alive) indeg[k] = 0;
  for (int k : alive)
    for (int sk : kg.successors(k)) ++indeg[sk];
  auto key = [&](int k) { return kg.groups()[static_cast<size_t>(k)].members.back(); };
  std::set<std::pair<NodeId, int>> ready;
  for (int k : alive)
    if (indeg[k] == 0) ready.insert({key(k), k});
  while (!ready.empty()) {
    int k = ready.begin()->second;
    ready.erase(ready.begin());
    const auto& grp = kg.groups()[static_cast<size_t>(k)];
    FusedKernel fk;
    fk.members = grp.members;
    fk.sketch = grp.sketch;
    fk.tiled = tile_sketch(grp.sketch, s.tiles);
    fk.exports = kg.exports(k);
    fk.demoted_dims = grp.demoted;
    fk.is_copy = grp.is_copy;
    s.kernels.push_back(std::move(fk));
    for (int sk : kg.successors(k))
      if (--indeg[sk] == 0) ready.insert({key(sk), sk});
  }
  if (s.kernels.size() != alive.size()) throw Error("schedule: kernel graph has a cycle");
  return s;
}

/// Number of exported values that are not graph outputs.
inline size_t materialized_intermediates(const KernelSchedule& s) {
  const auto users = s.graph.consumers();
  size_t n = 0;
  for (const auto& k : s.kernels)
    for (NodeId e : k.exports) {
      if (k.is_copy) continue;
      bool is_output = false;
      for (NodeId u : users[static_cast<size_t>(e)])
        if (s.graph.node(u).kind == OpKind::Output) is_output = true;
      if (!is_output) ++n;
    }
  return n;
}

}  // namespace tilefuse
