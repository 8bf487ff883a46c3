#pragma once

// Tiled interpreter for a KernelSchedule. Each kernel runs one block per
// logical-grid cell; inside a block every exported member is evaluated on
// demand, tile by tile, over scratchpad buffers. Global tensors are only
// touched through counted loads and stores.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tilefuse/grid_planner.hpp"
#include "tilefuse/naive_eval.hpp"
#include "tilefuse/reduction_algebra.hpp"
#include "tilefuse/sketch_fusion.hpp"
#include "tilefuse/tensor.hpp"

namespace tilefuse {

inline constexpr int64_t kDefaultScratchpadBytes = 256 * 1024;

struct KernelTraffic {
  std::string name;
  int64_t global_reads = 0;        // distinct elements loaded
  int64_t global_writes = 0;
  int64_t tile_load_elements = 0;  // every load, per block touch
  int64_t intermediate_bytes = 0;
  int64_t blocks = 0;
  int64_t peak_scratch_bytes = 0;

  friend bool operator==(const KernelTraffic&, const KernelTraffic&) = default;
};

struct TrafficReport {
  int64_t global_reads = 0;
  int64_t global_writes = 0;
  int64_t tile_load_elements = 0;
  int64_t intermediate_bytes_materialized = 0;
  int64_t kernel_count = 0;
  std::vector<KernelTraffic> kernels;

  int64_t total() const { return global_reads + global_writes; }

  friend bool operator==(const TrafficReport&, const TrafficReport&) = default;
};

struct ExecutionTrace {
  std::vector<std::string> lines;
  int64_t blocks = 0;
  int64_t write_overlaps = 0;
};

struct ExecOptions {
  bool parallel = false;
  unsigned threads = 0;  // 0: hardware concurrency
  bool trace = false;
  bool fault_flip_rescale = false;
  int64_t scratchpad_bytes = kDefaultScratchpadBytes;
};

struct ExecResult {
  std::map<std::string, Tensor> outputs;
  TrafficReport traffic;
  std::optional<ExecutionTrace> trace;
};

namespace exec {

struct Range {
  int64_t lo = 0, hi = 0;
  int64_t size() const { return hi - lo; }
};

using Region = std::map<std::string, Range>;

class Scratchpad {
 public:
  Scratchpad(int64_t cap, int64_t elem_bytes, std::string kernel)
      : cap_(cap), elem_bytes_(elem_bytes), kernel_(std::move(kernel)) {}

  void acquire(int64_t elems) {
    live_ += elems * elem_bytes_;
    peak_ = std::max(peak_, live_);
    if (live_ > cap_)
      throw Error("scratchpad capacity exceeded in kernel '" + kernel_ + "': requires " +
                  std::to_string(live_) + " bytes, capacity " + std::to_string(cap_));
  }
  void release(int64_t elems) { live_ -= elems * elem_bytes_; }
  int64_t peak() const { return peak_; }

 private:
  int64_t cap_, elem_bytes_;
  std::string kernel_;
  int64_t live_ = 0, peak_ = 0;
};

class TileBuf {
 public:
  TileBuf(Scratchpad& pad, std::vector<std::string> dims, const Region& region, double fill)
      : pad_(&pad), dims_(std::move(dims)) {
    int64_t n = 1;
    for (const auto& d : dims_) {
      auto it = region.find(d);
      if (it == region.end()) throw Error("internal: tile region lacks dim '" + d + "'");
      ranges_.push_back(it->second);
      shape_.push_back(it->second.size());
      n *= it->second.size();
    }
    pad_->acquire(n);
    data_.assign(static_cast<size_t>(n), fill);
  }
  TileBuf(TileBuf&& o) noexcept
      : pad_(std::exchange(o.pad_, nullptr)), dims_(std::move(o.dims_)),
        ranges_(std::move(o.ranges_)), shape_(std::move(o.shape_)), data_(std::move(o.data_)) {}
  TileBuf& operator=(TileBuf&&) = delete;
  TileBuf(const TileBuf&) = delete;
  ~TileBuf() {
    if (pad_) pad_->release(static_cast<int64_t>(data_.size()));
  }

  const std::vector<std::string>& dims() const { return dims_; }
  const std::vector<Range>& ranges() const { return ranges_; }
  const std::vector<int64_t>& shape() const { return shape_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  /// Strides of this buffer seen from a loop over `loop` dims (0 where absent).
  std::vector<int64_t> strides_on(const std::vector<std::string>& loop) const {
    std::vector<int64_t> own(dims_.size(), 1);
    for (size_t i = dims_.size(); i-- > 1;) own[i - 1] = own[i] * shape_[i];
    std::vector<int64_t> out(loop.size(), 0);
    for (size_t l = 0; l < loop.size(); ++l)
      for (size_t k = 0; k < dims_.size(); ++k)
        if (dims_[k] == loop[l]) out[l] = own[k];
    return out;
  }

 private:
  Scratchpad* pad_;
  std::vector<std::string> dims_;
  std::vector<Range> ranges_;
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

template <size_t K, class F>
void sweep(const std::vector<int64_t>& shape, const std::array<std::vector<int64_t>, K>& st, F&& f) {
  for (auto s : shape)
    if (s <= 0) return;
  std::array<int64_t, K> off{};
  if (shape.empty()) {
    f(off);
    return;
  }
  const size_t last = shape.size() - 1;
  std::vector<int64_t> idx(shape.size(), 0);
  for (;;) {
    std::array<int64_t, K> o = off;
    for (int64_t i = 0; i < shape[last]; ++i) {
      f(o);
      for (size_t k = 0; k < K; ++k) o[k] += st[k][last];
    }
    size_t d = last;
    for (;;) {
      if (d == 0) return;
      --d;
      if (++idx[d] < shape[d]) {
        for (size_t k = 0; k < K; ++k) off[k] += st[k][d];
        break;
      }
      for (size_t k = 0; k < K; ++k) off[k] -= st[k][d] * (shape[d] - 1);
      idx[d] = 0;
    }
  }
}

/// Sweeps every dim but the innermost; g(offsets, inner_len, inner_strides).
template <size_t K, class G>
void sweep_rows(const std::vector<int64_t>& shape, const std::array<std::vector<int64_t>, K>& st,
                G&& g) {
  std::array<int64_t, K> inner{};
  if (shape.empty()) {
    g(inner, int64_t{1}, inner);
    return;
  }
  std::vector<int64_t> outer(shape.begin(), shape.end() - 1);
  std::array<std::vector<int64_t>, K> os;
  for (size_t k = 0; k < K; ++k) {
    os[k].assign(st[k].begin(), st[k].end() - 1);
    inner[k] = st[k].back();
  }
  const int64_t len = shape.back();
  sweep<K>(outer, os, [&](const std::array<int64_t, K>& o) { g(o, len, inner); });
}

inline std::vector<int64_t> loop_shape(const std::vector<std::string>& loop, const Region& r) {
  std::vector<int64_t> s;
  for (const auto& d : loop) s.push_back(r.at(d).size());
  return s;
}

/// Strides of a global tensor over a loop, plus the base offset of `r`.
inline std::pair<std::vector<int64_t>, int64_t> global_view(const Tensor& t,
                                                           const std::vector<std::string>& loop,
                                                           const Region& r) {
  auto own = t.strides();
  std::vector<int64_t> out(loop.size(), 0);
  int64_t base = 0;
  for (size_t k = 0; k < t.dims.size(); ++k) {
    base += r.at(t.dims[k]).lo * own[k];
    for (size_t l = 0; l < loop.size(); ++l)
      if (loop[l] == t.dims[k]) out[l] = own[k];
  }
  return {out, base};
}

inline Region restrict_to(const Region& r, const std::vector<std::string>& dims) {
  Region out;
  for (const auto& d : dims) {
    auto it = r.find(d);
    if (it == r.end()) throw Error("internal: region lacks dim '" + d + "'");
    out.emplace(d, it->second);
  }
  return out;
}

struct Access {
  NodeId node;
  std::vector<Range> ranges;  // in the tensor's dim order
};

inline int64_t access_size(const Access& a) {
  int64_t n = 1;
  for (const auto& r : a.ranges) n *= r.size();
  return n;
}

/// Visits the flat offsets covered by an access.
template <class F>
void for_each_offset(const Tensor& t, const Access& a, F&& f) {
  std::vector<std::string> loop = t.dims;
  Region r;
  for (size_t i = 0; i < loop.size(); ++i) r[loop[i]] = a.ranges[i];
  auto [st, base] = global_view(t, loop, r);
  sweep<1>(loop_shape(loop, r), std::array<std::vector<int64_t>, 1>{st},
           [&](const std::array<int64_t, 1>& o) { f(base + o[0]); });
}

/// Calls f(tile_region) for every tile combination of `dims`.
template <class F>
void for_each_tile(const TensorGraph& g, const TileConfig& cfg, const std::vector<std::string>& dims,
                   F&& f) {
  std::vector<int64_t> ext, tile, trips, idx(dims.size(), 0);
  for (const auto& d : dims) {
    ext.push_back(g.extent(d));
    tile.push_back(cfg.tile_for(d, ext.back()));
    trips.push_back(ceil_div(ext.back(), tile.back()));
  }
  for (;;) {
    Region r;
    for (size_t i = 0; i < dims.size(); ++i)
      r[dims[i]] = Range{idx[i] * tile[i], std::min(ext[i], (idx[i] + 1) * tile[i])};
    f(r);
    size_t i = dims.size();
    for (;;) {
      if (i == 0) return;
      --i;
      if (++idx[i] < trips[i]) break;
      idx[i] = 0;
    }
  }
}

inline Region merged(Region a, const Region& b) {
  for (const auto& [d, r] : b) a[d] = r;
  return a;
}

struct KernelView {
  const TensorGraph* g;
  const FusedKernel* kernel;
  std::vector<bool> member;  // by node id
  std::string name;
};

struct BlockRecord {
  std::vector<Access> loads;
  std::vector<Access> writes;
  int64_t peak = 0;
};

template <class Alg>
class BlockEvaluator {
 public:
  BlockEvaluator(const KernelView& kv, const std::vector<std::optional<Tensor>>& global,
                 const TileConfig& cfg, const ExecOptions& opt, const Alg& alg)
      : kv_(kv), g_(*kv.g), global_(global), cfg_(cfg), opt_(opt), alg_(alg),
        pad_(opt.scratchpad_bytes, dtype_bytes(g_.dtype), kv.name) {}

  BlockRecord& record() { return rec_; }
  Scratchpad& pad() { return pad_; }

  TileBuf eval(NodeId id, const Region& region) {
    const OpNode& n = g_.node(id);
    if (!kv_.member[static_cast<size_t>(id)] || n.kind == OpKind::Input) return load(id, region);
    switch (n.kind) {
      case OpKind::Pointwise: return pointwise(n, region);
      case OpKind::Broadcast: return broadcast(n, region);
      case OpKind::Reduce: return reduce(n, region);
      case OpKind::Contract: return contract(n, region);
      case OpKind::OnlineReduce: return online(n, region);
      default: throw Error("internal: cannot evaluate node '" + n.name + "' inside a kernel");
    }
  }

  void store(NodeId id, const TileBuf& t, Tensor& dst) {
    Region r;
    for (size_t i = 0; i < t.dims().size(); ++i) r[t.dims()[i]] = t.ranges()[i];
    auto [st, base] = global_view(dst, t.dims(), r);
    const double* src = t.data().data();
    double* out = dst.data.data() + base;
    int64_t i = 0;
    sweep<1>(t.shape(), std::array<std::vector<int64_t>, 1>{st},
             [&](const std::array<int64_t, 1>& o) { out[o[0]] = src[i++]; });
    rec_.writes.push_back({id, t.ranges()});
  }

 private:
  TileBuf load(NodeId id, const Region& region) {
    const auto& src = global_[static_cast<size_t>(id)];
    if (!src) throw Error("internal: tensor '" + g_.node(id).name + "' not materialized");
    TileBuf t(pad_, src->dims, region, 0.0);
    auto [st, base] = global_view(*src, src->dims, region);
    const double* in = src->data.data() + base;
    double* out = t.data().data();
    sweep<1>(t.shape(), std::array<std::vector<int64_t>, 1>{st},
             [&](const std::array<int64_t, 1>& o) { *out++ = in[o[0]]; });
    rec_.loads.push_back({id, t.ranges()});
    return t;
  }

  TileBuf pointwise(const OpNode& n, const Region& region) {
    std::vector<TileBuf> ins;
    ins.reserve(n.inputs.size());
    for (NodeId i : n.inputs) ins.push_back(eval(i, region));
    TileBuf out(pad_, n.dims, region, 0.0);
    std::vector<std::span<const double>> args;
    for (const auto& t : ins) args.emplace_back(t.data());
    if (apply_expr(n.expr, args, out.data()).div_by_zero)
      throw Error("division by zero in node '" + n.name + "'");
    return out;
  }

  TileBuf broadcast(const OpNode& n, const Region& region) {
    TileBuf in = eval(n.inputs[0], restrict_to(region, g_.node(n.inputs[0]).dims));
    TileBuf out(pad_, n.dims, region, 0.0);
    double* o = out.data().data();
    const double* x = in.data().data();
    sweep<1>(out.shape(), std::array<std::vector<int64_t>, 1>{in.strides_on(n.dims)},
             [&](const std::array<int64_t, 1>& off) { *o++ = x[off[0]]; });
    return out;
  }

  TileBuf reduce(const OpNode& n, const Region& region) {
    TileBuf acc(pad_, n.dims, region, n.init);
    const auto& xdims = g_.node(n.inputs[0]).dims;
    for_each_tile(g_, cfg_, n.reduce_dims, [&](const Region& rt) {
      Region sub = merged(region, rt);
      TileBuf x = eval(n.inputs[0], restrict_to(sub, xdims));
      std::array<std::vector<int64_t>, 2> st{x.strides_on(xdims), acc.strides_on(xdims)};
      const double* xv = x.data().data();
      double* a = acc.data().data();
      if (n.combiner == Combiner::Sum)
        sweep<2>(x.shape(), st, [&](const std::array<int64_t, 2>& o) { a[o[1]] += xv[o[0]]; });
      else
        sweep<2>(x.shape(), st, [&](const std::array<int64_t, 2>& o) {
          a[o[1]] = std::max(a[o[1]], xv[o[0]]);
        });
    });
    return acc;
  }

  TileBuf contract(const OpNode& n, const Region& region) {
    TileBuf acc(pad_, n.dims, region, 0.0);
    const auto& adims = g_.node(n.inputs[0]).dims;
    const auto& bdims = g_.node(n.inputs[1]).dims;
    std::vector<std::string> loop = n.dims;
    loop.insert(loop.end(), n.reduce_dims.begin(), n.reduce_dims.end());
    for_each_tile(g_, cfg_, n.reduce_dims, [&](const Region& rt) {
      Region sub = merged(region, rt);
      TileBuf a = eval(n.inputs[0], restrict_to(sub, adims));
      TileBuf b = eval(n.inputs[1], restrict_to(sub, bdims));
      std::array<std::vector<int64_t>, 3> st{acc.strides_on(loop), a.strides_on(loop),
                                             b.strides_on(loop)};
      double* c = acc.data().data();
      const double* av = a.data().data();
      const double* bv = b.data().data();
      sweep_rows<3>(loop_shape(loop, sub), st,
                    [&](const std::array<int64_t, 3>& o, int64_t len, const std::array<int64_t, 3>& in) {
                      const double* pa = av + o[1];
                      const double* pb = bv + o[2];
                      if (in[0] == 0) {
                        double sum = 0.0;
                        for (int64_t i = 0; i < len; ++i) sum += pa[i * in[1]] * pb[i * in[2]];
                        c[o[0]] += sum;
                      } else {
                        for (int64_t i = 0; i < len; ++i) c[o[0] + i * in[0]] += pa[i * in[1]] * pb[i * in[2]];
                      }
                    });
    });
    return acc;
  }

  // Running-max rescaled reduction, one r-tile at a time.
  TileBuf online(const OpNode& n, const Region& region) {
    const auto& R = n.reduce_dims;
    const auto& xdims = g_.node(n.inputs[0]).dims;
    const bool weighted = n.inputs.size() > 1;
    const std::vector<std::string> xp = dims_minus(xdims, R);
    Region xp_region = restrict_to(region, xp);
    TileBuf m(pad_, xp, xp_region, alg_.stat_init());
    TileBuf l(pad_, xp, xp_region, alg_.zero());
    TileBuf corr(pad_, xp, xp_region, alg_.one());
    std::optional<TileBuf> acc;
    if (weighted) acc.emplace(pad_, n.dims, region, alg_.zero());

    for_each_tile(g_, cfg_, R, [&](const Region& rt) {
      Region sub = merged(region, rt);
      TileBuf x = eval(n.inputs[0], restrict_to(sub, xdims));
      // Tile max per row, folded into the running max.
      TileBuf mt(pad_, xp, xp_region, alg_.stat_init());
      std::array<std::vector<int64_t>, 2> xs{x.strides_on(xdims), mt.strides_on(xdims)};
      double* xv = x.data().data();
      double* mtv = mt.data().data();
      sweep<2>(x.shape(), xs,
               [&](const std::array<int64_t, 2>& o) { mtv[o[1]] = alg_.stat(mtv[o[1]], xv[o[0]]); });
      double* mv = m.data().data();
      double* lv = l.data().data();
      double* cv = corr.data().data();
      for (size_t i = 0; i < m.data().size(); ++i) {
        double m_new = alg_.stat(mv[i], mtv[i]);
        cv[i] = opt_.fault_flip_rescale ? alg_.hom(alg_.shift(m_new, mv[i]))
                                        : alg_.hom(alg_.shift(mv[i], m_new));
        lv[i] = alg_.otimes(lv[i], cv[i]);
        mv[i] = m_new;
      }
      // x <- hom(x - m_new), accumulated into l.
      sweep<2>(x.shape(), xs, [&](const std::array<int64_t, 2>& o) {
        xv[o[0]] = alg_.hom(alg_.shift(xv[o[0]], mv[o[1]]));
        lv[o[1]] = alg_.oplus(lv[o[1]], xv[o[0]]);
      });
      if (!weighted) return;
      double* av = acc->data().data();
      sweep<2>(acc->shape(),
               std::array<std::vector<int64_t>, 2>{acc->strides_on(n.dims), corr.strides_on(n.dims)},
               [&](const std::array<int64_t, 2>& o) { av[o[0]] = alg_.otimes(av[o[0]], cv[o[1]]); });
      TileBuf w = eval(n.inputs[1], restrict_to(sub, g_.node(n.inputs[1]).dims));
      std::vector<std::string> loop = n.dims;
      loop.insert(loop.end(), R.begin(), R.end());
      std::array<std::vector<int64_t>, 3> st{acc->strides_on(loop), x.strides_on(loop),
                                             w.strides_on(loop)};
      const double* wv = w.data().data();
      sweep_rows<3>(loop_shape(loop, sub), st,
                    [&](const std::array<int64_t, 3>& o, int64_t len, const std::array<int64_t, 3>& in) {
                      const double* px = xv + o[1];
                      const double* pw = wv + o[2];
                      if (in[0] == 0) {
                        double sum = alg_.zero();
                        for (int64_t i = 0; i < len; ++i)
                          sum = alg_.oplus(sum, alg_.otimes(px[i * in[1]], pw[i * in[2]]));
                        av[o[0]] = alg_.oplus(av[o[0]], sum);
                      } else {
                        for (int64_t i = 0; i < len; ++i)
                          av[o[0] + i * in[0]] = alg_.oplus(av[o[0] + i * in[0]],
                                                            alg_.otimes(px[i * in[1]], pw[i * in[2]]));
                      }
                    });
    });

    if (!weighted) {
      TileBuf out(pad_, n.dims, region, 0.0);
      double* ov = out.data().data();
      const double* lv = l.data().data();
      sweep<1>(out.shape(), std::array<std::vector<int64_t>, 1>{l.strides_on(n.dims)},
               [&](const std::array<int64_t, 1>& o) { *ov++ = lv[o[0]]; });
      return out;
    }
    if (n.normalize) {
      double* av = acc->data().data();
      const double* lv = l.data().data();
      sweep<2>(acc->shape(),
               std::array<std::vector<int64_t>, 2>{acc->strides_on(n.dims), l.strides_on(n.dims)},
               [&](const std::array<int64_t, 2>& o) { av[o[0]] /= lv[o[1]]; });
    }
    return std::move(*acc);
  }

  const KernelView& kv_;
  const TensorGraph& g_;
  const std::vector<std::optional<Tensor>>& global_;
  const TileConfig& cfg_;
  const ExecOptions& opt_;
  const Alg& alg_;
  Scratchpad pad_;
  BlockRecord rec_;
};

inline std::string kernel_name(const TensorGraph& g, const FusedKernel& k, size_t index) {
  NodeId sink = k.members.back();
  for (NodeId m : k.members)
    if (g.node(m).kind != OpKind::Output) sink = m;
  return "k" + std::to_string(index) + ":" + g.node(sink).name;
}

inline std::string fmt_ranges(const std::vector<Range>& rs) {
  std::string s = "[";
  for (size_t i = 0; i < rs.size(); ++i)
    s += (i ? "," : "") + std::to_string(rs[i].lo) + ":" + std::to_string(rs[i].hi);
  return s + "]";
}

inline bool consumed_by_output(const TensorGraph& g, const std::vector<std::vector<NodeId>>& users,
                               NodeId id) {
  for (NodeId u : users[static_cast<size_t>(id)])
    if (g.node(u).kind == OpKind::Output) return true;
  return false;
}

}  // namespace exec

/// Runs the schedule. Outputs are rounded to the graph dtype; intermediates
/// are kept in F64.
inline ExecResult execute(const KernelSchedule& s, const Bindings& bindings,
                          const ExecOptions& opt = {}) {
  using namespace exec;
  const TensorGraph& g = s.graph;
  const auto users = g.consumers();
  std::vector<std::optional<Tensor>> global(g.size());
  for (const auto& n : g.nodes) {
    if (n.kind != OpKind::Input) continue;
    naive::check_binding(g, n, bindings);
    Tensor t = bindings.at(n.name);
    for (auto& v : t.data) v = store_as(g.dtype, v);
    global[static_cast<size_t>(n.id)] = std::move(t);
  }

  ExecResult res;
  if (opt.trace) res.trace.emplace();
  const int64_t eb = dtype_bytes(g.dtype);
  SoftmaxAlgebra alg;

  for (size_t ki = 0; ki < s.kernels.size(); ++ki) {
    const FusedKernel& k = s.kernels[ki];
    KernelView kv{&g, &k, std::vector<bool>(g.size(), false), kernel_name(g, k, ki)};
    for (NodeId m : k.members) kv.member[static_cast<size_t>(m)] = true;
    for (NodeId m : k.members) {
      const OpNode& n = g.node(m);
      if (n.kind == OpKind::OnlineReduce && n.algebra != SoftmaxAlgebra::kName)
        throw Error("node '" + n.name + "': algebra '" + n.algebra + "' is not executable");
    }
    KernelTraffic kt;
    kt.name = kv.name;

    if (k.is_copy) {
      const OpNode& out = g.node(k.members[0]);
      Tensor t = *global[static_cast<size_t>(out.inputs[0])];
      kt.global_reads = kt.tile_load_elements = kt.global_writes = t.numel();
      kt.blocks = 1;
      global[static_cast<size_t>(out.id)] = std::move(t);
      res.traffic.kernels.push_back(kt);
      if (res.trace) res.trace->lines.push_back(kv.name + " copy");
      continue;
    }

    for (NodeId e : k.exports) {
      const OpNode& n = g.node(e);
      Tensor t(n.dims, naive::shape_of(g, n.dims));
      global[static_cast<size_t>(e)] = std::move(t);
    }

    LogicalGrid grid = grid_for(k.tiled);
    const int64_t nblocks = grid.total();
    std::vector<BlockRecord> records(static_cast<size_t>(nblocks));
    std::vector<std::exception_ptr> errors(static_cast<size_t>(nblocks));

    auto run_block = [&](int64_t b) {
      try {
        auto coords = delinearize(grid, b);
        Region block;
        for (size_t i = 0; i < k.tiled.p_tiles.size(); ++i) {
          const auto& d = k.tiled.p_tiles[i];
          block[d.name] = Range{coords[i] * d.tile, std::min(d.extent, (coords[i] + 1) * d.tile)};
        }
        for (const auto& d : k.tiled.eliminated) block[d.name] = Range{0, d.extent};
        BlockEvaluator<SoftmaxAlgebra> ev(kv, global, s.tiles, opt, alg);
        for (NodeId e : k.exports) {
          const OpNode& n = g.node(e);
          std::vector<std::string> extra;
          for (const auto& d : n.dims)
            if (!block.count(d)) extra.push_back(d);
          for_each_tile(g, s.tiles, extra, [&](const Region& rt) {
            Region r = restrict_to(merged(block, rt), n.dims);
            TileBuf t = ev.eval(e, r);
            ev.store(e, t, *global[static_cast<size_t>(e)]);
          });
        }
        ev.record().peak = ev.pad().peak();
        records[static_cast<size_t>(b)] = std::move(ev.record());
      } catch (...) {
        errors[static_cast<size_t>(b)] = std::current_exception();
      }
    };

    if (opt.parallel && nblocks > 1) {
      unsigned nt = opt.threads ? opt.threads : std::max(2u, std::thread::hardware_concurrency());
      nt = static_cast<unsigned>(std::min<int64_t>(nt, nblocks));
      std::atomic<int64_t> next{0};
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < nt; ++t)
        pool.emplace_back([&] {
          for (int64_t b; (b = next.fetch_add(1)) < nblocks;) run_block(b);
        });
      for (auto& t : pool) t.join();
    } else {
      for (int64_t b = 0; b < nblocks; ++b) run_block(b);
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    // Merge block records in block order.
    std::map<NodeId, std::vector<uint8_t>> read_seen;
    std::map<NodeId, std::vector<uint8_t>> write_seen;
    for (int64_t b = 0; b < nblocks; ++b) {
      const BlockRecord& r = records[static_cast<size_t>(b)];
      kt.peak_scratch_bytes = std::max(kt.peak_scratch_bytes, r.peak);
      for (const auto& a : r.loads) {
        const Tensor& t = *global[static_cast<size_t>(a.node)];
        auto& seen = read_seen[a.node];
        if (seen.empty()) seen.assign(static_cast<size_t>(t.numel()), 0);
        kt.tile_load_elements += access_size(a);
        for_each_offset(t, a, [&](int64_t off) {
          if (!seen[static_cast<size_t>(off)]) {
            seen[static_cast<size_t>(off)] = 1;
            ++kt.global_reads;
          }
        });
      }
      for (const auto& a : r.writes) {
        kt.global_writes += access_size(a);
        if (!opt.trace) continue;
        const Tensor& t = *global[static_cast<size_t>(a.node)];
        auto& seen = write_seen[a.node];
        if (seen.empty()) seen.assign(static_cast<size_t>(t.numel()), 0);
        for_each_offset(t, a, [&](int64_t off) {
          if (seen[static_cast<size_t>(off)]) ++res.trace->write_overlaps;
          seen[static_cast<size_t>(off)] = 1;
        });
      }
      if (res.trace) {
        std::ostringstream line;
        line << kv.name << " block " << b << " coords (";
        auto c = delinearize(grid, b);
        for (size_t i = 0; i < c.size(); ++i) line << (i ? "," : "") << c[i];
        line << ") loads " << r.loads.size();
        for (const auto& w : r.writes)
          line << " write " << g.node(w.node).name << fmt_ranges(w.ranges);
        line << " peak " << r.peak << "B";
        res.trace->lines.push_back(line.str());
      }
    }
    if (res.trace) {
      res.trace->blocks += nblocks;
      if (res.trace->write_overlaps > 0)
        throw Error("write-set overlap detected in kernel '" + kv.name + "'");
    }
    kt.blocks = nblocks;
    for (NodeId e : k.exports)
      if (!consumed_by_output(g, users, e))
        kt.intermediate_bytes += g.numel(g.node(e)) * eb;
    res.traffic.kernels.push_back(kt);
  }

  for (const auto& kt : res.traffic.kernels) {
    res.traffic.global_reads += kt.global_reads;
    res.traffic.global_writes += kt.global_writes;
    res.traffic.tile_load_elements += kt.tile_load_elements;
    res.traffic.intermediate_bytes_materialized += kt.intermediate_bytes;
  }
  res.traffic.kernel_count = static_cast<int64_t>(s.kernels.size());

  for (const auto& n : g.nodes) {
    if (n.kind != OpKind::Output) continue;
    const auto& src = global[static_cast<size_t>(n.inputs[0])];
    if (!src) throw Error("internal: output '" + n.name + "' has no materialized source");
    Tensor t = *src;
    t.dtype = g.dtype;
    for (auto& v : t.data) v = store_as(g.dtype, v);
    res.outputs[n.name] = std::move(t);
  }
  return res;
}

/// Unfused baseline: one kernel per non-input, non-output node, every value
/// round-tripping through global memory.
inline TrafficReport unfused_traffic(const TensorGraph& g) {
  TrafficReport r;
  const auto users = g.consumers();
  const int64_t eb = dtype_bytes(g.dtype);
  for (const auto& n : g.nodes) {
    if (n.kind == OpKind::Input) continue;
    if (n.kind == OpKind::Output && g.node(n.inputs[0]).kind != OpKind::Input) continue;
    KernelTraffic k;
    k.name = "k" + std::to_string(r.kernels.size()) + ":" + n.name;
    std::set<NodeId> distinct(n.inputs.begin(), n.inputs.end());
    for (NodeId i : distinct) k.global_reads += g.numel(g.node(i));
    k.tile_load_elements = k.global_reads;
    k.global_writes = g.numel(n);
    k.blocks = 1;
    if (n.kind != OpKind::Output && !exec::consumed_by_output(g, users, n.id))
      k.intermediate_bytes = k.global_writes * eb;
    r.global_reads += k.global_reads;
    r.global_writes += k.global_writes;
    r.tile_load_elements += k.tile_load_elements;
    r.intermediate_bytes_materialized += k.intermediate_bytes;
    r.kernels.push_back(k);
  }
  r.kernel_count = static_cast<int64_t>(r.kernels.size());
  return r;
}

inline ExecResult execute_unfused(const TensorGraph& g, const Bindings& bindings) {
  ExecResult res;
  res.outputs = eval_naive(g, bindings);
  res.traffic = unfused_traffic(g);
  return res;
}

inline constexpr double kRelEpsilon = 1e-30;

struct Comparison {
  double max_abs = 0.0;
  double max_rel = 0.0;  // elementwise |a - b| / max(|b|, 1e-30)
  double max_ref = 0.0;  // largest |b|
  bool shape_mismatch = false;

  /// max |a - b| / max |b|, per tensor, worst over tensors.
  double norm_rel = 0.0;

  bool within(double rel_tol) const { return !shape_mismatch && norm_rel <= rel_tol; }
  bool within_elementwise(double rel_tol) const { return !shape_mismatch && max_rel <= rel_tol; }
};

/// Error of `a` against reference `b`. Matching infinities count as exact.
inline Comparison compare(const Tensor& a, const Tensor& b) {
  Comparison c;
  if (a.shape != b.shape || a.dims != b.dims) {
    c.shape_mismatch = true;
    return c;
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < a.data.size(); ++i) {
    double x = a.data[i], y = b.data[i];
    if (x == y) continue;
    if (std::isnan(x) || std::isnan(y) || std::isinf(x) || std::isinf(y)) {
      c.max_abs = c.max_rel = inf;
      continue;
    }
    double d = std::abs(x - y);
    c.max_abs = std::max(c.max_abs, d);
    c.max_rel = std::max(c.max_rel, d / std::max(std::abs(y), kRelEpsilon));
  }
  for (double y : b.data)
    if (std::isfinite(y)) c.max_ref = std::max(c.max_ref, std::abs(y));
  c.norm_rel = std::isinf(c.max_abs) ? inf : c.max_abs / std::max(c.max_ref, kRelEpsilon);
  return c;
}

inline Comparison compare(const std::map<std::string, Tensor>& a,
                          const std::map<std::string, Tensor>& b) {
  Comparison c;
  if (a.size() != b.size()) {
    c.shape_mismatch = true;
    return c;
  }
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end()) {
      c.shape_mismatch = true;
      return c;
    }
    auto one = compare(t, it->second);
    c.shape_mismatch |= one.shape_mismatch;
    c.max_abs = std::max(c.max_abs, one.max_abs);
    c.max_rel = std::max(c.max_rel, one.max_rel);
    c.max_ref = std::max(c.max_ref, one.max_ref);
    c.norm_rel = std::max(c.norm_rel, one.norm_rel);
  }
  return c;
}

}  // namespace tilefuse
