#pragma once

// Reference evaluator: one node at a time over whole tensors, every
// intermediate materialized, F64 arithmetic. Deliberately shares no loop code
// with the tiled executor.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tilefuse/reduction_algebra.hpp"
#include "tilefuse/tensor.hpp"
#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

namespace naive {

/// Strides of `operand_dims` (laid out row-major with graph extents) projected
/// onto `loop_dims`: 0 where the loop dim is absent from the operand.
inline std::vector<int64_t> projected_strides(const TensorGraph& g,
                                              const std::vector<std::string>& loop_dims,
                                              const std::vector<std::string>& operand_dims) {
  std::vector<int64_t> own(operand_dims.size(), 1);
  for (size_t i = operand_dims.size(); i-- > 1;) own[i - 1] = own[i] * g.extent(operand_dims[i]);
  std::vector<int64_t> out(loop_dims.size(), 0);
  for (size_t l = 0; l < loop_dims.size(); ++l)
    for (size_t k = 0; k < operand_dims.size(); ++k)
      if (operand_dims[k] == loop_dims[l]) out[l] = own[k];
  return out;
}

/// Visits every point of the row-major space `shape`, passing the current
/// offset of each operand.
template <size_t K, class F>
void walk(const std::vector<int64_t>& shape, const std::array<std::vector<int64_t>, K>& strides,
          F&& f) {
  const size_t rank = shape.size();
  std::array<int64_t, K> off{};
  for (auto s : shape)
    if (s == 0) return;
  if (rank == 0) {
    f(off);
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  const int64_t inner = shape[rank - 1];
  for (;;) {
    for (int64_t i = 0; i < inner; ++i) {
      f(off);
      for (size_t k = 0; k < K; ++k) off[k] += strides[k][rank - 1];
    }
    for (size_t k = 0; k < K; ++k) off[k] -= strides[k][rank - 1] * inner;
    size_t d = rank - 1;
    for (;;) {
      if (d == 0) return;
      --d;
      ++idx[d];
      for (size_t k = 0; k < K; ++k) off[k] += strides[k][d];
      if (idx[d] < shape[d]) break;
      for (size_t k = 0; k < K; ++k) off[k] -= strides[k][d] * shape[d];
      idx[d] = 0;
    }
  }
}

inline std::vector<int64_t> shape_of(const TensorGraph& g, const std::vector<std::string>& dims) {
  std::vector<int64_t> s;
  for (const auto& d : dims) s.push_back(g.extent(d));
  return s;
}

/// Online reduce evaluated element by element, in row-major order of the
/// reduced dims.
template <class Alg>
void online_reduce(const TensorGraph& g, const OpNode& n, const Tensor& x, const Tensor* w,
                   Tensor& out, const Alg& alg) {
  const auto& R = n.reduce_dims;
  std::vector<std::string> xp = dims_minus(x.dims, R);
  // Denominator per x-row.
  std::vector<std::string> row_loop = xp;
  row_loop.insert(row_loop.end(), R.begin(), R.end());
  Tensor m(xp, shape_of(g, xp)), l(xp, shape_of(g, xp));
  for (auto& v : m.data) v = alg.stat_init();
  std::array<std::vector<int64_t>, 2> rs{projected_strides(g, row_loop, x.dims),
                                         projected_strides(g, row_loop, xp)};
  walk<2>(shape_of(g, row_loop), rs, [&](const std::array<int64_t, 2>& o) {
    double xv = x.data[static_cast<size_t>(o[0])];
    double& mm = m.data[static_cast<size_t>(o[1])];
    double& ll = l.data[static_cast<size_t>(o[1])];
    double m_new = alg.stat(mm, xv);
    ll = alg.oplus(alg.otimes(ll, alg.hom(alg.shift(mm, m_new))), alg.hom(alg.shift(xv, m_new)));
    mm = m_new;
  });
  if (!w) {
    // Output dims are xp, possibly reordered.
    std::array<std::vector<int64_t>, 2> os{projected_strides(g, out.dims, out.dims),
                                           projected_strides(g, out.dims, xp)};
    walk<2>(shape_of(g, out.dims), os, [&](const std::array<int64_t, 2>& o) {
      out.data[static_cast<size_t>(o[0])] = l.data[static_cast<size_t>(o[1])];
    });
    return;
  }
  std::vector<std::string> loop = out.dims;
  loop.insert(loop.end(), R.begin(), R.end());
  Tensor mo(out.dims, out.shape);
  for (auto& v : mo.data) v = alg.stat_init();
  std::array<std::vector<int64_t>, 4> st{
      projected_strides(g, loop, out.dims), projected_strides(g, loop, x.dims),
      projected_strides(g, loop, w->dims), projected_strides(g, loop, out.dims)};
  walk<4>(shape_of(g, loop), st, [&](const std::array<int64_t, 4>& o) {
    double xv = x.data[static_cast<size_t>(o[1])];
    double wv = w->data[static_cast<size_t>(o[2])];
    double& acc = out.data[static_cast<size_t>(o[0])];
    double& mm = mo.data[static_cast<size_t>(o[3])];
    double m_new = alg.stat(mm, xv);
    acc = alg.oplus(alg.otimes(acc, alg.hom(alg.shift(mm, m_new))),
                    alg.otimes(alg.hom(alg.shift(xv, m_new)), wv));
    mm = m_new;
  });
  if (n.normalize) {
    std::array<std::vector<int64_t>, 2> ns{projected_strides(g, out.dims, out.dims),
                                           projected_strides(g, out.dims, xp)};
    walk<2>(shape_of(g, out.dims), ns, [&](const std::array<int64_t, 2>& o) {
      out.data[static_cast<size_t>(o[0])] /= l.data[static_cast<size_t>(o[1])];
    });
  }
}

inline Tensor eval_node(const TensorGraph& g, const OpNode& n,
                        const std::vector<const Tensor*>& in) {
  Tensor out = make_tensor(g, n);
  out.dtype = DType::F64;
  switch (n.kind) {
    case OpKind::Input:
      throw Error("eval_node called on input '" + n.name + "'");
    case OpKind::Output:
      out.data = in[0]->data;
      break;
    case OpKind::Pointwise: {
      std::vector<std::span<const double>> args;
      for (const Tensor* t : in) args.emplace_back(t->data);
      if (apply_expr(n.expr, args, out.data).div_by_zero)
        throw Error("division by zero in node '" + n.name + "'");
      break;
    }
    case OpKind::Broadcast: {
      std::array<std::vector<int64_t>, 2> st{projected_strides(g, n.dims, n.dims),
                                             projected_strides(g, n.dims, in[0]->dims)};
      walk<2>(out.shape, st, [&](const std::array<int64_t, 2>& o) {
        out.data[static_cast<size_t>(o[0])] = in[0]->data[static_cast<size_t>(o[1])];
      });
      break;
    }
    case OpKind::Reduce: {
      for (auto& v : out.data) v = n.init;
      const auto& x = *in[0];
      std::array<std::vector<int64_t>, 2> st{projected_strides(g, x.dims, x.dims),
                                             projected_strides(g, x.dims, n.dims)};
      if (n.combiner == Combiner::Sum)
        walk<2>(x.shape, st, [&](const std::array<int64_t, 2>& o) {
          out.data[static_cast<size_t>(o[1])] += x.data[static_cast<size_t>(o[0])];
        });
      else
        walk<2>(x.shape, st, [&](const std::array<int64_t, 2>& o) {
          double& r = out.data[static_cast<size_t>(o[1])];
          r = std::max(r, x.data[static_cast<size_t>(o[0])]);
        });
      break;
    }
    case OpKind::Contract: {
      std::vector<std::string> loop = n.dims;
      loop.insert(loop.end(), n.reduce_dims.begin(), n.reduce_dims.end());
      std::array<std::vector<int64_t>, 3> st{projected_strides(g, loop, n.dims),
                                             projected_strides(g, loop, in[0]->dims),
                                             projected_strides(g, loop, in[1]->dims)};
      const double* a = in[0]->data.data();
      const double* b = in[1]->data.data();
      double* c = out.data.data();
      if (n.reduce_dims.empty()) {
        walk<3>(shape_of(g, loop), st, [&](const std::array<int64_t, 3>& o) {
          c[o[0]] += a[o[1]] * b[o[2]];
        });
        break;
      }
      // Innermost loop is a reduced dim: accumulate it in a register.
      auto shape = shape_of(g, loop);
      const int64_t len = shape.back();
      std::array<int64_t, 3> in{st[0].back(), st[1].back(), st[2].back()};
      shape.pop_back();
      for (auto& s : st) s.pop_back();
      walk<3>(shape, st, [&](const std::array<int64_t, 3>& o) {
        double sum = 0.0;
        for (int64_t i = 0; i < len; ++i) sum += a[o[1] + i * in[1]] * b[o[2] + i * in[2]];
        c[o[0]] += sum;
      });
      break;
    }
    case OpKind::OnlineReduce: {
      if (n.algebra != SoftmaxAlgebra::kName)
        throw Error("node '" + n.name + "': algebra '" + n.algebra + "' is not executable");
      online_reduce(g, n, *in[0], in.size() > 1 ? in[1] : nullptr, out, SoftmaxAlgebra{});
      break;
    }
  }
  return out;
}

inline void check_binding(const TensorGraph& g, const OpNode& n, const Bindings& b) {
  auto it = b.find(n.name);
  if (it == b.end()) throw Error("missing binding for input '" + n.name + "'");
  const Tensor& t = it->second;
  auto expect = shape_of(g, n.dims);
  if (t.shape != expect || static_cast<int64_t>(t.data.size()) != t.numel())
    throw Error("extent mismatch for input '" + n.name + "'");
}

}  // namespace naive

struct NaiveResult {
  std::map<std::string, Tensor> outputs;  // by output node name
  std::vector<std::optional<Tensor>> values;  // every node, when requested
};

/// Ground-truth evaluation. Outputs are rounded to the graph dtype; every
/// intermediate stays in F64.
inline NaiveResult eval_naive_full(const TensorGraph& g, const Bindings& bindings,
                                   bool keep_all = false) {
  require_valid(g);
  auto order = *topo_order(g);
  const auto users = g.consumers();
  std::vector<int> remaining(g.size(), 0);
  for (size_t i = 0; i < g.size(); ++i) remaining[i] = static_cast<int>(users[i].size());

  std::vector<std::optional<Tensor>> val(g.size());
  NaiveResult res;
  for (NodeId id : order) {
    const OpNode& n = g.node(id);
    if (n.kind == OpKind::Input) {
      naive::check_binding(g, n, bindings);
      Tensor t = bindings.at(n.name);
      for (auto& v : t.data) v = store_as(g.dtype, v);
      val[static_cast<size_t>(id)] = std::move(t);
    } else {
      std::vector<const Tensor*> in;
      for (NodeId i : n.inputs) in.push_back(&*val[static_cast<size_t>(i)]);
      val[static_cast<size_t>(id)] = naive::eval_node(g, n, in);
    }
    if (n.kind == OpKind::Output) {
      Tensor t = *val[static_cast<size_t>(id)];
      t.dtype = g.dtype;
      for (auto& v : t.data) v = store_as(g.dtype, v);
      res.outputs[n.name] = std::move(t);
    }
    if (!keep_all) {
      std::set<NodeId> seen;
      for (NodeId i : n.inputs) {
        if (!seen.insert(i).second) continue;
        if (--remaining[static_cast<size_t>(i)] == 0) val[static_cast<size_t>(i)].reset();
      }
    }
  }
  if (keep_all) res.values = std::move(val);
  return res;
}

inline std::map<std::string, Tensor> eval_naive(const TensorGraph& g, const Bindings& bindings) {
  return eval_naive_full(g, bindings).outputs;
}

}  // namespace tilefuse
