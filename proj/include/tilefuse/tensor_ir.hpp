#pragma once

// Loop-level tensor IR. Every dimension is a named axis with a graph-wide
// extent; whether it is parallel or reduction is decided per operation.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tilefuse/common.hpp"

namespace tilefuse {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

enum class DimKind { Parallel, Reduction };

struct Dim {
  std::string name;
  int64_t extent = 1;
  DimKind kind = DimKind::Parallel;

  friend bool operator==(const Dim&, const Dim&) = default;
};

// ---------------------------------------------------------------------------
// Pointwise expressions

enum class ExprOp { Arg, Const, Add, Sub, Mul, Div, Neg, Exp, Max2, Min2, Where };

struct Expr {
  ExprOp op = ExprOp::Arg;
  int arg = 0;         // Arg: index into the node's inputs
  double value = 0.0;  // Const
  std::vector<Expr> kids;

  friend bool operator==(const Expr&, const Expr&) = default;
};

inline int expr_arity(ExprOp op) {
  switch (op) {
    case ExprOp::Arg:
    case ExprOp::Const:
      return 0;
    case ExprOp::Neg:
    case ExprOp::Exp:
      return 1;
    case ExprOp::Where:
      return 3;
    default:
      return 2;
  }
}

inline const char* expr_op_name(ExprOp op) {
  switch (op) {
    case ExprOp::Arg: return "arg";
    case ExprOp::Const: return "const";
    case ExprOp::Add: return "add";
    case ExprOp::Sub: return "sub";
    case ExprOp::Mul: return "mul";
    case ExprOp::Div: return "div";
    case ExprOp::Neg: return "neg";
    case ExprOp::Exp: return "exp";
    case ExprOp::Max2: return "max2";
    case ExprOp::Min2: return "min2";
    case ExprOp::Where: return "where";
  }
  return "?";
}

inline std::optional<ExprOp> expr_op_from_name(std::string_view s) {
  for (ExprOp op : {ExprOp::Add, ExprOp::Sub, ExprOp::Mul, ExprOp::Div, ExprOp::Neg, ExprOp::Exp,
                    ExprOp::Max2, ExprOp::Min2, ExprOp::Where}) {
    if (s == expr_op_name(op)) return op;
  }
  return std::nullopt;
}

namespace ex {
inline Expr arg(int i) { return Expr{ExprOp::Arg, i, 0.0, {}}; }
inline Expr constant(double v) { return Expr{ExprOp::Const, 0, v, {}}; }
inline Expr node(ExprOp op, std::vector<Expr> kids) { return Expr{op, 0, 0.0, std::move(kids)}; }
inline Expr add(Expr a, Expr b) { return node(ExprOp::Add, {std::move(a), std::move(b)}); }
inline Expr sub(Expr a, Expr b) { return node(ExprOp::Sub, {std::move(a), std::move(b)}); }
inline Expr mul(Expr a, Expr b) { return node(ExprOp::Mul, {std::move(a), std::move(b)}); }
inline Expr div(Expr a, Expr b) { return node(ExprOp::Div, {std::move(a), std::move(b)}); }
inline Expr neg(Expr a) { return node(ExprOp::Neg, {std::move(a)}); }
inline Expr exp(Expr a) { return node(ExprOp::Exp, {std::move(a)}); }
inline Expr max2(Expr a, Expr b) { return node(ExprOp::Max2, {std::move(a), std::move(b)}); }
inline Expr min2(Expr a, Expr b) { return node(ExprOp::Min2, {std::move(a), std::move(b)}); }
inline Expr where(Expr c, Expr a, Expr b) {
  return node(ExprOp::Where, {std::move(c), std::move(a), std::move(b)});
}
inline Expr scale(Expr a, double c) { return mul(std::move(a), constant(c)); }
// tanh(y) = 1 - 2 / (exp(2y) + 1); saturates cleanly for large |y|.
inline Expr tanh(Expr y) {
  return sub(constant(1.0),
             div(constant(2.0), add(exp(mul(constant(2.0), std::move(y))), constant(1.0))));
}
inline Expr sigmoid(Expr y) {
  return div(constant(1.0), add(constant(1.0), exp(neg(std::move(y)))));
}
}  // namespace ex

// ---------------------------------------------------------------------------
// Input initializers (how bindings are synthesized for a given seed)

enum class InitKind {
  Random,            // uniform [-1, 1]
  Zeros,
  Constant,          // param
  CausalMask,        // 1 where kv > q
  SlidingWindowMask, // 1 unless q >= kv && q - kv <= param
  PrefixLMMask,      // 1 unless kv < param || kv <= q
  DocumentMask,      // 1 unless doc(q) == doc(kv), param documents
  AlibiSlopes,       // geometric slopes over the flattened head index
  RelativePosition,  // kv - q
};

struct InputInit {
  InitKind kind = InitKind::Random;
  double param = 0.0;

  friend bool operator==(const InputInit&, const InputInit&) = default;
};

inline const char* init_kind_name(InitKind k) {
  switch (k) {
    case InitKind::Random: return "random";
    case InitKind::Zeros: return "zeros";
    case InitKind::Constant: return "constant";
    case InitKind::CausalMask: return "causal";
    case InitKind::SlidingWindowMask: return "sliding_window";
    case InitKind::PrefixLMMask: return "prefix_lm";
    case InitKind::DocumentMask: return "document";
    case InitKind::AlibiSlopes: return "alibi_slopes";
    case InitKind::RelativePosition: return "relative_position";
  }
  return "?";
}

inline std::optional<InitKind> init_kind_from_name(std::string_view s) {
  for (InitKind k : {InitKind::Random, InitKind::Zeros, InitKind::Constant, InitKind::CausalMask,
                     InitKind::SlidingWindowMask, InitKind::PrefixLMMask, InitKind::DocumentMask,
                     InitKind::AlibiSlopes, InitKind::RelativePosition}) {
    if (s == init_kind_name(k)) return k;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Nodes and graphs

enum class OpKind { Input, Pointwise, Reduce, Contract, Broadcast, OnlineReduce, Output };
enum class Combiner { Sum, Max };

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Pointwise: return "pointwise";
    case OpKind::Reduce: return "reduce";
    case OpKind::Contract: return "contract";
    case OpKind::Broadcast: return "broadcast";
    case OpKind::OnlineReduce: return "online_reduce";
    case OpKind::Output: return "output";
  }
  return "?";
}

inline double combiner_identity(Combiner c) { return c == Combiner::Sum ? 0.0 : kNegInf; }

struct OpNode {
  NodeId id = kNoNode;
  std::string name;
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  std::vector<std::string> dims;  // output dims, in layout order

  Expr expr;                              // Pointwise
  Combiner combiner = Combiner::Sum;      // Reduce
  double init = 0.0;                      // Reduce
  std::vector<std::string> reduce_dims;   // Reduce / Contract / OnlineReduce
  std::string algebra;                    // OnlineReduce
  bool normalize = false;                 // OnlineReduce: divide by the running denominator
  InputInit input_init;                   // Input

  bool is_reduction() const {
    return kind == OpKind::Reduce || kind == OpKind::Contract || kind == OpKind::OnlineReduce;
  }
  friend bool operator==(const OpNode&, const OpNode&) = default;
};

/// Tensor reference as seen by consumers: the producing node and its layout.
struct TensorRef {
  NodeId id = kNoNode;
  std::vector<std::string> dims;
  DType dtype = DType::F64;
};

struct TensorGraph {
  DType dtype = DType::F64;
  std::map<std::string, int64_t> extents;
  std::vector<OpNode> nodes;  // node.id == index
  std::vector<NodeId> outputs;

  const OpNode& node(NodeId id) const { return nodes.at(static_cast<size_t>(id)); }
  OpNode& node(NodeId id) { return nodes.at(static_cast<size_t>(id)); }
  size_t size() const { return nodes.size(); }

  int64_t extent(const std::string& dim) const {
    auto it = extents.find(dim);
    if (it == extents.end()) throw Error("unknown dimension '" + dim + "'");
    return it->second;
  }

  int64_t numel(const OpNode& n) const {
    int64_t e = 1;
    for (const auto& d : n.dims) e *= extent(d);
    return e;
  }

  TensorRef ref(NodeId id) const { return TensorRef{id, node(id).dims, dtype}; }

  std::optional<NodeId> find(std::string_view name) const {
    for (const auto& n : nodes)
      if (n.name == name) return n.id;
    return std::nullopt;
  }

  /// consumers[i] = nodes that read node i, ascending, with duplicates removed.
  std::vector<std::vector<NodeId>> consumers() const {
    std::vector<std::vector<NodeId>> out(nodes.size());
    for (const auto& n : nodes)
      for (NodeId in : n.inputs)
        if (in >= 0 && static_cast<size_t>(in) < nodes.size()) {
          auto& c = out[static_cast<size_t>(in)];
          if (c.empty() || c.back() != n.id) c.push_back(n.id);
        }
    return out;
  }

  friend bool operator==(const TensorGraph&, const TensorGraph&) = default;

  size_t count_kind(OpKind k) const {
    return static_cast<size_t>(
        std::count_if(nodes.begin(), nodes.end(), [k](const OpNode& n) { return n.kind == k; }));
  }
};

inline std::vector<std::string> dims_minus(const std::vector<std::string>& dims,
                                           const std::vector<std::string>& drop) {
  std::vector<std::string> out;
  for (const auto& d : dims)
    if (std::find(drop.begin(), drop.end(), d) == drop.end()) out.push_back(d);
  return out;
}

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

inline bool same_set(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::set<std::string>(a.begin(), a.end()) == std::set<std::string>(b.begin(), b.end()) &&
         a.size() == b.size();
}

/// Convenience construction. Derives output dims; performs no validation.
class GraphBuilder {
 public:
  explicit GraphBuilder(DType dtype = DType::F64) { g_.dtype = dtype; }

  void set_dtype(DType t) { g_.dtype = t; }

  GraphBuilder& dim(const std::string& name, int64_t extent) {
    g_.extents[name] = extent;
    return *this;
  }

  NodeId input(std::string name, std::vector<std::string> dims, InputInit init = {}) {
    OpNode n;
    n.kind = OpKind::Input;
    n.name = std::move(name);
    n.dims = std::move(dims);
    n.input_init = init;
    return add(std::move(n));
  }

  NodeId pointwise(std::string name, std::vector<NodeId> inputs, Expr expr) {
    OpNode n;
    n.kind = OpKind::Pointwise;
    n.name = std::move(name);
    if (!inputs.empty() && valid(inputs.front())) n.dims = g_.node(inputs.front()).dims;
    n.inputs = std::move(inputs);
    n.expr = std::move(expr);
    return add(std::move(n));
  }

  NodeId broadcast(std::string name, NodeId x, std::vector<std::string> dims) {
    OpNode n;
    n.kind = OpKind::Broadcast;
    n.name = std::move(name);
    n.inputs = {x};
    n.dims = std::move(dims);
    return add(std::move(n));
  }

  NodeId reduce(std::string name, Combiner c, NodeId x, std::vector<std::string> over) {
    OpNode n;
    n.kind = OpKind::Reduce;
    n.name = std::move(name);
    n.inputs = {x};
    n.combiner = c;
    n.init = combiner_identity(c);
    if (valid(x)) n.dims = dims_minus(g_.node(x).dims, over);
    n.reduce_dims = std::move(over);
    return add(std::move(n));
  }

  /// Output dims default to A's free dims followed by B's dims not already present.
  NodeId contract(std::string name, NodeId a, NodeId b, std::vector<std::string> over,
                  std::vector<std::string> dims = {}) {
    OpNode n;
    n.kind = OpKind::Contract;
    n.name = std::move(name);
    n.inputs = {a, b};
    if (dims.empty() && valid(a) && valid(b)) {
      dims = dims_minus(g_.node(a).dims, over);
      for (const auto& d : dims_minus(g_.node(b).dims, over))
        if (!contains(dims, d)) dims.push_back(d);
    }
    n.dims = std::move(dims);
    n.reduce_dims = std::move(over);
    return add(std::move(n));
  }

  NodeId online_reduce(std::string name, NodeId x, std::optional<NodeId> w,
                       std::vector<std::string> over, bool normalize,
                       std::vector<std::string> dims = {}, std::string algebra = "softmax") {
    OpNode n;
    n.kind = OpKind::OnlineReduce;
    n.name = std::move(name);
    n.inputs = {x};
    if (w) n.inputs.push_back(*w);
    if (dims.empty() && valid(x)) {
      dims = dims_minus(g_.node(x).dims, over);
      if (w && valid(*w))
        for (const auto& d : dims_minus(g_.node(*w).dims, over))
          if (!contains(dims, d)) dims.push_back(d);
    }
    n.dims = std::move(dims);
    n.reduce_dims = std::move(over);
    n.normalize = normalize;
    n.algebra = std::move(algebra);
    return add(std::move(n));
  }

  NodeId output(std::string name, NodeId x) {
    OpNode n;
    n.kind = OpKind::Output;
    n.name = std::move(name);
    n.inputs = {x};
    if (valid(x)) n.dims = g_.node(x).dims;
    NodeId id = add(std::move(n));
    g_.outputs.push_back(id);
    return id;
  }

  const TensorGraph& graph() const { return g_; }
  TensorGraph build() { return std::move(g_); }

 private:
  bool valid(NodeId id) const { return id >= 0 && static_cast<size_t>(id) < g_.nodes.size(); }

  NodeId add(OpNode n) {
    n.id = static_cast<NodeId>(g_.nodes.size());
    g_.nodes.push_back(std::move(n));
    return g_.nodes.back().id;
  }

  TensorGraph g_;
};

// ---------------------------------------------------------------------------
// Validation

struct Diagnostic {
  NodeId node = kNoNode;
  std::string message;
};

namespace detail {

inline void check_expr(const Expr& e, size_t n_inputs, std::vector<std::string>& problems) {
  if (e.op == ExprOp::Arg && (e.arg < 0 || static_cast<size_t>(e.arg) >= n_inputs))
    problems.push_back("expression references missing input $" + std::to_string(e.arg));
  if (static_cast<int>(e.kids.size()) != expr_arity(e.op))
    problems.push_back(std::string("operator '") + expr_op_name(e.op) + "' has wrong arity");
  for (const auto& k : e.kids) check_expr(k, n_inputs, problems);
}

}  // namespace detail

/// Topological order (Kahn, smallest id first). nullopt when the graph has a cycle
/// or dangling references.
inline std::optional<std::vector<NodeId>> topo_order(const TensorGraph& g) {
  const size_t n = g.nodes.size();
  std::vector<int> indeg(n, 0);
  std::vector<std::vector<NodeId>> users(n);
  for (const auto& node : g.nodes) {
    std::set<NodeId> seen;
    for (NodeId in : node.inputs) {
      if (in < 0 || static_cast<size_t>(in) >= n) return std::nullopt;
      if (!seen.insert(in).second) continue;
      ++indeg[static_cast<size_t>(node.id)];
      users[static_cast<size_t>(in)].push_back(node.id);
    }
  }
  std::set<NodeId> ready;
  for (size_t i = 0; i < n; ++i)
    if (indeg[i] == 0) ready.insert(static_cast<NodeId>(i));
  std::vector<NodeId> order;
  while (!ready.empty()) {
    NodeId id = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(id);
    for (NodeId u : users[static_cast<size_t>(id)])
      if (--indeg[static_cast<size_t>(u)] == 0) ready.insert(u);
  }
  if (order.size() != n) return std::nullopt;
  return order;
}

inline std::vector<Diagnostic> validate(const TensorGraph& g) {
  std::vector<Diagnostic> diags;
  auto diag = [&](NodeId id, std::string msg) { diags.push_back({id, std::move(msg)}); };
  const auto n = static_cast<NodeId>(g.nodes.size());

  for (NodeId i = 0; i < n; ++i) {
    const OpNode& node = g.nodes[static_cast<size_t>(i)];
    if (node.id != i) diag(i, "node id does not match its position");

    bool inputs_ok = true;
    for (NodeId in : node.inputs) {
      if (in < 0 || in >= n || in == i) {
        diag(i, "input " + std::to_string(in) + " does not exist");
        inputs_ok = false;
      }
    }

    std::set<std::string> distinct(node.dims.begin(), node.dims.end());
    if (distinct.size() != node.dims.size()) diag(i, "duplicate dimension names");
    for (const auto& d : node.dims) {
      auto it = g.extents.find(d);
      if (it == g.extents.end())
        diag(i, "dimension '" + d + "' has no extent");
      else if (it->second < 1)
        diag(i, "dimension '" + d + "' has extent < 1");
    }
    if (!inputs_ok) continue;

    auto in_dims = [&](size_t k) -> const std::vector<std::string>& {
      return g.nodes[static_cast<size_t>(node.inputs[k])].dims;
    };

    switch (node.kind) {
      case OpKind::Input:
        if (!node.inputs.empty()) diag(i, "input node must not have inputs");
        break;
      case OpKind::Pointwise: {
        for (size_t k = 0; k < node.inputs.size(); ++k)
          if (in_dims(k) != node.dims)
            diag(i, "pointwise operand " + std::to_string(k) +
                        " dims differ from output dims (insert an explicit broadcast)");
        std::vector<std::string> problems;
        detail::check_expr(node.expr, node.inputs.size(), problems);
        for (auto& p : problems) diag(i, p);
        break;
      }
      case OpKind::Broadcast:
        if (node.inputs.size() != 1) {
          diag(i, "broadcast takes one input");
          break;
        }
        for (const auto& d : in_dims(0))
          if (!contains(node.dims, d)) diag(i, "broadcast drops dimension '" + d + "'");
        break;
      case OpKind::Reduce:
        if (node.inputs.size() != 1) {
          diag(i, "reduce takes one input");
          break;
        }
        if (node.reduce_dims.empty()) diag(i, "reduce without reduction dims");
        for (const auto& d : node.reduce_dims)
          if (!contains(in_dims(0), d)) diag(i, "reduce dim '" + d + "' absent from input");
        for (const auto& d : node.reduce_dims)
          if (contains(node.dims, d)) diag(i, "reduce dim '" + d + "' present in output");
        if (!same_set(node.dims, dims_minus(in_dims(0), node.reduce_dims)))
          diag(i, "reduce output dims must be the input dims minus the reduced dims");
        break;
      case OpKind::Contract: {
        if (node.inputs.size() != 2) {
          diag(i, "contract takes two inputs");
          break;
        }
        for (const auto& d : node.reduce_dims)
          if (!contains(in_dims(0), d) || !contains(in_dims(1), d))
            diag(i, "contraction dim not shared: '" + d + "'");
        std::vector<std::string> expect = dims_minus(in_dims(0), node.reduce_dims);
        for (const auto& d : dims_minus(in_dims(1), node.reduce_dims))
          if (!contains(expect, d)) expect.push_back(d);
        if (!same_set(node.dims, expect))
          diag(i, "contract output dims must be the union of operand dims minus reduced dims");
        break;
      }
      case OpKind::OnlineReduce: {
        if (node.inputs.empty() || node.inputs.size() > 2) {
          diag(i, "online_reduce takes one or two inputs");
          break;
        }
        std::vector<std::string> expect;
        for (size_t k = 0; k < node.inputs.size(); ++k) {
          for (const auto& d : node.reduce_dims)
            if (!contains(in_dims(k), d)) diag(i, "online reduce dim '" + d + "' absent from input");
          for (const auto& d : dims_minus(in_dims(k), node.reduce_dims))
            if (!contains(expect, d)) expect.push_back(d);
        }
        if (!same_set(node.dims, expect))
          diag(i, "online_reduce output dims must be the operand dims minus reduced dims");
        if (node.algebra.empty()) diag(i, "online_reduce without algebra");
        break;
      }
      case OpKind::Output:
        if (node.inputs.size() != 1) {
          diag(i, "output takes one input");
          break;
        }
        if (in_dims(0) != node.dims) diag(i, "output dims differ from its input");
        break;
    }
  }

  if (!topo_order(g)) diag(kNoNode, "cycle");
  if (g.outputs.empty()) diag(kNoNode, "graph has no outputs");
  for (NodeId o : g.outputs)
    if (o < 0 || o >= n || g.nodes[static_cast<size_t>(o)].kind != OpKind::Output)
      diag(o, "graph output is not an output node");
  return diags;
}

inline void require_valid(const TensorGraph& g) {
  auto d = validate(g);
  if (!d.empty()) {
    std::string msg = "invalid graph:";
    for (const auto& x : d)
      msg += " [node " + std::to_string(x.node) + ": " + x.message + "]";
    throw Error(msg);
  }
}

// ---------------------------------------------------------------------------
// Graph rewriting helpers

/// Drops nodes that no output depends on and renumbers densely, preserving
/// relative order (and therefore topological order).
inline TensorGraph compact(const TensorGraph& g) {
  std::vector<bool> live(g.nodes.size(), false);
  std::vector<NodeId> stack(g.outputs.begin(), g.outputs.end());
  while (!stack.empty()) {
    NodeId id = stack.back();
    stack.pop_back();
    if (live[static_cast<size_t>(id)]) continue;
    live[static_cast<size_t>(id)] = true;
    for (NodeId in : g.node(id).inputs) stack.push_back(in);
  }
  // Inputs are part of the program signature even when unused.
  for (const auto& n : g.nodes)
    if (n.kind == OpKind::Input) live[static_cast<size_t>(n.id)] = true;

  std::vector<NodeId> remap(g.nodes.size(), kNoNode);
  TensorGraph out;
  out.dtype = g.dtype;
  out.extents = g.extents;
  for (const auto& n : g.nodes) {
    if (!live[static_cast<size_t>(n.id)]) continue;
    OpNode c = n;
    c.id = static_cast<NodeId>(out.nodes.size());
    for (auto& in : c.inputs) in = remap[static_cast<size_t>(in)];
    remap[static_cast<size_t>(n.id)] = c.id;
    out.nodes.push_back(std::move(c));
  }
  for (NodeId o : g.outputs) out.outputs.push_back(remap[static_cast<size_t>(o)]);
  return out;
}

/// Rewrites a Contract as broadcast(A), broadcast(B), mul, reduce_sum. The
/// reduce node keeps the contract's name so downstream references are unchanged.
inline TensorGraph lower_contract(const TensorGraph& g, NodeId contract_id) {
  const OpNode& c = g.node(contract_id);
  if (c.kind != OpKind::Contract) throw Error("lower_contract: node '" + c.name + "' is not a contract");
  if (c.inputs.size() != 2) throw Error("lower_contract: contract needs two operands");
  const OpNode& a = g.node(c.inputs[0]);
  const OpNode& b = g.node(c.inputs[1]);
  for (const auto& d : c.reduce_dims)
    if (!contains(a.dims, d) || !contains(b.dims, d))
      throw Error("contraction dim not shared: '" + d + "'");

  std::vector<std::string> full = c.dims;
  for (const auto& d : c.reduce_dims) full.push_back(d);

  TensorGraph out;
  out.dtype = g.dtype;
  out.extents = g.extents;
  std::vector<NodeId> remap(g.nodes.size(), kNoNode);
  auto push = [&](OpNode n) {
    n.id = static_cast<NodeId>(out.nodes.size());
    out.nodes.push_back(std::move(n));
    return out.nodes.back().id;
  };
  for (const auto& n : g.nodes) {
    if (n.id != contract_id) {
      OpNode copy = n;
      for (auto& in : copy.inputs) in = remap[static_cast<size_t>(in)];
      remap[static_cast<size_t>(n.id)] = push(std::move(copy));
      continue;
    }
    OpNode ba;
    ba.kind = OpKind::Broadcast;
    ba.name = c.name + ".lhs";
    ba.inputs = {remap[static_cast<size_t>(c.inputs[0])]};
    ba.dims = full;
    NodeId ia = push(ba);
    OpNode bb = ba;
    bb.name = c.name + ".rhs";
    bb.inputs = {remap[static_cast<size_t>(c.inputs[1])]};
    NodeId ib = push(bb);
    OpNode mul;
    mul.kind = OpKind::Pointwise;
    mul.name = c.name + ".mul";
    mul.inputs = {ia, ib};
    mul.dims = full;
    mul.expr = ex::mul(ex::arg(0), ex::arg(1));
    NodeId im = push(mul);
    OpNode red;
    red.kind = OpKind::Reduce;
    red.name = c.name;
    red.inputs = {im};
    red.combiner = Combiner::Sum;
    red.init = 0.0;
    red.reduce_dims = c.reduce_dims;
    red.dims = c.dims;
    remap[static_cast<size_t>(n.id)] = push(red);
  }
  for (NodeId o : g.outputs) out.outputs.push_back(remap[static_cast<size_t>(o)]);
  return out;
}

inline TensorGraph lower_all_contracts(TensorGraph g) {
  for (;;) {
    auto it = std::find_if(g.nodes.begin(), g.nodes.end(),
                           [](const OpNode& n) { return n.kind == OpKind::Contract; });
    if (it == g.nodes.end()) return g;
    g = lower_contract(g, it->id);
  }
}

}  // namespace tilefuse
