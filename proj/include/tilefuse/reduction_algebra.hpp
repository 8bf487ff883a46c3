#pragma once

// Ring + homomorphism view of two-pass reductions, and the rewrite that turns
// a "reduce to a final statistic, then reduce E(x - statistic)" pair into a
// single online pass that rescales its accumulator whenever the running
// statistic moves.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tilefuse/common.hpp"
#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

/// exp / + / x over T, with max as the running statistic.
template <class T>
struct SoftmaxAlgebraT {
  using value_type = T;
  static constexpr const char* kName = "softmax";

  std::string name() const { return kName; }
  T oplus(T a, T b) const { return a + b; }
  T otimes(T a, T b) const { return a * b; }
  T oneg(T a) const { return -a; }
  T zero() const { return T(0); }
  T one() const { return T(1); }
  T hom(T a) const { return std::exp(a); }
  /// a (+) (-)b; equal infinities cancel to zero (fully masked rows).
  T shift(T a, T b) const {
    if (a == b && std::isinf(a)) return T(0);
    return a - b;
  }
  T stat(T m, T x) const { return std::max(m, x); }
  T stat_init() const { return -std::numeric_limits<T>::infinity(); }
};

using SoftmaxAlgebra = SoftmaxAlgebraT<double>;

/// Type-erased algebra. Carries, besides the operations, how the algebra shows
/// up in pointwise expressions so the graph matcher can recognize it.
struct RuntimeAlgebra {
  using value_type = double;

  std::string algebra_name;
  std::function<double(double, double)> oplus_fn;
  std::function<double(double, double)> otimes_fn;
  std::function<double(double)> oneg_fn;
  std::function<double(double)> hom_fn;
  double zero_value = 0.0;
  double one_value = 1.0;
  ExprOp shift_op = ExprOp::Sub;  // x (+) (-)m in expressions
  ExprOp hom_op = ExprOp::Exp;    // E in expressions
  Combiner stat_combiner = Combiner::Max;
  Combiner oplus_combiner = Combiner::Sum;
  bool commutative = true;  // required for tile-parallel reduction

  std::string name() const { return algebra_name; }
  double oplus(double a, double b) const { return oplus_fn(a, b); }
  double otimes(double a, double b) const { return otimes_fn(a, b); }
  double oneg(double a) const { return oneg_fn(a); }
  double zero() const { return zero_value; }
  double one() const { return one_value; }
  double hom(double a) const { return hom_fn(a); }
  double shift(double a, double b) const {
    if (a == b && std::isinf(a)) return zero_value;
    return oplus(a, oneg(b));
  }
  double stat(double m, double x) const { return std::max(m, x); }
  double stat_init() const { return kNegInf; }
};

inline RuntimeAlgebra softmax_algebra() {
  RuntimeAlgebra a;
  a.algebra_name = SoftmaxAlgebra::kName;
  a.oplus_fn = [](double x, double y) { return x + y; };
  a.otimes_fn = [](double x, double y) { return x * y; };
  a.oneg_fn = [](double x) { return -x; };
  a.hom_fn = [](double x) { return std::exp(x); };
  return a;
}

/// Named algebras. Only the softmax algebra is registered by default; tests
/// and tools may add synthetic rings.
class AlgebraRegistry {
 public:
  AlgebraRegistry() { add(softmax_algebra()); }

  void add(RuntimeAlgebra a) { algebras_[a.algebra_name] = std::move(a); }

  const RuntimeAlgebra* find(const std::string& name) const {
    auto it = algebras_.find(name);
    return it == algebras_.end() ? nullptr : &it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : algebras_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, RuntimeAlgebra> algebras_;
};

// ---------------------------------------------------------------------------
// Sampled axiom checking

struct AxiomCheck {
  std::string axiom;
  bool passed = true;
  double worst_residual = 0.0;

  friend bool operator==(const AxiomCheck&, const AxiomCheck&) = default;
};

struct AlgebraReport {
  std::string algebra;
  double tolerance = 0.0;
  std::vector<AxiomCheck> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const AxiomCheck& c) { return c.passed; });
  }
  const AxiomCheck* find(std::string_view axiom) const {
    for (const auto& c : checks)
      if (c.axiom == axiom) return &c;
    return nullptr;
  }

  friend bool operator==(const AlgebraReport&, const AlgebraReport&) = default;
};

namespace detail {

inline double scaled_residual(double lhs, double rhs, std::initializer_list<double> terms) {
  if (lhs == rhs) return 0.0;
  double scale = 1.0;
  for (double t : terms) scale = std::max(scale, std::abs(t));
  scale = std::max({scale, std::abs(lhs), std::abs(rhs)});
  double r = std::abs(lhs - rhs) / scale;
  return std::isnan(r) ? kPosInf : r;
}

}  // namespace detail

/// Checks every ring axiom and the homomorphism law on all pairs/triples drawn
/// from `samples`. Residuals are |lhs - rhs| scaled by the largest magnitude
/// involved (at least 1).
template <class Alg>
AlgebraReport check_algebra(const Alg& alg, std::span<const double> samples, double tol) {
  if (samples.empty()) throw Error("check_algebra: samples must be nonempty");
  AlgebraReport rep;
  rep.algebra = alg.name();
  rep.tolerance = tol;
  std::map<std::string, double> worst;
  auto note = [&](const std::string& axiom, double r) {
    auto& w = worst[axiom];
    w = std::max(w, r);
  };
  const double z = alg.zero(), o = alg.one();
  for (double a : samples) {
    note("oplus_identity", detail::scaled_residual(alg.oplus(a, z), a, {a}));
    note("oplus_identity", detail::scaled_residual(alg.oplus(z, a), a, {a}));
    note("oplus_inverse", detail::scaled_residual(alg.oplus(a, alg.oneg(a)), z, {a}));
    note("oplus_inverse", detail::scaled_residual(alg.oplus(alg.oneg(a), a), z, {a}));
    note("otimes_identity", detail::scaled_residual(alg.otimes(a, o), a, {a}));
    note("otimes_identity", detail::scaled_residual(alg.otimes(o, a), a, {a}));
    for (double b : samples) {
      double lhs = alg.hom(alg.oplus(a, b));
      double ea = alg.hom(a), eb = alg.hom(b);
      note("hom_law", detail::scaled_residual(lhs, alg.otimes(ea, eb), {ea, eb}));
      for (double c : samples) {
        double l1 = alg.oplus(alg.oplus(a, b), c), r1 = alg.oplus(a, alg.oplus(b, c));
        note("oplus_assoc", detail::scaled_residual(l1, r1, {a, b, c}));
        double l2 = alg.otimes(alg.otimes(a, b), c), r2 = alg.otimes(a, alg.otimes(b, c));
        note("otimes_assoc", detail::scaled_residual(l2, r2, {a, b, c, alg.otimes(a, b)}));
        double ac = alg.otimes(a, c), bc = alg.otimes(b, c);
        double l3 = alg.otimes(alg.oplus(a, b), c), r3 = alg.oplus(ac, bc);
        note("distributivity", detail::scaled_residual(l3, r3, {ac, bc}));
      }
    }
  }
  note("hom_zero", detail::scaled_residual(alg.hom(z), o, {}));
  for (const char* axiom : {"oplus_assoc", "oplus_identity", "oplus_inverse", "otimes_assoc",
                            "otimes_identity", "distributivity", "hom_law", "hom_zero"}) {
    double r = worst[axiom];
    rep.checks.push_back({axiom, r <= tol, r});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Sequential reductions

template <class T>
struct ReductionPair {
  T m{};  // final statistic (max for softmax)
  T d{};  // (+)_j E(x_j (-) m)
};

/// Running state of the single-pass reduction after `count` elements.
template <class T>
struct OnlineReductionState {
  T m{};
  T acc{};
  size_t count = 0;
};

/// Stable form: first pass computes the final statistic, second pass
/// accumulates E(x_j (-) m_N).
template <class Alg>
ReductionPair<typename Alg::value_type> run_stable(
    std::span<const typename Alg::value_type> x, const Alg& alg) {
  using T = typename Alg::value_type;
  if (x.empty()) throw Error("empty reduction");
  T m = alg.stat_init();
  for (T v : x) m = alg.stat(m, v);
  T d = alg.zero();
  for (T v : x) d = alg.oplus(d, alg.hom(alg.shift(v, m)));
  return {m, d};
}

/// One step of the online recurrence:
///   m_j  = stat(m_{j-1}, x_j)
///   do_j = do_{j-1} (x) E(m_{j-1} (-) m_j) (+) E(x_j (-) m_j)
template <class Alg>
void online_step(OnlineReductionState<typename Alg::value_type>& s,
                 typename Alg::value_type x, const Alg& alg) {
  auto m_new = alg.stat(s.m, x);
  s.acc = alg.oplus(alg.otimes(s.acc, alg.hom(alg.shift(s.m, m_new))), alg.hom(alg.shift(x, m_new)));
  s.m = m_new;
  ++s.count;
}

template <class Alg>
OnlineReductionState<typename Alg::value_type> online_init(const Alg& alg) {
  return {alg.stat_init(), alg.zero(), 0};
}

template <class Alg>
ReductionPair<typename Alg::value_type> run_online(
    std::span<const typename Alg::value_type> x, const Alg& alg) {
  if (x.empty()) throw Error("empty reduction");
  auto s = online_init(alg);
  for (auto v : x) online_step(s, v, alg);
  return {s.m, s.acc};
}

/// States after each prefix j = 1..N.
template <class Alg>
std::vector<OnlineReductionState<typename Alg::value_type>> online_prefix(
    std::span<const typename Alg::value_type> x, const Alg& alg) {
  if (x.empty()) throw Error("empty reduction");
  std::vector<OnlineReductionState<typename Alg::value_type>> out;
  out.reserve(x.size());
  auto s = online_init(alg);
  for (auto v : x) {
    online_step(s, v, alg);
    out.push_back(s);
  }
  return out;
}

/// Closed form of the online accumulator after j elements, given the
/// statistic m_j: ((+)_{i<=j} E(x_i)) (x) E((-) m_j).
template <class Alg>
typename Alg::value_type closed_form_accumulator(std::span<const typename Alg::value_type> x,
                                                 size_t j, typename Alg::value_type m_j,
                                                 const Alg& alg) {
  auto sum = alg.zero();
  for (size_t i = 0; i < j; ++i) sum = alg.oplus(sum, alg.hom(x[i]));
  return alg.otimes(sum, alg.hom(alg.oneg(m_j)));
}

// ---------------------------------------------------------------------------
// Graph-level two-pass pattern

/// How the pass-2 term E(x (-) m_final) is consumed.
struct TwoPassUse {
  enum class Kind {
    Denominator,         // reduce_sum(E(...))
    Weighted,            // contract(E(...), w)
    NormalizedWeighted,  // contract(E(...) / broadcast(reduce_sum(E(...))), w)
  };
  Kind kind = Kind::Denominator;
  NodeId reduction = kNoNode;  // node replaced by the online reduce
  NodeId weight = kNoNode;
  NodeId normalizer = kNoNode;  // the division node (NormalizedWeighted)
};

struct TwoPassReductionPattern {
  NodeId source = kNoNode;         // x
  NodeId max_node = kNoNode;       // pass 1: reduce_max(x)
  NodeId max_broadcast = kNoNode;  // m_final broadcast back over the reduced dims
  NodeId term = kNoNode;           // pointwise E(x (-) m_final)
  std::vector<std::string> reduce_dims;
  std::vector<TwoPassUse> uses;
};

struct PatternMatch {
  std::optional<TwoPassReductionPattern> pattern;
  std::optional<Diagnostic> skipped;  // set when a near-match was declined
};

namespace detail {

inline bool depends_on(const TensorGraph& g, NodeId node, NodeId target) {
  std::vector<NodeId> stack{node};
  std::set<NodeId> seen;
  while (!stack.empty()) {
    NodeId id = stack.back();
    stack.pop_back();
    if (id == target) return true;
    if (!seen.insert(id).second) continue;
    for (NodeId in : g.node(id).inputs) stack.push_back(in);
  }
  return false;
}

inline std::optional<NodeId> other_operand(const OpNode& contract, NodeId operand) {
  if (contract.inputs.size() != 2) return std::nullopt;
  if (contract.inputs[0] == operand && contract.inputs[1] != operand) return contract.inputs[1];
  if (contract.inputs[1] == operand && contract.inputs[0] != operand) return contract.inputs[0];
  return std::nullopt;
}

}  // namespace detail

/// Tries to match the two-pass pattern rooted at a max-reduce node.
inline PatternMatch match_two_pass(const TensorGraph& g, NodeId max_id, const RuntimeAlgebra& alg) {
  PatternMatch res;
  const OpNode& mx = g.node(max_id);
  if (mx.kind != OpKind::Reduce || mx.combiner != alg.stat_combiner) return res;
  const auto users = g.consumers();
  auto skip = [&](NodeId id, std::string msg) {
    res.skipped = Diagnostic{id, std::move(msg)};
    return res;
  };

  const NodeId x = mx.inputs.at(0);
  const auto& mx_users = users[static_cast<size_t>(max_id)];
  if (mx_users.size() != 1 || g.node(mx_users[0]).kind != OpKind::Broadcast) return res;
  const NodeId mb = mx_users[0];
  if (g.node(mb).dims != g.node(x).dims) return res;

  const auto& mb_users = users[static_cast<size_t>(mb)];
  if (mb_users.size() != 1 || g.node(mb_users[0]).kind != OpKind::Pointwise)
    return skip(max_id, "final statistic has consumers outside the two-pass pattern");
  const NodeId term = mb_users[0];
  const OpNode& t = g.node(term);

  // Expect E(shift(arg_i, arg_j)) with arg_j = broadcast(m_final).
  const Expr& e = t.expr;
  if (e.op != alg.hom_op || e.kids.size() != 1)
    return skip(term, "non-homomorphic dependency: pass 2 is not E(x (-) m_final)");
  const Expr& sh = e.kids[0];
  if (sh.op != alg.shift_op || sh.kids.size() != 2 || sh.kids[0].op != ExprOp::Arg ||
      sh.kids[1].op != ExprOp::Arg)
    return skip(term, "non-homomorphic dependency: pass 2 is not E(x (-) m_final)");
  const NodeId lhs = t.inputs.at(static_cast<size_t>(sh.kids[0].arg));
  const NodeId rhs = t.inputs.at(static_cast<size_t>(sh.kids[1].arg));
  if (rhs != mb)
    return skip(term, "non-homomorphic dependency: pass 2 does not subtract the final statistic");
  if (lhs != x)
    return skip(term, "dependency mismatch: pass 2 shifts a different tensor than pass 1 reduced");

  TwoPassReductionPattern p;
  p.source = x;
  p.max_node = max_id;
  p.max_broadcast = mb;
  p.term = term;
  p.reduce_dims = mx.reduce_dims;

  auto is_denominator = [&](NodeId id) {
    const OpNode& n = g.node(id);
    return n.kind == OpKind::Reduce && n.combiner == alg.oplus_combiner && n.inputs[0] == term &&
           same_set(n.reduce_dims, p.reduce_dims);
  };
  auto weight_ok = [&](NodeId w) { return !detail::depends_on(g, w, max_id); };

  for (NodeId u : users[static_cast<size_t>(term)]) {
    const OpNode& un = g.node(u);
    if (is_denominator(u)) {
      p.uses.push_back({TwoPassUse::Kind::Denominator, u, kNoNode, kNoNode});
      continue;
    }
    if (un.kind == OpKind::Contract && same_set(un.reduce_dims, p.reduce_dims)) {
      auto w = detail::other_operand(un, term);
      if (w && weight_ok(*w)) {
        p.uses.push_back({TwoPassUse::Kind::Weighted, u, *w, kNoNode});
        continue;
      }
    }
    if (un.kind == OpKind::Pointwise && un.inputs.size() == 2 && un.expr.op == ExprOp::Div &&
        un.expr.kids[0].op == ExprOp::Arg && un.expr.kids[1].op == ExprOp::Arg) {
      NodeId num = un.inputs.at(static_cast<size_t>(un.expr.kids[0].arg));
      NodeId den = un.inputs.at(static_cast<size_t>(un.expr.kids[1].arg));
      const OpNode& dn = g.node(den);
      bool den_ok = num == term && dn.kind == OpKind::Broadcast &&
                    is_denominator(dn.inputs[0]) && dn.dims == un.dims;
      const auto& div_users = users[static_cast<size_t>(u)];
      if (den_ok && div_users.size() == 1) {
        const OpNode& c = g.node(div_users[0]);
        if (c.kind == OpKind::Contract && same_set(c.reduce_dims, p.reduce_dims)) {
          auto w = detail::other_operand(c, u);
          if (w && weight_ok(*w)) {
            p.uses.push_back({TwoPassUse::Kind::NormalizedWeighted, c.id, *w, u});
            continue;
          }
        }
      }
    }
    return skip(u, "unsupported consumer of the pass-2 term '" + un.name + "'");
  }
  if (p.uses.empty()) return skip(term, "pass-2 term is never reduced");
  res.pattern = std::move(p);
  return res;
}

/// Replaces each use of the pattern by a single online reduce over the source
/// tensor and drops the now-dead pass-1 / pass-2 nodes. The replaced nodes keep
/// their names, so downstream references are unchanged.
inline TensorGraph rewrite_two_pass_to_online(const TensorGraph& g, const TwoPassReductionPattern& p,
                                              const RuntimeAlgebra& alg) {
  TensorGraph out = g;
  for (const auto& use : p.uses) {
    OpNode& n = out.node(use.reduction);
    OpNode r;
    r.id = n.id;
    r.name = n.name;
    r.kind = OpKind::OnlineReduce;
    r.dims = n.dims;
    r.reduce_dims = p.reduce_dims;
    r.algebra = alg.name();
    r.inputs = {p.source};
    if (use.kind != TwoPassUse::Kind::Denominator) r.inputs.push_back(use.weight);
    r.normalize = use.kind == TwoPassUse::Kind::NormalizedWeighted;
    n = std::move(r);
  }
  return compact(out);
}

}  // namespace tilefuse
