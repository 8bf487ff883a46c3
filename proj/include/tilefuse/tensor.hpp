#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tilefuse/common.hpp"
#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

/// Dense row-major tensor over named dims. Values are held as double; the
/// dtype records what precision the values were rounded to on store.
struct Tensor {
  std::vector<std::string> dims;
  std::vector<int64_t> shape;
  std::vector<double> data;
  DType dtype = DType::F64;

  Tensor() = default;
  Tensor(std::vector<std::string> d, std::vector<int64_t> s, DType t = DType::F64)
      : dims(std::move(d)), shape(std::move(s)), dtype(t) {
    data.assign(static_cast<size_t>(numel()), 0.0);
  }

  int64_t numel() const {
    int64_t e = 1;
    for (auto x : shape) e *= x;
    return e;
  }

  std::vector<int64_t> strides() const {
    std::vector<int64_t> s(shape.size(), 1);
    for (size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
  }

  double& at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(offset(idx))]; }
  double at(std::initializer_list<int64_t> idx) const {
    return data[static_cast<size_t>(offset(idx))];
  }

  int64_t offset(std::initializer_list<int64_t> idx) const {
    auto st = strides();
    int64_t off = 0;
    size_t k = 0;
    for (auto i : idx) off += i * st[k++];
    return off;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

using Bindings = std::map<std::string, Tensor>;

inline Tensor make_tensor(const TensorGraph& g, const OpNode& n) {
  std::vector<int64_t> shape;
  for (const auto& d : n.dims) shape.push_back(g.extent(d));
  return Tensor(n.dims, std::move(shape), g.dtype);
}

/// Stable 64-bit FNV-1a, used to derive per-input random streams.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

inline void fill_pairwise(Tensor& t, const auto& value_of) {
  // Last two dims are (query, key); leading dims repeat the same plane.
  if (t.shape.size() < 2) throw Error("mask/position inputs need at least two dims");
  const int64_t q = t.shape[t.shape.size() - 2];
  const int64_t k = t.shape.back();
  const int64_t plane = q * k;
  for (int64_t base = 0; base < t.numel(); base += plane)
    for (int64_t i = 0; i < q; ++i)
      for (int64_t j = 0; j < k; ++j)
        t.data[static_cast<size_t>(base + i * k + j)] = value_of(i, j, q);
}

}  // namespace detail

/// ALiBi slope for head h of H: 2^(-8 (h + 1) / H).
inline double alibi_slope(int64_t head, int64_t heads) {
  return std::exp2(-8.0 * static_cast<double>(head + 1) / static_cast<double>(heads));
}

/// Document id of position i when `length` positions are split into `docs`
/// contiguous, near-equal documents.
inline int64_t document_of(int64_t i, int64_t length, int64_t docs) {
  return i * docs / length;
}

inline Tensor init_input(const TensorGraph& g, const OpNode& n, uint64_t seed) {
  Tensor t = make_tensor(g, n);
  const double p = n.input_init.param;
  switch (n.input_init.kind) {
    case InitKind::Random: {
      std::mt19937_64 rng(seed ^ fnv1a(n.name));
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      for (auto& v : t.data) v = dist(rng);
      break;
    }
    case InitKind::Zeros:
      break;
    case InitKind::Constant:
      for (auto& v : t.data) v = p;
      break;
    case InitKind::CausalMask:
      detail::fill_pairwise(t, [](int64_t q, int64_t kv, int64_t) { return kv > q ? 1.0 : 0.0; });
      break;
    case InitKind::SlidingWindowMask:
      detail::fill_pairwise(t, [p](int64_t q, int64_t kv, int64_t) {
        bool keep = q >= kv && static_cast<double>(q - kv) <= p;
        return keep ? 0.0 : 1.0;
      });
      break;
    case InitKind::PrefixLMMask:
      detail::fill_pairwise(t, [p](int64_t q, int64_t kv, int64_t) {
        bool keep = static_cast<double>(kv) < p || kv <= q;
        return keep ? 0.0 : 1.0;
      });
      break;
    case InitKind::DocumentMask: {
      const auto docs = static_cast<int64_t>(p);
      if (docs < 1) throw Error("document mask needs at least one document");
      const int64_t len = t.shape.back();
      detail::fill_pairwise(t, [docs, len](int64_t q, int64_t kv, int64_t qlen) {
        return document_of(q, qlen, docs) == document_of(kv, len, docs) ? 0.0 : 1.0;
      });
      break;
    }
    case InitKind::AlibiSlopes: {
      const int64_t heads = t.numel();
      for (int64_t h = 0; h < heads; ++h) t.data[static_cast<size_t>(h)] = alibi_slope(h, heads);
      break;
    }
    case InitKind::RelativePosition:
      detail::fill_pairwise(t, [](int64_t q, int64_t kv, int64_t) {
        return static_cast<double>(kv - q);
      });
      break;
  }
  for (auto& v : t.data) v = store_as(g.dtype, v);
  return t;
}

/// Synthesizes a binding for every Input node from its initializer.
inline Bindings make_bindings(const TensorGraph& g, uint64_t seed) {
  Bindings b;
  for (const auto& n : g.nodes)
    if (n.kind == OpKind::Input) b.emplace(n.name, init_input(g, n, seed));
  return b;
}

// ---------------------------------------------------------------------------
// Pointwise expression evaluation over flat, identically laid out operands.

struct ExprResult {
  bool div_by_zero = false;
};

namespace detail {

inline void eval_expr_into(const Expr& e, std::span<const std::span<const double>> args,
                           std::span<double> out, ExprResult& r) {
  const size_t n = out.size();
  switch (e.op) {
    case ExprOp::Arg: {
      auto a = args[static_cast<size_t>(e.arg)];
      for (size_t i = 0; i < n; ++i) out[i] = a[i];
      return;
    }
    case ExprOp::Const:
      for (size_t i = 0; i < n; ++i) out[i] = e.value;
      return;
    default:
      break;
  }
  // Operands that are plain inputs or constants are read in place.
  std::vector<std::vector<double>> scratch(e.kids.size());
  std::vector<std::span<const double>> kid(e.kids.size());
  std::vector<double> kconst(e.kids.size(), 0.0);
  std::vector<bool> is_const(e.kids.size(), false);
  for (size_t k = 0; k < e.kids.size(); ++k) {
    const Expr& c = e.kids[k];
    if (c.op == ExprOp::Arg) {
      kid[k] = args[static_cast<size_t>(c.arg)];
    } else if (c.op == ExprOp::Const) {
      is_const[k] = true;
      kconst[k] = c.value;
    } else {
      scratch[k].resize(n);
      eval_expr_into(c, args, scratch[k], r);
      kid[k] = scratch[k];
    }
  }
  auto v = [&](size_t k, size_t i) { return is_const[k] ? kconst[k] : kid[k][i]; };
  switch (e.op) {
    case ExprOp::Add:
      for (size_t i = 0; i < n; ++i) out[i] = v(0, i) + v(1, i);
      break;
    case ExprOp::Sub:
      for (size_t i = 0; i < n; ++i) out[i] = masked_sub(v(0, i), v(1, i));
      break;
    case ExprOp::Mul:
      for (size_t i = 0; i < n; ++i) out[i] = v(0, i) * v(1, i);
      break;
    case ExprOp::Div:
      for (size_t i = 0; i < n; ++i) {
        double d = v(1, i);
        if (d == 0.0) r.div_by_zero = true;
        out[i] = v(0, i) / d;
      }
      break;
    case ExprOp::Neg:
      for (size_t i = 0; i < n; ++i) out[i] = -v(0, i);
      break;
    case ExprOp::Exp:
      for (size_t i = 0; i < n; ++i) out[i] = std::exp(v(0, i));
      break;
    case ExprOp::Max2:
      for (size_t i = 0; i < n; ++i) out[i] = std::max(v(0, i), v(1, i));
      break;
    case ExprOp::Min2:
      for (size_t i = 0; i < n; ++i) out[i] = std::min(v(0, i), v(1, i));
      break;
    case ExprOp::Where:
      for (size_t i = 0; i < n; ++i) out[i] = v(0, i) != 0.0 ? v(1, i) : v(2, i);
      break;
    default:
      break;
  }
}

}  // namespace detail

/// Evaluates `e` elementwise. All operand spans share out's length and layout.
inline ExprResult apply_expr(const Expr& e, std::span<const std::span<const double>> args,
                             std::span<double> out) {
  ExprResult r;
  detail::eval_expr_into(e, args, out, r);
  return r;
}

}  // namespace tilefuse
