#pragma once

// Attention variants as tensor graphs. Scores are built from explicit
// contractions and pointwise ops; softmax is spelled out as the two-pass
// max / exp / sum / divide sequence so the fusion passes have to find it.

#include <cmath>
#include <string>
#include <vector>

#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

enum class MaskKind { None, Causal, SlidingWindow, Alibi, Softcap, PrefixLM, Document };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::None: return "vanilla";
    case MaskKind::Causal: return "causal";
    case MaskKind::SlidingWindow: return "sliding_window";
    case MaskKind::Alibi: return "alibi";
    case MaskKind::Softcap: return "softcap";
    case MaskKind::PrefixLM: return "prefix_lm";
    case MaskKind::Document: return "document";
  }
  return "?";
}

struct MaskSpec {
  MaskKind kind = MaskKind::None;
  double param = 0.0;  // window, cap, prefix length or document count

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

enum class Family { MHA, GQA, DiffAttn, Evoformer };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::MHA: return "mha";
    case Family::GQA: return "gqa";
    case Family::DiffAttn: return "diffattn";
    case Family::Evoformer: return "evoformer";
  }
  return "?";
}

struct AttentionSpec {
  Family family = Family::MHA;
  MaskSpec mask;
  int64_t batch = 1;
  int64_t heads = 2;     // query heads
  int64_t kv_heads = 2;  // GQA only
  int64_t seq = 256;     // M = N
  int64_t head_dim = 16;
  int64_t msa_rows = 2;  // Evoformer S
  double lambda = 0.2;   // DiffAttn
  DType dtype = DType::F64;

  std::string name() const {
    std::string s = family_name(family);
    if (family == Family::GQA && heads != 2 * kv_heads)
      s += std::to_string(heads) + "x" + std::to_string(kv_heads);
    return s + "_" + mask_kind_name(mask.kind);
  }
};

namespace detail {

struct ScoreDims {
  std::vector<std::string> heads;  // leading dims shared by q, k, v (before M / N)
  std::vector<std::string> q_extra;  // extra query-only head dims (GQA group rows)
};

/// Applies the mask or score modifier to scores `s` with dims `sd` (..., M, N).
inline NodeId apply_mask(GraphBuilder& b, NodeId s, const std::vector<std::string>& sd,
                         const std::vector<std::string>& head_dims, const MaskSpec& m,
                         const std::string& tag) {
  auto masked = [&](InitKind init) {
    NodeId mask = b.input(tag + "mask", {"M", "N"}, {init, m.param});
    NodeId mb = b.broadcast(tag + "mask_b", mask, sd);
    return b.pointwise(tag + "s_masked", {mb, s},
                       ex::where(ex::arg(0), ex::constant(kNegInf), ex::arg(1)));
  };
  switch (m.kind) {
    case MaskKind::None:
      return s;
    case MaskKind::Causal:
      return masked(InitKind::CausalMask);
    case MaskKind::SlidingWindow:
      return masked(InitKind::SlidingWindowMask);
    case MaskKind::PrefixLM:
      return masked(InitKind::PrefixLMMask);
    case MaskKind::Document:
      return masked(InitKind::DocumentMask);
    case MaskKind::Alibi: {
      NodeId slopes = b.input(tag + "alibi_slopes", head_dims, {InitKind::AlibiSlopes, 0});
      NodeId rel = b.input(tag + "rel_pos", {"M", "N"}, {InitKind::RelativePosition, 0});
      NodeId sb = b.broadcast(tag + "slopes_b", slopes, sd);
      NodeId rb = b.broadcast(tag + "rel_b", rel, sd);
      return b.pointwise(tag + "s_alibi", {s, sb, rb},
                         ex::add(ex::arg(0), ex::mul(ex::arg(1), ex::arg(2))));
    }
    case MaskKind::Softcap:
      return b.pointwise(tag + "s_capped", {s},
                         ex::scale(ex::tanh(ex::scale(ex::arg(0), 1.0 / m.param)), m.param));
  }
  return s;
}

/// Two-pass softmax over N followed by the weighted sum with v.
inline NodeId softmax_times_v(GraphBuilder& b, NodeId s, NodeId v,
                              const std::vector<std::string>& sd,
                              const std::vector<std::string>& out_dims, const std::string& tag) {
  NodeId m = b.reduce(tag + "m", Combiner::Max, s, {"N"});
  NodeId mb = b.broadcast(tag + "m_b", m, sd);
  NodeId e = b.pointwise(tag + "e", {s, mb}, ex::exp(ex::sub(ex::arg(0), ex::arg(1))));
  NodeId l = b.reduce(tag + "l", Combiner::Sum, e, {"N"});
  NodeId lb = b.broadcast(tag + "l_b", l, sd);
  NodeId p = b.pointwise(tag + "p", {e, lb}, ex::div(ex::arg(0), ex::arg(1)));
  return b.contract(tag + "o", p, v, {"N"}, out_dims);
}

inline NodeId attention_core(GraphBuilder& b, NodeId q, NodeId k, NodeId v,
                             const std::vector<std::string>& lead,
                             const std::vector<std::string>& mask_heads, const MaskSpec& mask,
                             int64_t head_dim, const std::string& tag) {
  std::vector<std::string> sd = lead;
  sd.push_back("M");
  sd.push_back("N");
  std::vector<std::string> od = lead;
  od.push_back("M");
  od.push_back("Dv");
  NodeId qk = b.contract(tag + "qk", q, k, {"D"}, sd);
  NodeId s = b.pointwise(tag + "s", {qk},
                         ex::scale(ex::arg(0), 1.0 / std::sqrt(static_cast<double>(head_dim))));
  s = apply_mask(b, s, sd, mask_heads, mask, tag);
  return softmax_times_v(b, s, v, sd, od, tag);
}

}  // namespace detail

inline TensorGraph build_variant(const AttentionSpec& spec) {
  GraphBuilder b(spec.dtype);
  b.dim("B", spec.batch).dim("M", spec.seq).dim("N", spec.seq);
  b.dim("D", spec.head_dim).dim("Dv", spec.head_dim);
  const MaskSpec& mask = spec.mask;

  switch (spec.family) {
    case Family::MHA: {
      b.dim("H", spec.heads);
      NodeId q = b.input("q", {"B", "H", "M", "D"});
      NodeId k = b.input("k", {"B", "H", "N", "D"});
      NodeId v = b.input("v", {"B", "H", "N", "Dv"});
      NodeId o = detail::attention_core(b, q, k, v, {"B", "H"}, {"H"}, mask, spec.head_dim, "");
      b.output("out", o);
      break;
    }
    case Family::GQA: {
      if (spec.kv_heads < 1 || spec.heads % spec.kv_heads != 0)
        throw Error("query heads must be a multiple of kv heads");
      b.dim("G", spec.kv_heads).dim("R", spec.heads / spec.kv_heads);
      NodeId q = b.input("q", {"B", "G", "R", "M", "D"});
      NodeId k = b.input("k", {"B", "G", "N", "D"});
      NodeId v = b.input("v", {"B", "G", "N", "Dv"});
      NodeId o = detail::attention_core(b, q, k, v, {"B", "G", "R"}, {"G", "R"}, mask,
                                        spec.head_dim, "");
      b.output("out", o);
      break;
    }
    case Family::DiffAttn: {
      b.dim("H", spec.heads);
      NodeId q0 = b.input("q0", {"B", "H", "M", "D"});
      NodeId q1 = b.input("q1", {"B", "H", "M", "D"});
      NodeId k0 = b.input("k0", {"B", "H", "N", "D"});
      NodeId k1 = b.input("k1", {"B", "H", "N", "D"});
      NodeId v = b.input("v", {"B", "H", "N", "Dv"});
      NodeId o0 = detail::attention_core(b, q0, k0, v, {"B", "H"}, {"H"}, mask, spec.head_dim, "a0_");
      NodeId o1 = detail::attention_core(b, q1, k1, v, {"B", "H"}, {"H"}, mask, spec.head_dim, "a1_");
      NodeId d = b.pointwise("diff", {o0, o1},
                             ex::sub(ex::arg(0), ex::scale(ex::arg(1), spec.lambda)));
      b.output("out", d);
      break;
    }
    case Family::Evoformer: {
      // Row-wise gated self-attention over MSA rows S with a pair bias shared
      // across rows and a per-row key mask bias.
      b.dim("S", spec.msa_rows).dim("H", spec.heads);
      const std::vector<std::string> lead{"B", "S", "H"};
      const std::vector<std::string> sd{"B", "S", "H", "M", "N"};
      NodeId q = b.input("q", {"B", "S", "H", "M", "D"});
      NodeId k = b.input("k", {"B", "S", "H", "N", "D"});
      NodeId v = b.input("v", {"B", "S", "H", "N", "Dv"});
      NodeId gate = b.input("gate", {"B", "S", "H", "M", "Dv"});
      NodeId mask_bias = b.input("mask_bias", {"B", "S", "N"});
      NodeId pair_bias = b.input("pair_bias", {"B", "H", "M", "N"});
      NodeId qk = b.contract("qk", q, k, {"D"}, sd);
      NodeId mbb = b.broadcast("mask_bias_b", mask_bias, sd);
      NodeId pbb = b.broadcast("pair_bias_b", pair_bias, sd);
      const double scale = 1.0 / std::sqrt(static_cast<double>(spec.head_dim));
      NodeId s = b.pointwise("s", {qk, mbb, pbb},
                             ex::add(ex::add(ex::scale(ex::arg(0), scale), ex::arg(1)), ex::arg(2)));
      s = detail::apply_mask(b, s, sd, {"H"}, mask, "");
      NodeId o = detail::softmax_times_v(b, s, v, sd, {"B", "S", "H", "M", "Dv"}, "");
      NodeId gated = b.pointwise("gated", {gate, o}, ex::mul(ex::sigmoid(ex::arg(0)), ex::arg(1)));
      b.output("out", gated);
      break;
    }
  }
  return b.build();
}

/// Mask settings used across the corpus, scaled to sequence length n.
inline std::vector<MaskSpec> corpus_masks(int64_t n) {
  return {{MaskKind::None, 0},
          {MaskKind::Causal, 0},
          {MaskKind::SlidingWindow, static_cast<double>(std::min<int64_t>(256, n / 2))},
          {MaskKind::Alibi, 0},
          {MaskKind::Softcap, 20.0},
          {MaskKind::PrefixLM, static_cast<double>(std::min<int64_t>(256, n / 2))},
          {MaskKind::Document, 12.0}};
}

/// Every corpus variant at sequence length n: all masks on MHA and GQA, then
/// differential attention and Evoformer row attention.
inline std::vector<AttentionSpec> corpus(int64_t n, DType dtype = DType::F64) {
  std::vector<AttentionSpec> out;
  for (const auto& m : corpus_masks(n)) {
    AttentionSpec mha;
    mha.mask = m;
    mha.seq = n;
    mha.dtype = dtype;
    out.push_back(mha);
    AttentionSpec gqa = mha;
    gqa.family = Family::GQA;
    gqa.heads = 4;
    gqa.kv_heads = 2;
    out.push_back(gqa);
  }
  AttentionSpec wide;
  wide.family = Family::GQA;
  wide.heads = 16;
  wide.kv_heads = 2;
  wide.seq = n;
  wide.dtype = dtype;
  out.push_back(wide);
  AttentionSpec diff;
  diff.family = Family::DiffAttn;
  diff.seq = n;
  diff.dtype = dtype;
  out.push_back(diff);
  AttentionSpec evo;
  evo.family = Family::Evoformer;
  evo.heads = 4;
  evo.seq = n;
  evo.dtype = dtype;
  out.push_back(evo);
  return out;
}

/// Looks a variant up by name ("mha_causal", "gqa_vanilla", ...). A bare mask
/// name means MHA with that mask; a bare family name means no mask.
inline AttentionSpec find_variant(const std::string& name, int64_t n, DType dtype = DType::F64) {
  for (auto& s : corpus(n, dtype))
    if (s.name() == name || s.name() == "mha_" + name || s.name() == name + "_vanilla") return s;
  throw Error("unknown variant '" + name + "'");
}

/// Twin matmul: C[M,N] = A[M,K] B[K,N]; E[M,P] = C[M,N] D[N,P].
inline TensorGraph twin_matmul(int64_t m, int64_t n, int64_t k, int64_t p, DType dtype = DType::F64) {
  GraphBuilder b(dtype);
  b.dim("M", m).dim("N", n).dim("K", k).dim("P", p);
  NodeId a = b.input("A", {"M", "K"});
  NodeId bb = b.input("B", {"K", "N"});
  NodeId d = b.input("D", {"N", "P"});
  NodeId c = b.contract("C", a, bb, {"K"}, {"M", "N"});
  NodeId e = b.contract("E", c, d, {"N"}, {"M", "P"});
  b.output("out", e);
  return b.build();
}

}  // namespace tilefuse
