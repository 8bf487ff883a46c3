#include <cmath>
#include <functional>
#include <set>

#include <gtest/gtest.h>

#include "tilefuse/executor.hpp"
#include "tilefuse/variants.hpp"

using namespace tilefuse;
using namespace tilefuse::ex;

namespace {

AttentionSpec mha(int64_t n, MaskSpec mask = {}) {
  AttentionSpec s;
  s.seq = n;
  s.mask = mask;
  return s;
}

// Softmax(q k / sqrt(d)) v for one query row, masked keys skipped.
std::vector<double> brute_row(const Bindings& b, int64_t h, int64_t i, int64_t n, int64_t d,
                              const std::function<bool(int64_t, int64_t)>& keep) {
  const Tensor &q = b.at("q"), &k = b.at("k"), &v = b.at("v");
  std::vector<double> s(static_cast<size_t>(n), kNegInf);
  double mx = kNegInf;
  for (int64_t j = 0; j < n; ++j) {
    if (!keep(i, j)) continue;
    double acc = 0;
    for (int64_t c = 0; c < d; ++c) acc += q.at({0, h, i, c}) * k.at({0, h, j, c});
    s[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(d));
    mx = std::max(mx, s[static_cast<size_t>(j)]);
  }
  double l = 0;
  for (auto& x : s) l += (x = std::exp(x - mx));
  std::vector<double> o(static_cast<size_t>(d), 0.0);
  for (int64_t j = 0; j < n; ++j)
    for (int64_t c = 0; c < d; ++c) o[static_cast<size_t>(c)] += s[static_cast<size_t>(j)] / l * v.at({0, h, j, c});
  return o;
}

}  // namespace

TEST(Variants, DiffAttnWithZeroLambdaIsFirstBranch) {
  AttentionSpec diff;
  diff.family = Family::DiffAttn;
  diff.seq = 128;
  diff.lambda = 0.0;
  TensorGraph gd = build_variant(diff);
  TensorGraph gm = build_variant(mha(128));
  auto bd = make_bindings(gd, 1);
  Bindings bm{{"q", bd.at("q0")}, {"k", bd.at("k0")}, {"v", bd.at("v")}};
  auto ref = eval_naive(gm, bm);
  EXPECT_EQ(eval_naive(gd, bd), ref);
  EXPECT_TRUE(compare(execute(schedule(gd), bd).outputs, ref).within(1e-13));
}

TEST(Variants, HugeSoftcapIsVanilla) {
  TensorGraph capped = build_variant(mha(128, {MaskKind::Softcap, 1e6}));
  TensorGraph plain = build_variant(mha(128));
  auto b = make_bindings(plain, 2);
  auto got = execute(schedule(capped), b).outputs;
  EXPECT_TRUE(compare(got, eval_naive(plain, b)).within(1e-4));
}

TEST(Variants, SlidingWindowMatchesBruteForce) {
  const int64_t n = 128, w = 16, d = 16;
  TensorGraph g = build_variant(mha(n, {MaskKind::SlidingWindow, static_cast<double>(w)}));
  auto b = make_bindings(g, 3);
  auto out = execute(schedule(g), b).outputs.at("out");
  for (int64_t i : {0L, 5L, 16L, 77L, 127L}) {
    auto row = brute_row(b, 1, i, n, d, [&](int64_t q, int64_t k) { return q >= k && q - k <= w; });
    for (int64_t c = 0; c < d; ++c) EXPECT_NEAR(out.at({0, 1, i, c}), row[static_cast<size_t>(c)], 1e-13);
  }
}

TEST(Variants, CausalMatchesBruteForce) {
  const int64_t n = 96, d = 16;
  TensorGraph g = build_variant(mha(n, {MaskKind::Causal, 0}));
  auto b = make_bindings(g, 4);
  auto out = execute(schedule(g), b).outputs.at("out");
  for (int64_t i : {0L, 50L, 95L}) {
    auto row = brute_row(b, 0, i, n, d, [](int64_t q, int64_t k) { return k <= q; });
    for (int64_t c = 0; c < d; ++c) EXPECT_NEAR(out.at({0, 0, i, c}), row[static_cast<size_t>(c)], 1e-13);
  }
}

TEST(Variants, GqaWithOneQueryPerGroupIsMha) {
  AttentionSpec gqa = mha(128);
  gqa.family = Family::GQA;
  gqa.heads = 2;
  gqa.kv_heads = 2;
  TensorGraph gg = build_variant(gqa);
  TensorGraph gm = build_variant(mha(128));
  auto bm = make_bindings(gm, 5);
  Bindings bg = make_bindings(gg, 5);
  bg["q"].data = bm["q"].data;
  bg["k"].data = bm["k"].data;
  bg["v"].data = bm["v"].data;
  EXPECT_EQ(eval_naive(gg, bg).at("out").data, eval_naive(gm, bm).at("out").data);
  EXPECT_EQ(execute(schedule(gg), bg).outputs.at("out").data,
            execute(schedule(gm), bm).outputs.at("out").data);
}

TEST(Variants, CorpusNamesAreUniqueAndResolvable) {
  auto c = corpus(256);
  std::set<std::string> names;
  for (const auto& s : c) {
    EXPECT_TRUE(names.insert(s.name()).second) << s.name();
    EXPECT_EQ(find_variant(s.name(), 256).name(), s.name());
    EXPECT_TRUE(validate(build_variant(s)).empty()) << s.name();
  }
  EXPECT_EQ(c.size(), 17u);
  EXPECT_EQ(find_variant("vanilla", 256).name(), "mha_vanilla");
  EXPECT_EQ(find_variant("causal", 256).name(), "mha_causal");
  EXPECT_EQ(find_variant("evoformer", 256).name(), "evoformer_vanilla");
  EXPECT_EQ(find_variant("diffattn", 256).name(), "diffattn_vanilla");
  EXPECT_THROW(find_variant("nope", 256), Error);
}

TEST(Variants, CorpusFusesToOneKernelExceptDiffAttn) {
  for (const auto& spec : corpus(256)) {
    auto s = schedule(build_variant(spec));
    size_t expect = spec.family == Family::DiffAttn ? 2 : 1;
    EXPECT_EQ(s.kernel_count(), expect) << spec.name();
  }
}

TEST(Variants, GqaNeedsDivisibleHeads) {
  AttentionSpec s;
  s.family = Family::GQA;
  s.heads = 5;
  s.kv_heads = 2;
  EXPECT_THROW(build_variant(s), Error);
}

TEST(Variants, TwinMatmulShapes) {
  TensorGraph g = twin_matmul(8, 16, 4, 2);
  EXPECT_TRUE(validate(g).empty());
  EXPECT_EQ(g.numel(g.node(*g.find("C"))), 8 * 16);
  EXPECT_EQ(g.numel(g.node(*g.find("out"))), 8 * 2);
}

TEST(Masks, InitializersFollowTheirRules) {
  GraphBuilder b;
  b.dim("M", 8).dim("N", 8);
  b.input("causal", {"M", "N"}, {InitKind::CausalMask, 0});
  b.input("window", {"M", "N"}, {InitKind::SlidingWindowMask, 2});
  b.input("prefix", {"M", "N"}, {InitKind::PrefixLMMask, 3});
  b.input("doc", {"M", "N"}, {InitKind::DocumentMask, 2});
  b.input("rel", {"M", "N"}, {InitKind::RelativePosition, 0});
  TensorGraph g = b.build();
  auto t = make_bindings(g, 0);
  for (int64_t q = 0; q < 8; ++q)
    for (int64_t k = 0; k < 8; ++k) {
      EXPECT_EQ(t["causal"].at({q, k}), k > q ? 1.0 : 0.0);
      EXPECT_EQ(t["window"].at({q, k}), (q >= k && q - k <= 2) ? 0.0 : 1.0);
      EXPECT_EQ(t["prefix"].at({q, k}), (k < 3 || k <= q) ? 0.0 : 1.0);
      EXPECT_EQ(t["doc"].at({q, k}), (q / 4 == k / 4) ? 0.0 : 1.0);
      EXPECT_EQ(t["rel"].at({q, k}), static_cast<double>(k - q));
    }
}
