#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "tilefuse/naive_eval.hpp"
#include "tilefuse/reduction_algebra.hpp"
#include "tilefuse/sketch_fusion.hpp"

using namespace tilefuse;
using namespace tilefuse::ex;

namespace {

const SoftmaxAlgebra kAlg;

std::vector<double> samples() {
  std::vector<double> s;
  for (int i = -20; i <= 20; ++i) s.push_back(i);
  return s;
}

// Values checked against 30-digit arithmetic.
constexpr double kLogSumExp123 = 1.50321472440805501348952326513;

struct TwoPass {
  TensorGraph g;
  NodeId max_id;
};

TwoPass two_pass(int64_t n, Expr pass2 = exp(sub(arg(0), arg(1)))) {
  GraphBuilder b;
  b.dim("M", 2).dim("N", n);
  NodeId x = b.input("x", {"M", "N"});
  NodeId m = b.reduce("m", Combiner::Max, x, {"N"});
  NodeId mb = b.broadcast("mb", m, {"M", "N"});
  NodeId e = b.pointwise("e", {x, mb}, std::move(pass2));
  NodeId l = b.reduce("l", Combiner::Sum, e, {"N"});
  b.output("out", l);
  return {b.build(), m};
}

}  // namespace

TEST(Algebra, SoftmaxPassesEveryAxiom) {
  auto s = samples();
  auto rep = check_algebra(kAlg, s, 1e-12);
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(rep.checks.size(), 8u);
  ASSERT_NE(rep.find("hom_law"), nullptr);
  EXPECT_LE(rep.find("hom_law")->worst_residual, 1e-12);
}

TEST(Algebra, BrokenDistributivityIsCaught) {
  RuntimeAlgebra broken = softmax_algebra();
  broken.algebra_name = "broken";
  broken.otimes_fn = [](double a, double b) { return a * b + 1e-3; };
  auto s = samples();
  auto rep = check_algebra(broken, s, 1e-12);
  EXPECT_FALSE(rep.passed());
  EXPECT_FALSE(rep.find("distributivity")->passed);
}

TEST(Algebra, WrongHomomorphismIsCaught) {
  RuntimeAlgebra bad = softmax_algebra();
  bad.algebra_name = "square";
  bad.hom_fn = [](double a) { return a * a; };
  auto s = samples();
  auto rep = check_algebra(bad, s, 1e-12);
  EXPECT_FALSE(rep.find("hom_law")->passed);
  EXPECT_TRUE(rep.find("distributivity")->passed);
}

TEST(Algebra, EmptySamplesThrow) {
  std::vector<double> none;
  EXPECT_THROW(check_algebra(kAlg, none, 1e-12), Error);
}

TEST(Algebra, RegistryHasSoftmax) {
  AlgebraRegistry r;
  ASSERT_NE(r.find("softmax"), nullptr);
  EXPECT_EQ(r.find("nope"), nullptr);
  RuntimeAlgebra x = softmax_algebra();
  x.algebra_name = "x";
  r.add(x);
  EXPECT_EQ(r.names(), (std::vector<std::string>{"softmax", "x"}));
}

TEST(RunStable, OneTwoThree) {
  std::vector<double> x{1, 2, 3};
  auto r = run_stable<SoftmaxAlgebra>(x, kAlg);
  EXPECT_EQ(r.m, 3.0);
  EXPECT_NEAR(r.d, kLogSumExp123, 1e-15);
}

TEST(RunStable, ZerosAndSingleton) {
  std::vector<double> z{0, 0};
  auto r = run_stable<SoftmaxAlgebra>(z, kAlg);
  EXPECT_EQ(r.m, 0.0);
  EXPECT_EQ(r.d, 2.0);
  std::vector<double> one{-4.25};
  auto s = run_stable<SoftmaxAlgebra>(one, kAlg);
  EXPECT_EQ(s.m, -4.25);
  EXPECT_EQ(s.d, 1.0);
  EXPECT_THROW(run_stable<SoftmaxAlgebra>(std::span<const double>{}, kAlg), Error);
}

TEST(RunOnline, DescendingInputNeverRescales) {
  std::vector<double> x{9, 7, 4, 1, -3};
  auto pre = online_prefix<SoftmaxAlgebra>(x, kAlg);
  for (size_t j = 1; j < pre.size(); ++j) {
    EXPECT_EQ(pre[j].m, 9.0);
    double corr = kAlg.hom(kAlg.shift(pre[j - 1].m, pre[j].m));
    EXPECT_EQ(corr, 1.0);
  }
}

TEST(RunOnline, AscendingMatchesStable) {
  std::vector<double> x;
  for (int i = 1; i <= 10; ++i) x.push_back(i);
  auto on = run_online<SoftmaxAlgebra>(x, kAlg);
  auto st = run_stable<SoftmaxAlgebra>(x, kAlg);
  EXPECT_EQ(on.m, st.m);
  EXPECT_NEAR(on.d, st.d, 1e-14 * st.d);
}

TEST(RunOnline, PrefixesMatchClosedForm) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-5, 5);
  std::vector<double> x(64);
  for (auto& v : x) v = u(rng);
  auto pre = online_prefix<SoftmaxAlgebra>(x, kAlg);
  for (size_t j = 0; j < pre.size(); ++j) {
    double cf = closed_form_accumulator<SoftmaxAlgebra>(x, j + 1, pre[j].m, kAlg);
    EXPECT_NEAR(pre[j].acc, cf, 1e-12 * cf);
  }
}

TEST(RunOnline, FloatMatchesStableOnLongRows) {
  SoftmaxAlgebraT<float> alg;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-10, 10);
  std::vector<float> x(4096);
  for (auto& v : x) v = u(rng);
  auto on = run_online<SoftmaxAlgebraT<float>>(x, alg);
  auto st = run_stable<SoftmaxAlgebraT<float>>(x, alg);
  EXPECT_EQ(on.m, st.m);
  EXPECT_NEAR(on.d, st.d, 1e-5 * st.d);
}

TEST(RunOnline, MaskedPrefixStaysFinite) {
  std::vector<double> x{kNegInf, kNegInf, 0.0, 1.0};
  auto on = run_online<SoftmaxAlgebra>(x, kAlg);
  auto st = run_stable<SoftmaxAlgebra>(x, kAlg);
  EXPECT_EQ(on.m, 1.0);
  EXPECT_NEAR(on.d, st.d, 1e-15);
}

TEST(Pattern, TwoPassRewriteMatchesOverExtent128) {
  auto tp = two_pass(128);
  auto m = match_two_pass(tp.g, tp.max_id, softmax_algebra());
  ASSERT_TRUE(m.pattern.has_value());
  EXPECT_EQ(m.pattern->uses.size(), 1u);
  TensorGraph on = rewrite_two_pass_to_online(tp.g, *m.pattern, softmax_algebra());
  EXPECT_TRUE(validate(on).empty());
  EXPECT_EQ(on.count_kind(OpKind::OnlineReduce), 1u);
  EXPECT_EQ(on.count_kind(OpKind::Reduce), 0u);
  auto b = make_bindings(tp.g, 3);
  for (auto& v : b["x"].data) v *= 30.0;
  auto ref = eval_naive(tp.g, b).at("out");
  auto got = eval_naive(on, b).at("out");
  for (size_t i = 0; i < ref.data.size(); ++i) EXPECT_NEAR(got.data[i], ref.data[i], 1e-12 * ref.data[i]);
}

TEST(Pattern, NonHomomorphicPassTwoIsDeclined) {
  auto tp = two_pass(16, mul(sub(arg(0), arg(1)), sub(arg(0), arg(1))));
  auto m = match_two_pass(tp.g, tp.max_id, softmax_algebra());
  EXPECT_FALSE(m.pattern.has_value());
  ASSERT_TRUE(m.skipped.has_value());
  auto s = schedule(tp.g);
  EXPECT_EQ(s.semantic_rewrites, 0);
  EXPECT_FALSE(s.diagnostics.empty());
}

TEST(Pattern, ExtentOneGivesValueAndOne) {
  auto tp = two_pass(1);
  auto m = match_two_pass(tp.g, tp.max_id, softmax_algebra());
  ASSERT_TRUE(m.pattern.has_value());
  TensorGraph on = rewrite_two_pass_to_online(tp.g, *m.pattern, softmax_algebra());
  auto b = make_bindings(tp.g, 5);
  auto got = eval_naive(on, b).at("out");
  for (double v : got.data) EXPECT_EQ(v, 1.0);
}

TEST(Pattern, UncheckedAlgebraIsNotUsed) {
  auto tp = two_pass(8);
  AlgebraReport failing{"softmax", 1e-12, {{"hom_law", false, 1.0}}};
  auto res = try_fuse_semantic(tp.g, softmax_algebra(), failing);
  EXPECT_EQ(res.rewrites, 0);
  ASSERT_EQ(res.skipped.size(), 1u);
}
