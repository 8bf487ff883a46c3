#include <cmath>

#include <gtest/gtest.h>

#include "tilefuse/naive_eval.hpp"
#include "tilefuse/tensor_ir.hpp"

using namespace tilefuse;
using namespace tilefuse::ex;

namespace {

Tensor filled(std::vector<std::string> dims, std::vector<int64_t> shape, std::vector<double> v) {
  Tensor t(std::move(dims), std::move(shape));
  t.data = std::move(v);
  return t;
}

TensorGraph softmax_graph(int64_t n) {
  GraphBuilder b;
  b.dim("M", 1).dim("N", n);
  NodeId x = b.input("x", {"M", "N"});
  NodeId m = b.reduce("m", Combiner::Max, x, {"N"});
  NodeId mb = b.broadcast("mb", m, {"M", "N"});
  NodeId e = b.pointwise("e", {x, mb}, exp(sub(arg(0), arg(1))));
  NodeId l = b.reduce("l", Combiner::Sum, e, {"N"});
  NodeId lb = b.broadcast("lb", l, {"M", "N"});
  NodeId p = b.pointwise("p", {e, lb}, div(arg(0), arg(1)));
  b.output("out", p);
  return b.build();
}

}  // namespace

TEST(Validate, WellFormedGraphHasNoDiagnostics) {
  EXPECT_TRUE(validate(softmax_graph(4)).empty());
}

TEST(Validate, CycleIsReportedOnce) {
  GraphBuilder b;
  b.dim("N", 4);
  NodeId x = b.input("x", {"N"});
  NodeId a = b.pointwise("a", {x}, neg(arg(0)));
  NodeId c = b.pointwise("c", {a}, neg(arg(0)));
  b.output("out", c);
  TensorGraph g = b.build();
  g.node(a).inputs = {c};
  auto d = validate(g);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NE(d[0].message.find("cycle"), std::string::npos);
  EXPECT_FALSE(topo_order(g).has_value());
}

TEST(Validate, ReduceOverAbsentDimNamesIt) {
  GraphBuilder b;
  b.dim("M", 2).dim("N", 3).dim("Z", 5);
  NodeId x = b.input("x", {"M", "N"});
  NodeId r = b.reduce("r", Combiner::Sum, x, {"Z"});
  b.output("out", r);
  auto d = validate(b.build());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].node, r);
  EXPECT_NE(d[0].message.find("'Z'"), std::string::npos);
}

TEST(Validate, ImplicitBroadcastIsRejected) {
  GraphBuilder b;
  b.dim("M", 2).dim("N", 3);
  NodeId x = b.input("x", {"M", "N"});
  NodeId m = b.reduce("m", Combiner::Max, x, {"N"});
  NodeId bad = b.pointwise("bad", {x, m}, sub(arg(0), arg(1)));
  b.output("out", bad);
  auto d = validate(b.build());
  ASSERT_FALSE(d.empty());
  EXPECT_EQ(d[0].node, bad);
  EXPECT_THROW(require_valid(b.graph()), Error);
}

TEST(Validate, UnknownExtentAndMissingOutput) {
  GraphBuilder b;
  b.dim("M", 2);
  b.input("x", {"M", "Q"});
  auto d = validate(b.build());
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NE(d[0].message.find("'Q'"), std::string::npos);
  EXPECT_NE(d[1].message.find("no outputs"), std::string::npos);
}

TEST(LowerContract, DotProductOfOnes) {
  GraphBuilder b;
  b.dim("K", 4);
  NodeId x = b.input("x", {"K"}, {InitKind::Constant, 1.0});
  NodeId y = b.input("y", {"K"}, {InitKind::Constant, 1.0});
  NodeId c = b.contract("c", x, y, {"K"});
  b.output("out", c);
  TensorGraph g = b.build();
  TensorGraph low = lower_contract(g, c);
  EXPECT_TRUE(validate(low).empty());
  EXPECT_EQ(low.count_kind(OpKind::Contract), 0u);
  auto out = eval_naive(low, make_bindings(low, 0));
  ASSERT_EQ(out.at("out").numel(), 1);
  EXPECT_EQ(out.at("out").data[0], 4.0);
  EXPECT_EQ(eval_naive(g, make_bindings(g, 0)).at("out").data[0], 4.0);
}

TEST(LowerContract, TimesIdentityIsIdentity) {
  GraphBuilder b;
  b.dim("M", 3).dim("K", 3).dim("N", 3);
  NodeId a = b.input("A", {"M", "K"});
  NodeId id = b.input("I", {"K", "N"});
  NodeId c = b.contract("C", a, id, {"K"}, {"M", "N"});
  b.output("out", c);
  TensorGraph g = lower_all_contracts(b.build());
  Bindings bind;
  bind["A"] = filled({"M", "K"}, {3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  bind["I"] = filled({"K", "N"}, {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = eval_naive(g, bind).at("out");
  EXPECT_EQ(out.data, bind["A"].data);
}

TEST(LowerContract, RejectsNonContract) {
  TensorGraph g = softmax_graph(4);
  EXPECT_THROW(lower_contract(g, *g.find("e")), Error);
}

TEST(NaiveEval, SoftmaxOfZerosIsUniform) {
  TensorGraph g = softmax_graph(4);
  Bindings bind;
  bind["x"] = Tensor({"M", "N"}, {1, 4});
  auto out = eval_naive(g, bind).at("out");
  for (double v : out.data) EXPECT_EQ(v, 0.25);
}

TEST(NaiveEval, FullyMaskedRowIsUniform) {
  TensorGraph g = softmax_graph(3);
  Bindings bind;
  bind["x"] = filled({"M", "N"}, {1, 3}, {kNegInf, kNegInf, kNegInf});
  auto out = eval_naive(g, bind).at("out");
  for (double v : out.data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(NaiveEval, MissingBindingThrows) {
  TensorGraph g = softmax_graph(4);
  EXPECT_THROW(eval_naive(g, Bindings{}), Error);
}

TEST(NaiveEval, F32RoundsInputsAndOutputs) {
  GraphBuilder b(DType::F32);
  b.dim("N", 1);
  NodeId x = b.input("x", {"N"});
  b.output("out", b.pointwise("y", {x}, mul(arg(0), constant(3.0))));
  TensorGraph g = b.build();
  Bindings bind;
  bind["x"] = filled({"N"}, {1}, {0.1});
  double x32 = static_cast<double>(0.1f);
  EXPECT_EQ(eval_naive(g, bind).at("out").data[0], static_cast<double>(static_cast<float>(x32 * 3.0)));
}

TEST(Expr, TanhAndSigmoidMatchLibm) {
  GraphBuilder b;
  b.dim("N", 5);
  NodeId x = b.input("x", {"N"});
  NodeId t = b.pointwise("t", {x}, ex::tanh(arg(0)));
  NodeId s = b.pointwise("s", {x}, sigmoid(arg(0)));
  b.output("ot", t);
  b.output("os", s);
  TensorGraph g = b.build();
  Bindings bind;
  bind["x"] = filled({"N"}, {5}, {-3.0, -0.5, 0.0, 0.7, 4.0});
  auto out = eval_naive(g, bind);
  for (size_t i = 0; i < 5; ++i) {
    double v = bind["x"].data[i];
    EXPECT_NEAR(out.at("ot").data[i], std::tanh(v), 1e-15);
    EXPECT_NEAR(out.at("os").data[i], 1.0 / (1.0 + std::exp(-v)), 1e-15);
  }
}

TEST(Expr, MaskedSubTreatsEqualInfinitiesAsZero) {
  EXPECT_EQ(masked_sub(kNegInf, kNegInf), 0.0);
  EXPECT_EQ(masked_sub(kPosInf, kPosInf), 0.0);
  EXPECT_EQ(masked_sub(kNegInf, 1.0), kNegInf);
  EXPECT_EQ(masked_sub(3.0, 1.0), 2.0);
}

TEST(Graph, CompactDropsDeadNodesAndKeepsNames) {
  GraphBuilder b;
  b.dim("N", 2);
  NodeId x = b.input("x", {"N"});
  b.pointwise("dead", {x}, neg(arg(0)));
  NodeId y = b.pointwise("y", {x}, exp(arg(0)));
  b.output("out", y);
  TensorGraph g = compact(b.build());
  EXPECT_FALSE(g.find("dead").has_value());
  EXPECT_TRUE(validate(g).empty());
  EXPECT_EQ(g.node(*g.find("out")).inputs[0], *g.find("y"));
}
