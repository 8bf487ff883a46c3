#include <cmath>

#include <gtest/gtest.h>

#include "tilefuse/executor.hpp"
#include "tilefuse/variants.hpp"

using namespace tilefuse;
using namespace tilefuse::ex;

namespace {

// Two-query attention with Q = K = I, V = [[1, 2], [3, 4]], scale 1/sqrt(2),
// evaluated in 30-digit arithmetic.
constexpr double kRow0[2] = {1.66047690134668614876641010833, 2.66047690134668614876641010833};
constexpr double kRow1[2] = {2.33952309865331385123358989167, 3.33952309865331385123358989167};

TensorGraph mha(int64_t n, int64_t d, int64_t heads = 1, DType dt = DType::F64) {
  AttentionSpec s;
  s.heads = heads;
  s.seq = n;
  s.head_dim = d;
  s.dtype = dt;
  return build_variant(s);
}

Tensor filled(std::vector<std::string> dims, std::vector<int64_t> shape, std::vector<double> v) {
  Tensor t(std::move(dims), std::move(shape));
  t.data = std::move(v);
  return t;
}

TensorGraph add_graph(int64_t n) {
  GraphBuilder b;
  b.dim("M", n).dim("N", n);
  NodeId x = b.input("x", {"M", "N"});
  NodeId y = b.input("y", {"M", "N"});
  b.output("out", b.pointwise("sum", {x, y}, add(arg(0), arg(1))));
  return b.build();
}

}  // namespace

TEST(Execute, TwoByTwoAttentionMatchesOracle) {
  TensorGraph g = mha(2, 2);
  Bindings b;
  b["q"] = filled({"B", "H", "M", "D"}, {1, 1, 2, 2}, {1, 0, 0, 1});
  b["k"] = filled({"B", "H", "N", "D"}, {1, 1, 2, 2}, {1, 0, 0, 1});
  b["v"] = filled({"B", "H", "N", "Dv"}, {1, 1, 2, 2}, {1, 2, 3, 4});
  auto fused = execute(schedule(g), b).outputs.at("out");
  auto naive = eval_naive(g, b).at("out");
  const double* rows[2] = {kRow0, kRow1};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(fused.at({0, 0, i, j}), rows[i][j], 1e-14);
      EXPECT_NEAR(naive.at({0, 0, i, j}), rows[i][j], 1e-14);
    }
}

TEST(Execute, ElementwiseAddTraffic) {
  TensorGraph g = add_graph(128);
  auto r = execute(schedule(g), make_bindings(g, 1));
  EXPECT_EQ(r.traffic.global_reads, 32768);
  EXPECT_EQ(r.traffic.global_writes, 16384);
  EXPECT_EQ(r.traffic.intermediate_bytes_materialized, 0);
  auto u = unfused_traffic(g);
  EXPECT_EQ(u.global_reads, 32768);
  EXPECT_EQ(u.global_writes, 16384);
  EXPECT_EQ(u.kernel_count, 1);
}

TEST(Execute, CopyGraphReadsEqualWrites) {
  GraphBuilder b;
  b.dim("M", 8).dim("N", 300);
  b.output("out", b.input("x", {"M", "N"}));
  TensorGraph g = b.build();
  auto bind = make_bindings(g, 2);
  auto r = execute(schedule(g), bind);
  EXPECT_EQ(r.traffic.global_reads, 2400);
  EXPECT_EQ(r.traffic.global_writes, 2400);
  EXPECT_EQ(r.outputs.at("out"), bind.at("x"));
  auto u = unfused_traffic(g);
  EXPECT_EQ(u.global_reads, 2400);
  EXPECT_EQ(u.global_writes, 2400);
}

TEST(Execute, AttentionKeepsScoresOnChip) {
  TensorGraph g = mha(512, 64);
  auto s = schedule(g);
  auto r = execute(s, make_bindings(g, 3));
  EXPECT_EQ(r.traffic.intermediate_bytes_materialized, 0);
  EXPECT_EQ(r.traffic.kernel_count, 1);
  const int64_t n = 512, d = 64;
  EXPECT_EQ(r.traffic.global_reads, 3 * n * d);
  EXPECT_EQ(r.traffic.global_writes, n * d);
  auto u = unfused_traffic(g);
  EXPECT_GE(u.intermediate_bytes_materialized, n * n * 8);
  size_t ops = 0;
  for (const auto& node : g.nodes)
    if (node.kind != OpKind::Input && node.kind != OpKind::Output) ++ops;
  EXPECT_EQ(u.kernel_count, static_cast<int64_t>(ops));
  EXPECT_TRUE(compare(r.outputs, eval_naive(g, make_bindings(g, 3))).within(1e-12));
}

TEST(Execute, ResultDoesNotDependOnTiles) {
  TensorGraph g = mha(256, 16, 2, DType::F32);
  auto b = make_bindings(g, 4);
  auto ref = eval_naive(g, b);
  std::vector<std::pair<int64_t, int64_t>> shapes{{64, 64}, {128, 64}, {32, 128}};
  std::map<std::string, Tensor> first;
  for (auto [tm, tn] : shapes) {
    ScheduleOptions o;
    o.tile_overrides = {{"M", tm}, {"N", tn}};
    auto s = schedule(g, o);
    EXPECT_EQ(s.kernel_count(), 1u);
    auto r = execute(s, b);
    EXPECT_TRUE(compare(r.outputs, ref).within(1e-5)) << tm << "x" << tn;
    if (first.empty()) first = r.outputs;
    EXPECT_TRUE(compare(r.outputs, first).within(1e-5));
  }
}

TEST(Execute, SerialAndParallelAreBitIdentical) {
  AttentionSpec spec;
  spec.family = Family::GQA;
  spec.heads = 4;
  spec.mask = {MaskKind::Causal, 0};
  TensorGraph g = build_variant(spec);
  auto s = schedule(g);
  auto b = make_bindings(g, 5);
  auto serial = execute(s, b);
  ExecOptions par;
  par.parallel = true;
  par.threads = 4;
  auto parallel = execute(s, b, par);
  EXPECT_EQ(serial.outputs, parallel.outputs);
  EXPECT_EQ(serial.traffic, parallel.traffic);
}

TEST(Execute, TraceReportsBlocksAndNoOverlaps) {
  TensorGraph g = mha(256, 16, 2);
  auto s = schedule(g);
  ExecOptions o;
  o.trace = true;
  auto r = execute(s, make_bindings(g, 6), o);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->write_overlaps, 0);
  EXPECT_EQ(r.trace->blocks, grid_for(s.kernels[0].tiled).total());
  EXPECT_EQ(static_cast<int64_t>(r.trace->lines.size()), r.trace->blocks);
}

TEST(Execute, ScratchpadOverflowIsReported) {
  TensorGraph g = mha(256, 16);
  ExecOptions o;
  o.scratchpad_bytes = 1024;
  try {
    execute(schedule(g), make_bindings(g, 7), o);
    FAIL() << "expected overflow";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("scratchpad capacity exceeded"), std::string::npos);
  }
}

TEST(Execute, FlippedRescaleIsWrong) {
  AttentionSpec spec;
  spec.seq = 256;
  TensorGraph g = build_variant(spec);
  auto b = make_bindings(g, 8);
  ExecOptions o;
  o.fault_flip_rescale = true;
  auto r = execute(schedule(g), b, o);
  EXPECT_FALSE(compare(r.outputs, eval_naive(g, b)).within(1e-5));
}

TEST(Execute, MissingBindingThrows) {
  TensorGraph g = add_graph(4);
  EXPECT_THROW(execute(schedule(g), Bindings{}), Error);
}

TEST(Execute, UnfusedMatchesReference) {
  TensorGraph g = mha(64, 8);
  auto b = make_bindings(g, 9);
  auto u = execute_unfused(g, b);
  EXPECT_EQ(u.outputs, eval_naive(g, b));
}

TEST(Compare, IdenticalAndTinyDifference) {
  Tensor a = filled({"N"}, {1}, {1.0});
  EXPECT_EQ(compare(a, a).max_abs, 0.0);
  EXPECT_EQ(compare(a, a).norm_rel, 0.0);
  Tensor b = filled({"N"}, {1}, {1.0 + 1e-6});
  auto c = compare(b, a);
  EXPECT_NEAR(c.max_rel, 1e-6, 1e-12);
  EXPECT_NEAR(c.norm_rel, 1e-6, 1e-12);
  EXPECT_TRUE(c.within(2e-6));
  EXPECT_FALSE(c.within(5e-7));
}

TEST(Compare, ShapeMismatchAndNan) {
  Tensor a = filled({"N"}, {2}, {1.0, 2.0});
  Tensor b = filled({"N"}, {1}, {1.0});
  EXPECT_TRUE(compare(a, b).shape_mismatch);
  EXPECT_FALSE(compare(a, b).within(1.0));
  Tensor c = filled({"N"}, {2}, {1.0, std::nan("")});
  EXPECT_FALSE(compare(c, a).within(1.0));
}
