#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tilefuse/dsl.hpp"
#include "tilefuse/executor.hpp"
#include "tilefuse/report.hpp"
#include "tilefuse/variants.hpp"

namespace tf = tilefuse;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

struct Config {
  std::string variant;
  std::string input;
  int64_t n = 256;
  std::vector<std::string> tiles;
  uint64_t seed = 0;
  int seeds = 1;
  std::string dtype;  // empty: program default (f64 for variants)
  bool no_semantic = false, no_structural = false, no_tiled = false;
  bool emit_plan = false;
  bool trace = false;
  bool parallel = false;
  unsigned threads = 0;
  bool flip_rescale = false;
  std::string format = "human";
  std::string sweep;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

tf::TensorGraph load_graph(const Config& c, int64_t n) {
  if (c.variant.empty() == c.input.empty())
    throw UsageError("exactly one of --variant or --input is required");
  tf::DType dt = c.dtype.empty() ? tf::DType::F64 : tf::parse_dtype(c.dtype);
  if (!c.variant.empty()) {
    if (c.variant.rfind("twin_matmul", 0) == 0) return tf::twin_matmul(n, n, 64, 64, dt);
    return tf::build_variant(tf::find_variant(c.variant, n, dt));
  }
  std::ifstream f(c.input);
  if (!f) throw UsageError("cannot open '" + c.input + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  tf::TensorGraph g = tf::parse_dsl(ss.str());
  if (!c.dtype.empty()) g.dtype = dt;
  return g;
}

tf::ScheduleOptions schedule_options(const Config& c) {
  tf::ScheduleOptions o;
  o.fusion.semantic = !c.no_semantic;
  o.fusion.structural = !c.no_structural;
  o.fusion.tiled = !c.no_tiled;
  for (const auto& t : c.tiles) {
    auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--tile expects dim=size, got '" + t + "'");
    int64_t size = 0;
    try {
      size = std::stoll(t.substr(eq + 1));
    } catch (const std::exception&) {
      throw UsageError("--tile size must be an integer, got '" + t + "'");
    }
    if (size < 1) throw UsageError("--tile size must be >= 1, got '" + t + "'");
    o.tile_overrides[t.substr(0, eq)] = size;
  }
  return o;
}

tf::ExecOptions exec_options(const Config& c) {
  tf::ExecOptions o;
  o.parallel = c.parallel;
  o.threads = c.threads;
  o.trace = c.trace;
  o.fault_flip_rescale = c.flip_rescale;
  return o;
}

std::vector<int64_t> sweep_values(const Config& c) {
  if (c.sweep.empty()) return {c.n};
  std::string s = c.sweep;
  if (s.rfind("n=", 0) == 0) s = s.substr(2);
  std::vector<int64_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw UsageError("--sweep expects n=a,b,c");
    }
  }
  if (out.empty()) throw UsageError("--sweep expects n=a,b,c");
  return out;
}

void print_plan(const Config& c, const tf::KernelSchedule& s) {
  if (c.format == "json")
    std::cout << tf::plan_json(s).dump(2) << "\n";
  else
    std::cout << tf::plan_text(s);
}

int cmd_compile(const Config& c) {
  auto g = load_graph(c, c.n);
  auto s = tf::schedule(g, schedule_options(c));
  print_plan(c, s);
  return kOk;
}

int cmd_run(const Config& c) {
  auto g = load_graph(c, c.n);
  auto s = tf::schedule(g, schedule_options(c));
  if (c.emit_plan) print_plan(c, s);
  auto r = tf::execute(s, tf::make_bindings(g, c.seed), exec_options(c));
  if (c.format == "json") {
    tf::json j;
    j["traffic"] = r.traffic;
    for (const auto& [name, t] : r.outputs) {
      double sum = 0.0;
      for (double v : t.data) sum += v;
      j["outputs"][name] = {{"dims", t.dims}, {"shape", t.shape}, {"sum", sum}};
    }
    if (r.trace) j["trace"] = {{"blocks", r.trace->blocks}, {"write_overlaps", r.trace->write_overlaps}};
    std::cout << j.dump(2) << "\n";
  } else {
    for (const auto& [name, t] : r.outputs) {
      double sum = 0.0;
      for (double v : t.data) sum += v;
      std::cout << name << ": " << t.numel() << " elements, sum " << sum << "\n";
    }
    std::cout << tf::traffic_text(r.traffic);
    if (r.trace) {
      for (const auto& l : r.trace->lines) std::cout << l << "\n";
      std::cout << "blocks " << r.trace->blocks << ", write overlaps " << r.trace->write_overlaps
                << "\n";
    }
  }
  return kOk;
}

int cmd_verify(const Config& c) {
  auto g = load_graph(c, c.n);
  auto s = tf::schedule(g, schedule_options(c));
  if (c.emit_plan) print_plan(c, s);
  const double tol = g.dtype == tf::DType::F32 ? 1e-5 : 1e-10;
  int failures = 0;
  double worst = 0.0;
  tf::json runs = tf::json::array();
  for (int i = 0; i < c.seeds; ++i) {
    uint64_t seed = c.seed + static_cast<uint64_t>(i);
    auto b = tf::make_bindings(g, seed);
    auto fused = tf::execute(s, b, exec_options(c));
    auto ref = tf::eval_naive(g, b);
    auto cmp = tf::compare(fused.outputs, ref);
    bool ok = cmp.within(tol);
    worst = std::max(worst, cmp.norm_rel);
    if (!ok) ++failures;
    if (c.format == "json")
      runs.push_back({{"seed", seed}, {"ok", ok}, {"rel_error", cmp.norm_rel},
                      {"elementwise_rel_error", cmp.max_rel}, {"max_abs_error", cmp.max_abs}});
    else
      std::cout << "seed " << seed << ": " << (ok ? "ok" : "MISMATCH") << "  rel error "
                << cmp.norm_rel << "  elementwise " << cmp.max_rel << "\n";
  }
  if (c.format == "json")
    std::cout << tf::json{{"tolerance", tol}, {"failures", failures}, {"worst", worst}, {"runs", runs}}
                     .dump(2)
              << "\n";
  else
    std::cout << (failures ? "FAIL" : "PASS") << ": " << c.seeds - failures << "/" << c.seeds
              << " seeds within " << tol << "\n";
  return failures ? kVerifyFailed : kOk;
}

int cmd_stats(const Config& c) {
  tf::json rows = tf::json::array();
  for (int64_t n : sweep_values(c)) {
    auto g = load_graph(c, n);
    auto s = tf::schedule(g, schedule_options(c));
    auto fused = tf::execute(s, tf::make_bindings(g, c.seed), exec_options(c));
    auto unfused = tf::unfused_traffic(g);
    auto ratio = [](int64_t a, int64_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    if (c.format == "json") {
      rows.push_back({{"n", n},
                      {"fused", fused.traffic},
                      {"unfused", unfused},
                      {"traffic_ratio", ratio(unfused.total(), fused.traffic.total())}});
    } else {
      std::cout << "n = " << n << "\nfused   " << tf::traffic_text(fused.traffic) << "unfused "
                << tf::traffic_text(unfused) << "unfused/fused traffic "
                << ratio(unfused.total(), fused.traffic.total()) << "\n";
    }
  }
  if (c.format == "json") std::cout << rows.dump(2) << "\n";
  return kOk;
}

int cmd_corpus(const Config& c) {
  tf::DType dt = c.dtype.empty() ? tf::DType::F64 : tf::parse_dtype(c.dtype);
  for (const auto& spec : tf::corpus(c.n, dt)) {
    auto g = tf::build_variant(spec);
    if (c.format == "json") {
      std::cout << tf::json{{"name", spec.name()}, {"nodes", g.size()}}.dump() << "\n";
    } else {
      std::cout << spec.name() << "  (" << g.size() << " nodes)\n";
      if (c.emit_plan) std::cout << tf::to_dsl(g) << "\n";
    }
  }
  std::cout << (c.format == "json" ? "" : "twin_matmul\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tilefuse: fuse and run tensor programs on a tiled interpreter"};
  app.require_subcommand(1);
  Config c;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--variant", c.variant, "corpus variant name (see `corpus`)");
    sub->add_option("--input", c.input, "DSL program file");
    sub->add_option("--n", c.n, "sequence length for corpus variants")->check(CLI::PositiveNumber);
    sub->add_option("--tile", c.tiles, "tile size hint dim=size (repeatable)");
    sub->add_option("--seed", c.seed, "input seed");
    sub->add_option("--dtype", c.dtype, "storage dtype")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_flag("--no-semantic", c.no_semantic, "disable online-reduction rewriting");
    sub->add_flag("--no-structural", c.no_structural, "disable structural fusion");
    sub->add_flag("--no-tiled", c.no_tiled, "disable tiling-aware fusion");
    sub->add_flag("--emit-plan", c.emit_plan, "print the kernel plan");
    sub->add_option("--format", c.format, "output format")->check(CLI::IsMember({"human", "json"}));
  };
  auto add_exec = [&](CLI::App* sub) {
    sub->add_flag("--trace", c.trace, "log every block and check write-set disjointness");
    sub->add_flag("--parallel", c.parallel, "run blocks on worker threads");
    sub->add_option("--threads", c.threads, "worker threads for --parallel");
    sub->add_flag("--fault-flip-rescale", c.flip_rescale, "invert the running-max correction (test hook)");
  };

  auto* compile = app.add_subcommand("compile", "schedule a program and print the kernel plan");
  add_common(compile);
  auto* run = app.add_subcommand("run", "execute the fused schedule");
  add_common(run);
  add_exec(run);
  auto* verify = app.add_subcommand("verify", "compare fused execution against the reference");
  add_common(verify);
  add_exec(verify);
  verify->add_option("--seeds", c.seeds, "number of seeds")->check(CLI::PositiveNumber);
  auto* stats = app.add_subcommand("stats", "fused vs unfused traffic");
  add_common(stats);
  add_exec(stats);
  stats->add_option("--sweep", c.sweep, "sequence lengths, e.g. n=256,512,1024");
  auto* corpus = app.add_subcommand("corpus", "list corpus variants");
  corpus->add_option("--n", c.n, "sequence length")->check(CLI::PositiveNumber);
  corpus->add_option("--dtype", c.dtype)->check(CLI::IsMember({"f32", "f64"}));
  corpus->add_option("--format", c.format)->check(CLI::IsMember({"human", "json"}));
  corpus->add_flag("--emit-plan", c.emit_plan, "print each variant as a program");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*compile) return cmd_compile(c);
    if (*run) return cmd_run(c);
    if (*verify) return cmd_verify(c);
    if (*stats) return cmd_stats(c);
    if (*corpus) return cmd_corpus(c);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const tf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
