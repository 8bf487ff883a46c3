#pragma once

// Line-oriented textual form of a TensorGraph.
//
//   dtype f32
//   dim M = 256
//   q = input dims=[B, H, M, D]
//   mask = input dims=[M, N] init=causal
//   s = contract(q, k) over=[D] dims=[B, H, M, N]
//   m = reduce_max(s) over=[N]
//   mb = broadcast(m) dims=[B, H, M, N]
//   e = exp(sub(s, mb))
//   o = online_reduce(s, v) over=[N] normalize=1
//   out = output(o)
//
// Any right-hand side that is not one of the keyword forms is a pointwise
// expression; its tensor operands are taken in order of first appearance.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tilefuse/tensor_ir.hpp"

namespace tilefuse {

namespace dsl {

struct Token {
  enum Kind { Ident, Number, Punct, End } kind = End;
  std::string text;
  double number = 0.0;
};

class Lexer {
 public:
  Lexer(std::string_view line, int lineno) : s_(line), line_(lineno) { advance(); }

  const Token& peek() const { return tok_; }
  int line() const { return line_; }

  Token take() {
    Token t = tok_;
    advance();
    return t;
  }

  bool accept(std::string_view punct) {
    if (tok_.kind == Token::Punct && tok_.text == punct) {
      advance();
      return true;
    }
    return false;
  }

  void expect(std::string_view punct) {
    if (!accept(punct)) fail("expected '" + std::string(punct) + "'" + found());
  }

  std::string ident() {
    if (tok_.kind != Token::Ident) fail("expected a name" + found());
    return take().text;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error("line " + std::to_string(line_) + ": " + msg);
  }

  std::string found() const {
    if (tok_.kind == Token::End) return ", found end of line";
    return ", found '" + tok_.text + "'";
  }

 private:
  void advance() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    if (pos_ >= s_.size()) {
      tok_ = Token{};
      return;
    }
    const char c = s_[pos_];
    auto is_ident = [](char ch) {
      return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '.';
    };
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t b = pos_;
      while (pos_ < s_.size() && is_ident(s_[pos_])) ++pos_;
      tok_ = Token{Token::Ident, std::string(s_.substr(b, pos_ - b)), 0.0};
      return;
    }
    const bool signed_num = (c == '-' || c == '+') && pos_ + 1 < s_.size() &&
                            (std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])) ||
                             s_[pos_ + 1] == '.' || s_.substr(pos_ + 1, 3) == "inf");
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || signed_num) {
      size_t b = pos_;
      if (signed_num) ++pos_;
      if (s_.substr(pos_, 3) == "inf") {
        pos_ += 3;
        tok_ = Token{Token::Number, std::string(s_.substr(b, pos_ - b)), c == '-' ? kNegInf : kPosInf};
        return;
      }
      while (pos_ < s_.size() &&
             (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
              ((s_[pos_] == '-' || s_[pos_] == '+') && (s_[pos_ - 1] == 'e' || s_[pos_ - 1] == 'E'))))
        ++pos_;
      std::string text(s_.substr(b, pos_ - b));
      double v = 0.0;
      const char* first = text.data() + (text[0] == '+' ? 1 : 0);
      auto [ptr, ec] = std::from_chars(first, text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) fail("malformed number '" + text + "'");
      tok_ = Token{Token::Number, text, v};
      return;
    }
    if (std::string_view("()[],=").find(c) != std::string_view::npos) {
      tok_ = Token{Token::Punct, std::string(1, c), 0.0};
      ++pos_;
      return;
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  std::string_view s_;
  int line_;
  size_t pos_ = 0;
  Token tok_;
};

inline std::string strip_comment(std::string_view line) {
  auto h = line.find('#');
  return std::string(h == std::string_view::npos ? line : line.substr(0, h));
}

class Parser {
 public:
  TensorGraph parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      std::string line = strip_comment(raw);
      Lexer lx(line, lineno);
      if (lx.peek().kind == Token::End) continue;
      statement(lx);
    }
    TensorGraph g = b_.build();
    auto diags = validate(g);
    if (!diags.empty()) {
      std::string msg = "invalid program";
      for (const auto& d : diags) {
        msg += "\n  ";
        if (d.node != kNoNode) msg += "line " + std::to_string(line_of_[d.node]) + ": ";
        msg += d.message;
      }
      throw Error(msg);
    }
    return g;
  }

 private:
  void statement(Lexer& lx) {
    std::string head = lx.ident();
    if (head == "dim") {
      std::string name = lx.ident();
      lx.expect("=");
      int64_t e = integer(lx);
      if (e < 1) lx.fail("extent of '" + name + "' must be >= 1");
      if (dims_declared_.count(name)) lx.fail("dimension '" + name + "' declared twice");
      dims_declared_.insert(name);
      b_.dim(name, e);
      end(lx);
      return;
    }
    if (head == "dtype" && lx.peek().kind == Token::Ident) {
      std::string t = lx.ident();
      try {
        dtype_ = parse_dtype(t);
      } catch (const Error&) {
        lx.fail("unknown dtype '" + t + "'");
      }
      b_.set_dtype(dtype_);
      end(lx);
      return;
    }
    lx.expect("=");
    if (names_.count(head)) lx.fail("tensor '" + head + "' defined twice");
    NodeId id = rhs(lx, head);
    names_[head] = id;
    line_of_[id] = lx.line();
    end(lx);
  }

  NodeId rhs(Lexer& lx, const std::string& name) {
    const Token& t = lx.peek();
    if (t.kind == Token::Ident) {
      const std::string kw = t.text;
      if (kw == "input") {
        lx.take();
        auto opts = options(lx);
        if (!opts.dims) lx.fail("input '" + name + "' needs dims=[...]");
        return b_.input(name, *opts.dims, opts.init.value_or(InputInit{}));
      }
      if (kw == "broadcast" || kw == "reduce_sum" || kw == "reduce_max" || kw == "contract" ||
          kw == "online_reduce" || kw == "output") {
        lx.take();
        auto args = tensor_args(lx);
        auto opts = options(lx);
        auto need = [&](size_t lo, size_t hi) {
          if (args.size() < lo || args.size() > hi)
            lx.fail(kw + " takes " + std::to_string(lo) +
                    (lo == hi ? "" : "-" + std::to_string(hi)) + " operand(s)");
        };
        if (kw == "broadcast") {
          need(1, 1);
          if (!opts.dims) lx.fail("broadcast needs dims=[...]");
          return b_.broadcast(name, args[0], *opts.dims);
        }
        if (kw == "reduce_sum" || kw == "reduce_max") {
          need(1, 1);
          if (!opts.over) lx.fail(kw + " needs over=[...]");
          return b_.reduce(name, kw == "reduce_sum" ? Combiner::Sum : Combiner::Max, args[0],
                           *opts.over);
        }
        if (kw == "contract") {
          need(2, 2);
          if (!opts.over) lx.fail("contract needs over=[...]");
          return b_.contract(name, args[0], args[1], *opts.over, opts.dims.value_or(std::vector<std::string>{}));
        }
        if (kw == "online_reduce") {
          need(1, 2);
          if (!opts.over) lx.fail("online_reduce needs over=[...]");
          std::optional<NodeId> w;
          if (args.size() == 2) w = args[1];
          return b_.online_reduce(name, args[0], w, *opts.over, opts.normalize,
                                  opts.dims.value_or(std::vector<std::string>{}), opts.algebra.value_or("softmax"));
        }
        need(1, 1);
        return b_.output(name, args[0]);
      }
    }
    // Pointwise expression.
    std::vector<NodeId> operands;
    Expr e = expr(lx, operands);
    if (operands.empty()) lx.fail("pointwise expression needs at least one tensor operand");
    return b_.pointwise(name, operands, std::move(e));
  }

  Expr expr(Lexer& lx, std::vector<NodeId>& operands) {
    Token t = lx.take();
    if (t.kind == Token::Number) return ex::constant(t.number);
    if (t.kind != Token::Ident) lx.fail("expected an expression, found '" + t.text + "'");
    if (t.text == "inf") return ex::constant(kPosInf);
    if (!lx.accept("(")) {
      NodeId id = lookup(lx, t.text);
      for (size_t i = 0; i < operands.size(); ++i)
        if (operands[i] == id) return ex::arg(static_cast<int>(i));
      operands.push_back(id);
      return ex::arg(static_cast<int>(operands.size() - 1));
    }
    std::vector<Expr> kids;
    if (!lx.accept(")")) {
      do kids.push_back(expr(lx, operands));
      while (lx.accept(","));
      lx.expect(")");
    }
    auto arity = [&](size_t n) {
      if (kids.size() != n)
        lx.fail("'" + t.text + "' takes " + std::to_string(n) + " argument(s), got " +
                std::to_string(kids.size()));
    };
    if (t.text == "tanh") {
      arity(1);
      return ex::tanh(std::move(kids[0]));
    }
    if (t.text == "sigmoid") {
      arity(1);
      return ex::sigmoid(std::move(kids[0]));
    }
    auto op = expr_op_from_name(t.text);
    if (!op || *op == ExprOp::Arg || *op == ExprOp::Const) lx.fail("unknown function '" + t.text + "'");
    arity(static_cast<size_t>(expr_arity(*op)));
    return ex::node(*op, std::move(kids));
  }

  std::vector<NodeId> tensor_args(Lexer& lx) {
    std::vector<NodeId> out;
    lx.expect("(");
    if (lx.accept(")")) return out;
    do out.push_back(lookup(lx, lx.ident()));
    while (lx.accept(","));
    lx.expect(")");
    return out;
  }

  struct Options {
    std::optional<std::vector<std::string>> dims, over;
    std::optional<InputInit> init;
    std::optional<std::string> algebra;
    bool normalize = false;
  };

  Options options(Lexer& lx) {
    Options o;
    while (lx.peek().kind == Token::Ident) {
      std::string key = lx.ident();
      lx.expect("=");
      if (key == "dims") {
        o.dims = name_list(lx);
      } else if (key == "over") {
        o.over = name_list(lx);
      } else if (key == "normalize") {
        int64_t v = integer(lx);
        if (v != 0 && v != 1) lx.fail("normalize must be 0 or 1");
        o.normalize = v == 1;
      } else if (key == "algebra") {
        o.algebra = lx.ident();
      } else if (key == "init") {
        std::string kind = lx.ident();
        auto k = init_kind_from_name(kind);
        if (!k) lx.fail("unknown initializer '" + kind + "'");
        InputInit init{*k, 0.0};
        if (lx.accept("(")) {
          Token t = lx.take();
          if (t.kind != Token::Number) lx.fail("initializer parameter must be a number");
          init.param = t.number;
          lx.expect(")");
        }
        o.init = init;
      } else {
        lx.fail("unknown option '" + key + "'");
      }
    }
    return o;
  }

  std::vector<std::string> name_list(Lexer& lx) {
    std::vector<std::string> out;
    lx.expect("[");
    if (lx.accept("]")) return out;
    do out.push_back(lx.ident());
    while (lx.accept(","));
    lx.expect("]");
    return out;
  }

  int64_t integer(Lexer& lx) {
    Token t = lx.take();
    if (t.kind != Token::Number || t.number != std::floor(t.number) || !std::isfinite(t.number))
      lx.fail("expected an integer, found '" + t.text + "'");
    return static_cast<int64_t>(t.number);
  }

  NodeId lookup(Lexer& lx, const std::string& name) {
    auto it = names_.find(name);
    if (it == names_.end()) lx.fail("unknown tensor '" + name + "'");
    return it->second;
  }

  void end(Lexer& lx) {
    if (lx.peek().kind != Token::End) lx.fail("unexpected trailing input" + lx.found());
  }

  GraphBuilder b_;
  DType dtype_ = DType::F64;
  std::set<std::string> dims_declared_;
  std::map<std::string, NodeId> names_;
  std::map<NodeId, int> line_of_;
};

inline std::string fmt_number(double v) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_list(const std::vector<std::string>& v) {
  std::string s = "[";
  for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s + "]";
}

inline std::string fmt_expr(const TensorGraph& g, const OpNode& n, const Expr& e) {
  switch (e.op) {
    case ExprOp::Arg: return g.node(n.inputs.at(static_cast<size_t>(e.arg))).name;
    case ExprOp::Const: return fmt_number(e.value);
    default: break;
  }
  std::string s = std::string(expr_op_name(e.op)) + "(";
  for (size_t i = 0; i < e.kids.size(); ++i) s += (i ? ", " : "") + fmt_expr(g, n, e.kids[i]);
  return s + ")";
}

}  // namespace dsl

inline TensorGraph parse_dsl(std::string_view text) { return dsl::Parser().parse(text); }

inline std::string to_dsl(const TensorGraph& g) {
  using namespace dsl;
  std::ostringstream out;
  out << "dtype " << dtype_name(g.dtype) << "\n";
  for (const auto& [d, e] : g.extents) out << "dim " << d << " = " << e << "\n";
  for (const auto& n : g.nodes) {
    auto name = [&](size_t i) { return g.node(n.inputs.at(i)).name; };
    out << n.name << " = ";
    switch (n.kind) {
      case OpKind::Input:
        out << "input dims=" << fmt_list(n.dims);
        if (n.input_init != InputInit{}) {
          out << " init=" << init_kind_name(n.input_init.kind);
          if (n.input_init.param != 0.0) out << "(" << fmt_number(n.input_init.param) << ")";
        }
        break;
      case OpKind::Pointwise:
        out << fmt_expr(g, n, n.expr);
        break;
      case OpKind::Broadcast:
        out << "broadcast(" << name(0) << ") dims=" << fmt_list(n.dims);
        break;
      case OpKind::Reduce:
        out << (n.combiner == Combiner::Sum ? "reduce_sum(" : "reduce_max(") << name(0)
            << ") over=" << fmt_list(n.reduce_dims);
        break;
      case OpKind::Contract:
        out << "contract(" << name(0) << ", " << name(1) << ") over=" << fmt_list(n.reduce_dims)
            << " dims=" << fmt_list(n.dims);
        break;
      case OpKind::OnlineReduce:
        out << "online_reduce(" << name(0);
        if (n.inputs.size() > 1) out << ", " << name(1);
        out << ") over=" << fmt_list(n.reduce_dims) << " dims=" << fmt_list(n.dims)
            << " normalize=" << (n.normalize ? 1 : 0) << " algebra=" << n.algebra;
        break;
      case OpKind::Output:
        out << "output(" << name(0) << ")";
        break;
    }
    out << "\n";
  }
  return out.str();
}

namespace dsl {

/// Expression with argument indices replaced by operand node ids.
inline Expr resolve(const OpNode& n, const Expr& e) {
  Expr r = e;
  if (e.op == ExprOp::Arg) r.arg = n.inputs.at(static_cast<size_t>(e.arg));
  for (size_t i = 0; i < e.kids.size(); ++i) r.kids[i] = resolve(n, e.kids[i]);
  return r;
}

}  // namespace dsl

/// Same nodes, in the same order, computing the same values. Pointwise
/// operand lists may be permuted as long as the expressions agree.
inline bool isomorphic(const TensorGraph& a, const TensorGraph& b) {
  if (a.dtype != b.dtype || a.extents != b.extents || a.size() != b.size() || a.outputs != b.outputs)
    return false;
  for (size_t i = 0; i < a.size(); ++i) {
    OpNode x = a.nodes[i], y = b.nodes[i];
    if (x.kind == OpKind::Pointwise && y.kind == OpKind::Pointwise) {
      if (dsl::resolve(x, x.expr) != dsl::resolve(y, y.expr)) return false;
      std::set<NodeId> xs(x.inputs.begin(), x.inputs.end()), ys(y.inputs.begin(), y.inputs.end());
      if (xs != ys) return false;
      x.expr = y.expr = Expr{};
      x.inputs = y.inputs = {};
    }
    if (!(x == y)) return false;
  }
  return true;
}

}  // namespace tilefuse
