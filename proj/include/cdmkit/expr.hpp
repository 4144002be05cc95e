#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdmkit/error.hpp"
#include "cdmkit/stats.hpp"

namespace cdmkit {

// Row expression over named columns, used for subsample predicates and
// indicator rules. Supports arithmetic, comparisons, && || ! and the literals
// true/false. A missing operand makes the result missing, except where the
// other side of && / || already decides it.
class Expr {
 public:
  static Expr parse(std::string_view text) {
    Expr e;
    e.text_ = std::string(text);
    Parser p{e.text_, 0, &e.vars_};
    e.root_ = p.parse_or();
    p.skip_ws();
    if (p.pos != e.text_.size())
      throw ValidationError("expression: unexpected '" + e.text_.substr(p.pos) + "' in \"" +
                            e.text_ + "\"");
    return e;
  }

  const std::string& text() const noexcept { return text_; }
  // Referenced variable names, in first-appearance order.
  const std::vector<std::string>& variables() const noexcept { return vars_; }

  // values[i] is the value of variables()[i] for the row being evaluated.
  double eval(std::span<const double> values) const { return root_->eval(values); }

  static bool truthy(double v) noexcept { return !std::isnan(v) && v != 0.0; }

 private:
  struct Node {
    enum class Kind { Num, Var, Neg, Not, Bin };
    Kind kind;
    double num = 0.0;
    std::size_t var = 0;
    std::string op;
    std::shared_ptr<const Node> lhs, rhs;

    double eval(std::span<const double> v) const {
      switch (kind) {
        case Kind::Num:
          return num;
        case Kind::Var:
          return v[var];
        case Kind::Neg:
          return -lhs->eval(v);
        case Kind::Not: {
          const double a = lhs->eval(v);
          if (std::isnan(a)) return a;
          return a == 0.0 ? 1.0 : 0.0;
        }
        case Kind::Bin:
          break;
      }
      const double a = lhs->eval(v);
      if (op == "&&") {
        if (!std::isnan(a) && a == 0.0) return 0.0;
        const double b = rhs->eval(v);
        if (!std::isnan(b) && b == 0.0) return 0.0;
        if (std::isnan(a) || std::isnan(b)) return stats::kMissing;
        return 1.0;
      }
      if (op == "||") {
        if (truthy(a)) return 1.0;
        const double b = rhs->eval(v);
        if (truthy(b)) return 1.0;
        if (std::isnan(a) || std::isnan(b)) return stats::kMissing;
        return 0.0;
      }
      const double b = rhs->eval(v);
      if (std::isnan(a) || std::isnan(b)) return stats::kMissing;
      if (op == "+") return a + b;
      if (op == "-") return a - b;
      if (op == "*") return a * b;
      if (op == "/") return b == 0.0 ? stats::kMissing : a / b;
      if (op == "==") return a == b ? 1.0 : 0.0;
      if (op == "!=") return a != b ? 1.0 : 0.0;
      if (op == "<") return a < b ? 1.0 : 0.0;
      if (op == "<=") return a <= b ? 1.0 : 0.0;
      if (op == ">") return a > b ? 1.0 : 0.0;
      return a >= b ? 1.0 : 0.0;  // ">="
    }
  };
  using NodePtr = std::shared_ptr<const Node>;

  struct Parser {
    const std::string& s;
    std::size_t pos;
    std::vector<std::string>* vars;

    void skip_ws() {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    bool accept(std::string_view tok) {
      skip_ws();
      if (s.compare(pos, tok.size(), tok) == 0) {
        pos += tok.size();
        return true;
      }
      return false;
    }
    [[noreturn]] void fail(const std::string& what) const {
      throw ValidationError("expression: " + what + " at offset " + std::to_string(pos) +
                            " in \"" + s + "\"");
    }
    static NodePtr bin(std::string op, NodePtr a, NodePtr b) {
      auto n = std::make_shared<Node>();
      n->kind = Node::Kind::Bin;
      n->op = std::move(op);
      n->lhs = std::move(a);
      n->rhs = std::move(b);
      return n;
    }

    NodePtr parse_or() {
      NodePtr lhs = parse_and();
      while (accept("||")) lhs = bin("||", lhs, parse_and());
      return lhs;
    }
    NodePtr parse_and() {
      NodePtr lhs = parse_not();
      while (accept("&&")) lhs = bin("&&", lhs, parse_not());
      return lhs;
    }
    NodePtr parse_not() {
      skip_ws();
      if (pos < s.size() && s[pos] == '!' && (pos + 1 >= s.size() || s[pos + 1] != '=')) {
        ++pos;
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Not;
        n->lhs = parse_not();
        return n;
      }
      return parse_cmp();
    }
    NodePtr parse_cmp() {
      NodePtr lhs = parse_add();
      for (const char* op : {"==", "!=", "<=", ">=", "<", ">"}) {
        if (accept(op)) return bin(op, lhs, parse_add());
      }
      return lhs;
    }
    NodePtr parse_add() {
      NodePtr lhs = parse_mul();
      for (;;) {
        if (accept("+"))
          lhs = bin("+", lhs, parse_mul());
        else if (accept("-"))
          lhs = bin("-", lhs, parse_mul());
        else
          return lhs;
      }
    }
    NodePtr parse_mul() {
      NodePtr lhs = parse_unary();
      for (;;) {
        if (accept("*"))
          lhs = bin("*", lhs, parse_unary());
        else if (accept("/"))
          lhs = bin("/", lhs, parse_unary());
        else
          return lhs;
      }
    }
    NodePtr parse_unary() {
      if (accept("-")) {
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Neg;
        n->lhs = parse_unary();
        return n;
      }
      return parse_primary();
    }
    NodePtr parse_primary() {
      skip_ws();
      if (pos >= s.size()) fail("unexpected end");
      if (accept("(")) {
        NodePtr inner = parse_or();
        if (!accept(")")) fail("expected ')'");
        return inner;
      }
      const char c = s[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        std::size_t used = 0;
        double v = 0.0;
        try {
          v = std::stod(s.substr(pos), &used);
        } catch (const std::exception&) {
          fail("bad number");
        }
        pos += used;
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Num;
        n->num = v;
        return n;
      }
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        const std::size_t start = pos;
        while (pos < s.size() &&
               (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_' || s[pos] == '.'))
          ++pos;
        std::string name = s.substr(start, pos - start);
        auto n = std::make_shared<Node>();
        if (name == "true" || name == "false") {
          n->kind = Node::Kind::Num;
          n->num = name == "true" ? 1.0 : 0.0;
          return n;
        }
        n->kind = Node::Kind::Var;
        auto it = std::find(vars->begin(), vars->end(), name);
        n->var = static_cast<std::size_t>(it - vars->begin());
        if (it == vars->end()) vars->push_back(std::move(name));
        return n;
      }
      fail(std::string("unexpected '") + c + "'");
    }
  };

  std::string text_;
  std::vector<std::string> vars_;
  NodePtr root_;
};

}  // namespace cdmkit
