#include "tsgp/expr.hpp"

#include <algorithm>
#include <sstream>

namespace tsgp {

std::size_t prefix_subtree_end(std::span<const TokenId> seq, std::size_t begin) {
  const Vocab& v = vocab();
  int need = 1;
  for (std::size_t i = begin; i < seq.size(); ++i) {
    need += v.arity(seq[i]) - 1;
    if (need == 0) return i + 1;
  }
  return static_cast<std::size_t>(-1);
}

Expr parse_prefix(const TokenSeq& seq) {
  const Vocab& v = vocab();
  if (seq.empty()) throw ParseError("empty token sequence", 0);
  int need = 1;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] >= v.size()) throw ParseError("token id out of range", i);
    if (!v.is_expression_token(seq[i]))
      throw ParseError("non-expression token '" + v.str(seq[i]) + "'", i);
    if (need == 0) throw ParseError("trailing tokens after complete expression", i);
    need += v.arity(seq[i]) - 1;
  }
  if (need != 0)
    throw ParseError("incomplete expression (" + std::to_string(need) + " open slots)", seq.size());
  return Expr(seq);
}

Expr parse_prefix(const std::vector<std::string>& tokens) {
  const Vocab& v = vocab();
  TokenSeq seq;
  seq.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto id = v.find(tokens[i]);
    if (!id) throw ParseError("unknown token '" + tokens[i] + "'", i);
    seq.push_back(*id);
  }
  return parse_prefix(seq);
}

Expr parse_prefix(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> tokens;
  for (std::string t; in >> t;) tokens.push_back(std::move(t));
  return parse_prefix(tokens);
}

Expr Expr::variable(int one_based) { return Expr(TokenSeq{vocab().variable(one_based)}); }

Expr Expr::constant(TokenId token) {
  if (vocab().kind(token) != TokenKind::constant) throw Error("token '" + vocab().str(token) + "' is not a constant");
  return Expr(TokenSeq{token});
}

Expr Expr::constant(double value) {
  auto t = vocab().constant_token(value);
  if (!t) throw Error("value " + std::to_string(value) + " is not a vocabulary constant");
  return Expr(TokenSeq{*t});
}

Expr Expr::op(OpKind kind, const Expr& left, const Expr& right) {
  if (left.empty() || right.empty()) throw Error("operator child is empty");
  TokenSeq nodes;
  nodes.reserve(1 + left.size() + right.size());
  nodes.push_back(vocab().op(kind));
  nodes.insert(nodes.end(), left.nodes_.begin(), left.nodes_.end());
  nodes.insert(nodes.end(), right.nodes_.begin(), right.nodes_.end());
  return Expr(std::move(nodes));
}

std::size_t Expr::subtree_end(std::size_t i) const { return prefix_subtree_end(nodes_, i); }

Expr Expr::subtree(std::size_t i) const {
  const auto e = subtree_end(i);
  return Expr(TokenSeq(nodes_.begin() + static_cast<std::ptrdiff_t>(i),
                       nodes_.begin() + static_cast<std::ptrdiff_t>(e)));
}

Expr Expr::replace_subtree(std::size_t i, const Expr& replacement) const {
  const auto e = subtree_end(i);
  TokenSeq nodes;
  nodes.reserve(nodes_.size() - (e - i) + replacement.size());
  nodes.insert(nodes.end(), nodes_.begin(), nodes_.begin() + static_cast<std::ptrdiff_t>(i));
  nodes.insert(nodes.end(), replacement.nodes_.begin(), replacement.nodes_.end());
  nodes.insert(nodes.end(), nodes_.begin() + static_cast<std::ptrdiff_t>(e), nodes_.end());
  return Expr(std::move(nodes));
}

int Expr::max_variable() const {
  const Vocab& v = vocab();
  int m = 0;
  for (TokenId t : nodes_)
    if (v.kind(t) == TokenKind::variable) m = std::max(m, v.variable_index(t));
  return m;
}

int depth(const Expr& e) {
  // Reverse scan: each subtree's depth is pushed once its children are known.
  const Vocab& v = vocab();
  std::vector<int> stack;
  stack.reserve(e.size());
  for (std::size_t i = e.size(); i-- > 0;) {
    if (v.arity(e.token(i)) == 0) {
      stack.push_back(1);
    } else {
      const int a = stack.back();
      stack.pop_back();
      const int b = stack.back();
      stack.back() = 1 + std::max(a, b);
    }
  }
  return stack.empty() ? 0 : stack.back();
}

std::vector<std::string> to_strings(const TokenSeq& seq) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (TokenId t : seq) out.push_back(vocab().str(t));
  return out;
}

std::string to_string(const TokenSeq& seq) {
  std::string s;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) s += ' ';
    s += vocab().str(seq[i]);
  }
  return s;
}

std::string to_string(const Expr& e) { return to_string(e.tokens()); }

}  // namespace tsgp
