#pragma once

#include <span>
#include <string>
#include <vector>

#include "tsgp/common.hpp"
#include "tsgp/vocab.hpp"

namespace tsgp {

/// Immutable expression tree stored as its prefix (Polish) token sequence.
///
/// Every node maps to exactly one vocabulary token, so the flat prefix form is the tree:
/// node i's left child is node i+1 and its right child starts at subtree_end(i+1).
/// Construction always validates, so an Expr is parse-valid by type.
class Expr {
 public:
  Expr() = default;

  static Expr variable(int one_based);
  static Expr constant(TokenId token);
  /// Constant by value; throws if the value is not a vocabulary constant.
  static Expr constant(double value);
  static Expr op(OpKind kind, const Expr& left, const Expr& right);

  static Expr add(const Expr& a, const Expr& b) { return op(OpKind::add, a, b); }
  static Expr sub(const Expr& a, const Expr& b) { return op(OpKind::sub, a, b); }
  static Expr mul(const Expr& a, const Expr& b) { return op(OpKind::mul, a, b); }
  static Expr div(const Expr& a, const Expr& b) { return op(OpKind::div, a, b); }
  static Expr pow(const Expr& a, const Expr& b) { return op(OpKind::pow, a, b); }

  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }
  const TokenSeq& tokens() const { return nodes_; }
  TokenId token(std::size_t i) const { return nodes_[i]; }
  TokenId root() const { return nodes_.front(); }
  bool is_leaf() const { return nodes_.size() == 1; }

  /// One past the last node of the subtree rooted at node i.
  std::size_t subtree_end(std::size_t i) const;
  Expr subtree(std::size_t i) const;
  Expr left() const { return subtree(1); }
  Expr right() const { return subtree(subtree_end(1)); }
  /// Copy with the subtree at node i replaced by `replacement`.
  Expr replace_subtree(std::size_t i, const Expr& replacement) const;

  /// Largest variable index used (0 if none).
  int max_variable() const;

  bool operator==(const Expr&) const = default;
  auto operator<=>(const Expr&) const = default;

 private:
  friend Expr parse_prefix(const TokenSeq& seq);
  explicit Expr(TokenSeq nodes) : nodes_(std::move(nodes)) {}

  TokenSeq nodes_;
};

/// Throws ParseError on incomplete sequences, trailing tokens, and non-expression tokens.
Expr parse_prefix(const TokenSeq& seq);
Expr parse_prefix(const std::vector<std::string>& tokens);
/// Parses a whitespace-separated prefix string such as "add x1 mul x2 0.3".
Expr parse_prefix(const std::string& text);

inline const TokenSeq& to_prefix(const Expr& e) { return e.tokens(); }
std::vector<std::string> to_strings(const TokenSeq& seq);
/// Space-separated prefix rendering.
std::string to_string(const Expr& e);
std::string to_string(const TokenSeq& seq);

inline std::size_t node_count(const Expr& e) { return e.size(); }
/// Nodes on the longest root-to-leaf path; a leaf has depth 1.
int depth(const Expr& e);

/// Index of the first token after the complete subtree starting at `begin`, or npos
/// if the range ends first.
std::size_t prefix_subtree_end(std::span<const TokenId> seq, std::size_t begin);

}  // namespace tsgp
