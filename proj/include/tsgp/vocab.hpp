#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tsgp {

using TokenId = std::uint16_t;
using TokenSeq = std::vector<TokenId>;

enum class TokenKind : std::uint8_t { special, op, variable, constant, condition };

enum class OpKind : std::uint8_t { add, sub, mul, div, pow };

inline constexpr int kMaxVariables = 5;
inline constexpr int kMinDim = 2;
inline constexpr int kMaxDim = 5;
inline constexpr int kSdBins = 32;
inline constexpr std::uint32_t kVocabVersion = 1;

/// Closed vocabulary: 4 special tokens, 5 binary operators, x1..x5, 21 constants,
/// then the condition tokens D2..D5 and SD_BIN_0..SD_BIN_31. Ids are dense and frozen.
class Vocab {
 public:
  static const Vocab& instance();

  std::size_t size() const { return tokens_.size(); }
  std::span<const std::string> tokens() const { return tokens_; }
  const std::string& str(TokenId id) const;
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;

  TokenKind kind(TokenId id) const { return kinds_.at(id); }
  /// 2 for operators, 0 otherwise (conditions and specials are leaves that never parse).
  int arity(TokenId id) const { return kind(id) == TokenKind::op ? 2 : 0; }
  int arity(std::string_view token) const { return arity(id(token)); }
  bool is_expression_token(TokenId id) const {
    const auto k = kind(id);
    return k == TokenKind::op || k == TokenKind::variable || k == TokenKind::constant;
  }
  bool is_terminal(TokenId id) const {
    const auto k = kind(id);
    return k == TokenKind::variable || k == TokenKind::constant;
  }

  TokenId pad() const { return 0; }
  TokenId unk() const { return 1; }
  TokenId start() const { return 2; }
  TokenId end() const { return 3; }

  TokenId op(OpKind k) const { return static_cast<TokenId>(first_op_ + static_cast<int>(k)); }
  OpKind op_kind(TokenId id) const { return static_cast<OpKind>(id - first_op_); }
  TokenId variable(int one_based) const;
  /// 1-based variable index of a variable token.
  int variable_index(TokenId id) const { return id - first_var_ + 1; }
  double constant_value(TokenId id) const { return values_.at(id); }
  /// Token whose value is exactly `v`, if the vocabulary has one.
  std::optional<TokenId> constant_token(double v) const;
  TokenId dim_token(int d) const;
  TokenId sd_bin_token(int bin) const;
  int sd_bin_index(TokenId id) const { return id - first_sd_bin_; }
  int dim_of_token(TokenId id) const { return id - first_dim_ + kMinDim; }

  std::span<const TokenId> operators() const { return ops_; }
  std::span<const TokenId> erc_constants() const { return erc_; }
  std::span<const TokenId> all_constants() const { return constants_; }

  /// FNV-1a over the newline-joined token list; stored in checkpoints.
  std::uint64_t hash() const;
  /// Versioned text rendering: header line, then "<id>\t<token>" per line.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;
  /// Checks that a vocabulary file matches this vocabulary exactly.
  static void verify_file(const std::filesystem::path& path);

 private:
  Vocab();
  TokenId add(std::string token, TokenKind kind, double value = 0.0);

  std::vector<std::string> tokens_;
  std::vector<TokenKind> kinds_;
  std::vector<double> values_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<TokenId> ops_, erc_, constants_;
  TokenId first_op_ = 0, first_var_ = 0, first_dim_ = 0, first_sd_bin_ = 0;
};

inline const Vocab& vocab() { return Vocab::instance(); }

}  // namespace tsgp
