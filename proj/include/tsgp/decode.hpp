#pragma once

#include <span>
#include <vector>

#include "tsgp/checkpoint.hpp"
#include "tsgp/condition.hpp"
#include "tsgp/engine.hpp"
#include "tsgp/model.hpp"

namespace tsgp {

/// Prefix-order decoding budget: `need` open subtree slots, `emitted` expression tokens so far.
struct DecodeState {
  int need = 1;
  int emitted = 0;
  int max_len = static_cast<int>(kMaxExprTokens);
  int d = kMinDim;

  bool complete() const { return need == 0; }
  /// Applies an allowed expression token.
  void advance(TokenId token);
};

/// mask[id] is true for tokens that keep the partial sequence completable within max_len:
/// [end] iff need == 0; operators iff need + 1 <= max_len - emitted - 1; terminals iff need >= 1;
/// x_j only for j <= d; condition and other special tokens never.
std::vector<char> allowed_tokens(const DecodeState& state, std::size_t vocab_size);

struct DecodeConfig {
  int max_len = static_cast<int>(kMaxExprTokens);
  double temperature = 1.0;  // 0 = greedy argmax
};

/// Batch-synchronous masked autoregressive decoding, one decoder step per token for all unfinished
/// sequences. Outputs align with inputs; every output parses and uses only x1..xd.
std::vector<TokenSeq> constrained_decode(const ModelParams<float>& params, std::span<const TokenSeq> enc, int d,
                                         const DecodeConfig& cfg, Rng& rng);

struct TsgpConfig {
  double sd_target = 1.0;
  DecodeConfig decode;
  int max_depth = 17;
};

/// Each parent is encoded as [D_d, SD_BIN(sd_target)] + parent and replaced by one decoded offspring.
/// Parents over 100 tokens and offspring deeper than max_depth keep the parent (counted).
class TsgpVariation final : public VariationOperator {
 public:
  TsgpVariation(const ModelParams<float>& params, TsgpConfig cfg, int d);
  std::string name() const override { return "tsgp"; }
  std::vector<Expr> vary(std::span<const Expr> parents, std::span<const Expr> mates,
                         const SlotStreams& streams) override;
  int last_passthrough() const override { return long_parents_ + deep_offspring_; }
  int last_long_parents() const { return long_parents_; }
  int last_deep_offspring() const { return deep_offspring_; }

 private:
  const ModelParams<float>& params_;
  TsgpConfig cfg_;
  int d_;
  int long_parents_ = 0;
  int deep_offspring_ = 0;
};

/// evolve() with TSGP variation at a constant target SD. The checkpoint must have been trained on
/// archives covering problem.d.
RunLog tsgp_search(const SearchConfig& cfg, const TsgpConfig& tcfg, const Checkpoint& model,
                   const RegressionProblem& problem);

}  // namespace tsgp
