#pragma once

#include "tsgp/vocab.hpp"

namespace tsgp {

inline constexpr std::size_t kMaxExprTokens = 100;
/// [D_d, SD_BIN_b] + up to 100 expression tokens.
inline constexpr std::size_t kMaxEncoderTokens = kMaxExprTokens + 2;

/// Log-spaced SD bins: bin = clamp(floor(n * ln(sd / lo) / ln(hi / lo)), 0, n - 1).
struct SdBinner {
  int n_bins = kSdBins;
  double lo = 1e-3;
  double hi = 100.0;

  /// Throws for sd <= 0 or non-finite sd; values above hi land in the top bin.
  int bin(double sd) const;
};

int quantize_sd(double sd);
TokenId sd_token(double sd);

/// [D_d, SD_BIN_b] followed by the parent tokens.
TokenSeq encode_condition(const TokenSeq& parent, double sd, int d);

}  // namespace tsgp
