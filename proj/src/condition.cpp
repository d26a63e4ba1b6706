#include "tsgp/condition.hpp"

#include <cmath>

#include "tsgp/common.hpp"

namespace tsgp {

int SdBinner::bin(double sd) const {
  if (!(sd > 0.0) || !std::isfinite(sd)) throw Error("semantic distance must be positive and finite");
  const double b = std::floor(n_bins * std::log(sd / lo) / std::log(hi / lo));
  if (b < 0.0) return 0;
  if (b > n_bins - 1) return n_bins - 1;
  return static_cast<int>(b);
}

int quantize_sd(double sd) { return SdBinner{}.bin(sd); }

TokenId sd_token(double sd) { return vocab().sd_bin_token(quantize_sd(sd)); }

TokenSeq encode_condition(const TokenSeq& parent, double sd, int d) {
  if (d < kMinDim || d > kMaxDim) throw Error("condition dimensionality must be in 2..5");
  if (parent.size() > kMaxExprTokens)
    throw Error("parent has " + std::to_string(parent.size()) + " tokens, more than " + std::to_string(kMaxExprTokens));
  TokenSeq out;
  out.reserve(parent.size() + 2);
  out.push_back(vocab().dim_token(d));
  out.push_back(sd_token(sd));
  out.insert(out.end(), parent.begin(), parent.end());
  return out;
}

}  // namespace tsgp
