#include "tsgp/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tsgp {

void DecodeState::advance(TokenId token) {
  const auto& v = vocab();
  if (!v.is_expression_token(token)) throw Error("decode state advanced with a non-expression token");
  need += v.arity(token) - 1;
  ++emitted;
}

std::vector<char> allowed_tokens(const DecodeState& s, std::size_t vocab_size) {
  const auto& v = vocab();
  std::vector<char> mask(vocab_size, 0);
  if (s.need == 0) {
    if (v.end() < vocab_size) mask[v.end()] = 1;
    return mask;
  }
  const bool op_ok = s.need + 1 <= s.max_len - s.emitted - 1;
  for (std::size_t id = 0; id < std::min(vocab_size, v.size()); ++id) {
    const auto t = static_cast<TokenId>(id);
    switch (v.kind(t)) {
      case TokenKind::op: mask[id] = op_ok; break;
      case TokenKind::variable: mask[id] = v.variable_index(t) <= s.d; break;
      case TokenKind::constant: mask[id] = 1; break;
      default: break;
    }
  }
  return mask;
}

namespace {

TokenId pick(const float* logits, const std::vector<char>& mask, double temperature, Rng& rng) {
  std::size_t best = mask.size();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] && (best == mask.size() || logits[i] > logits[best])) best = i;
  if (best == mask.size()) throw Error("empty decoding mask");
  if (temperature <= 0.0) return static_cast<TokenId>(best);
  std::vector<double> w(mask.size(), 0.0);
  double total = 0.0;
  const double top = logits[best];
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) total += w[i] = std::exp((static_cast<double>(logits[i]) - top) / temperature);
  double u = uniform01(rng) * total;
  std::size_t last = best;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    last = i;
    if (u < w[i]) return static_cast<TokenId>(i);
    u -= w[i];
  }
  return static_cast<TokenId>(last);
}

}  // namespace

std::vector<TokenSeq> constrained_decode(const ModelParams<float>& params, std::span<const TokenSeq> enc, int d,
                                         const DecodeConfig& cfg, Rng& rng) {
  if (d < kMinDim || d > kMaxDim) throw Error("decoding dimensionality must be in 2..5");
  if (cfg.max_len < 1 || cfg.max_len + 1 > params.config.max_positions)
    throw Error("decode max_len must be in 1..max_positions-1");
  if (static_cast<std::size_t>(params.config.vocab_size) != vocab().size())
    throw Error("model vocabulary size differs from the closed vocabulary");
  std::vector<TokenSeq> out(enc.size());
  if (enc.empty()) return out;

  IncrementalDecoder<float> dec(params, enc);
  std::vector<DecodeState> state(enc.size(), DecodeState{1, 0, cfg.max_len, d});
  std::vector<std::size_t> active(enc.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  std::vector<TokenId> feed(enc.size(), vocab().start());

  while (!active.empty()) {
    std::vector<TokenId> toks;
    toks.reserve(active.size());
    for (std::size_t id : active) toks.push_back(feed[id]);
    const Mat<float> logits = dec.step(active, toks);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      const std::size_t id = active[r];
      const auto mask = allowed_tokens(state[id], vocab().size());
      const TokenId t = pick(logits.row(static_cast<Eigen::Index>(r)).data(), mask, cfg.temperature, rng);
      if (t == vocab().end()) continue;
      state[id].advance(t);
      out[id].push_back(t);
      feed[id] = t;
      still.push_back(id);
    }
    active = std::move(still);
  }
  return out;
}

TsgpVariation::TsgpVariation(const ModelParams<float>& params, TsgpConfig cfg, int d)
    : params_(params), cfg_(cfg), d_(d) {
  if (d < kMinDim || d > kMaxDim) throw Error("TSGP dimensionality must be in 2..5");
  quantize_sd(cfg_.sd_target);  // validates the target
}

std::vector<Expr> TsgpVariation::vary(std::span<const Expr> parents, std::span<const Expr>, const SlotStreams& streams) {
  long_parents_ = 0;
  deep_offspring_ = 0;
  std::vector<Expr> out(parents.begin(), parents.end());
  std::vector<TokenSeq> enc;
  std::vector<std::size_t> slot;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (parents[i].size() > kMaxExprTokens) {
      ++long_parents_;
      continue;
    }
    enc.push_back(encode_condition(parents[i].tokens(), cfg_.sd_target, d_));
    slot.push_back(i);
  }
  Rng rng = streams.batch();
  const auto decoded = constrained_decode(params_, enc, d_, cfg_.decode, rng);
  for (std::size_t j = 0; j < decoded.size(); ++j) {
    Expr child = parse_prefix(decoded[j]);
    if (depth(child) > cfg_.max_depth) {
      ++deep_offspring_;
      continue;
    }
    out[slot[j]] = std::move(child);
  }
  return out;
}

RunLog tsgp_search(const SearchConfig& cfg, const TsgpConfig& tcfg, const Checkpoint& model,
                   const RegressionProblem& problem) {
  if (problem.d < kMinDim || problem.d > kMaxDim) throw Error("TSGP needs d in 2..5");
  const auto& dims = model.meta.dims;
  if (std::find(dims.begin(), dims.end(), problem.d) == dims.end())
    throw Error("model was not trained on d=" + std::to_string(problem.d) + " archives");
  TsgpVariation op(model.params, tcfg, problem.d);
  RunLog log = evolve(cfg, problem, op);
  log.sd_target = tcfg.sd_target;
  return log;
}

}  // namespace tsgp
