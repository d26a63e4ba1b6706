#include "tsgp/vocab.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tsgp/common.hpp"

namespace tsgp {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

std::string decimal_token(int tenths) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%s%d.%d", tenths < 0 ? "-" : "", std::abs(tenths) / 10,
                std::abs(tenths) % 10);
  return buf;
}

}  // namespace

const Vocab& Vocab::instance() {
  static const Vocab v;
  return v;
}

TokenId Vocab::add(std::string token, TokenKind kind, double value) {
  const auto id = static_cast<TokenId>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  kinds_.push_back(kind);
  values_.push_back(value);
  return id;
}

Vocab::Vocab() {
  add("", TokenKind::special);
  add("[UNK]", TokenKind::special);
  add("[start]", TokenKind::special);
  add("[end]", TokenKind::special);

  first_op_ = static_cast<TokenId>(tokens_.size());
  for (const char* name : {"add", "sub", "mul", "div", "pow"}) ops_.push_back(add(name, TokenKind::op));

  first_var_ = static_cast<TokenId>(tokens_.size());
  for (int j = 1; j <= kMaxVariables; ++j) add("x" + std::to_string(j), TokenKind::variable);

  for (int v = -5; v <= -1; ++v) constants_.push_back(add(std::to_string(v), TokenKind::constant, v));
  for (int t = -5; t <= 5; ++t) {
    std::string s = decimal_token(t);
    const double value = std::stod(s);
    const TokenId id = add(std::move(s), TokenKind::constant, value);
    constants_.push_back(id);
    erc_.push_back(id);
  }
  for (int v = 1; v <= 5; ++v) constants_.push_back(add(std::to_string(v), TokenKind::constant, v));

  first_dim_ = static_cast<TokenId>(tokens_.size());
  for (int d = kMinDim; d <= kMaxDim; ++d) add("D" + std::to_string(d), TokenKind::condition);
  first_sd_bin_ = static_cast<TokenId>(tokens_.size());
  for (int b = 0; b < kSdBins; ++b) add("SD_BIN_" + std::to_string(b), TokenKind::condition);
}

const std::string& Vocab::str(TokenId id) const {
  if (id >= tokens_.size()) throw Error("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const {
  if (auto t = find(token)) return *t;
  throw Error("unknown token '" + std::string(token) + "'");
}

TokenId Vocab::variable(int one_based) const {
  if (one_based < 1 || one_based > kMaxVariables)
    throw Error("variable index " + std::to_string(one_based) + " out of range 1.." +
                std::to_string(kMaxVariables));
  return static_cast<TokenId>(first_var_ + one_based - 1);
}

std::optional<TokenId> Vocab::constant_token(double v) const {
  for (TokenId id : constants_)
    if (values_[id] == v) return id;
  return std::nullopt;
}

TokenId Vocab::dim_token(int d) const {
  if (d < kMinDim || d > kMaxDim) throw Error("dimensionality " + std::to_string(d) + " outside 2..5");
  return static_cast<TokenId>(first_dim_ + d - kMinDim);
}

TokenId Vocab::sd_bin_token(int bin) const {
  if (bin < 0 || bin >= kSdBins) throw Error("SD bin " + std::to_string(bin) + " out of range");
  return static_cast<TokenId>(first_sd_bin_ + bin);
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    h = fnv1a64(t.data(), t.size(), h);
    h = fnv1a64("\n", 1, h);
  }
  return h;
}

std::string Vocab::to_text() const {
  std::ostringstream os;
  os << "tsgp-vocab " << kVocabVersion << ' ' << tokens_.size() << '\n';
  for (std::size_t i = 0; i < tokens_.size(); ++i) os << i << '\t' << tokens_[i] << '\n';
  return os.str();
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary file " + path.string());
  out << to_text();
}

void Vocab::verify_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read vocabulary file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  if (os.str() != instance().to_text())
    throw Error("vocabulary file " + path.string() + " does not match vocabulary version " +
                std::to_string(kVocabVersion));
}

}  // namespace tsgp
