#include "tsgp/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "tsgp/common.hpp"

namespace tsgp {

void ModelConfig::validate() const {
  if (vocab_size < 4) throw Error("model vocab_size must be at least 4");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw Error("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                std::to_string(n_heads) + ")");
  if (head_dim < 0) throw Error("head_dim must be >= 0");
  if (n_layers < 1) throw Error("n_layers must be >= 1");
  if (d_ff < 1) throw Error("d_ff must be >= 1");
  if (max_positions < 102) throw Error("max_positions must be >= 102");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must be in [0, 1)");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.d_model = 128;
  c.n_heads = 8;
  c.head_dim = 128;
  c.d_ff = 512;
  return c;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t D = cfg.d_model, A = cfg.attention_width(), F = cfg.d_ff, V = cfg.vocab_size,
                    P = cfg.max_positions, L = cfg.n_layers;
  const std::size_t attn = 3 * (D * A + A) + A * D + D;
  const std::size_t ln = 2 * D;
  const std::size_t ffn = D * F + F + F * D + D;
  const std::size_t enc = 2 * ln + attn + ffn;
  const std::size_t dec = 3 * ln + 2 * attn + ffn;
  return 2 * (V * D + P * D) + L * (enc + dec) + 2 * ln + D * V + V;
}

// ---- parameter containers ----

namespace {

template <typename M, typename P>
std::vector<NamedTensor<M>> list_tensors(P& p) {
  std::vector<NamedTensor<M>> out;
  auto add = [&](std::string n, M& m) { out.push_back({std::move(n), &m}); };
  auto ln = [&](const std::string& pre, auto& l) {
    add(pre + ".gain", l.gain);
    add(pre + ".bias", l.bias);
  };
  auto attn = [&](const std::string& pre, auto& a) {
    add(pre + ".wq", a.wq);
    add(pre + ".bq", a.bq);
    add(pre + ".wk", a.wk);
    add(pre + ".bk", a.bk);
    add(pre + ".wv", a.wv);
    add(pre + ".bv", a.bv);
    add(pre + ".wo", a.wo);
    add(pre + ".bo", a.bo);
  };
  auto ffn = [&](const std::string& pre, auto& f) {
    add(pre + ".w1", f.w1);
    add(pre + ".b1", f.b1);
    add(pre + ".w2", f.w2);
    add(pre + ".b2", f.b2);
  };
  add("enc.embed", p.enc_embed);
  add("enc.pos", p.enc_pos);
  add("dec.embed", p.dec_embed);
  add("dec.pos", p.dec_pos);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string pre = "enc." + std::to_string(l);
    ln(pre + ".ln1", p.encoder[l].ln1);
    attn(pre + ".attn", p.encoder[l].attn);
    ln(pre + ".ln2", p.encoder[l].ln2);
    ffn(pre + ".ffn", p.encoder[l].ffn);
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string pre = "dec." + std::to_string(l);
    ln(pre + ".ln1", p.decoder[l].ln1);
    attn(pre + ".self", p.decoder[l].self_attn);
    ln(pre + ".ln2", p.decoder[l].ln2);
    attn(pre + ".cross", p.decoder[l].cross_attn);
    ln(pre + ".ln3", p.decoder[l].ln3);
    ffn(pre + ".ffn", p.decoder[l].ffn);
  }
  ln("enc.norm", p.enc_norm);
  ln("dec.norm", p.dec_norm);
  add("out.w", p.out_w);
  add("out.b", p.out_b);
  return out;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_weight(const std::string& name) {
  for (std::string_view w : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".embed", ".pos", "out.w"})
    if (ends_with(name, w)) return true;
  return false;
}

}  // namespace

template <typename S>
std::vector<NamedTensor<Mat<S>>> ModelParams<S>::tensors() {
  return list_tensors<Mat<S>>(*this);
}

template <typename S>
std::vector<NamedTensor<const Mat<S>>> ModelParams<S>::tensors() const {
  return list_tensors<const Mat<S>>(*this);
}

template <typename S>
std::size_t ModelParams<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += static_cast<std::size_t>(t.value->size());
  return n;
}

template <typename S>
bool ModelParams<S>::all_finite() const {
  for (const auto& t : tensors())
    if (!t.value->allFinite()) return false;
  return true;
}

template <typename S>
void ModelParams<S>::set_zero() {
  for (auto& t : tensors()) t.value->setZero();
}

template <typename S>
template <typename T>
ModelParams<T> ModelParams<S>::cast() const {
  ModelParams<T> out = allocate_params<T>(config);
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = src[i].value->template cast<T>();
  return out;
}

template <typename S>
ModelParams<S> allocate_params(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index D = cfg.d_model, A = cfg.attention_width(), F = cfg.d_ff, V = cfg.vocab_size,
                     P = cfg.max_positions;
  auto z = [](Eigen::Index r, Eigen::Index c) { return Mat<S>::Zero(r, c); };
  auto ln = [&] { return LayerNormParams<S>{z(1, D), z(1, D)}; };
  auto attn = [&] { return AttentionParams<S>{z(D, A), z(1, A), z(D, A), z(1, A), z(D, A), z(1, A), z(A, D), z(1, D)}; };
  auto ffn = [&] { return FeedForwardParams<S>{z(D, F), z(1, F), z(F, D), z(1, D)}; };
  ModelParams<S> p;
  p.config = cfg;
  p.enc_embed = z(V, D);
  p.enc_pos = z(P, D);
  p.dec_embed = z(V, D);
  p.dec_pos = z(P, D);
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.encoder.push_back({ln(), attn(), ln(), ffn()});
    p.decoder.push_back({ln(), attn(), ln(), attn(), ln(), ffn()});
  }
  p.enc_norm = ln();
  p.dec_norm = ln();
  p.out_w = z(D, V);
  p.out_b = z(1, V);
  return p;
}

template <typename S>
ModelParams<S> init_model(const ModelConfig& cfg) {
  ModelParams<S> p = allocate_params<S>(cfg);
  // Draws are made in double so float and double models start from the same values.
  Rng rng(derive_seed(cfg.seed, 0x1417u));
  for (auto& t : p.tensors()) {
    Mat<S>& m = *t.value;
    if (ends_with(t.name, ".gain")) {
      m.setOnes();
    } else if (is_weight(t.name)) {
      const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(u(rng));
    }
  }
  return p;
}

// ---- building blocks ----

namespace {

template <typename S>
using Col = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct Layout {
  std::vector<Eigen::Index> off{0};
  Eigen::Index len(std::size_t b) const { return off[b + 1] - off[b]; }
  Eigen::Index total() const { return off.back(); }
  std::size_t count() const { return off.size() - 1; }
};

template <typename S>
Mat<S> linear(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
  Mat<S> y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
void linear_grad(const Mat<S>& x, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
}

template <typename S>
struct LnCache {
  Mat<S> xhat;
  Col<S> rstd;
};

template <typename S>
Mat<S> ln_fwd(const Mat<S>& x, const LayerNormParams<S>& p, LnCache<S>& c) {
  const S eps = static_cast<S>(1e-5);
  const Col<S> mu = x.rowwise().mean();
  c.xhat = x.colwise() - mu;
  const Col<S> var = c.xhat.array().square().rowwise().mean();
  c.rstd = (var.array() + eps).rsqrt();
  c.xhat = c.xhat.array().colwise() * c.rstd.array();
  Mat<S> y = c.xhat.array().rowwise() * p.gain.row(0).array();
  y.rowwise() += p.bias.row(0);
  return y;
}

template <typename S>
Mat<S> ln_apply(const Mat<S>& x, const LayerNormParams<S>& p) {
  LnCache<S> c;
  return ln_fwd(x, p, c);
}

template <typename S>
Mat<S> ln_back(const Mat<S>& dy, const LayerNormParams<S>& p, const LnCache<S>& c, LayerNormParams<S>& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  const Mat<S> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  const Col<S> m1 = dxhat.rowwise().mean();
  const Col<S> m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Mat<S> dx = (dxhat.colwise() - m1).array() - c.xhat.array().colwise() * m2.array();
  dx = dx.array().colwise() * c.rstd.array();
  return dx;
}

template <typename S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const S mx = r.maxCoeff();
    r = (r.array() - mx).exp();
    r /= r.sum();
  }
}

template <typename S>
struct AttnCache {
  Mat<S> xq, xkv, q, k, v, ctx;
  std::vector<Mat<S>> probs;  // [seq * heads + head]
};

struct AttnShape {
  int heads;
  int hd;
};

template <typename S>
Mat<S> attention_fwd(const AttentionParams<S>& p, const Mat<S>& xq, const Mat<S>& xkv, const Layout& lq,
                     const Layout& lk, bool causal, AttnShape sh, AttnCache<S>& c) {
  c.xq = xq;
  c.xkv = xkv;
  c.q = linear(xq, p.wq, p.bq);
  c.k = linear(xkv, p.wk, p.bk);
  c.v = linear(xkv, p.wv, p.bv);
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(sh.hd)));
  c.ctx.resize(xq.rows(), static_cast<Eigen::Index>(sh.heads) * sh.hd);
  c.probs.resize(lq.count() * static_cast<std::size_t>(sh.heads));
  for (std::size_t b = 0; b < lq.count(); ++b) {
    const Eigen::Index nq = lq.len(b), nk = lk.len(b);
    for (int h = 0; h < sh.heads; ++h) {
      const auto Q = c.q.block(lq.off[b], h * sh.hd, nq, sh.hd);
      const auto K = c.k.block(lk.off[b], h * sh.hd, nk, sh.hd);
      const auto V = c.v.block(lk.off[b], h * sh.hd, nk, sh.hd);
      Mat<S>& P = c.probs[b * static_cast<std::size_t>(sh.heads) + static_cast<std::size_t>(h)];
      P.noalias() = Q * K.transpose();
      P *= scale;
      if (causal)
        for (Eigen::Index i = 0; i < nq; ++i)
          for (Eigen::Index j = i + 1; j < nk; ++j) P(i, j) = -std::numeric_limits<S>::infinity();
      softmax_rows(P);
      c.ctx.block(lq.off[b], h * sh.hd, nq, sh.hd).noalias() = P * V;
    }
  }
  return linear(c.ctx, p.wo, p.bo);
}

/// Writes input gradients to dxq and dxkv (overwritten).
template <typename S>
void attention_back(const AttentionParams<S>& p, const AttnCache<S>& c, const Mat<S>& dout, const Layout& lq,
                    const Layout& lk, AttnShape sh, AttentionParams<S>& g, Mat<S>& dxq, Mat<S>& dxkv) {
  linear_grad(c.ctx, dout, g.wo, g.bo);
  Mat<S> dctx(dout.rows(), p.wo.rows());
  dctx.noalias() = dout * p.wo.transpose();
  Mat<S> dq(c.q.rows(), c.q.cols()), dk = Mat<S>::Zero(c.k.rows(), c.k.cols()), dv = Mat<S>::Zero(c.v.rows(), c.v.cols());
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(sh.hd)));
  for (std::size_t b = 0; b < lq.count(); ++b) {
    const Eigen::Index nq = lq.len(b), nk = lk.len(b);
    for (int h = 0; h < sh.heads; ++h) {
      const auto Q = c.q.block(lq.off[b], h * sh.hd, nq, sh.hd);
      const auto K = c.k.block(lk.off[b], h * sh.hd, nk, sh.hd);
      const auto V = c.v.block(lk.off[b], h * sh.hd, nk, sh.hd);
      const Mat<S>& P = c.probs[b * static_cast<std::size_t>(sh.heads) + static_cast<std::size_t>(h)];
      const auto dC = dctx.block(lq.off[b], h * sh.hd, nq, sh.hd);
      Mat<S> dP(nq, nk);
      dP.noalias() = dC * V.transpose();
      dv.block(lk.off[b], h * sh.hd, nk, sh.hd).noalias() += P.transpose() * dC;
      const Col<S> rs = (dP.array() * P.array()).rowwise().sum();
      Mat<S> dS = P.array() * (dP.array().colwise() - rs.array());
      dS *= scale;
      dq.block(lq.off[b], h * sh.hd, nq, sh.hd).noalias() = dS * K;
      dk.block(lk.off[b], h * sh.hd, nk, sh.hd).noalias() += dS.transpose() * Q;
    }
  }
  linear_grad(c.xq, dq, g.wq, g.bq);
  linear_grad(c.xkv, dk, g.wk, g.bk);
  linear_grad(c.xkv, dv, g.wv, g.bv);
  dxq.resize(dq.rows(), p.wq.rows());
  dxq.noalias() = dq * p.wq.transpose();
  dxkv.resize(dk.rows(), p.wk.rows());
  dxkv.noalias() = dk * p.wk.transpose();
  dxkv.noalias() += dv * p.wv.transpose();
}

template <typename S>
struct FfnCache {
  Mat<S> x, h;
};

template <typename S>
Mat<S> ffn_fwd(const FeedForwardParams<S>& p, const Mat<S>& x, FfnCache<S>& c) {
  c.x = x;
  c.h = linear(x, p.w1, p.b1).cwiseMax(S(0));
  return linear(c.h, p.w2, p.b2);
}

template <typename S>
Mat<S> ffn_back(const FeedForwardParams<S>& p, const FfnCache<S>& c, const Mat<S>& dy, FeedForwardParams<S>& g) {
  linear_grad(c.h, dy, g.w2, g.b2);
  Mat<S> dh(dy.rows(), p.w2.rows());
  dh.noalias() = dy * p.w2.transpose();
  dh = (c.h.array() > S(0)).select(dh, S(0));
  linear_grad(c.x, dh, g.w1, g.b1);
  Mat<S> dx(dh.rows(), p.w1.rows());
  dx.noalias() = dh * p.w1.transpose();
  return dx;
}

/// Inverted dropout; an empty mask means identity.
template <typename S>
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;

  void apply(Mat<S>& x, Mat<S>& mask) const {
    if (!rng || rate <= 0.0) {
      mask.resize(0, 0);
      return;
    }
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(*rng) < rate ? S(0) : keep;
    x.array() *= mask.array();
  }
  static void back(Mat<S>& dx, const Mat<S>& mask) {
    if (mask.size()) dx.array() *= mask.array();
  }
};

template <typename S>
struct EncLayerTrace {
  LnCache<S> ln1, ln2;
  AttnCache<S> attn;
  FfnCache<S> ffn;
  Mat<S> drop_attn, drop_ffn;
};

template <typename S>
struct DecLayerTrace {
  LnCache<S> ln1, ln2, ln3;
  AttnCache<S> self, cross;
  FfnCache<S> ffn;
  Mat<S> drop_self, drop_cross, drop_ffn;
};

template <typename S>
struct Trace {
  Layout enc, dec;
  std::vector<TokenId> enc_tok, dec_tok;
  std::vector<Eigen::Index> enc_pos, dec_pos;
  Mat<S> drop_enc, drop_dec;
  std::vector<EncLayerTrace<S>> el;
  std::vector<DecLayerTrace<S>> dl;
  LnCache<S> enc_norm, dec_norm;
  Mat<S> memory, z;
};

void pack(std::span<const TokenSeq> seqs, const ModelConfig& cfg, const char* what, Layout& lay,
          std::vector<TokenId>& tok, std::vector<Eigen::Index>& pos) {
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = seqs[b];
    if (s.empty()) throw Error(std::string(what) + " sequence " + std::to_string(b) + " is empty");
    if (s.size() > static_cast<std::size_t>(cfg.max_positions))
      throw Error(std::string(what) + " sequence " + std::to_string(b) + " has " + std::to_string(s.size()) +
                  " tokens, more than max_positions " + std::to_string(cfg.max_positions));
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (s[t] >= cfg.vocab_size)
        throw Error(std::string(what) + " token id " + std::to_string(s[t]) + " outside model vocabulary");
      tok.push_back(s[t]);
      pos.push_back(static_cast<Eigen::Index>(t));
    }
    lay.off.push_back(lay.off.back() + static_cast<Eigen::Index>(s.size()));
  }
}

template <typename S>
Mat<S> embed(const Mat<S>& table, const Mat<S>& pos_table, const std::vector<TokenId>& tok,
             const std::vector<Eigen::Index>& pos) {
  Mat<S> x(static_cast<Eigen::Index>(tok.size()), table.cols());
  for (std::size_t i = 0; i < tok.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = table.row(tok[i]) + pos_table.row(pos[i]);
  return x;
}

template <typename S>
void embed_back(const Mat<S>& dx, const std::vector<TokenId>& tok, const std::vector<Eigen::Index>& pos,
                Mat<S>& dtable, Mat<S>& dpos) {
  for (std::size_t i = 0; i < tok.size(); ++i) {
    dtable.row(tok[i]) += dx.row(static_cast<Eigen::Index>(i));
    dpos.row(pos[i]) += dx.row(static_cast<Eigen::Index>(i));
  }
}

template <typename S>
void encode(const ModelParams<S>& p, Trace<S>& tr, const Dropout<S>& drop) {
  const AttnShape sh{p.config.n_heads, p.config.key_dim()};
  Mat<S> x = embed(p.enc_embed, p.enc_pos, tr.enc_tok, tr.enc_pos);
  drop.apply(x, tr.drop_enc);
  tr.el.resize(p.encoder.size());
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& L = p.encoder[l];
    auto& t = tr.el[l];
    const Mat<S> a = ln_fwd(x, L.ln1, t.ln1);
    Mat<S> s = attention_fwd(L.attn, a, a, tr.enc, tr.enc, false, sh, t.attn);
    drop.apply(s, t.drop_attn);
    x += s;
    const Mat<S> b = ln_fwd(x, L.ln2, t.ln2);
    Mat<S> f = ffn_fwd(L.ffn, b, t.ffn);
    drop.apply(f, t.drop_ffn);
    x += f;
  }
  tr.memory = ln_fwd(x, p.enc_norm, tr.enc_norm);
}

template <typename S>
Mat<S> decode(const ModelParams<S>& p, Trace<S>& tr, const Dropout<S>& drop) {
  const AttnShape sh{p.config.n_heads, p.config.key_dim()};
  Mat<S> y = embed(p.dec_embed, p.dec_pos, tr.dec_tok, tr.dec_pos);
  drop.apply(y, tr.drop_dec);
  tr.dl.resize(p.decoder.size());
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& L = p.decoder[l];
    auto& t = tr.dl[l];
    const Mat<S> a = ln_fwd(y, L.ln1, t.ln1);
    Mat<S> s = attention_fwd(L.self_attn, a, a, tr.dec, tr.dec, true, sh, t.self);
    drop.apply(s, t.drop_self);
    y += s;
    const Mat<S> b = ln_fwd(y, L.ln2, t.ln2);
    Mat<S> c = attention_fwd(L.cross_attn, b, tr.memory, tr.dec, tr.enc, false, sh, t.cross);
    drop.apply(c, t.drop_cross);
    y += c;
    const Mat<S> e = ln_fwd(y, L.ln3, t.ln3);
    Mat<S> f = ffn_fwd(L.ffn, e, t.ffn);
    drop.apply(f, t.drop_ffn);
    y += f;
  }
  tr.z = ln_fwd(y, p.dec_norm, tr.dec_norm);
  return linear(tr.z, p.out_w, p.out_b);
}

template <typename S>
void backward(const ModelParams<S>& p, const Trace<S>& tr, const Mat<S>& dlogits, ModelParams<S>& g) {
  const AttnShape sh{p.config.n_heads, p.config.key_dim()};
  linear_grad(tr.z, dlogits, g.out_w, g.out_b);
  Mat<S> dz(dlogits.rows(), p.out_w.rows());
  dz.noalias() = dlogits * p.out_w.transpose();
  Mat<S> dy = ln_back(dz, p.dec_norm, tr.dec_norm, g.dec_norm);
  Mat<S> dmem = Mat<S>::Zero(tr.memory.rows(), tr.memory.cols());
  Mat<S> dxq, dxkv;
  for (std::size_t l = p.decoder.size(); l-- > 0;) {
    const auto& L = p.decoder[l];
    auto& G = g.decoder[l];
    const auto& t = tr.dl[l];
    Mat<S> d = dy;
    Dropout<S>::back(d, t.drop_ffn);
    dy += ln_back(ffn_back(L.ffn, t.ffn, d, G.ffn), L.ln3, t.ln3, G.ln3);
    d = dy;
    Dropout<S>::back(d, t.drop_cross);
    attention_back(L.cross_attn, t.cross, d, tr.dec, tr.enc, sh, G.cross_attn, dxq, dxkv);
    dmem += dxkv;
    dy += ln_back(dxq, L.ln2, t.ln2, G.ln2);
    d = dy;
    Dropout<S>::back(d, t.drop_self);
    attention_back(L.self_attn, t.self, d, tr.dec, tr.dec, sh, G.self_attn, dxq, dxkv);
    dxq += dxkv;
    dy += ln_back(dxq, L.ln1, t.ln1, G.ln1);
  }
  Dropout<S>::back(dy, tr.drop_dec);
  embed_back(dy, tr.dec_tok, tr.dec_pos, g.dec_embed, g.dec_pos);

  Mat<S> dx = ln_back(dmem, p.enc_norm, tr.enc_norm, g.enc_norm);
  for (std::size_t l = p.encoder.size(); l-- > 0;) {
    const auto& L = p.encoder[l];
    auto& G = g.encoder[l];
    const auto& t = tr.el[l];
    Mat<S> d = dx;
    Dropout<S>::back(d, t.drop_ffn);
    dx += ln_back(ffn_back(L.ffn, t.ffn, d, G.ffn), L.ln2, t.ln2, G.ln2);
    d = dx;
    Dropout<S>::back(d, t.drop_attn);
    attention_back(L.attn, t.attn, d, tr.enc, tr.enc, sh, G.attn, dxq, dxkv);
    dxq += dxkv;
    dx += ln_back(dxq, L.ln1, t.ln1, G.ln1);
  }
  Dropout<S>::back(dx, tr.drop_enc);
  embed_back(dx, tr.enc_tok, tr.enc_pos, g.enc_embed, g.enc_pos);
}

}  // namespace

template <typename S>
std::vector<Mat<S>> forward(const ModelParams<S>& params, std::span<const TokenSeq> enc,
                            std::span<const TokenSeq> dec, const ForwardOptions& opt) {
  if (enc.size() != dec.size()) throw Error("encoder and decoder batch sizes differ");
  Trace<S> tr;
  pack(enc, params.config, "encoder", tr.enc, tr.enc_tok, tr.enc_pos);
  pack(dec, params.config, "decoder", tr.dec, tr.dec_tok, tr.dec_pos);
  Rng rng(opt.dropout_seed);
  const Dropout<S> drop{params.config.dropout, opt.train ? &rng : nullptr};
  encode(params, tr, drop);
  const Mat<S> logits = decode(params, tr, drop);
  std::vector<Mat<S>> out(dec.size());
  for (std::size_t b = 0; b < dec.size(); ++b) out[b] = logits.middleRows(tr.dec.off[b], tr.dec.len(b));
  return out;
}

std::vector<TokenSeq> unpad(const TokenMatrix& tokens) {
  std::vector<TokenSeq> out(static_cast<std::size_t>(tokens.rows()));
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
    bool padded = false;
    for (Eigen::Index c = 0; c < tokens.cols(); ++c) {
      const int t = tokens(r, c);
      if (t < 0 || t > std::numeric_limits<TokenId>::max())
        throw Error("token id " + std::to_string(t) + " out of range at row " + std::to_string(r));
      if (t == 0) {
        padded = true;
      } else if (padded) {
        throw Error("non-pad token after padding at row " + std::to_string(r) + ", column " + std::to_string(c));
      } else {
        out[static_cast<std::size_t>(r)].push_back(static_cast<TokenId>(t));
      }
    }
  }
  return out;
}

template <typename S>
std::vector<Mat<S>> forward_padded(const ModelParams<S>& params, const TokenMatrix& enc, const TokenMatrix& dec) {
  const auto e = unpad(enc);
  const auto d = unpad(dec);
  auto logits = forward<S>(params, e, d);
  for (auto& l : logits) {
    Mat<S> full = Mat<S>::Zero(dec.cols(), l.cols());
    full.topRows(l.rows()) = l;
    l = std::move(full);
  }
  return logits;
}

template <typename S>
double loss_and_grad(const ModelParams<S>& params, std::span<const Example> batch, ModelParams<S>* grads,
                     const ForwardOptions& opt) {
  if (batch.empty()) throw Error("loss_and_grad needs a non-empty batch");
  Trace<S> tr;
  std::vector<TokenSeq> enc, dec;
  std::vector<TokenId> target;
  for (const auto& ex : batch) {
    if (ex.dec_in.size() != ex.target.size()) throw Error("decoder input and target lengths differ");
    enc.push_back(ex.enc);
    dec.push_back(ex.dec_in);
    for (TokenId t : ex.target) {
      if (t >= params.config.vocab_size) throw Error("target token outside model vocabulary");
      target.push_back(t);
    }
  }
  pack(enc, params.config, "encoder", tr.enc, tr.enc_tok, tr.enc_pos);
  pack(dec, params.config, "decoder", tr.dec, tr.dec_tok, tr.dec_pos);
  Rng rng(opt.dropout_seed);
  const Dropout<S> drop{params.config.dropout, opt.train ? &rng : nullptr};
  encode(params, tr, drop);
  Mat<S> logits = decode(params, tr, drop);

  const auto n = static_cast<Eigen::Index>(target.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto r = logits.row(i);
    const S mx = r.maxCoeff();
    r = (r.array() - mx).exp();
    const S sum = r.sum();
    const TokenId t = target[static_cast<std::size_t>(i)];
    loss += -std::log(static_cast<double>(r(t)) / static_cast<double>(sum));
    r /= sum;  // logits now hold probabilities
  }
  loss /= static_cast<double>(n);
  if (grads) {
    for (Eigen::Index i = 0; i < n; ++i) logits(i, target[static_cast<std::size_t>(i)]) -= S(1);
    logits /= static_cast<S>(n);
    if (grads->config != params.config || grads->encoder.size() != params.encoder.size())
      *grads = allocate_params<S>(params.config);
    else
      grads->set_zero();
    backward(params, tr, logits, *grads);
  }
  return loss;
}

// ---- incremental decoding ----

template <typename S>
IncrementalDecoder<S>::IncrementalDecoder(const ModelParams<S>& params, std::span<const TokenSeq> enc) : p_(params) {
  Trace<S> tr;
  pack(enc, params.config, "encoder", tr.enc, tr.enc_tok, tr.enc_pos);
  encode(params, tr, Dropout<S>{});
  enc_off_ = tr.enc.off;
  const auto A = static_cast<Eigen::Index>(params.config.attention_width());
  for (const auto& L : params.decoder) {
    cross_k_.push_back(linear(tr.memory, L.cross_attn.wk, L.cross_attn.bk));
    cross_v_.push_back(linear(tr.memory, L.cross_attn.wv, L.cross_attn.bv));
    self_k_.emplace_back(enc.size(), Mat<S>(params.config.max_positions, A));
    self_v_.emplace_back(enc.size(), Mat<S>(params.config.max_positions, A));
  }
  length_.assign(enc.size(), 0);
}

template <typename S>
Mat<S> IncrementalDecoder<S>::step(std::span<const std::size_t> ids, std::span<const TokenId> tokens) {
  if (ids.size() != tokens.size()) throw Error("decoder step needs one token per sequence id");
  const auto& cfg = p_.config;
  const int H = cfg.n_heads, hd = cfg.key_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  const auto n = static_cast<Eigen::Index>(ids.size());
  Mat<S> x(n, cfg.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t id = ids[static_cast<std::size_t>(i)];
    if (id >= length_.size()) throw Error("decoder step: sequence id out of range");
    if (length_[id] >= static_cast<std::size_t>(cfg.max_positions)) throw Error("decoder step beyond max_positions");
    const TokenId tok = tokens[static_cast<std::size_t>(i)];
    if (tok >= cfg.vocab_size) throw Error("decoder token outside model vocabulary");
    x.row(i) = p_.dec_embed.row(tok) + p_.dec_pos.row(static_cast<Eigen::Index>(length_[id]));
  }
  Mat<S> ctx(n, cfg.attention_width());
  Eigen::Matrix<S, 1, Eigen::Dynamic> scores;
  for (std::size_t l = 0; l < p_.decoder.size(); ++l) {
    const auto& L = p_.decoder[l];
    {
      const Mat<S> a = ln_apply(x, L.ln1);
      const Mat<S> q = linear(a, L.self_attn.wq, L.self_attn.bq);
      const Mat<S> k = linear(a, L.self_attn.wk, L.self_attn.bk);
      const Mat<S> v = linear(a, L.self_attn.wv, L.self_attn.bv);
      for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t id = ids[static_cast<std::size_t>(i)];
        const auto pos = static_cast<Eigen::Index>(length_[id]);
        Mat<S>& K = self_k_[l][id];
        Mat<S>& V = self_v_[l][id];
        K.row(pos) = k.row(i);
        V.row(pos) = v.row(i);
        for (int h = 0; h < H; ++h) {
          scores.noalias() = q.row(i).segment(h * hd, hd) * K.block(0, h * hd, pos + 1, hd).transpose();
          scores *= scale;
          scores = (scores.array() - scores.maxCoeff()).exp();
          scores /= scores.sum();
          ctx.row(i).segment(h * hd, hd).noalias() = scores * V.block(0, h * hd, pos + 1, hd);
        }
      }
      x += linear(ctx, L.self_attn.wo, L.self_attn.bo);
    }
    {
      const Mat<S> b = ln_apply(x, L.ln2);
      const Mat<S> q = linear(b, L.cross_attn.wq, L.cross_attn.bq);
      for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t id = ids[static_cast<std::size_t>(i)];
        const Eigen::Index off = enc_off_[id], len = enc_off_[id + 1] - enc_off_[id];
        for (int h = 0; h < H; ++h) {
          scores.noalias() = q.row(i).segment(h * hd, hd) * cross_k_[l].block(off, h * hd, len, hd).transpose();
          scores *= scale;
          scores = (scores.array() - scores.maxCoeff()).exp();
          scores /= scores.sum();
          ctx.row(i).segment(h * hd, hd).noalias() = scores * cross_v_[l].block(off, h * hd, len, hd);
        }
      }
      x += linear(ctx, L.cross_attn.wo, L.cross_attn.bo);
    }
    {
      FfnCache<S> c;
      x += ffn_fwd(L.ffn, ln_apply(x, L.ln3), c);
    }
  }
  for (std::size_t id : ids) ++length_[id];
  return linear(ln_apply(x, p_.dec_norm), p_.out_w, p_.out_b);
}

// ---- optimisation ----

double cosine_lr(std::int64_t step, std::int64_t total, double base) {
  if (total <= 0) return base;
  const double s = static_cast<double>(std::clamp<std::int64_t>(step, 0, total));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total)));
}

template <typename S>
AdamWState<S> adamw_init(const ModelParams<S>& params, double base_lr, std::int64_t total_steps,
                         const AdamWConfig& cfg) {
  AdamWState<S> st;
  st.m = allocate_params<S>(params.config);
  st.v = allocate_params<S>(params.config);
  st.cfg = cfg;
  st.base_lr = base_lr;
  st.total_steps = total_steps;
  return st;
}

template <typename S>
void adamw_update(Mat<S>& w, const Mat<S>& g, Mat<S>& m, Mat<S>& v, std::int64_t step, double lr,
                  const AdamWConfig& cfg) {
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  m = b1 * m + (S(1) - b1) * g;
  v = b2 * v + (S(1) - b2) * g.cwiseAbs2();
  const auto t = static_cast<double>(step);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const S eta = static_cast<S>(lr), wd = static_cast<S>(cfg.weight_decay), eps = static_cast<S>(cfg.eps);
  w.array() -= eta * ((m.array() * c1) / ((v.array() * c2).sqrt() + eps) + wd * w.array());
}

template <typename S>
double adamw_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamWState<S>& state) {
  const double lr = cosine_lr(state.step, state.total_steps, state.base_lr);
  ++state.step;
  auto w = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  if (g.size() != w.size() || m.size() != w.size()) throw Error("AdamW state does not match parameters");
  for (std::size_t i = 0; i < w.size(); ++i)
    adamw_update(*w[i].value, *g[i].value, *m[i].value, *v[i].value, state.step, lr, state.cfg);
  return lr;
}

#define TSGP_INSTANTIATE(S)                                                                                     \
  template struct ModelParams<S>;                                                                               \
  template ModelParams<S> allocate_params<S>(const ModelConfig&);                                               \
  template ModelParams<S> init_model<S>(const ModelConfig&);                                                    \
  template std::vector<Mat<S>> forward<S>(const ModelParams<S>&, std::span<const TokenSeq>,                     \
                                          std::span<const TokenSeq>, const ForwardOptions&);                    \
  template std::vector<Mat<S>> forward_padded<S>(const ModelParams<S>&, const TokenMatrix&, const TokenMatrix&); \
  template double loss_and_grad<S>(const ModelParams<S>&, std::span<const Example>, ModelParams<S>*,            \
                                   const ForwardOptions&);                                                      \
  template class IncrementalDecoder<S>;                                                                         \
  template AdamWState<S> adamw_init<S>(const ModelParams<S>&, double, std::int64_t, const AdamWConfig&);        \
  template void adamw_update<S>(Mat<S>&, const Mat<S>&, Mat<S>&, Mat<S>&, std::int64_t, double,                 \
                                const AdamWConfig&);                                                            \
  template double adamw_step<S>(ModelParams<S>&, const ModelParams<S>&, AdamWState<S>&);

TSGP_INSTANTIATE(float)
TSGP_INSTANTIATE(double)
#undef TSGP_INSTANTIATE

template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace tsgp
