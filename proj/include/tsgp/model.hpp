#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsgp/vocab.hpp"

namespace tsgp {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int vocab_size = 71;
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 0;  // per-head projection width; 0 means d_model / n_heads
  int n_layers = 2;  // encoder and decoder each
  int d_ff = 256;
  int max_positions = 102;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  int key_dim() const { return head_dim > 0 ? head_dim : d_model / n_heads; }
  int attention_width() const { return n_heads * key_dim(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  /// d_model 64, 4 heads, 2+2 layers, d_ff 256.
  static ModelConfig desk();
  /// d_model 128, 8 heads of width 128, 2+2 layers, d_ff 512.
  static ModelConfig full_scale();
};

/// Sum of all tensor sizes implied by the configuration.
std::size_t expected_parameter_count(const ModelConfig& cfg);

template <typename S>
struct LayerNormParams {
  Mat<S> gain, bias;  // 1 x d_model
};

template <typename S>
struct AttentionParams {
  Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;  // w*: in x out, b*: 1 x out
};

template <typename S>
struct FeedForwardParams {
  Mat<S> w1, b1, w2, b2;
};

template <typename S>
struct EncoderLayerParams {
  LayerNormParams<S> ln1;
  AttentionParams<S> attn;
  LayerNormParams<S> ln2;
  FeedForwardParams<S> ffn;
};

template <typename S>
struct DecoderLayerParams {
  LayerNormParams<S> ln1;
  AttentionParams<S> self_attn;
  LayerNormParams<S> ln2;
  AttentionParams<S> cross_attn;
  LayerNormParams<S> ln3;
  FeedForwardParams<S> ffn;
};

template <typename M>
struct NamedTensor {
  std::string name;
  M* value;
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  Mat<S> enc_embed, enc_pos, dec_embed, dec_pos;
  std::vector<EncoderLayerParams<S>> encoder;
  std::vector<DecoderLayerParams<S>> decoder;
  LayerNormParams<S> enc_norm, dec_norm;
  Mat<S> out_w, out_b;

  /// Every tensor in a fixed canonical order (the checkpoint order).
  std::vector<NamedTensor<Mat<S>>> tensors();
  std::vector<NamedTensor<const Mat<S>>> tensors() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();

  template <typename T>
  ModelParams<T> cast() const;
};

/// Zero-filled tensors with the shapes implied by cfg.
template <typename S>
ModelParams<S> allocate_params(const ModelConfig& cfg);

/// Xavier-uniform matrices (embeddings included), zero biases, unit layer-norm gains.
template <typename S>
ModelParams<S> init_model(const ModelConfig& cfg);

/// One teacher-forced example: encoder input, decoder input ([start] + dst), target (dst + [end]).
struct Example {
  TokenSeq enc;
  TokenSeq dec_in;
  TokenSeq target;
};

struct ForwardOptions {
  bool train = false;  // enables dropout
  std::uint64_t dropout_seed = 0;
};

/// Logits per batch element, one row per decoder position (L_d x vocab).
template <typename S>
std::vector<Mat<S>> forward(const ModelParams<S>& params, std::span<const TokenSeq> enc,
                            std::span<const TokenSeq> dec, const ForwardOptions& opt = {});

/// Right-padded token matrix (pad id 0), one row per batch element.
using TokenMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Strips trailing pad tokens; a pad followed by a non-pad token is an error.
std::vector<TokenSeq> unpad(const TokenMatrix& tokens);
/// Padded interface: returns L_d x vocab logits per row of `dec`; rows at padded positions are zero.
template <typename S>
std::vector<Mat<S>> forward_padded(const ModelParams<S>& params, const TokenMatrix& enc, const TokenMatrix& dec);

/// Mean per-token cross entropy over all targets in the batch. Gradients are written to `grads`
/// (overwritten, same shapes as params) when non-null.
template <typename S>
double loss_and_grad(const ModelParams<S>& params, std::span<const Example> batch, ModelParams<S>* grads,
                     const ForwardOptions& opt = {});

/// Batched incremental decoding with cached keys and values. The encoder runs once at construction.
template <typename S>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams<S>& params, std::span<const TokenSeq> enc);

  /// Feeds tokens[i] as the next decoder input of sequence ids[i]; returns next-token logits,
  /// one row per id.
  Mat<S> step(std::span<const std::size_t> ids, std::span<const TokenId> tokens);
  std::size_t position(std::size_t id) const { return length_[id]; }

 private:
  const ModelParams<S>& p_;
  std::vector<Eigen::Index> enc_off_;
  std::vector<Mat<S>> cross_k_, cross_v_;  // per layer, packed over the batch
  std::vector<std::vector<Mat<S>>> self_k_, self_v_;  // [layer][seq], max_positions rows
  std::vector<std::size_t> length_;
};

// ---- optimisation ----

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename S>
struct AdamWState {
  ModelParams<S> m, v;
  std::int64_t step = 0;
  AdamWConfig cfg;
  double base_lr = 1e-3;
  std::int64_t total_steps = 1;
};

template <typename S>
AdamWState<S> adamw_init(const ModelParams<S>& params, double base_lr, std::int64_t total_steps,
                         const AdamWConfig& cfg = {});

/// Single-tensor AdamW update with decoupled weight decay; `step` is 1-based.
template <typename S>
void adamw_update(Mat<S>& w, const Mat<S>& g, Mat<S>& m, Mat<S>& v, std::int64_t step, double lr,
                  const AdamWConfig& cfg);

/// Advances state.step and updates every tensor at the cosine-scheduled rate; returns that rate.
template <typename S>
double adamw_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamWState<S>& state);

/// base * 0.5 * (1 + cos(pi * step / total)), clamped to step in [0, total].
double cosine_lr(std::int64_t step, std::int64_t total, double base);

}  // namespace tsgp
