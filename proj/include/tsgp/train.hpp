#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tsgp/checkpoint.hpp"
#include "tsgp/model.hpp"
#include "tsgp/pairs.hpp"

namespace tsgp {

/// Encoder [D_d, SD_BIN(sd)] + src; decoder input [start] + dst; target dst + [end].
Example make_example(const TrainingPair& pair);

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  int epochs = 3;
  int batch_size = 64;
  double lr = 1e-3;
  double val_fraction = 0.01;
  std::uint64_t seed = 0;  // split, shuffling and dropout streams
  AdamWConfig adamw;
  bool verbose = false;
};

struct EpochReport {
  int epoch = 0;
  double train_loss = 0.0;  // mean batch loss over the epoch
  double first_batch_loss = 0.0;
  double last_batch_loss = 0.0;
  double val_loss = 0.0;    // NaN without a validation split
  double seconds = 0.0;
};

struct TrainReport {
  std::size_t train_pairs = 0;
  std::size_t val_pairs = 0;
  std::size_t parameters = 0;
  std::int64_t steps = 0;
  double initial_val_loss = 0.0;
  std::vector<int> dims;
  std::vector<EpochReport> epochs;
};

/// Mini-batch AdamW training with a cosine schedule over all epochs. Batch order for step s is a
/// pure function of (seed, s), so a resumed run continues bit-identically.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const std::vector<TrainingPair>& pairs);

  /// One optimizer step; returns the training loss of that batch (dropout active).
  /// A non-finite loss or parameter restores the pre-step state and throws.
  double step();
  /// Token-weighted mean cross entropy on the validation split (or `examples`) without dropout.
  double validation_loss() const;
  double loss_on(const std::vector<Example>& examples) const;

  std::int64_t steps_done() const { return opt_.step; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const { return opt_.total_steps; }
  const ModelParams<float>& params() const { return params_; }
  const std::vector<Example>& train_examples() const { return train_; }
  const std::vector<Example>& validation_examples() const { return val_; }
  std::vector<int> dims() const { return dims_; }

  /// Writes model.ckpt, optimizer.ckpt and vocab.txt into dir.
  void save(const std::filesystem::path& dir) const;
  /// Restores parameters and optimizer state written by save().
  void resume(const std::filesystem::path& dir);

  /// Trains to the end of the schedule, logging one EpochReport per epoch.
  TrainReport run();

 private:
  std::vector<std::size_t> batch_indices(std::int64_t step) const;

  TrainConfig cfg_;
  std::vector<Example> train_, val_;
  std::vector<int> dims_;
  ModelParams<float> params_;
  AdamWState<float> opt_;
  ModelParams<float> grads_;
  std::int64_t steps_per_epoch_ = 0;
};

struct GradCheckConfig {
  ModelConfig model;  // defaults to the tiny check model
  int coordinates = 256;
  double h = 1e-5;
  double denominator_floor = 1e-5;  // finite differences cannot resolve smaller gradients
  int batch = 3;
  int max_len = 12;
  std::uint64_t seed = 0;

  GradCheckConfig();
};

struct GradCheckResult {
  int checked = 0;
  double max_rel_error = 0.0;
  std::string worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double loss = 0.0;
  double max_key_bias_grad = 0.0;  // attention key-bias gradients are identically zero
};

/// Central finite differences in double precision on randomly sampled coordinates of a model with
/// dropout disabled: rel = |g - fd| / max(|g|, |fd|, floor).
GradCheckResult gradcheck(const GradCheckConfig& cfg);

}  // namespace tsgp
