#include "tsgp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "tsgp/common.hpp"
#include "tsgp/condition.hpp"

namespace tsgp {

Example make_example(const TrainingPair& pair) {
  Example ex;
  ex.enc = encode_condition(pair.src, pair.sd, pair.d);
  ex.dec_in.reserve(pair.dst.size() + 1);
  ex.dec_in.push_back(vocab().start());
  ex.dec_in.insert(ex.dec_in.end(), pair.dst.begin(), pair.dst.end());
  ex.target = pair.dst;
  ex.target.push_back(vocab().end());
  return ex;
}

Trainer::Trainer(const TrainConfig& cfg, const std::vector<TrainingPair>& pairs) : cfg_(cfg) {
  cfg_.model.validate();
  if (pairs.empty()) throw Error("training needs at least one pair");
  if (cfg_.batch_size < 1) throw Error("batch size must be >= 1");
  if (cfg_.epochs < 1) throw Error("epochs must be >= 1");

  std::set<int> dims;
  for (const auto& p : pairs) dims.insert(p.d);
  dims_.assign(dims.begin(), dims.end());

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(cfg_.seed, 0x5b1u));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::size_t n_val = 0;
  if (cfg_.val_fraction > 0.0 && pairs.size() >= 2)
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg_.val_fraction * static_cast<double>(pairs.size()))),
                                    1, pairs.size() - 1);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_ : train_).push_back(make_example(pairs[order[i]]));

  params_ = init_model<float>(cfg_.model);
  grads_ = allocate_params<float>(cfg_.model);
  steps_per_epoch_ = static_cast<std::int64_t>((train_.size() + static_cast<std::size_t>(cfg_.batch_size) - 1) /
                                               static_cast<std::size_t>(cfg_.batch_size));
  opt_ = adamw_init(params_, cfg_.lr, steps_per_epoch_ * cfg_.epochs, cfg_.adamw);
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
  const std::int64_t epoch = step / steps_per_epoch_;
  const std::int64_t b = step % steps_per_epoch_;
  std::vector<std::size_t> perm(train_.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(cfg_.seed, 0xe40cu, epoch));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  const std::size_t lo = static_cast<std::size_t>(b) * bs;
  const std::size_t hi = std::min(perm.size(), lo + bs);
  return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
}

double Trainer::step() {
  if (opt_.step >= opt_.total_steps) throw Error("training schedule already complete");
  std::vector<Example> batch;
  for (std::size_t i : batch_indices(opt_.step)) batch.push_back(train_[i]);
  ForwardOptions fo;
  fo.train = true;
  fo.dropout_seed = derive_seed(cfg_.seed, 0xd409u, opt_.step);
  const double loss = loss_and_grad(params_, std::span<const Example>(batch), &grads_, fo);
  if (!std::isfinite(loss)) throw Error("non-finite training loss at step " + std::to_string(opt_.step));
  const ModelParams<float> backup = params_;
  const AdamWState<float> opt_backup = opt_;
  adamw_step(params_, grads_, opt_);
  if (!params_.all_finite()) {
    params_ = backup;
    opt_ = opt_backup;
    throw Error("non-finite parameters after step " + std::to_string(opt_.step));
  }
  return loss;
}

double Trainer::loss_on(const std::vector<Example>& examples) const {
  if (examples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  std::size_t tokens = 0;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t lo = 0; lo < examples.size(); lo += bs) {
    const std::size_t hi = std::min(examples.size(), lo + bs);
    std::span<const Example> batch(examples.data() + lo, hi - lo);
    std::size_t n = 0;
    for (const auto& ex : batch) n += ex.target.size();
    sum += loss_and_grad<float>(params_, batch, nullptr) * static_cast<double>(n);
    tokens += n;
  }
  return sum / static_cast<double>(tokens);
}

double Trainer::validation_loss() const { return loss_on(val_); }

void Trainer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", params_, CheckpointMeta{cfg_.seed, dims_, opt_.step});
  save_optimizer(dir / "optimizer.ckpt", opt_, cfg_.model);
  vocab().save(dir / "vocab.txt");
}

void Trainer::resume(const std::filesystem::path& dir) {
  Checkpoint ck = load_checkpoint(dir / "model.ckpt");
  if (ck.params.config != cfg_.model) throw Error("checkpoint config differs from the training config");
  AdamWState<float> st = load_optimizer(dir / "optimizer.ckpt", cfg_.model);
  if (st.total_steps != opt_.total_steps || st.step != ck.meta.step)
    throw Error("optimizer state does not match this schedule");
  params_ = std::move(ck.params);
  opt_ = std::move(st);
}

TrainReport Trainer::run() {
  TrainReport rep;
  rep.train_pairs = train_.size();
  rep.val_pairs = val_.size();
  rep.parameters = params_.parameter_count();
  rep.dims = dims_;
  rep.initial_val_loss = validation_loss();
  while (opt_.step < opt_.total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochReport e;
    e.epoch = static_cast<int>(opt_.step / steps_per_epoch_);
    const std::int64_t end = std::min(opt_.total_steps, (e.epoch + 1) * steps_per_epoch_);
    double sum = 0.0;
    std::int64_t n = 0;
    while (opt_.step < end) {
      const double l = step();
      if (n == 0) e.first_batch_loss = l;
      e.last_batch_loss = l;
      sum += l;
      ++n;
      if (cfg_.verbose && opt_.step % 100 == 0)
        std::fprintf(stderr, "step %lld/%lld loss %.4f\n", static_cast<long long>(opt_.step),
                     static_cast<long long>(opt_.total_steps), l);
    }
    e.train_loss = sum / static_cast<double>(std::max<std::int64_t>(n, 1));
    e.val_loss = validation_loss();
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cfg_.verbose)
      std::fprintf(stderr, "epoch %d train %.4f val %.4f (%.1fs)\n", e.epoch, e.train_loss, e.val_loss, e.seconds);
    rep.epochs.push_back(e);
  }
  rep.steps = opt_.step;
  return rep;
}

GradCheckConfig::GradCheckConfig() {
  model.vocab_size = 40;
  model.d_model = 16;
  model.n_heads = 2;
  model.n_layers = 1;
  model.d_ff = 32;
  model.dropout = 0.0;
  model.seed = 1;
}

GradCheckResult gradcheck(const GradCheckConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x9cu));
  auto draw = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  if (cfg.max_len < 2) throw Error("gradcheck max_len must be >= 2");
  std::vector<Example> batch(static_cast<std::size_t>(cfg.batch));
  for (auto& ex : batch) {
    const int le = draw(1, cfg.max_len), ld = draw(1, cfg.max_len - 1);
    for (int i = 0; i < le; ++i) ex.enc.push_back(static_cast<TokenId>(draw(4, cfg.model.vocab_size - 1)));
    ex.dec_in.push_back(vocab().start());
    for (int i = 0; i < ld; ++i) {
      const auto t = static_cast<TokenId>(draw(4, cfg.model.vocab_size - 1));
      ex.dec_in.push_back(t);
      ex.target.push_back(t);
    }
    ex.target.push_back(vocab().end());
  }

  ModelConfig mc = cfg.model;
  mc.dropout = 0.0;
  ModelParams<double> p = init_model<double>(mc);
  // Non-trivial biases and gains so every term of the backward pass is exercised.
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (auto& t : p.tensors())
    for (Eigen::Index i = 0; i < t.value->size(); ++i) t.value->data()[i] += jitter(rng);

  const std::span<const Example> b(batch);
  ModelParams<double> g;
  GradCheckResult res;
  res.loss = loss_and_grad(p, b, &g);
  // Key biases shift every score in a softmax row equally, so their exact gradient is zero and
  // a relative error would only measure finite-difference noise. They are checked separately.
  std::vector<NamedTensor<Mat<double>>> pt, gt;
  {
    auto all_p = p.tensors();
    auto all_g = g.tensors();
    for (std::size_t i = 0; i < all_p.size(); ++i) {
      if (all_p[i].name.ends_with(".bk")) {
        res.max_key_bias_grad = std::max(res.max_key_bias_grad, all_g[i].value->cwiseAbs().maxCoeff());
        continue;
      }
      pt.push_back(all_p[i]);
      gt.push_back(all_g[i]);
    }
  }
  for (int c = 0; c < cfg.coordinates; ++c) {
    const std::size_t ti = uniform_index(rng, pt.size());
    Mat<double>& w = *pt[ti].value;
    const auto k = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(w.size())));
    const double orig = w.data()[k];
    w.data()[k] = orig + cfg.h;
    const double up = loss_and_grad<double>(p, b, nullptr);
    w.data()[k] = orig - cfg.h;
    const double down = loss_and_grad<double>(p, b, nullptr);
    w.data()[k] = orig;
    const double fd = (up - down) / (2.0 * cfg.h);
    const double an = gt[ti].value->data()[k];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), cfg.denominator_floor});
    if (rel > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = rel;
      res.worst = pt[ti].name + "[" + std::to_string(k) + "]";
      res.worst_analytic = an;
      res.worst_numeric = fd;
    }
    ++res.checked;
  }
  return res;
}

}  // namespace tsgp
