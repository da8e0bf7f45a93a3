#pragma once

#include "dfkd/data.hpp"
#include "dfkd/eval.hpp"
#include "dfkd/losses.hpp"
#include "dfkd/optim.hpp"

namespace dfkd {

struct DivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PretrainConfig {
  int64_t epochs = 10;
  int64_t batch_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 2 || lr <= 0)
      throw ConfigError("PretrainConfig: epochs >= 1, batch_size >= 2, lr > 0 required");
  }
};

struct PretrainResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

// Supervised training of a classifier on real data with SGD and a
// warmup-free cosine schedule. Saves checkpoint, recorded accuracy and the
// final normalization running statistics alongside.
template <class T>
inline PretrainResult pretrain_teacher(Classifier<T>& model, const Dataset<T>& train_set,
                                       const Dataset<T>& test_set, const PretrainConfig& cfg,
                                       const std::string& out_dir) {
  cfg.validate();
  if (train_set.num_classes != model.spec.num_classes)
    throw ConfigError("pretrain_teacher: dataset classes do not match the model head");
  std::mt19937_64 rng(cfg.seed);
  SGD<T> opt(model.parameters(), static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum),
             static_cast<T>(cfg.weight_decay));
  const int64_t iters = std::max<int64_t>(1, train_set.size() / cfg.batch_size);
  const int64_t total_steps = cfg.epochs * iters;
  PretrainResult res;
  model.train_mode = true;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int64_t it = 0; it < iters; ++it, ++step) {
      Tensor<T> x;
      std::vector<int64_t> y;
      sample_batch(train_set, cfg.batch_size, rng, x, y);
      model.zero_grad();
      Var<T> loss = ce_stage_loss(model.forward(constant(x)).logits, y);
      double v = static_cast<double>(loss.val()[0]);
      if (!std::isfinite(v))
        throw DivergedError("pretrain_teacher: non-finite loss at epoch " +
                            std::to_string(epoch) + " iter " + std::to_string(it));
      backward(loss);
      opt.lr = static_cast<T>(warmup_cosine_lr(cfg.lr, step, total_steps, /*warmup_steps=*/0));
      opt.step();
      epoch_loss += v;
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(iters));
  }
  res.train_accuracy = accuracy(model, train_set);
  res.test_accuracy = accuracy(model, test_set);

  fs::create_directories(out_dir);
  save_classifier(out_dir, "teacher", model,
                  json{{"test_accuracy", res.test_accuracy}});
  write_json(fs::path(out_dir) / "teacher_bn_stats.json", to_json(model.capture_bn_stats()));
  write_json(fs::path(out_dir) / "teacher_report.json",
             json{{"train_accuracy", res.train_accuracy},
                  {"test_accuracy", res.test_accuracy},
                  {"epochs", cfg.epochs},
                  {"seed", cfg.seed},
                  {"epoch_losses", res.epoch_losses}});
  return res;
}

}  // namespace dfkd
