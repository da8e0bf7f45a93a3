#pragma once

#include "dfkd/autodiff.hpp"

namespace dfkd {

template <class T>
class SGD {
 public:
  T lr = T(0.1);
  T momentum = T(0.9);
  T weight_decay = T(5e-4);

  SGD() = default;
  SGD(std::vector<Var<T>> params, T lr_, T momentum_, T weight_decay_)
      : lr(lr_), momentum(momentum_), weight_decay(weight_decay_), params_(std::move(params)) {
    for (auto& p : params_) velocity_.push_back(Tensor<T>::zeros(p.val().shape));
  }

  void zero_grad() {
    for (auto& p : params_) p.grad().fill(T(0));
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& w = params_[i].val();
      const Tensor<T>& g = params_[i].grad();
      Tensor<T>& v = velocity_[i];
      for (size_t j = 0; j < w.data.size(); ++j) {
        T grad = g.data[j] + weight_decay * w.data[j];
        v.data[j] = momentum * v.data[j] + grad;
        w.data[j] -= lr * v.data[j];
      }
    }
  }

  std::vector<Tensor<T>>& state() { return velocity_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
};

template <class T>
class Adam {
 public:
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  int64_t t = 0;

  Adam() = default;
  Adam(std::vector<Var<T>> params, T lr_) : lr(lr_), params_(std::move(params)) {
    for (auto& p : params_) {
      m_.push_back(Tensor<T>::zeros(p.val().shape));
      v_.push_back(Tensor<T>::zeros(p.val().shape));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.grad().fill(T(0));
  }

  void step() {
    ++t;
    T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
    T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& w = params_[i].val();
      const Tensor<T>& g = params_[i].grad();
      for (size_t j = 0; j < w.data.size(); ++j) {
        m_[i].data[j] = beta1 * m_[i].data[j] + (T(1) - beta1) * g.data[j];
        v_[i].data[j] = beta2 * v_[i].data[j] + (T(1) - beta2) * g.data[j] * g.data[j];
        T mhat = m_[i].data[j] / bc1;
        T vhat = v_[i].data[j] / bc2;
        w.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  std::vector<Tensor<T>>& state_m() { return m_; }
  std::vector<Tensor<T>>& state_v() { return v_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
};

// Linear warm-up followed by cosine annealing to zero; `step` counts from 0,
// the final step lands exactly on lr == 0.
inline double warmup_cosine_lr(double base, int64_t step, int64_t total_steps,
                               int64_t warmup_steps) {
  if (total_steps <= 0) return base;
  if (warmup_steps > 0 && step < warmup_steps)
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  int64_t rest = total_steps - warmup_steps;
  if (rest <= 0) return base;
  double progress = static_cast<double>(step + 1 - warmup_steps) / static_cast<double>(rest);
  progress = std::min(1.0, std::max(0.0, progress));
  return 0.5 * base * (1.0 + std::cos(progress * 3.14159265358979323846));
}

inline double step_decay_lr(double base, int64_t epoch, const std::vector<int64_t>& decay_epochs,
                            double factor) {
  double lr = base;
  for (int64_t e : decay_epochs)
    if (epoch >= e) lr *= factor;
  return lr;
}

}  // namespace dfkd
