#pragma once

#include <memory>
#include <string>

#include "dfkd/autodiff.hpp"

namespace dfkd {

// Snapshot of frozen normalization statistics, in forward traversal order.
template <class T>
struct BNStatsSnapshot {
  struct Layer {
    std::string id;
    Tensor<T> mu;
    Tensor<T> sigma2;
  };
  std::vector<Layer> layers;

  bool same_structure(const BNStatsSnapshot& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (size_t i = 0; i < layers.size(); ++i)
      if (layers[i].id != o.layers[i].id || layers[i].mu.shape != o.layers[i].mu.shape)
        return false;
    return true;
  }
};

// Differentiable per-layer batch statistics collected during a forward pass.
template <class T>
struct BatchStats {
  struct Layer {
    std::string id;
    Var<T> mean;
    Var<T> var;
  };
  std::vector<Layer> layers;

  BNStatsSnapshot<T> to_snapshot() const {
    BNStatsSnapshot<T> s;
    for (const auto& l : layers) s.layers.push_back({l.id, l.mean.val(), l.var.val()});
    return s;
  }
};

template <class T>
class Module {
 public:
  virtual ~Module() = default;

  Var<T> add_param(const std::string& name, Tensor<T> init) {
    Var<T> v(std::move(init), true);
    params_.push_back({name, v});
    return v;
  }

  // buffers are held by shared_ptr so registered addresses survive layer moves
  void add_buffer(const std::string& name, std::shared_ptr<Tensor<T>> t) {
    buffers_.push_back({name, std::move(t)});
  }

  const std::vector<std::pair<std::string, Var<T>>>& params() const { return params_; }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& [n, v] : params_) out.push_back(v);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& [n, v] : params_) v.node->requires_grad = on;
  }

  bool trainable() const {
    return !params_.empty() && params_.front().second.requires_grad();
  }

  void zero_grad() {
    for (auto& [n, v] : params_) v.grad().fill(T(0));
  }

  int64_t param_count() const {
    int64_t c = 0;
    for (auto& [n, v] : params_) c += v.val().numel();
    return c;
  }

  bool all_params_finite() const {
    for (auto& [n, v] : params_)
      if (!v.val().all_finite()) return false;
    return true;
  }

  // params followed by buffers; the serialized tensor map
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [n, v] : params_) out.push_back({n, &v.val()});
    for (auto& [n, t] : buffers_) out.push_back({n, t.get()});
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor<T>>>> buffers_;
};

// ---- layers ----

template <class T>
struct LinearLayer {
  Var<T> w, b;

  LinearLayer() = default;
  LinearLayer(Module<T>& m, const std::string& name, int64_t in, int64_t out,
              std::mt19937_64& rng) {
    T s = std::sqrt(T(2) / static_cast<T>(in));
    w = m.add_param(name + ".weight", Tensor<T>::randn({out, in}, rng, s));
    b = m.add_param(name + ".bias", Tensor<T>::zeros({out}));
  }

  Var<T> operator()(Var<T> x) const { return linear(x, w, b); }
};

template <class T>
struct Conv2dLayer {
  Var<T> w, b;
  int64_t stride = 1, pad = 1;

  Conv2dLayer() = default;
  Conv2dLayer(Module<T>& m, const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k,
              int64_t stride_, int64_t pad_, std::mt19937_64& rng)
      : stride(stride_), pad(pad_) {
    T s = std::sqrt(T(2) / static_cast<T>(in_ch * k * k));
    w = m.add_param(name + ".weight", Tensor<T>::randn({out_ch, in_ch, k, k}, rng, s));
    b = m.add_param(name + ".bias", Tensor<T>::zeros({out_ch}));
  }

  Var<T> operator()(Var<T> x) const { return conv2d(x, w, b, stride, pad); }
};

// Normalization layer: plain BN when num_classes == 0, otherwise a CFE layer
// with per-class scale/shift embedding tables of shape [num_classes, C].
template <class T>
struct NormLayer {
  std::string id;
  Var<T> scale, shift;
  std::shared_ptr<Tensor<T>> run_mean = std::make_shared<Tensor<T>>(),
                             run_var = std::make_shared<Tensor<T>>();
  int64_t channels = 0;
  int64_t num_classes = 0;  // 0 = plain BN
  T eps = T(1e-5);
  T momentum = T(0.1);

  NormLayer() = default;
  NormLayer(Module<T>& m, const std::string& name, int64_t ch, int64_t n_classes = 0)
      : id(name), channels(ch), num_classes(n_classes) {
    Shape s = n_classes > 0 ? Shape{n_classes, ch} : Shape{ch};
    scale = m.add_param(name + ".scale", Tensor<T>::full(s, T(1)));
    shift = m.add_param(name + ".shift", Tensor<T>::zeros(s));
    *run_mean = Tensor<T>::zeros({ch});
    *run_var = Tensor<T>::full({ch}, T(1));
    m.add_buffer(name + ".running_mean", run_mean);
    m.add_buffer(name + ".running_var", run_var);
  }

  // labels required iff num_classes > 0. When `capture` is set, the layer
  // additionally records the differentiable batch statistics of its input
  // (used by the BNS loss through the frozen teacher in eval mode).
  Var<T> forward(Var<T> x, bool train, const std::vector<int64_t>* labels = nullptr,
                 BatchStats<T>* capture = nullptr) {
    if ((num_classes > 0) != (labels != nullptr))
      throw std::invalid_argument("NormLayer " + id + ": labels required iff CFE layer");
    if (capture) capture->layers.push_back({id, channel_mean(x), channel_var(x)});
    Tensor<T> bm, bv;
    Var<T> y = norm_scale_shift(x, scale, shift, labels, train, run_mean.get(), run_var.get(),
                                eps, train ? &bm : nullptr, train ? &bv : nullptr);
    if (train) {
      int64_t B = x.val().dim(0), HW = x.val().ndim() == 4 ? x.val().dim(2) * x.val().dim(3) : 1;
      T m = static_cast<T>(B * HW);
      T ub = m > T(1) ? m / (m - T(1)) : T(1);  // unbiased running variance
      for (int64_t c = 0; c < channels; ++c) {
        (*run_mean)[c] = (T(1) - momentum) * (*run_mean)[c] + momentum * bm[c];
        (*run_var)[c] = (T(1) - momentum) * (*run_var)[c] + momentum * bv[c] * ub;
      }
    }
    return y;
  }
};

}  // namespace dfkd
