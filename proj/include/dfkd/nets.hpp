#pragma once

#include <memory>

#include "dfkd/nn.hpp"

namespace dfkd {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ClassifierSpec {
  std::string arch_name = "cnn-small";
  int64_t num_classes = 10;
  Shape input_shape = {1, 28, 28};  // (channels, height, width)
  int64_t feature_dim = 64;

  void validate() const {
    if (num_classes < 2) throw ConfigError("ClassifierSpec: num_classes must be >= 2");
    if (feature_dim < 1) throw ConfigError("ClassifierSpec: feature_dim must be >= 1");
    if (input_shape.size() != 3) throw ConfigError("ClassifierSpec: input_shape must be (c,h,w)");
    for (int64_t d : input_shape)
      if (d < 1) throw ConfigError("ClassifierSpec: input_shape entries must be >= 1");
  }
};

template <class T>
struct ForwardResult {
  Var<T> logits;    // [B, num_classes]
  Var<T> features;  // [B, feature_dim], input of the classifier head
};

template <class T>
class Classifier : public Module<T> {
 public:
  ClassifierSpec spec;
  LinearLayer<T> head;
  std::vector<NormLayer<T>*> norm_layers;  // forward traversal order
  bool train_mode = true;

  explicit Classifier(ClassifierSpec s) : spec(std::move(s)) { spec.validate(); }

  virtual Var<T> features(Var<T> x, BatchStats<T>* capture) = 0;

  ForwardResult<T> forward(Var<T> x, BatchStats<T>* capture = nullptr) {
    const auto& xs = x.val().shape;
    if (xs.size() != 4 || xs[1] != spec.input_shape[0] || xs[2] != spec.input_shape[1] ||
        xs[3] != spec.input_shape[2])
      throw DimError("Classifier::forward: input " + shape_str(xs) + " does not match spec " +
                     shape_str(spec.input_shape));
    ForwardResult<T> r;
    r.features = features(x, capture);
    r.logits = head(r.features);
    return r;
  }

  BNStatsSnapshot<T> capture_bn_stats() const {
    if (norm_layers.empty())
      throw ConfigError("capture_bn_stats: model has no normalization layers");
    BNStatsSnapshot<T> s;
    for (const NormLayer<T>* l : norm_layers)
      s.layers.push_back({l->id, *l->run_mean, *l->run_var});
    return s;
  }
};

// Differentiable per-layer statistics of the activations entering each
// normalization layer during a forward pass on x.
template <class T>
inline BatchStats<T> batch_bn_stats(Classifier<T>& model, Var<T> x) {
  if (x.val().dim(0) < 2) throw std::invalid_argument("batch_bn_stats: batch size must be >= 2");
  BatchStats<T> stats;
  model.features(x, &stats);
  return stats;
}

// ---- cnn-small: 3 conv blocks with BN and pooling ----

template <class T>
class CnnSmall final : public Classifier<T> {
 public:
  CnnSmall(ClassifierSpec s, std::mt19937_64& rng) : Classifier<T>(std::move(s)) {
    const auto& sp = this->spec;
    int64_t f = sp.feature_dim;
    int64_t c1 = std::max<int64_t>(1, f / 4), c2 = std::max<int64_t>(1, f / 2);
    conv1 = Conv2dLayer<T>(*this, "conv1", sp.input_shape[0], c1, 3, 1, 1, rng);
    bn1 = NormLayer<T>(*this, "bn1", c1);
    conv2 = Conv2dLayer<T>(*this, "conv2", c1, c2, 3, 1, 1, rng);
    bn2 = NormLayer<T>(*this, "bn2", c2);
    conv3 = Conv2dLayer<T>(*this, "conv3", c2, f, 3, 1, 1, rng);
    bn3 = NormLayer<T>(*this, "bn3", f);
    this->head = LinearLayer<T>(*this, "head", f, sp.num_classes, rng);
    this->norm_layers = {&bn1, &bn2, &bn3};
  }

  Var<T> features(Var<T> x, BatchStats<T>* cap) override {
    bool tr = this->train_mode;
    Var<T> h = maxpool2x2(relu(bn1.forward(conv1(x), tr, nullptr, cap)));
    h = maxpool2x2(relu(bn2.forward(conv2(h), tr, nullptr, cap)));
    h = relu(bn3.forward(conv3(h), tr, nullptr, cap));
    return global_avg_pool(h);
  }

 private:
  Conv2dLayer<T> conv1, conv2, conv3;
  NormLayer<T> bn1, bn2, bn3;
};

// ---- resnet-tiny: stem + 3 residual stages ----

template <class T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2, proj;
  NormLayer<T> bn1, bn2, bn_proj;
  bool has_proj = false;

  ResidualBlock() = default;
  ResidualBlock(Module<T>& m, const std::string& name, int64_t in_ch, int64_t out_ch,
                int64_t stride, std::mt19937_64& rng) {
    conv1 = Conv2dLayer<T>(m, name + ".conv1", in_ch, out_ch, 3, stride, 1, rng);
    bn1 = NormLayer<T>(m, name + ".bn1", out_ch);
    conv2 = Conv2dLayer<T>(m, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
    bn2 = NormLayer<T>(m, name + ".bn2", out_ch);
    has_proj = (in_ch != out_ch) || (stride != 1);
    if (has_proj) {
      proj = Conv2dLayer<T>(m, name + ".proj", in_ch, out_ch, 1, stride, 0, rng);
      bn_proj = NormLayer<T>(m, name + ".bn_proj", out_ch);
    }
  }

  // Must run on the final (moved-into) block so the pointers stay valid.
  void collect_norms(std::vector<NormLayer<T>*>& norm_order) {
    norm_order.push_back(&bn1);
    norm_order.push_back(&bn2);
    if (has_proj) norm_order.push_back(&bn_proj);
  }

  Var<T> forward(Var<T> x, bool train, BatchStats<T>* cap) {
    Var<T> h = relu(bn1.forward(conv1(x), train, nullptr, cap));
    h = bn2.forward(conv2(h), train, nullptr, cap);
    Var<T> skip = has_proj ? bn_proj.forward(proj(x), train, nullptr, cap) : x;
    return relu(add(h, skip));
  }
};

template <class T>
class ResNetTiny final : public Classifier<T> {
 public:
  ResNetTiny(ClassifierSpec s, std::mt19937_64& rng) : Classifier<T>(std::move(s)) {
    const auto& sp = this->spec;
    int64_t f = sp.feature_dim;
    int64_t c1 = std::max<int64_t>(1, f / 4), c2 = std::max<int64_t>(1, f / 2);
    stem = Conv2dLayer<T>(*this, "stem", sp.input_shape[0], c1, 3, 1, 1, rng);
    bn_stem = NormLayer<T>(*this, "bn_stem", c1);
    this->norm_layers.push_back(&bn_stem);
    stage1 = ResidualBlock<T>(*this, "stage1", c1, c1, 1, rng);
    stage2 = ResidualBlock<T>(*this, "stage2", c1, c2, 2, rng);
    stage3 = ResidualBlock<T>(*this, "stage3", c2, f, 2, rng);
    stage1.collect_norms(this->norm_layers);
    stage2.collect_norms(this->norm_layers);
    stage3.collect_norms(this->norm_layers);
    this->head = LinearLayer<T>(*this, "head", f, sp.num_classes, rng);
  }

  Var<T> features(Var<T> x, BatchStats<T>* cap) override {
    bool tr = this->train_mode;
    Var<T> h = relu(bn_stem.forward(stem(x), tr, nullptr, cap));
    h = stage1.forward(h, tr, cap);
    h = stage2.forward(h, tr, cap);
    h = stage3.forward(h, tr, cap);
    return global_avg_pool(h);
  }

 private:
  Conv2dLayer<T> stem;
  NormLayer<T> bn_stem;
  ResidualBlock<T> stage1, stage2, stage3;
};

template <class T>
inline std::unique_ptr<Classifier<T>> build_classifier(const ClassifierSpec& spec,
                                                       std::mt19937_64& rng) {
  spec.validate();
  if (spec.arch_name == "cnn-small") return std::make_unique<CnnSmall<T>>(spec, rng);
  if (spec.arch_name == "resnet-tiny") return std::make_unique<ResNetTiny<T>>(spec, rng);
  throw ConfigError("build_classifier: unknown arch '" + spec.arch_name +
                    "'; valid: cnn-small, resnet-tiny");
}

// ---- adapter: maps student feature dim to teacher feature dim ----

struct AdapterSpec {
  int64_t in_dim = 0;
  int64_t out_dim = 0;
  std::vector<int64_t> hidden_dims;  // two entries; defaulted when empty
  bool bypass = false;               // identity pass-through when in_dim == out_dim

  void resolve_defaults() {
    if (hidden_dims.empty()) {
      int64_t g = static_cast<int64_t>(
          std::llround(std::sqrt(static_cast<double>(in_dim) * static_cast<double>(out_dim))));
      hidden_dims = {std::max<int64_t>(1, g), out_dim};
    }
    if (hidden_dims.size() != 2) throw ConfigError("AdapterSpec: exactly two hidden dims");
    for (int64_t h : hidden_dims)
      if (h < 1) throw ConfigError("AdapterSpec: hidden dims must be positive");
  }
};

template <class T>
class Adapter : public Module<T> {
 public:
  AdapterSpec spec;

  Adapter(AdapterSpec s, std::mt19937_64& rng) : spec(std::move(s)) {
    spec.resolve_defaults();
    identity_ = spec.bypass && spec.in_dim == spec.out_dim;
    if (!identity_) {
      fc1 = LinearLayer<T>(*this, "fc1", spec.in_dim, spec.hidden_dims[0], rng);
      fc2 = LinearLayer<T>(*this, "fc2", spec.hidden_dims[0], spec.hidden_dims[1], rng);
      fc3 = LinearLayer<T>(*this, "fc3", spec.hidden_dims[1], spec.out_dim, rng);
    }
  }

  bool identity() const { return identity_; }

  Var<T> map(Var<T> features) {
    if (features.val().ndim() != 2 || features.val().dim(1) != spec.in_dim)
      throw DimError("Adapter::map: expected [B," + std::to_string(spec.in_dim) + "], got " +
                     shape_str(features.val().shape));
    if (identity_) return features;
    return fc3(relu(fc2(relu(fc1(features)))));
  }

 private:
  bool identity_ = false;
  LinearLayer<T> fc1, fc2, fc3;
};

}  // namespace dfkd
