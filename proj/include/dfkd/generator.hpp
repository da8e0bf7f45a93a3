#pragma once

#include "dfkd/nn.hpp"
#include "dfkd/nets.hpp"

namespace dfkd {

enum class CfeMode { full_layer, three_layer, plain_bn };

inline CfeMode cfe_mode_from_string(const std::string& s) {
  if (s == "full_layer") return CfeMode::full_layer;
  if (s == "three_layer") return CfeMode::three_layer;
  if (s == "plain_bn") return CfeMode::plain_bn;
  throw ConfigError("unknown cfe_mode '" + s + "'; valid: full_layer, three_layer, plain_bn");
}

inline std::string to_string(CfeMode m) {
  switch (m) {
    case CfeMode::full_layer: return "full_layer";
    case CfeMode::three_layer: return "three_layer";
    default: return "plain_bn";
  }
}

struct GeneratorSpec {
  int64_t latent_dim = 64;
  int64_t num_classes = 10;
  Shape output_shape = {1, 28, 28};  // (channels, height, width)
  int64_t base_channels = 32;
  CfeMode cfe_mode = CfeMode::full_layer;

  void validate() const {
    if (latent_dim < 1 || base_channels < 1 || num_classes < 2)
      throw ConfigError("GeneratorSpec: latent_dim, base_channels >= 1 and num_classes >= 2");
    if (output_shape.size() != 3) throw ConfigError("GeneratorSpec: output_shape must be (c,h,w)");
    if (output_shape[1] % 4 != 0 || output_shape[2] % 4 != 0)
      throw ConfigError("GeneratorSpec: output height/width must be divisible by 4");
  }
};

// Per-sample latent vectors paired with class conditions.
template <class T>
struct ConditionedNoise {
  Tensor<T> z;                  // [B, latent_dim]
  std::vector<int64_t> labels;  // class ids in [0, N-1]

  static ConditionedNoise sample(int64_t batch, int64_t latent_dim, int64_t num_classes,
                                 std::mt19937_64& rng) {
    ConditionedNoise cn;
    cn.z = Tensor<T>::randn({batch, latent_dim}, rng);
    cn.labels.resize(static_cast<size_t>(batch));
    std::uniform_int_distribution<int64_t> dist(0, num_classes - 1);
    for (auto& y : cn.labels) y = dist(rng);
    return cn;
  }

  void validate(int64_t latent_dim, int64_t num_classes) const {
    if (z.ndim() != 2 || z.dim(1) != latent_dim)
      throw DimError("ConditionedNoise: z must be [B," + std::to_string(latent_dim) + "]");
    if (static_cast<int64_t>(labels.size()) != z.dim(0))
      throw DimError("ConditionedNoise: labels length must equal batch size");
    if (!z.all_finite()) throw std::invalid_argument("ConditionedNoise: z must be finite");
    for (int64_t y : labels)
      if (y < 0 || y >= num_classes)
        throw std::out_of_range("ConditionedNoise: label " + std::to_string(y) + " out of [0," +
                                std::to_string(num_classes) + ")");
  }
};

// Categorical feature embedding normalization: batch-normalize F, then scale
// and shift per channel with rows of the class embedding tables selected by y.
// Passing running statistics switches to eval normalization.
template <class T>
inline Var<T> cfe_forward(Var<T> F, const std::vector<int64_t>& y, Var<T> W, Var<T> b,
                          T eps = T(1e-5), const Tensor<T>* mean = nullptr,
                          const Tensor<T>* var = nullptr) {
  bool train = (mean == nullptr);
  return norm_scale_shift(F, W, b, &y, train, mean, var, eps);
}

// Class-conditional image generator: FC seed at (H/4,W/4), two nearest-
// neighbor 2x upsampling conv blocks, tanh output in [-1,1].
template <class T>
class Generator : public Module<T> {
 public:
  GeneratorSpec spec;
  bool train_mode = true;

  Generator(GeneratorSpec s, std::mt19937_64& rng) : spec(std::move(s)) {
    spec.validate();
    int64_t ch = spec.output_shape[0], H = spec.output_shape[1], W = spec.output_shape[2];
    int64_t b0 = spec.base_channels;
    int64_t b1 = std::max<int64_t>(1, b0 / 2), b2 = std::max<int64_t>(1, b0 / 4);
    seed_h_ = H / 4;
    seed_w_ = W / 4;
    label_embed_ =
        this->add_param("label_embed", Tensor<T>::randn({spec.num_classes, spec.latent_dim}, rng,
                                                        T(1) / std::sqrt(T(spec.latent_dim))));
    fc_ = LinearLayer<T>(*this, "fc", 2 * spec.latent_dim, b0 * seed_h_ * seed_w_, rng);
    int cls_for = spec.cfe_mode == CfeMode::plain_bn ? 0 : static_cast<int>(spec.num_classes);
    norm0_ = NormLayer<T>(*this, "norm0", b0, cls_for);
    conv1_ = Conv2dLayer<T>(*this, "conv1", b0, b1, 3, 1, 1, rng);
    norm1_ = NormLayer<T>(*this, "norm1", b1, cls_for);
    conv2_ = Conv2dLayer<T>(*this, "conv2", b1, b2, 3, 1, 1, rng);
    norm2_ = NormLayer<T>(*this, "norm2", b2, cls_for);
    conv3_ = Conv2dLayer<T>(*this, "conv3", b2, ch, 3, 1, 1, rng);
    int cls_last = spec.cfe_mode == CfeMode::full_layer ? static_cast<int>(spec.num_classes) : 0;
    norm3_ = NormLayer<T>(*this, "norm3", ch, cls_last);
  }

  Var<T> generate(const ConditionedNoise<T>& cn) {
    cn.validate(spec.latent_dim, spec.num_classes);
    bool tr = train_mode;
    const std::vector<int64_t>* y0 = norm0_.num_classes > 0 ? &cn.labels : nullptr;
    const std::vector<int64_t>* y3 = norm3_.num_classes > 0 ? &cn.labels : nullptr;
    Var<T> z = constant(cn.z);
    Var<T> emb = embed_rows(label_embed_, cn.labels);
    Var<T> h = fc_(concat_cols(z, emb));
    h = reshape(h, {cn.z.dim(0), spec.base_channels, seed_h_, seed_w_});
    h = norm0_.forward(h, tr, y0);
    h = leaky_relu(norm1_.forward(conv1_(upsample_nearest2x(h)), tr, y0), T(0.2));
    h = leaky_relu(norm2_.forward(conv2_(upsample_nearest2x(h)), tr, y0), T(0.2));
    h = tanh_op(norm3_.forward(conv3_(h), tr, y3));
    return h;
  }

 private:
  Var<T> label_embed_;
  LinearLayer<T> fc_;
  Conv2dLayer<T> conv1_, conv2_, conv3_;
  NormLayer<T> norm0_, norm1_, norm2_, norm3_;
  int64_t seed_h_ = 0, seed_w_ = 0;
};

}  // namespace dfkd
