#pragma once

#include <Eigen/Dense>
#include <functional>

#include "dfkd/data.hpp"
#include "dfkd/generator.hpp"
#include "dfkd/nets.hpp"
#include "dfkd/serialize.hpp"

namespace dfkd {

// Top-1 accuracy of an eval-mode classifier over a full dataset.
template <class T>
inline double accuracy(Classifier<T>& model, const Dataset<T>& ds, int64_t batch = 256) {
  if (ds.size() == 0) throw ConfigError("accuracy: empty dataset");
  const bool was_training = model.train_mode;
  model.train_mode = false;
  const int64_t C = ds.image_shape[0], H = ds.image_shape[1], W = ds.image_shape[2];
  int64_t correct = 0;
  for (int64_t start = 0; start < ds.size(); start += batch) {
    int64_t n = std::min(batch, ds.size() - start);
    Tensor<T> x({n, C, H, W});
    std::copy_n(ds.images.data.begin() + start * C * H * W, n * C * H * W, x.data.begin());
    Var<T> logits = model.forward(constant(x)).logits;
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < logits.val().shape[1]; ++j)
        if (logits.val().at2(i, j) > logits.val().at2(i, best)) best = j;
      if (best == ds.labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  model.train_mode = was_training;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// Mean and unbiased covariance of a feature set, for FID.
struct FeatureStats {
  Tensor<double> mu;     // [D]
  Tensor<double> sigma;  // [D,D]
  int64_t n = 0;
};

// extractor maps an image batch [B,c,h,w] to features [B,D]
template <class T>
using FeatureExtractor = std::function<Tensor<double>(const Tensor<T>&)>;

// Eval-mode penultimate features of a classifier; the standard extractor.
template <class T>
inline FeatureExtractor<T> penultimate_extractor(Classifier<T>& model) {
  return [&model](const Tensor<T>& x) {
    const bool was_training = model.train_mode;
    model.train_mode = false;
    Tensor<T> f = model.forward(constant(x)).features.val();
    model.train_mode = was_training;
    return f.template cast<double>();
  };
}

template <class T>
inline FeatureStats feature_stats(const FeatureExtractor<T>& extractor, const Tensor<T>& images,
                                  int64_t batch = 256) {
  const int64_t M = images.shape[0];
  if (M < 2) throw ConfigError("feature_stats: need at least 2 samples");
  std::vector<Tensor<double>> chunks;
  int64_t D = 0;
  const int64_t per = images.numel() / M;
  for (int64_t start = 0; start < M; start += batch) {
    int64_t n = std::min(batch, M - start);
    Shape s = images.shape;
    s[0] = n;
    Tensor<T> x(s);
    std::copy_n(images.data.begin() + start * per, n * per, x.data.begin());
    chunks.push_back(extractor(x));
    D = chunks.back().shape[1];
  }
  FeatureStats st;
  st.n = M;
  st.mu = Tensor<double>::zeros({D});
  for (const auto& f : chunks)
    for (int64_t i = 0; i < f.shape[0]; ++i)
      for (int64_t j = 0; j < D; ++j) st.mu[j] += f.at2(i, j);
  for (int64_t j = 0; j < D; ++j) st.mu[j] /= static_cast<double>(M);
  st.sigma = Tensor<double>::zeros({D, D});
  for (const auto& f : chunks)
    for (int64_t i = 0; i < f.shape[0]; ++i)
      for (int64_t a = 0; a < D; ++a) {
        double da = f.at2(i, a) - st.mu[a];
        for (int64_t b = 0; b < D; ++b) st.sigma.at2(a, b) += da * (f.at2(i, b) - st.mu[b]);
      }
  for (auto& v : st.sigma.data) v /= static_cast<double>(M - 1);
  return st;
}

// Frechet distance between two feature Gaussians:
//   ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})
// The matrix square root is taken through the eigendecomposition of the
// symmetrized product; tiny negative eigenvalues are clamped to zero.
inline double fid(const FeatureStats& a, const FeatureStats& b) {
  const int64_t D = a.mu.shape[0];
  if (b.mu.shape[0] != D) throw DimError("fid: feature dimensions differ");
  double mean_term = 0.0;
  for (int64_t i = 0; i < D; ++i) {
    double d = a.mu[i] - b.mu[i];
    mean_term += d * d;
  }
  using Mat = Eigen::MatrixXd;
  Mat Sa = Eigen::Map<const Mat>(a.sigma.data.data(), D, D);
  Mat Sb = Eigen::Map<const Mat>(b.sigma.data.data(), D, D);
  // row-major storage mapped column-major gives the transpose; covariances are
  // symmetric so the product trace is unaffected.
  Mat prod = Sa * Sb;
  Mat sym = 0.5 * (prod + prod.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  double sqrt_trace = 0.0;
  for (int64_t i = 0; i < D; ++i) sqrt_trace += std::sqrt(std::max(0.0, es.eigenvalues()[i]));
  return mean_term + Sa.trace() + Sb.trace() - 2.0 * sqrt_trace;
}

// Fraction of generated samples the scoring classifier assigns to their
// conditioning class, balanced over classes.
template <class T>
inline double conditional_fidelity(Classifier<T>& scorer, Generator<T>& gen, int64_t per_class,
                                   std::mt19937_64& rng, int64_t batch = 128) {
  if (per_class < 1) throw ConfigError("conditional_fidelity: per_class must be >= 1");
  const bool scorer_training = scorer.train_mode;
  const bool gen_training = gen.train_mode;
  scorer.train_mode = false;
  gen.train_mode = false;
  const int64_t N = gen.spec.num_classes;
  std::vector<double> per_class_acc(static_cast<size_t>(N), 0.0);
  for (int64_t cls = 0; cls < N; ++cls) {
    int64_t hit = 0;
    for (int64_t start = 0; start < per_class; start += batch) {
      int64_t n = std::min(batch, per_class - start);
      ConditionedNoise<T> cn;
      cn.z = Tensor<T>::randn({n, gen.spec.latent_dim}, rng);
      cn.labels.assign(static_cast<size_t>(n), cls);
      Var<T> x = gen.generate(cn);
      Var<T> logits = scorer.forward(x).logits;
      for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < N; ++j)
          if (logits.val().at2(i, j) > logits.val().at2(i, best)) best = j;
        if (best == cls) ++hit;
      }
    }
    per_class_acc[static_cast<size_t>(cls)] =
        static_cast<double>(hit) / static_cast<double>(per_class);
  }
  scorer.train_mode = scorer_training;
  gen.train_mode = gen_training;
  return std::accumulate(per_class_acc.begin(), per_class_acc.end(), 0.0) /
         static_cast<double>(N);
}

// Map generator output in [-1,1] to 8-bit pixels.
inline uint8_t pixel_u8(double v) {
  return static_cast<uint8_t>(std::clamp(std::lround(255.0 * (v + 1.0) / 2.0), 0L, 255L));
}

// One row per class, samples_per_class columns; returns the written path.
template <class T>
inline std::string export_grid(Generator<T>& gen, int64_t samples_per_class,
                               const std::string& out_dir, int64_t epoch, std::mt19937_64& rng) {
  const bool gen_training = gen.train_mode;
  gen.train_mode = false;
  const int64_t N = gen.spec.num_classes;
  const int64_t C = gen.spec.output_shape[0], H = gen.spec.output_shape[1],
                W = gen.spec.output_shape[2];
  if (C != 1 && C != 3) throw ConfigError("export_grid: only 1- or 3-channel images supported");
  ImageU8 grid;
  grid.channels = static_cast<int64_t>(C);
  grid.height = N * H;
  grid.width = samples_per_class * W;
  grid.pixels.assign(static_cast<size_t>(grid.height * grid.width * grid.channels), 0);
  for (int64_t cls = 0; cls < N; ++cls) {
    ConditionedNoise<T> cn;
    cn.z = Tensor<T>::randn({samples_per_class, gen.spec.latent_dim}, rng);
    cn.labels.assign(static_cast<size_t>(samples_per_class), cls);
    Tensor<T> x = gen.generate(cn).val();
    for (int64_t s = 0; s < samples_per_class; ++s)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c)
            grid.pixels[static_cast<size_t>(((cls * H + h) * grid.width + s * W + w) * C + c)] =
                pixel_u8(static_cast<double>(x.at4(s, c, h, w)));
  }
  gen.train_mode = gen_training;
  fs::create_directories(out_dir);
  fs::path path = fs::path(out_dir) / ("samples_epoch" + std::to_string(epoch) + ".png");
  write_png(path.string(), grid);
  return path.string();
}

struct EvalReport {
  double accuracy = 0.0;
  double fid = 0.0;
  double conditional_fidelity = 0.0;
  int64_t n_samples = 0;
  std::string extractor_id;
  uint64_t seed = 0;

  json to_json() const {
    return json{{"accuracy", accuracy},
                {"fid", fid},
                {"conditional_fidelity", conditional_fidelity},
                {"n_samples", n_samples},
                {"extractor_id", extractor_id},
                {"seed", seed}};
  }
};

// Full evaluation of a distilled pair: student accuracy on real test data,
// FID between real and generated images under the teacher's features, and
// conditional fidelity scored by the teacher.
template <class T>
inline EvalReport evaluate(Classifier<T>& teacher, Classifier<T>& student, Generator<T>& gen,
                           const Dataset<T>& test_set, int64_t fid_samples, int64_t per_class,
                           uint64_t seed) {
  EvalReport rep;
  rep.seed = seed;
  rep.extractor_id = "teacher:" + teacher.spec.arch_name;
  std::mt19937_64 rng(seed);
  rep.accuracy = accuracy(student, test_set);

  int64_t n = std::min<int64_t>(fid_samples, test_set.size());
  if (n < 2) throw ConfigError("evaluate: need at least 2 samples for FID");
  rep.n_samples = n;
  Shape s = test_set.image_shape;
  s.insert(s.begin(), n);
  Tensor<T> real(s);
  std::copy_n(test_set.images.data.begin(), real.numel(), real.data.begin());
  Tensor<T> fake(s);
  const bool gen_training = gen.train_mode;
  gen.train_mode = false;
  const int64_t per_img = real.numel() / n;
  std::uniform_int_distribution<int64_t> cls_pick(0, gen.spec.num_classes - 1);
  for (int64_t start = 0; start < n; start += 128) {
    int64_t m = std::min<int64_t>(128, n - start);
    ConditionedNoise<T> cn;
    cn.z = Tensor<T>::randn({m, gen.spec.latent_dim}, rng);
    cn.labels.resize(static_cast<size_t>(m));
    for (auto& l : cn.labels) l = cls_pick(rng);
    Tensor<T> x = gen.generate(cn).val();
    std::copy_n(x.data.begin(), m * per_img, fake.data.begin() + start * per_img);
  }
  gen.train_mode = gen_training;
  auto extractor = penultimate_extractor(teacher);
  rep.fid = fid(feature_stats(extractor, real), feature_stats(extractor, fake));
  rep.conditional_fidelity = conditional_fidelity(teacher, gen, per_class, rng);
  return rep;
}

}  // namespace dfkd
