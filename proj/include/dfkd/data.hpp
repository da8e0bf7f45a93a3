#pragma once

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "dfkd/png_io.hpp"
#include "dfkd/serialize.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

struct DatasetSpec {
  std::string name = "synth-digits";
  std::string root;
  std::string split = "train";  // "train" or "test"
  std::vector<double> mean = {0.5};
  std::vector<double> stddev = {0.5};
  bool random_crop_pad = true;
  bool horizontal_flip = false;

  void validate() const {
    if (split != "train" && split != "test")
      throw ConfigError("DatasetSpec: split must be 'train' or 'test'");
    if (mean.size() != stddev.size() || mean.empty())
      throw ConfigError("DatasetSpec: mean/std must have one entry per channel");
    for (double s : stddev)
      if (s <= 0) throw ConfigError("DatasetSpec: std entries must be > 0");
  }
};

// Eagerly loaded, normalized dataset. The test split is never augmented.
template <class T>
struct Dataset {
  DatasetSpec spec;
  Shape image_shape;  // (c,h,w)
  int64_t num_classes = 0;
  Tensor<T> images;  // [M,c,h,w]
  std::vector<int64_t> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  bool augmented() const {
    return spec.split == "train" && (spec.random_crop_pad || spec.horizontal_flip);
  }
};

namespace datadetail {

inline uint64_t fnv1a(uint64_t h, const uint8_t* p, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace datadetail

// Layout: root/manifest.json, root/<split>/class_<k>/<i>.png
template <class T>
inline Dataset<T> load_dataset(const DatasetSpec& spec) {
  spec.validate();
  fs::path root(spec.root);
  if (!fs::exists(root / "manifest.json"))
    throw IoError("load_dataset: no manifest.json under " + root.string());
  json manifest = read_json(root / "manifest.json");

  Dataset<T> ds;
  ds.spec = spec;
  ds.num_classes = manifest.at("classes").get<int64_t>();
  ds.image_shape = manifest.at("image_shape").get<Shape>();
  const int64_t C = ds.image_shape[0], H = ds.image_shape[1], W = ds.image_shape[2];
  if (static_cast<int64_t>(spec.mean.size()) != C)
    throw ConfigError("load_dataset: normalization stats need " + std::to_string(C) +
                      " entries, got " + std::to_string(spec.mean.size()));
  auto counts = manifest.at("counts").at(spec.split).get<std::vector<int64_t>>();
  if (static_cast<int64_t>(counts.size()) != ds.num_classes)
    throw IoError("load_dataset: manifest counts do not cover every class");

  int64_t total = std::accumulate(counts.begin(), counts.end(), int64_t{0});
  ds.images = Tensor<T>({total, C, H, W});
  ds.labels.reserve(static_cast<size_t>(total));
  uint64_t checksum = 14695981039346656037ULL;
  int64_t row = 0;
  for (int64_t cls = 0; cls < ds.num_classes; ++cls) {
    fs::path dir = root / spec.split / ("class_" + std::to_string(cls));
    for (int64_t i = 0; i < counts[static_cast<size_t>(cls)]; ++i, ++row) {
      fs::path file = dir / (std::to_string(i) + ".png");
      if (!fs::exists(file)) throw IoError("load_dataset: missing file " + file.string());
      ImageU8 img = read_png(file.string());
      if (img.channels != C || img.height != H || img.width != W)
        throw IoError("load_dataset: corrupt or mis-shaped image " + file.string());
      checksum = datadetail::fnv1a(checksum, img.pixels.data(), img.pixels.size());
      // interleaved u8 -> planar normalized
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x) {
            double raw = img.pixels[static_cast<size_t>((y * W + x) * C + c)] / 255.0;
            ds.images.at4(row, c, y, x) = static_cast<T>(
                (raw - spec.mean[static_cast<size_t>(c)]) / spec.stddev[static_cast<size_t>(c)]);
          }
      ds.labels.push_back(cls);
    }
  }
  if (manifest.contains("checksum")) {
    auto stored = manifest.at("checksum");
    if (stored.contains(spec.split) &&
        stored.at(spec.split).get<std::string>() != datadetail::hex64(checksum))
      throw IoError("load_dataset: checksum mismatch for split '" + spec.split +
                    "' (corrupt files?)");
  }
  return ds;
}

// Random crop with zero padding and optional horizontal flip, applied per batch.
template <class T>
inline void sample_batch(const Dataset<T>& ds, int64_t batch, std::mt19937_64& rng, Tensor<T>& x,
                         std::vector<int64_t>& y, int64_t crop_pad = 2) {
  const int64_t C = ds.image_shape[0], H = ds.image_shape[1], W = ds.image_shape[2];
  x = Tensor<T>({batch, C, H, W});
  y.resize(static_cast<size_t>(batch));
  std::uniform_int_distribution<int64_t> pick(0, ds.size() - 1);
  const bool aug = ds.augmented();
  std::uniform_int_distribution<int64_t> shift(-crop_pad, crop_pad);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int64_t i = 0; i < batch; ++i) {
    int64_t idx = pick(rng);
    y[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(idx)];
    int64_t dy = 0, dx = 0;
    bool flip = false;
    if (aug) {
      if (ds.spec.random_crop_pad) {
        dy = shift(rng);
        dx = shift(rng);
      }
      if (ds.spec.horizontal_flip) flip = coin(rng) != 0;
    }
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          int64_t sh = h + dy, sw = (flip ? W - 1 - w : w) + dx;
          x.at4(i, c, h, w) = (sh >= 0 && sh < H && sw >= 0 && sw < W)
                                  ? ds.images.at4(idx, c, sh, sw)
                                  : T(0);
        }
  }
}

// ---- synthetic MNIST-class corpus (1x28x28, 10 classes) ----
//
// Seven-segment digit glyphs with random offset, stroke intensity, background
// level and pixel noise. Self-contained stand-in for handwritten-digit data;
// separable enough for a small CNN to reach high accuracy.

namespace datadetail {

// segment layout: 0 top, 1 top-left, 2 top-right, 3 middle, 4 bottom-left,
// 5 bottom-right, 6 bottom
inline const bool* digit_segments(int digit) {
  static const bool table[10][7] = {
      {1, 1, 1, 0, 1, 1, 1},  // 0
      {0, 0, 1, 0, 0, 1, 0},  // 1
      {1, 0, 1, 1, 1, 0, 1},  // 2
      {1, 0, 1, 1, 0, 1, 1},  // 3
      {0, 1, 1, 1, 0, 1, 0},  // 4
      {1, 1, 0, 1, 0, 1, 1},  // 5
      {1, 1, 0, 1, 1, 1, 1},  // 6
      {1, 0, 1, 0, 0, 1, 0},  // 7
      {1, 1, 1, 1, 1, 1, 1},  // 8
      {1, 1, 1, 1, 0, 1, 1},  // 9
  };
  return table[digit];
}

inline ImageU8 render_digit(int digit, std::mt19937_64& rng) {
  const int S = 28;
  std::uniform_int_distribution<int> off(-3, 3);
  std::uniform_real_distribution<double> fg(0.65, 1.0);
  std::uniform_real_distribution<double> bg(0.0, 0.12);
  std::normal_distribution<double> noise(0.0, 0.07);
  const int ox = off(rng), oy = off(rng);
  const double stroke = fg(rng), back = bg(rng);
  // glyph box: x in [9,19], y in [4,24], thickness 3
  const int x0 = 9, x1 = 19, y0 = 4, ym = 14, y1 = 24, t = 3;
  std::vector<double> canvas(S * S, back);
  const bool* seg = digit_segments(digit);
  auto hline = [&](int y, int xa, int xb) {
    for (int yy = y - t / 2; yy <= y + t / 2; ++yy)
      for (int x = xa; x <= xb; ++x) {
        int px = x + ox, py = yy + oy;
        if (px >= 0 && px < S && py >= 0 && py < S) canvas[py * S + px] = stroke;
      }
  };
  auto vline = [&](int x, int ya, int yb) {
    for (int xx = x - t / 2; xx <= x + t / 2; ++xx)
      for (int y = ya; y <= yb; ++y) {
        int px = xx + ox, py = y + oy;
        if (px >= 0 && px < S && py >= 0 && py < S) canvas[py * S + px] = stroke;
      }
  };
  if (seg[0]) hline(y0, x0, x1);
  if (seg[1]) vline(x0, y0, ym);
  if (seg[2]) vline(x1, y0, ym);
  if (seg[3]) hline(ym, x0, x1);
  if (seg[4]) vline(x0, ym, y1);
  if (seg[5]) vline(x1, ym, y1);
  if (seg[6]) hline(y1, x0, x1);

  ImageU8 img;
  img.width = S;
  img.height = S;
  img.channels = 1;
  img.pixels.resize(S * S);
  for (int i = 0; i < S * S; ++i) {
    double v = std::clamp(canvas[i] + noise(rng), 0.0, 1.0);
    img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

}  // namespace datadetail

inline void make_synthetic_digits(const std::string& root, int64_t train_per_class,
                                  int64_t test_per_class, uint64_t seed) {
  std::mt19937_64 rng(seed);
  fs::path base(root);
  json counts, checksum;
  for (const auto& [split, per_class] :
       std::vector<std::pair<std::string, int64_t>>{{"train", train_per_class},
                                                    {"test", test_per_class}}) {
    uint64_t h = 14695981039346656037ULL;
    std::vector<int64_t> per(10, per_class);
    for (int cls = 0; cls < 10; ++cls) {
      fs::path dir = base / split / ("class_" + std::to_string(cls));
      fs::create_directories(dir);
      for (int64_t i = 0; i < per_class; ++i) {
        ImageU8 img = datadetail::render_digit(cls, rng);
        h = datadetail::fnv1a(h, img.pixels.data(), img.pixels.size());
        write_png((dir / (std::to_string(i) + ".png")).string(), img);
      }
    }
    counts[split] = per;
    checksum[split] = datadetail::hex64(h);
  }
  write_json(base / "manifest.json", json{{"name", "synth-digits"},
                                          {"classes", 10},
                                          {"image_shape", Shape{1, 28, 28}},
                                          {"counts", counts},
                                          {"checksum", checksum},
                                          {"seed", seed}});
}

}  // namespace dfkd
