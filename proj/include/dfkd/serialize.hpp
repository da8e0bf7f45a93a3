#pragma once

#include <filesystem>
#include <fstream>

#include "dfkd/generator.hpp"
#include "dfkd/nets.hpp"
#include "dfkd/png_io.hpp"
#include "json.hpp"

namespace dfkd {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- binary tensor map ----
// magic, u32 version, u64 count, per entry: u32 name_len, name, u64 ndim,
// i64 dims..., f64 payload. Values are stored as double regardless of the
// in-memory scalar type.

namespace serdetail {

constexpr char kMagic[8] = {'D', 'F', 'K', 'D', 'T', 'M', 'A', 'P'};

template <class V>
inline void write_pod(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
inline void read_pod(std::ifstream& f, V& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
}

}  // namespace serdetail

template <class T>
inline void save_tensor_map(const fs::path& path,
                            const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_tensor_map: cannot open " + path.string());
  f.write(serdetail::kMagic, 8);
  serdetail::write_pod(f, uint32_t{1});
  serdetail::write_pod(f, static_cast<uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    serdetail::write_pod(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    serdetail::write_pod(f, static_cast<uint64_t>(t->shape.size()));
    for (int64_t d : t->shape) serdetail::write_pod(f, d);
    for (T v : t->data) serdetail::write_pod(f, static_cast<double>(v));
  }
  if (!f) throw IoError("save_tensor_map: write failed for " + path.string());
}

template <class T>
inline void load_tensor_map(const fs::path& path,
                            const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_tensor_map: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  uint32_t version = 0;
  serdetail::read_pod(f, version);
  if (std::memcmp(magic, serdetail::kMagic, 8) != 0 || version != 1)
    throw IoError("load_tensor_map: bad header in " + path.string());
  uint64_t count = 0;
  serdetail::read_pod(f, count);
  std::unordered_map<std::string, Tensor<T>*> want;
  for (const auto& [name, t] : tensors) want[name] = t;
  size_t filled = 0;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t nlen = 0;
    serdetail::read_pod(f, nlen);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    uint64_t ndim = 0;
    serdetail::read_pod(f, ndim);
    Shape shape(ndim);
    for (auto& d : shape) serdetail::read_pod(f, d);
    int64_t numel = shape_numel(shape);
    auto it = want.find(name);
    if (it == want.end()) throw IoError("load_tensor_map: unexpected tensor '" + name + "'");
    if (it->second->shape != shape)
      throw IoError("load_tensor_map: shape mismatch for '" + name + "': file " +
                    shape_str(shape) + " vs model " + shape_str(it->second->shape));
    for (int64_t j = 0; j < numel; ++j) {
      double v;
      serdetail::read_pod(f, v);
      it->second->data[static_cast<size_t>(j)] = static_cast<T>(v);
    }
    ++filled;
  }
  if (!f) throw IoError("load_tensor_map: truncated file " + path.string());
  if (filled != tensors.size())
    throw IoError("load_tensor_map: file holds " + std::to_string(filled) + " tensors, model has " +
                  std::to_string(tensors.size()));
}

// ---- spec <-> json ----

inline json to_json(const ClassifierSpec& s) {
  return json{{"arch_name", s.arch_name},
              {"num_classes", s.num_classes},
              {"input_shape", s.input_shape},
              {"feature_dim", s.feature_dim}};
}

inline ClassifierSpec classifier_spec_from_json(const json& j) {
  ClassifierSpec s;
  s.arch_name = j.at("arch_name").get<std::string>();
  s.num_classes = j.at("num_classes").get<int64_t>();
  s.input_shape = j.at("input_shape").get<Shape>();
  s.feature_dim = j.at("feature_dim").get<int64_t>();
  return s;
}

inline json to_json(const GeneratorSpec& s) {
  return json{{"latent_dim", s.latent_dim},
              {"num_classes", s.num_classes},
              {"output_shape", s.output_shape},
              {"base_channels", s.base_channels},
              {"cfe_mode", to_string(s.cfe_mode)}};
}

inline GeneratorSpec generator_spec_from_json(const json& j) {
  GeneratorSpec s;
  s.latent_dim = j.at("latent_dim").get<int64_t>();
  s.num_classes = j.at("num_classes").get<int64_t>();
  s.output_shape = j.at("output_shape").get<Shape>();
  s.base_channels = j.at("base_channels").get<int64_t>();
  s.cfe_mode = cfe_mode_from_string(j.at("cfe_mode").get<std::string>());
  return s;
}

inline json to_json(const AdapterSpec& s) {
  return json{{"in_dim", s.in_dim},
              {"out_dim", s.out_dim},
              {"hidden_dims", s.hidden_dims},
              {"bypass", s.bypass}};
}

inline AdapterSpec adapter_spec_from_json(const json& j) {
  AdapterSpec s;
  s.in_dim = j.at("in_dim").get<int64_t>();
  s.out_dim = j.at("out_dim").get<int64_t>();
  s.hidden_dims = j.at("hidden_dims").get<std::vector<int64_t>>();
  s.bypass = j.at("bypass").get<bool>();
  return s;
}

template <class T>
inline json to_json(const BNStatsSnapshot<T>& s) {
  json layers = json::array();
  for (const auto& l : s.layers) {
    layers.push_back({{"id", l.id},
                      {"mu", l.mu.template cast<double>().data},
                      {"sigma2", l.sigma2.template cast<double>().data}});
  }
  return json{{"layers", layers}};
}

template <class T>
inline BNStatsSnapshot<T> bn_snapshot_from_json(const json& j) {
  BNStatsSnapshot<T> s;
  for (const auto& lj : j.at("layers")) {
    typename BNStatsSnapshot<T>::Layer l;
    l.id = lj.at("id").get<std::string>();
    auto mu = lj.at("mu").get<std::vector<double>>();
    auto s2 = lj.at("sigma2").get<std::vector<double>>();
    l.mu = Tensor<T>({static_cast<int64_t>(mu.size())});
    l.sigma2 = Tensor<T>({static_cast<int64_t>(s2.size())});
    for (size_t i = 0; i < mu.size(); ++i) l.mu[static_cast<int64_t>(i)] = static_cast<T>(mu[i]);
    for (size_t i = 0; i < s2.size(); ++i)
      l.sigma2[static_cast<int64_t>(i)] = static_cast<T>(s2[i]);
    s.layers.push_back(std::move(l));
  }
  return s;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("write_json: cannot open " + path.string());
  f << j.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_json: cannot open " + path.string());
  return json::parse(f);
}

// ---- checkpoint bundle: manifest.json + one tensor map per network ----

template <class T>
inline void save_classifier(const fs::path& dir, const std::string& name, Classifier<T>& model,
                            json extra = json::object()) {
  fs::create_directories(dir);
  json manifest = extra;
  manifest["kind"] = "classifier";
  manifest["spec"] = to_json(model.spec);
  write_json(dir / (name + ".json"), manifest);
  save_tensor_map<T>(dir / (name + ".tensors"), model.named_tensors());
}

template <class T>
inline std::unique_ptr<Classifier<T>> load_classifier(const fs::path& dir,
                                                      const std::string& name) {
  json manifest = read_json(dir / (name + ".json"));
  std::mt19937_64 rng(0);  // structural init only; tensors overwritten below
  auto model = build_classifier<T>(classifier_spec_from_json(manifest.at("spec")), rng);
  load_tensor_map<T>(dir / (name + ".tensors"), model->named_tensors());
  return model;
}

template <class T>
inline void save_generator(const fs::path& dir, const std::string& name, Generator<T>& gen,
                           json extra = json::object()) {
  fs::create_directories(dir);
  json manifest = extra;
  manifest["kind"] = "generator";
  manifest["spec"] = to_json(gen.spec);
  write_json(dir / (name + ".json"), manifest);
  save_tensor_map<T>(dir / (name + ".tensors"), gen.named_tensors());
}

template <class T>
inline std::unique_ptr<Generator<T>> load_generator(const fs::path& dir, const std::string& name) {
  json manifest = read_json(dir / (name + ".json"));
  std::mt19937_64 rng(0);
  auto gen = std::make_unique<Generator<T>>(generator_spec_from_json(manifest.at("spec")), rng);
  load_tensor_map<T>(dir / (name + ".tensors"), gen->named_tensors());
  return gen;
}

template <class T>
inline void save_adapter(const fs::path& dir, const std::string& name, Adapter<T>& adapter) {
  fs::create_directories(dir);
  write_json(dir / (name + ".json"), json{{"kind", "adapter"}, {"spec", to_json(adapter.spec)}});
  save_tensor_map<T>(dir / (name + ".tensors"), adapter.named_tensors());
}

template <class T>
inline std::unique_ptr<Adapter<T>> load_adapter(const fs::path& dir, const std::string& name) {
  json manifest = read_json(dir / (name + ".json"));
  std::mt19937_64 rng(0);
  auto adapter =
      std::make_unique<Adapter<T>>(adapter_spec_from_json(manifest.at("spec")), rng);
  load_tensor_map<T>(dir / (name + ".tensors"), adapter->named_tensors());
  return adapter;
}

}  // namespace dfkd
