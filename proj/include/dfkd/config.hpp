#pragma once

#include <map>
#include <variant>

#include "dfkd/data.hpp"
#include "dfkd/distill.hpp"
#include "dfkd/generator.hpp"
#include "dfkd/nets.hpp"

namespace dfkd {

// Every tunable of a run, grouped the way the config file is. Parsed from a
// TOML subset (sections, scalars, flat arrays, comments) plus dotted
// KEY=VALUE overrides; unknown keys are rejected.
struct RunConfig {
  int64_t seed = -1;  // mandatory: must be set by file or flag
  std::string precision = "float64";  // "float64" or "float32"

  struct {
    std::string teacher_arch = "cnn-small";
    std::string student_arch = "cnn-small";
    int64_t teacher_feature_dim = 64;
    int64_t student_feature_dim = 32;
    int64_t num_classes = 10;
    std::vector<int64_t> input_shape{1, 28, 28};
    bool adapter_bypass = false;
  } models;

  struct {
    int64_t latent_dim = 64;
    int64_t base_channels = 32;
    std::string cfe_mode = "full_layer";
  } generator;

  struct {
    double alpha = 5.0;
    double beta = 1.0;
    double gamma = 0.7;
    double eta = 1.0;
    double tau = 10.0;
  } hyperparams;

  struct {
    std::string ikd_mode = "full";
    int64_t k_steps = 5;
    int64_t epochs = 60;
    int64_t iters_per_epoch = 50;
    int64_t batch_size = 128;
    double student_lr = 0.1;
    double student_momentum = 0.9;
    double student_weight_decay = 5e-4;
    int64_t warmup_epochs = 5;
    double gen_lr = 1e-3;
    std::vector<int64_t> gen_decay_epochs{40, 50};
    double gen_decay_factor = 0.1;
  } schedule;

  struct {
    std::string root = "data/synth-digits";
    std::vector<double> mean{0.5};
    std::vector<double> stddev{0.5};
    bool random_crop_pad = true;
    bool horizontal_flip = false;
    int64_t pretrain_epochs = 10;
    double pretrain_lr = 0.05;
    int64_t pretrain_batch = 128;
  } data;

  struct {
    int64_t fid_samples = 512;
    int64_t per_class = 32;
    int64_t grid_per_class = 8;
    int64_t eval_every = 10;
  } eval;

  struct {
    std::string dir = "runs/default";
  } output;

  HyperParams hyper() const {
    HyperParams hp;
    hp.alpha = hyperparams.alpha;
    hp.beta = hyperparams.beta;
    hp.gamma = hyperparams.gamma;
    hp.eta = hyperparams.eta;
    hp.tau = hyperparams.tau;
    return hp;
  }

  IkdMode ikd_mode() const {
    if (schedule.ikd_mode == "full") return IkdMode::full;
    if (schedule.ikd_mode == "kl_only") return IkdMode::kl_only;
    if (schedule.ikd_mode == "rl2_only") return IkdMode::rl2_only;
    throw ConfigError("schedule.ikd_mode must be one of: full, kl_only, rl2_only");
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.hp = hyper();
    tc.ikd_mode = ikd_mode();
    tc.k_steps = schedule.k_steps;
    tc.epochs = schedule.epochs;
    tc.iters_per_epoch = schedule.iters_per_epoch;
    tc.batch_size = schedule.batch_size;
    tc.student_lr = schedule.student_lr;
    tc.student_momentum = schedule.student_momentum;
    tc.student_weight_decay = schedule.student_weight_decay;
    tc.warmup_epochs = schedule.warmup_epochs;
    tc.gen_lr = schedule.gen_lr;
    tc.gen_decay_epochs = schedule.gen_decay_epochs;
    tc.gen_decay_factor = schedule.gen_decay_factor;
    tc.eval_every = eval.eval_every;
    tc.grid_per_class = eval.grid_per_class;
    tc.fidelity_per_class = eval.per_class;
    tc.seed = static_cast<uint64_t>(seed);
    return tc;
  }

  ClassifierSpec teacher_spec() const {
    ClassifierSpec s;
    s.arch_name = models.teacher_arch;
    s.num_classes = models.num_classes;
    s.input_shape = models.input_shape;
    s.feature_dim = models.teacher_feature_dim;
    return s;
  }

  ClassifierSpec student_spec() const {
    ClassifierSpec s = teacher_spec();
    s.arch_name = models.student_arch;
    s.feature_dim = models.student_feature_dim;
    return s;
  }

  GeneratorSpec generator_spec() const {
    GeneratorSpec s;
    s.latent_dim = generator.latent_dim;
    s.num_classes = models.num_classes;
    s.output_shape = models.input_shape;
    s.base_channels = generator.base_channels;
    s.cfe_mode = cfe_mode_from_string(generator.cfe_mode);
    return s;
  }

  AdapterSpec adapter_spec() const {
    AdapterSpec s;
    s.in_dim = models.student_feature_dim;
    s.out_dim = models.teacher_feature_dim;
    s.bypass = models.adapter_bypass;
    return s;
  }

  DatasetSpec dataset_spec(const std::string& split) const {
    DatasetSpec s;
    s.root = data.root;
    s.split = split;
    s.mean = data.mean;
    s.stddev = data.stddev;
    s.random_crop_pad = data.random_crop_pad;
    s.horizontal_flip = data.horizontal_flip;
    return s;
  }

  void validate() const {
    if (seed < 0) throw ConfigError("config: seed is mandatory (set seed= or pass --seed)");
    if (precision != "float64" && precision != "float32")
      throw ConfigError("config: precision must be float64 or float32");
    teacher_spec().validate();
    student_spec().validate();
    generator_spec().validate();
    hyper().validate();
    train_config().validate();
    dataset_spec("train").validate();
    if (eval.fid_samples < 2 || eval.per_class < 1 || eval.grid_per_class < 1)
      throw ConfigError("config: eval sample counts must be positive (fid_samples >= 2)");
  }
};

// ---- field registry: binds dotted key paths to struct members ----

class ConfigBinder {
 public:
  using Field = std::variant<int64_t*, double*, bool*, std::string*, std::vector<int64_t>*,
                             std::vector<double>*>;

  explicit ConfigBinder(RunConfig& c) {
    bind("seed", &c.seed);
    bind("precision", &c.precision);
    bind("models.teacher_arch", &c.models.teacher_arch);
    bind("models.student_arch", &c.models.student_arch);
    bind("models.teacher_feature_dim", &c.models.teacher_feature_dim);
    bind("models.student_feature_dim", &c.models.student_feature_dim);
    bind("models.num_classes", &c.models.num_classes);
    bind("models.input_shape", &c.models.input_shape);
    bind("models.adapter_bypass", &c.models.adapter_bypass);
    bind("generator.latent_dim", &c.generator.latent_dim);
    bind("generator.base_channels", &c.generator.base_channels);
    bind("generator.cfe_mode", &c.generator.cfe_mode);
    bind("hyperparams.alpha", &c.hyperparams.alpha);
    bind("hyperparams.beta", &c.hyperparams.beta);
    bind("hyperparams.gamma", &c.hyperparams.gamma);
    bind("hyperparams.eta", &c.hyperparams.eta);
    bind("hyperparams.tau", &c.hyperparams.tau);
    bind("schedule.ikd_mode", &c.schedule.ikd_mode);
    bind("schedule.k_steps", &c.schedule.k_steps);
    bind("schedule.epochs", &c.schedule.epochs);
    bind("schedule.iters_per_epoch", &c.schedule.iters_per_epoch);
    bind("schedule.batch_size", &c.schedule.batch_size);
    bind("schedule.student_lr", &c.schedule.student_lr);
    bind("schedule.student_momentum", &c.schedule.student_momentum);
    bind("schedule.student_weight_decay", &c.schedule.student_weight_decay);
    bind("schedule.warmup_epochs", &c.schedule.warmup_epochs);
    bind("schedule.gen_lr", &c.schedule.gen_lr);
    bind("schedule.gen_decay_epochs", &c.schedule.gen_decay_epochs);
    bind("schedule.gen_decay_factor", &c.schedule.gen_decay_factor);
    bind("data.root", &c.data.root);
    bind("data.mean", &c.data.mean);
    bind("data.std", &c.data.stddev);
    bind("data.random_crop_pad", &c.data.random_crop_pad);
    bind("data.horizontal_flip", &c.data.horizontal_flip);
    bind("data.pretrain_epochs", &c.data.pretrain_epochs);
    bind("data.pretrain_lr", &c.data.pretrain_lr);
    bind("data.pretrain_batch", &c.data.pretrain_batch);
    bind("eval.fid_samples", &c.eval.fid_samples);
    bind("eval.per_class", &c.eval.per_class);
    bind("eval.grid_per_class", &c.eval.grid_per_class);
    bind("eval.eval_every", &c.eval.eval_every);
    bind("output.dir", &c.output.dir);
  }

  // Apply "path = value" with a TOML-style literal on the right.
  void set(const std::string& path, const std::string& literal) {
    auto it = fields_.find(path);
    if (it == fields_.end()) throw ConfigError("config: unknown key '" + path + "'");
    std::visit([&](auto* p) { assign(path, literal, p); }, it->second);
  }

  std::string dump_toml() const {
    // group keys by section, preserving registration order
    std::ostringstream out;
    std::string section;
    for (const auto& path : order_) {
      auto dot = path.find('.');
      std::string sec = dot == std::string::npos ? "" : path.substr(0, dot);
      std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
      if (sec != section) {
        out << "\n[" << sec << "]\n";
        section = sec;
      }
      out << key << " = ";
      std::visit([&](auto* p) { print(out, p); }, fields_.at(path));
      out << "\n";
    }
    return out.str();
  }

  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  void parse_toml(std::istream& in) {
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      // strip comments (this subset has no '#' inside strings)
      if (auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
      line = strip(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
        section = strip(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = strip(line.substr(0, eq));
      std::string val = strip(line.substr(eq + 1));
      set(section.empty() ? key : section + "." + key, val);
    }
  }

  void parse_toml_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path.string());
    parse_toml(f);
  }

 private:
  template <class P>
  void bind(const std::string& path, P* p) {
    fields_[path] = p;
    order_.push_back(path);
  }

  static std::string unquote(const std::string& path, const std::string& s) {
    // bare literals are accepted for string fields (convenient for --set)
    if (s.empty() || s.front() != '"') return s;
    if (s.size() < 2 || s.back() != '"')
      throw ConfigError("config: '" + path + "' has an unterminated string");
    return s.substr(1, s.size() - 2);
  }

  static void assign(const std::string& path, const std::string& v, std::string* p) {
    *p = unquote(path, v);
  }
  static void assign(const std::string& path, const std::string& v, bool* p) {
    if (v == "true") *p = true;
    else if (v == "false") *p = false;
    else throw ConfigError("config: '" + path + "' expects true/false, got " + v);
  }
  static void assign(const std::string& path, const std::string& v, int64_t* p) {
    size_t pos = 0;
    try {
      *p = std::stoll(v, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != v.size()) throw ConfigError("config: '" + path + "' expects an integer, got " + v);
  }
  static void assign(const std::string& path, const std::string& v, double* p) {
    size_t pos = 0;
    try {
      *p = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != v.size()) throw ConfigError("config: '" + path + "' expects a number, got " + v);
  }
  template <class E>
  static void assign(const std::string& path, const std::string& v, std::vector<E>* p) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
      throw ConfigError("config: '" + path + "' expects [a, b, ...], got " + v);
    p->clear();
    std::string body = v.substr(1, v.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = strip(item);
      if (item.empty()) continue;
      E e{};
      assign(path, item, &e);
      p->push_back(e);
    }
  }

  static void print(std::ostream& o, const std::string* p) { o << '"' << *p << '"'; }
  static void print(std::ostream& o, const bool* p) { o << (*p ? "true" : "false"); }
  static void print(std::ostream& o, const int64_t* p) { o << *p; }
  static void print(std::ostream& o, const double* p) {
    o << std::setprecision(17) << *p << std::setprecision(6);
  }
  template <class E>
  static void print(std::ostream& o, const std::vector<E>* p) {
    o << '[';
    for (size_t i = 0; i < p->size(); ++i) {
      if (i) o << ", ";
      E e = (*p)[i];
      print(o, &e);
    }
    o << ']';
  }

  std::map<std::string, Field> fields_;
  std::vector<std::string> order_;
};

// File + overrides in order; "a.b=v" literals follow the TOML grammar.
inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides) {
  RunConfig cfg;
  ConfigBinder binder(cfg);
  if (!config_path.empty()) binder.parse_toml_file(config_path);
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects KEY=VALUE, got '" + ov + "'");
    binder.set(ConfigBinder::strip(ov.substr(0, eq)), ConfigBinder::strip(ov.substr(eq + 1)));
  }
  return cfg;
}

inline std::string dump_run_config(RunConfig& cfg) {
  ConfigBinder binder(cfg);
  return binder.dump_toml();
}

}  // namespace dfkd
