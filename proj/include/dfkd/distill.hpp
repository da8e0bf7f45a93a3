#pragma once

#include <chrono>
#include <sstream>

#include "dfkd/eval.hpp"
#include "dfkd/losses.hpp"
#include "dfkd/optim.hpp"
#include "dfkd/pretrain.hpp"
#include "dfkd/serialize.hpp"

namespace dfkd {

struct TrainConfig {
  HyperParams hp;
  IkdMode ikd_mode = IkdMode::full;
  int64_t k_steps = 5;          // student steps per generator step
  int64_t epochs = 60;
  int64_t iters_per_epoch = 50; // alternation rounds per epoch
  int64_t batch_size = 128;
  double student_lr = 0.1;
  double student_momentum = 0.9;
  double student_weight_decay = 5e-4;
  int64_t warmup_epochs = 5;
  double gen_lr = 1e-3;
  std::vector<int64_t> gen_decay_epochs{40, 50};
  double gen_decay_factor = 0.1;
  int64_t eval_every = 10;          // epochs between grid/fidelity evals; 0 = off
  int64_t grid_per_class = 8;
  int64_t fidelity_per_class = 32;  // samples per class for conditional fidelity
  uint64_t seed = 0;

  void validate() const {
    hp.validate();
    if (k_steps < 1 || epochs < 1 || iters_per_epoch < 1)
      throw ConfigError("TrainConfig: k_steps, epochs, iters_per_epoch must be >= 1");
    if (batch_size < 2) throw ConfigError("TrainConfig: batch_size must be >= 2");
    // zero is allowed so freeze contracts can be exercised with no-op steps
    if (student_lr < 0 || gen_lr < 0)
      throw ConfigError("TrainConfig: learning rates must be >= 0");
    if (student_momentum < 0 || student_momentum >= 1)
      throw ConfigError("TrainConfig: student_momentum must lie in [0,1)");
    if (student_weight_decay < 0)
      throw ConfigError("TrainConfig: student_weight_decay must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("TrainConfig: warmup_epochs must be >= 0");
    if (gen_decay_factor <= 0 || gen_decay_factor >= 1)
      throw ConfigError("TrainConfig: gen_decay_factor must be in (0,1)");
  }
};

// Baseline variant: knowledge transfer through the KL term only.
inline TrainConfig kl_only_baseline(TrainConfig cfg) {
  cfg.hp.alpha = 0.0;
  cfg.hp.gamma = 0.0;
  cfg.hp.eta = 0.0;
  return cfg;
}

struct StepRecord {
  std::string stage;  // "min" or "max"
  int64_t epoch = 0;
  int64_t iter = 0;
  int64_t step = 0;  // per-stage optimizer step counter
  std::vector<std::pair<std::string, double>> components;
  double lr = 0.0;
  double wall_ms = 0.0;

  double component(const std::string& name) const {
    for (const auto& [k, v] : components)
      if (k == name) return v;
    throw std::out_of_range("StepRecord: no component '" + name + "'");
  }

  json to_json() const {
    json c;
    for (const auto& [k, v] : components) c[k] = v;
    return json{{"stage", stage}, {"epoch", epoch},     {"iter", iter},
                {"step", step},   {"components", c},    {"lr", lr},
                {"wall_ms", wall_ms}};
  }
};

// Alternating data-free distillation: k student (min) steps against a frozen
// generator, then one generator (max) step against the frozen student. The
// teacher is frozen throughout and no real data is touched.
template <class T>
class DistillEngine {
 public:
  DistillEngine(Classifier<T>& teacher, BNStatsSnapshot<T> snapshot, Classifier<T>& student,
                Adapter<T>& adapter, Generator<T>& generator, TrainConfig cfg)
      : teacher_(teacher),
        snapshot_(std::move(snapshot)),
        student_(student),
        adapter_(adapter),
        gen_(generator),
        cfg_(std::move(cfg)),
        rng_(cfg_.seed) {
    cfg_.validate();
    if (teacher_.spec.num_classes != student_.spec.num_classes ||
        teacher_.spec.num_classes != gen_.spec.num_classes)
      throw ConfigError("DistillEngine: class counts of teacher, student, generator differ");
    if (teacher_.spec.input_shape != gen_.spec.output_shape ||
        student_.spec.input_shape != gen_.spec.output_shape)
      throw ConfigError("DistillEngine: generator output shape does not match classifier input");
    if (adapter_.spec.in_dim != student_.spec.feature_dim ||
        adapter_.spec.out_dim != teacher_.spec.feature_dim)
      throw ConfigError("DistillEngine: adapter dims must map student features to teacher dim");
    if (!snapshot_.same_structure(teacher_.capture_bn_stats()))
      throw ConfigError("DistillEngine: snapshot does not match the teacher's norm layers");
    teacher_.set_trainable(false);
    teacher_.train_mode = false;
    s_opt_ = SGD<T>(student_.parameters(), static_cast<T>(cfg_.student_lr),
                    static_cast<T>(cfg_.student_momentum),
                    static_cast<T>(cfg_.student_weight_decay));
    // the adapter parameterizes the student's contrastive view; no weight
    // decay, so it holds still on the steps where its gradient is zero
    a_opt_ = SGD<T>(adapter_.parameters(), static_cast<T>(cfg_.student_lr),
                    static_cast<T>(cfg_.student_momentum), T(0));
    g_opt_ = Adam<T>(gen_.parameters(), static_cast<T>(cfg_.gen_lr));
  }

  const TrainConfig& config() const { return cfg_; }
  int64_t epoch() const { return epoch_; }
  const std::vector<StepRecord>& history() const { return history_; }

  // One student/adapter update against frozen teacher and generator.
  StepRecord min_stage_step() {
    auto t0 = std::chrono::steady_clock::now();
    student_.set_trainable(true);
    adapter_.set_trainable(true);
    gen_.set_trainable(false);
    student_.train_mode = true;
    gen_.train_mode = true;

    auto cn = ConditionedNoise<T>::sample(cfg_.batch_size, gen_.spec.latent_dim,
                                          gen_.spec.num_classes, rng_);
    // the generator is frozen here: detach its output before the classifiers
    Var<T> x = constant(gen_.generate(cn).val());
    Var<T> t_logits = constant(teacher_.forward(x).logits.val());
    Var<T> s_logits = student_.forward(x).logits;

    Var<T> total = student_objective(t_logits, s_logits, cn.labels, cfg_.hp, cfg_.ikd_mode);

    StepRecord rec;
    rec.stage = "min";
    rec.components = {{"kl", value_of(kl_term(t_logits, s_logits))},
                      {"r_l2", value_of(r_l2_term(t_logits, s_logits))},
                      {"ce", value_of(ce_stage_loss(s_logits, cn.labels))},
                      {"total", value_of(total)}};
    check_finite(rec, "min_stage_step");

    student_.zero_grad();
    adapter_.zero_grad();
    backward(total);
    // short runs clamp the warmup so the cosine phase always exists
    const int64_t warmup = std::min(cfg_.warmup_epochs, cfg_.epochs / 2) *
                           cfg_.iters_per_epoch * cfg_.k_steps;
    double lr = warmup_cosine_lr(cfg_.student_lr, student_step_, total_student_steps(), warmup);
    s_opt_.lr = static_cast<T>(lr);
    a_opt_.lr = static_cast<T>(lr);
    s_opt_.step();
    a_opt_.step();

    rec.epoch = epoch_;
    rec.iter = iter_;
    rec.step = student_step_++;
    rec.lr = lr;
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  // One generator update against the frozen teacher/student pair.
  StepRecord max_stage_step() {
    auto t0 = std::chrono::steady_clock::now();
    student_.set_trainable(false);
    adapter_.set_trainable(false);
    gen_.set_trainable(true);
    student_.train_mode = false;
    gen_.train_mode = true;

    auto cn = ConditionedNoise<T>::sample(cfg_.batch_size, gen_.spec.latent_dim,
                                          gen_.spec.num_classes, rng_);
    Var<T> x = gen_.generate(cn);

    BatchStats<T> bstats;
    ForwardResult<T> t_out = teacher_.forward(x, &bstats);
    ForwardResult<T> s_out = student_.forward(x);

    RepresentationPair<T> pair;
    pair.z_t = t_out.features;
    pair.z_s = adapter_.map(s_out.features);
    pair.labels = cn.labels;

    Var<T> total = generator_objective(t_out.logits, s_out.logits, cn.labels, pair, snapshot_,
                                       bstats, cfg_.hp, cfg_.ikd_mode);

    StepRecord rec;
    rec.stage = "max";
    rec.components = {
        {"ikd",
         value_of(ikd_loss(t_out.logits, s_out.logits, static_cast<T>(cfg_.hp.alpha),
                           cfg_.ikd_mode))},
        {"bns", value_of(bns_loss(snapshot_, bstats))},
        {"scl", value_of(scl_loss(pair, static_cast<T>(cfg_.hp.tau)))},
        {"ce", value_of(ce_stage_loss(t_out.logits, cn.labels))},
        {"total", value_of(total)}};
    check_finite(rec, "max_stage_step");

    gen_.zero_grad();
    backward(total);
    g_opt_.lr = static_cast<T>(
        step_decay_lr(cfg_.gen_lr, epoch_, cfg_.gen_decay_epochs, cfg_.gen_decay_factor));
    g_opt_.step();

    rec.epoch = epoch_;
    rec.iter = iter_;
    rec.step = gen_step_++;
    rec.lr = static_cast<double>(g_opt_.lr);
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  // Full run. Writes metrics.jsonl, periodic sample grids and eval.jsonl,
  // a resumable state/ directory per epoch, and final checkpoints.
  // run_epochs limits how many epochs this call executes (-1 = to the end),
  // leaving a resumable state exactly as an interrupted run would.
  void train(const std::string& out_dir, int64_t run_epochs = -1) {
    fs::create_directories(out_dir);
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl",
                          epoch_ > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("DistillEngine::train: cannot open metrics log");
    const int64_t stop =
        run_epochs < 0 ? cfg_.epochs : std::min(cfg_.epochs, epoch_ + run_epochs);
    for (; epoch_ < stop; ++epoch_) {
      for (iter_ = 0; iter_ < cfg_.iters_per_epoch; ++iter_) {
        for (int64_t k = 0; k < cfg_.k_steps; ++k) log(metrics, min_stage_step());
        log(metrics, max_stage_step());
      }
      if (cfg_.eval_every > 0 &&
          ((epoch_ + 1) % cfg_.eval_every == 0 || epoch_ + 1 == cfg_.epochs)) {
        periodic_eval(out_dir);
      }
      save_state(fs::path(out_dir) / "state");
    }
    save_classifier(out_dir, "student", student_);
    save_generator(out_dir, "generator", gen_);
    save_adapter(out_dir, "adapter", adapter_);
    write_json(fs::path(out_dir) / "train_summary.json",
               json{{"epochs", cfg_.epochs},
                    {"student_steps", student_step_},
                    {"generator_steps", gen_step_},
                    {"seed", cfg_.seed}});
  }

  void save_state(const fs::path& dir) {
    fs::create_directories(dir);
    save_classifier(dir, "student", student_);
    save_generator(dir, "generator", gen_);
    save_adapter(dir, "adapter", adapter_);
    save_tensor_map<T>(dir / "optim.tensors", optimizer_tensors());
    std::ostringstream rng_text;
    rng_text << rng_;
    write_json(dir / "state.json", json{{"epoch", epoch_},
                                        {"student_step", student_step_},
                                        {"gen_step", gen_step_},
                                        {"adam_t", g_opt_.t},
                                        {"rng", rng_text.str()},
                                        {"snapshot", to_json(snapshot_)}});
  }

  void load_state(const fs::path& dir) {
    json st = read_json(dir / "state.json");
    epoch_ = st.at("epoch").get<int64_t>() + 1;  // saved at end of that epoch
    student_step_ = st.at("student_step").get<int64_t>();
    gen_step_ = st.at("gen_step").get<int64_t>();
    g_opt_.t = st.at("adam_t").get<int64_t>();
    std::istringstream rng_text(st.at("rng").get<std::string>());
    rng_text >> rng_;
    load_tensor_map<T>(dir / "student.tensors", student_.named_tensors());
    load_tensor_map<T>(dir / "generator.tensors", gen_.named_tensors());
    load_tensor_map<T>(dir / "adapter.tensors", adapter_.named_tensors());
    load_tensor_map<T>(dir / "optim.tensors", optimizer_tensors());
  }

 private:
  double value_of(Var<T> v) const { return static_cast<double>(v.val()[0]); }

  int64_t total_student_steps() const {
    return cfg_.epochs * cfg_.iters_per_epoch * cfg_.k_steps;
  }

  void check_finite(const StepRecord& rec, const std::string& where) const {
    for (const auto& [k, v] : rec.components)
      if (!std::isfinite(v)) {
        std::string parts;
        for (const auto& [n, x] : rec.components) parts += " " + n + "=" + std::to_string(x);
        throw DivergedError(where + ": non-finite '" + k + "' at epoch " +
                            std::to_string(epoch_) + " iter " + std::to_string(iter_) + ";" +
                            parts);
      }
  }

  void log(std::ofstream& f, StepRecord rec) {
    f << rec.to_json().dump() << "\n";
    history_.push_back(std::move(rec));
  }

  void periodic_eval(const std::string& out_dir) {
    // dedicated stream so evaluation never perturbs the training RNG
    std::mt19937_64 eval_rng(cfg_.seed ^ (0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch_)));
    std::string grid = export_grid(gen_, cfg_.grid_per_class, out_dir, epoch_ + 1, eval_rng);
    double fidelity = cfg_.fidelity_per_class > 0
                          ? conditional_fidelity(teacher_, gen_, cfg_.fidelity_per_class, eval_rng)
                          : 0.0;
    std::ofstream f(fs::path(out_dir) / "eval.jsonl", std::ios::app);
    f << json{{"epoch", epoch_ + 1}, {"conditional_fidelity", fidelity}, {"grid", grid}}.dump()
      << "\n";
  }

  std::vector<std::pair<std::string, Tensor<T>*>> optimizer_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto push = [&out](const std::string& prefix, std::vector<Tensor<T>>& ts) {
      for (size_t i = 0; i < ts.size(); ++i) out.push_back({prefix + std::to_string(i), &ts[i]});
    };
    push("s_vel.", s_opt_.state());
    push("a_vel.", a_opt_.state());
    push("g_m.", g_opt_.state_m());
    push("g_v.", g_opt_.state_v());
    return out;
  }

  Classifier<T>& teacher_;
  BNStatsSnapshot<T> snapshot_;
  Classifier<T>& student_;
  Adapter<T>& adapter_;
  Generator<T>& gen_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  SGD<T> s_opt_, a_opt_;
  Adam<T> g_opt_;
  int64_t epoch_ = 0, iter_ = 0;
  int64_t student_step_ = 0, gen_step_ = 0;
  std::vector<StepRecord> history_;
};

}  // namespace dfkd
