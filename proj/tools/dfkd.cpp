// Command-line driver for the data-free distillation toolkit.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime failure.

#include <CLI11.hpp>
#include <future>
#include <iostream>

#include "dfkd/config.hpp"
#include "dfkd/distill.hpp"
#include "dfkd/eval.hpp"
#include "dfkd/pretrain.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed = -1;
  std::string out;
  int64_t epochs = -1;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "TOML config file");
  cmd->add_option("--set", a.overrides, "dotted KEY=VALUE override (repeatable)");
  cmd->add_option("--seed", a.seed, "RNG seed (overrides config)");
  cmd->add_option("--out", a.out, "output directory (overrides config)");
  cmd->add_flag("--deterministic", a.deterministic, "force float64 math");
}

dfkd::RunConfig resolve(const CommonArgs& a, const std::string& epochs_key = "") {
  dfkd::RunConfig cfg = dfkd::load_run_config(a.config_path, a.overrides);
  dfkd::ConfigBinder binder(cfg);
  if (a.seed >= 0) binder.set("seed", std::to_string(a.seed));
  if (!a.out.empty()) binder.set("output.dir", "\"" + a.out + "\"");
  if (a.epochs >= 0 && !epochs_key.empty()) binder.set(epochs_key, std::to_string(a.epochs));
  if (a.deterministic) binder.set("precision", "\"float64\"");
  cfg.validate();
  return cfg;
}

void dump_effective(dfkd::RunConfig& cfg, const std::string& dir) {
  std::string text = dfkd::dump_run_config(cfg);
  dfkd::fs::create_directories(dir);
  std::ofstream f(dfkd::fs::path(dir) / "effective_config.toml");
  f << text;
  std::cout << "# effective config\n" << text;
}

template <class T>
int run_pretrain(dfkd::RunConfig& cfg) {
  using namespace dfkd;
  std::string dir = cfg.output.dir + "/teacher";
  dump_effective(cfg, dir);
  Dataset<T> train_set = load_dataset<T>(cfg.dataset_spec("train"));
  Dataset<T> test_set = load_dataset<T>(cfg.dataset_spec("test"));
  std::mt19937_64 rng(static_cast<uint64_t>(cfg.seed));
  auto teacher = build_classifier<T>(cfg.teacher_spec(), rng);
  PretrainConfig pc;
  pc.epochs = cfg.data.pretrain_epochs;
  pc.batch_size = cfg.data.pretrain_batch;
  pc.lr = cfg.data.pretrain_lr;
  pc.seed = static_cast<uint64_t>(cfg.seed);
  PretrainResult res = pretrain_teacher(*teacher, train_set, test_set, pc, dir);
  std::cout << "teacher train_accuracy=" << res.train_accuracy
            << " test_accuracy=" << res.test_accuracy << "\nsaved to " << dir << "\n";
  return 0;
}

template <class T>
int run_distill(dfkd::RunConfig& cfg, const std::string& teacher_dir_opt, bool resume) {
  using namespace dfkd;
  std::string teacher_dir =
      teacher_dir_opt.empty() ? cfg.output.dir + "/teacher" : teacher_dir_opt;
  std::string dir = cfg.output.dir + "/distill";
  dump_effective(cfg, dir);
  auto teacher = load_classifier<T>(teacher_dir, "teacher");
  BNStatsSnapshot<T> snapshot = teacher->capture_bn_stats();
  std::mt19937_64 rng(static_cast<uint64_t>(cfg.seed));
  auto student = build_classifier<T>(cfg.student_spec(), rng);
  Adapter<T> adapter(cfg.adapter_spec(), rng);
  Generator<T> gen(cfg.generator_spec(), rng);
  DistillEngine<T> engine(*teacher, snapshot, *student, adapter, gen, cfg.train_config());
  if (resume) engine.load_state(fs::path(dir) / "state");
  engine.train(dir);
  std::cout << "distillation finished; checkpoints in " << dir << "\n";
  return 0;
}

template <class T>
int run_synthesize(dfkd::RunConfig& cfg, const std::string& gen_dir_opt,
                   std::vector<int64_t> classes, int64_t count) {
  using namespace dfkd;
  std::string gen_dir = gen_dir_opt.empty() ? cfg.output.dir + "/distill" : gen_dir_opt;
  auto gen = load_generator<T>(gen_dir, "generator");
  if (count == 0) {
    std::cout << "warning: count=0, nothing to synthesize\n";
    return 0;
  }
  if (count < 0) throw ConfigError("synthesize: count must be >= 0");
  if (classes.empty())
    for (int64_t c = 0; c < gen->spec.num_classes; ++c) classes.push_back(c);
  for (int64_t c : classes)
    if (c < 0 || c >= gen->spec.num_classes)
      throw ConfigError("synthesize: class id " + std::to_string(c) + " outside [0," +
                        std::to_string(gen->spec.num_classes) + ")");
  gen->train_mode = false;
  std::string dir = cfg.output.dir + "/synth";
  fs::create_directories(dir);
  const int64_t C = gen->spec.output_shape[0], H = gen->spec.output_shape[1],
                W = gen->spec.output_shape[2];
  for (int64_t cls : classes) {
    // per-class RNG so each class's output depends only on (seed, class)
    std::mt19937_64 rng(static_cast<uint64_t>(cfg.seed) ^
                        (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(cls + 1)));
    ConditionedNoise<T> cn;
    cn.z = Tensor<T>::randn({count, gen->spec.latent_dim}, rng);
    cn.labels.assign(static_cast<size_t>(count), cls);
    Tensor<T> x = gen->generate(cn).val();
    ImageU8 row;
    row.channels = C;
    row.height = H;
    row.width = count * W;
    row.pixels.assign(static_cast<size_t>(row.height * row.width * C), 0);
    for (int64_t s = 0; s < count; ++s)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t ch = 0; ch < C; ++ch)
            row.pixels[static_cast<size_t>((h * row.width + s * W + w) * C + ch)] =
                pixel_u8(static_cast<double>(x.at4(s, ch, h, w)));
    write_png(dir + "/class_" + std::to_string(cls) + ".png", row);
    save_tensor_map<T>(dir + "/class_" + std::to_string(cls) + ".tensors", {{"images", &x}});
  }
  std::cout << "wrote " << classes.size() << " class files to " << dir << "\n";
  return 0;
}

template <class T>
int run_eval(dfkd::RunConfig& cfg, const std::string& teacher_dir_opt,
             const std::string& run_dir_opt) {
  using namespace dfkd;
  std::string teacher_dir =
      teacher_dir_opt.empty() ? cfg.output.dir + "/teacher" : teacher_dir_opt;
  std::string run_dir = run_dir_opt.empty() ? cfg.output.dir + "/distill" : run_dir_opt;
  auto teacher = load_classifier<T>(teacher_dir, "teacher");
  auto student = load_classifier<T>(run_dir, "student");
  auto gen = load_generator<T>(run_dir, "generator");
  json report;
  if (cfg.data.root.empty()) {
    // no real dataset: accuracy and FID are gated off with an explicit notice
    std::mt19937_64 rng(static_cast<uint64_t>(cfg.seed));
    report = json{{"conditional_fidelity",
                   conditional_fidelity(*teacher, *gen, cfg.eval.per_class, rng)},
                  {"extractor_id", "teacher:" + teacher->spec.arch_name},
                  {"seed", cfg.seed},
                  {"notice", "no real dataset configured; accuracy and FID omitted"}};
  } else {
    Dataset<T> test_set = load_dataset<T>(cfg.dataset_spec("test"));
    EvalReport rep = evaluate(*teacher, *student, *gen, test_set, cfg.eval.fid_samples,
                              cfg.eval.per_class, static_cast<uint64_t>(cfg.seed));
    report = rep.to_json();
  }
  write_json(fs::path(run_dir) / "eval_report.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct AblationRow {
  std::string id;
  std::vector<std::pair<std::string, std::string>> settings;  // config overrides
};

std::vector<AblationRow> ablation_rows(const std::string& matrix) {
  std::vector<AblationRow> rows;
  if (matrix == "loss-components") {
    // toggle the log-L2 part of IKD (alpha), SCL (gamma) and CE (eta)
    const struct { bool ikd, scl, ce; } combos[] = {
        {false, false, false}, {true, false, false}, {false, true, false},
        {false, false, true},  {true, true, false},  {true, false, true},
        {true, true, true},
    };
    for (const auto& c : combos) {
      AblationRow r;
      r.id = std::string(c.ikd ? "ikd" : "-") + "_" + (c.scl ? "scl" : "-") + "_" +
             (c.ce ? "ce" : "-");
      r.settings = {{"hyperparams.alpha", c.ikd ? "5.0" : "0.0"},
                    {"hyperparams.gamma", c.scl ? "0.7" : "0.0"},
                    {"hyperparams.eta", c.ce ? "1.0" : "0.0"}};
      rows.push_back(std::move(r));
    }
  } else if (matrix == "cfe-layers") {
    for (const std::string mode : {"plain_bn", "three_layer", "full_layer"})
      rows.push_back({mode, {{"generator.cfe_mode", "\"" + mode + "\""}}});
  } else if (matrix == "ikd-components") {
    for (const std::string mode : {"kl_only", "rl2_only", "full"})
      rows.push_back({mode, {{"schedule.ikd_mode", "\"" + mode + "\""}}});
  } else {
    throw dfkd::ConfigError(
        "ablate: unknown matrix '" + matrix +
        "'; valid: loss-components, cfe-layers, ikd-components");
  }
  return rows;
}

template <class T>
int run_ablate(dfkd::RunConfig base_cfg, const std::string& teacher_dir_opt,
               const std::string& matrix, int64_t jobs) {
  using namespace dfkd;
  std::string teacher_dir =
      teacher_dir_opt.empty() ? base_cfg.output.dir + "/teacher" : teacher_dir_opt;
  std::string table_dir = base_cfg.output.dir + "/ablate_" + matrix;
  fs::create_directories(table_dir);
  std::vector<AblationRow> rows = ablation_rows(matrix);

  // every cell is self-contained (own teacher copy, own output dir), so they
  // may run concurrently when --jobs > 1
  auto run_row = [&](const AblationRow& row) -> dfkd::json {
    RunConfig cfg = base_cfg;  // same seed across rows by construction
    ConfigBinder binder(cfg);
    for (const auto& [k, v] : row.settings) binder.set(k, v);
    std::string run_dir = table_dir + "/" + row.id;
    auto teacher = load_classifier<T>(teacher_dir, "teacher");
    BNStatsSnapshot<T> snapshot = teacher->capture_bn_stats();
    std::mt19937_64 rng(static_cast<uint64_t>(cfg.seed));
    auto student = build_classifier<T>(cfg.student_spec(), rng);
    Adapter<T> adapter(cfg.adapter_spec(), rng);
    Generator<T> gen(cfg.generator_spec(), rng);
    DistillEngine<T> engine(*teacher, snapshot, *student, adapter, gen, cfg.train_config());
    engine.train(run_dir);
    Dataset<T> test_set = load_dataset<T>(cfg.dataset_spec("test"));
    EvalReport rep = evaluate(*teacher, *student, gen, test_set, cfg.eval.fid_samples,
                              cfg.eval.per_class, static_cast<uint64_t>(cfg.seed));
    json j = rep.to_json();
    j["row"] = row.id;
    return j;
  };

  std::vector<json> results(rows.size());
  if (jobs <= 1) {
    for (size_t i = 0; i < rows.size(); ++i) {
      results[i] = run_row(rows[i]);
      std::cout << "row " << rows[i].id << ": " << results[i].dump() << "\n";
    }
  } else {
    std::vector<std::future<json>> futures;
    for (const auto& row : rows)
      futures.push_back(std::async(std::launch::async, run_row, row));
    for (size_t i = 0; i < rows.size(); ++i) {
      results[i] = futures[i].get();
      std::cout << "row " << rows[i].id << ": " << results[i].dump() << "\n";
    }
  }

  std::ofstream csv(fs::path(table_dir) / "table.csv");
  csv << "row,accuracy,fid,conditional_fidelity\n";
  json table = json::array();
  for (const auto& j : results) {
    csv << j.at("row").get<std::string>() << "," << j.at("accuracy") << "," << j.at("fid") << ","
        << j.at("conditional_fidelity") << "\n";
    table.push_back(j);
  }
  write_json(fs::path(table_dir) / "table.json", table);
  std::cout << "ablation table written to " << table_dir << "\n";
  return 0;
}

template <class F>
int dispatch(const dfkd::RunConfig& cfg, F&& f) {
  if (cfg.precision == "float32") return f.template operator()<float>();
  return f.template operator()<double>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-free knowledge distillation toolkit"};
  app.require_subcommand(1);

  // makedata
  auto* mk = app.add_subcommand("makedata", "generate the synthetic digit corpus");
  std::string mk_out = "data/synth-digits";
  int64_t mk_train = 256, mk_test = 64, mk_seed = 0;
  mk->add_option("--out", mk_out, "dataset root directory");
  mk->add_option("--train-per-class", mk_train);
  mk->add_option("--test-per-class", mk_test);
  mk->add_option("--seed", mk_seed);

  CommonArgs pre_args, dist_args, syn_args, eval_args, abl_args;

  auto* pre = app.add_subcommand("pretrain", "train the teacher on real data");
  add_common(pre, pre_args);
  pre->add_option("--epochs", pre_args.epochs, "pretrain epochs (overrides config)");

  auto* dist = app.add_subcommand("distill", "run data-free distillation");
  add_common(dist, dist_args);
  dist->add_option("--epochs", dist_args.epochs, "distillation epochs (overrides config)");
  std::string dist_teacher, dist_ablation;
  bool dist_resume = false;
  dist->add_option("--teacher", dist_teacher, "teacher checkpoint directory");
  dist->add_flag("--resume", dist_resume, "resume from the saved state directory");
  dist->add_option("--ablation", dist_ablation, "preset row, e.g. kl-only (alpha=gamma=eta=0)");

  auto* syn = app.add_subcommand("synthesize", "export a class-conditional sample grid");
  add_common(syn, syn_args);
  std::string syn_gen;
  int64_t syn_count = 8;
  std::vector<int64_t> syn_classes;
  syn->add_option("--generator", syn_gen, "generator checkpoint directory");
  syn->add_option("--classes", syn_classes, "class ids to synthesize (default: all)");
  syn->add_option("--count", syn_count, "samples per class");

  auto* evl = app.add_subcommand("eval", "evaluate a distilled student/generator pair");
  add_common(evl, eval_args);
  std::string eval_teacher, eval_run;
  evl->add_option("--teacher", eval_teacher, "teacher checkpoint directory");
  evl->add_option("--run", eval_run, "distillation output directory");

  auto* abl = app.add_subcommand("ablate", "run an ablation matrix");
  add_common(abl, abl_args);
  abl->add_option("--epochs", abl_args.epochs, "distillation epochs (overrides config)");
  std::string abl_teacher, abl_matrix = "loss-components";
  int64_t abl_jobs = 1;
  abl->add_option("--teacher", abl_teacher, "teacher checkpoint directory");
  abl->add_option("--matrix", abl_matrix, "loss-components | cfe-layers | ikd-components");
  abl->add_option("--jobs", abl_jobs, "run cells concurrently when > 1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (mk->parsed()) {
      dfkd::make_synthetic_digits(mk_out, mk_train, mk_test, static_cast<uint64_t>(mk_seed));
      std::cout << "dataset written to " << mk_out << "\n";
      return 0;
    }
    if (pre->parsed()) {
      auto cfg = resolve(pre_args, "data.pretrain_epochs");
      return dispatch(cfg, [&]<class T>() { return run_pretrain<T>(cfg); });
    }
    if (dist->parsed()) {
      auto cfg = resolve(dist_args, "schedule.epochs");
      if (!dist_ablation.empty()) {
        if (dist_ablation != "kl-only")
          throw dfkd::ConfigError("distill: unknown ablation preset '" + dist_ablation +
                                  "'; valid: kl-only");
        dfkd::ConfigBinder binder(cfg);
        binder.set("hyperparams.alpha", "0.0");
        binder.set("hyperparams.gamma", "0.0");
        binder.set("hyperparams.eta", "0.0");
      }
      return dispatch(cfg,
                      [&]<class T>() { return run_distill<T>(cfg, dist_teacher, dist_resume); });
    }
    if (syn->parsed()) {
      auto cfg = resolve(syn_args);
      return dispatch(
          cfg, [&]<class T>() { return run_synthesize<T>(cfg, syn_gen, syn_classes, syn_count); });
    }
    if (evl->parsed()) {
      auto cfg = resolve(eval_args);
      return dispatch(cfg, [&]<class T>() { return run_eval<T>(cfg, eval_teacher, eval_run); });
    }
    if (abl->parsed()) {
      auto cfg = resolve(abl_args, "schedule.epochs");
      return dispatch(
          cfg, [&]<class T>() { return run_ablate<T>(cfg, abl_teacher, abl_matrix, abl_jobs); });
    }
  } catch (const dfkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dfkd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
