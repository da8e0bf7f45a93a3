#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "dfkd/distill.hpp"

using namespace dfkd;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           ("dfkd_distill_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

// Everything needed for a tiny engine, sized so a step takes milliseconds.
struct Rig {
  std::unique_ptr<Classifier<double>> teacher, student;
  std::unique_ptr<Adapter<double>> adapter;
  std::unique_ptr<Generator<double>> gen;
  TrainConfig cfg;

  explicit Rig(uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    ClassifierSpec ts;
    ts.num_classes = 3;
    ts.input_shape = {1, 8, 8};
    ts.feature_dim = 8;
    teacher = build_classifier<double>(ts, rng);
    teacher->train_mode = false;
    ClassifierSpec ss = ts;
    ss.feature_dim = 4;
    student = build_classifier<double>(ss, rng);
    adapter = std::make_unique<Adapter<double>>(AdapterSpec{4, 8, {}, false}, rng);
    GeneratorSpec gs;
    gs.latent_dim = 6;
    gs.num_classes = 3;
    gs.output_shape = {1, 8, 8};
    gs.base_channels = 4;
    gen = std::make_unique<Generator<double>>(gs, rng);

    cfg.epochs = 1;
    cfg.iters_per_epoch = 1;
    cfg.k_steps = 2;
    cfg.batch_size = 4;
    cfg.warmup_epochs = 0;
    cfg.eval_every = 0;
    cfg.seed = seed;
  }

  DistillEngine<double> engine() {
    return DistillEngine<double>(*teacher, teacher->capture_bn_stats(), *student, *adapter,
                                 *gen, cfg);
  }
};

std::vector<Tensor<double>> snapshot_params(Module<double>& m) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, v] : m.params()) out.push_back(v.val());
  return out;
}

double params_diff(Module<double>& m, const std::vector<Tensor<double>>& before) {
  double worst = 0.0;
  size_t i = 0;
  for (const auto& [name, v] : m.params())
    worst = std::max(worst, static_cast<double>(max_abs_diff(v.val(), before[i++])));
  return worst;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c;
  c.validate();
  TrainConfig bad = c;
  bad.batch_size = 1;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.student_momentum = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.gen_decay_factor = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.warmup_epochs = -1;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);

  SECTION("kl-only baseline zeroes exactly the three extra weights") {
    TrainConfig b = kl_only_baseline(c);
    REQUIRE(b.hp.alpha == 0.0);
    REQUIRE(b.hp.gamma == 0.0);
    REQUIRE(b.hp.eta == 0.0);
    REQUIRE(b.hp.beta == c.hp.beta);
    REQUIRE(b.hp.tau == c.hp.tau);
    REQUIRE(b.k_steps == c.k_steps);
  }
}

TEST_CASE("engine construction validation") {
  Rig rig;
  SECTION("mismatched class counts") {
    std::mt19937_64 rng(2);
    ClassifierSpec ss = rig.student->spec;
    ss.num_classes = 4;
    auto other = build_classifier<double>(ss, rng);
    REQUIRE_THROWS_AS(DistillEngine<double>(*rig.teacher, rig.teacher->capture_bn_stats(),
                                            *other, *rig.adapter, *rig.gen, rig.cfg),
                      ConfigError);
  }
  SECTION("mismatched adapter dims") {
    std::mt19937_64 rng(2);
    Adapter<double> wrong(AdapterSpec{4, 9, {}, false}, rng);
    REQUIRE_THROWS_AS(DistillEngine<double>(*rig.teacher, rig.teacher->capture_bn_stats(),
                                            *rig.student, wrong, *rig.gen, rig.cfg),
                      ConfigError);
  }
}

TEST_CASE("freeze contracts") {
  Rig rig;
  auto eng = rig.engine();
  auto t_before = snapshot_params(*rig.teacher);

  SECTION("min step trains the student, not the generator") {
    auto g_before = snapshot_params(*rig.gen);
    auto s_before = snapshot_params(*rig.student);
    StepRecord rec = eng.min_stage_step();
    REQUIRE(rec.stage == "min");
    REQUIRE(params_diff(*rig.teacher, t_before) == 0.0);
    REQUIRE(params_diff(*rig.gen, g_before) == 0.0);
    REQUIRE(params_diff(*rig.student, s_before) > 0.0);
  }

  SECTION("max step trains the generator, not the student or adapter") {
    auto s_before = snapshot_params(*rig.student);
    auto a_before = snapshot_params(*rig.adapter);
    auto g_before = snapshot_params(*rig.gen);
    StepRecord rec = eng.max_stage_step();
    REQUIRE(rec.stage == "max");
    REQUIRE(params_diff(*rig.teacher, t_before) == 0.0);
    REQUIRE(params_diff(*rig.student, s_before) == 0.0);
    REQUIRE(params_diff(*rig.adapter, a_before) == 0.0);
    REQUIRE(params_diff(*rig.gen, g_before) > 0.0);
  }

  SECTION("zero learning rates make both steps exact no-ops") {
    Rig z;
    z.cfg.student_lr = 0.0;
    z.cfg.gen_lr = 0.0;
    auto ze = z.engine();
    auto s_before = snapshot_params(*z.student);
    auto g_before = snapshot_params(*z.gen);
    ze.min_stage_step();
    ze.max_stage_step();
    REQUIRE(params_diff(*z.student, s_before) == 0.0);
    REQUIRE(params_diff(*z.gen, g_before) == 0.0);
  }
}

TEST_CASE("loss record bookkeeping") {
  Rig rig;
  auto eng = rig.engine();

  SECTION("min record total is the eta-weighted sum of parts") {
    StepRecord rec = eng.min_stage_step();
    double expect = rec.component("kl") + rig.cfg.hp.alpha * rec.component("r_l2") +
                    rig.cfg.hp.eta * rec.component("ce");
    REQUIRE(rec.component("total") == Catch::Approx(expect).margin(1e-12));
  }

  SECTION("max record total matches the weighted combination") {
    StepRecord rec = eng.max_stage_step();
    double expect = -rec.component("ikd") + rig.cfg.hp.beta * rec.component("bns") -
                    rig.cfg.hp.gamma * rec.component("scl") +
                    rig.cfg.hp.eta * rec.component("ce");
    REQUIRE(rec.component("total") == Catch::Approx(expect).margin(1e-10));
  }

  SECTION("degenerate weights reduce max total to -ikd") {
    Rig r2;
    r2.cfg.hp.beta = 0.0;
    r2.cfg.hp.gamma = 0.0;
    r2.cfg.hp.eta = 0.0;
    auto e2 = r2.engine();
    StepRecord rec = e2.max_stage_step();
    REQUIRE(rec.component("total") == Catch::Approx(-rec.component("ikd")).margin(1e-12));
  }
}

TEST_CASE("training loop accounting and schedules") {
  TmpDir tmp;
  Rig rig;
  rig.cfg.epochs = 2;
  rig.cfg.iters_per_epoch = 2;
  rig.cfg.k_steps = 2;
  auto eng = rig.engine();
  eng.train(tmp.path.string());

  const auto& h = eng.history();
  REQUIRE(static_cast<int64_t>(h.size()) ==
          rig.cfg.epochs * rig.cfg.iters_per_epoch * (rig.cfg.k_steps + 1));
  int64_t mins = 0, maxs = 0;
  for (const auto& r : h) (r.stage == "min" ? mins : maxs)++;
  REQUIRE(mins == 8);
  REQUIRE(maxs == 4);

  SECTION("cosine schedule anneals the student lr to ~0") {
    REQUIRE(h.back().stage == "max");
    double last_min_lr = -1;
    for (const auto& r : h)
      if (r.stage == "min") last_min_lr = r.lr;
    REQUIRE(last_min_lr >= 0.0);
    REQUIRE(last_min_lr < rig.cfg.student_lr * 0.2);
  }

  SECTION("artifacts are written") {
    REQUIRE(fs::exists(tmp.path / "metrics.jsonl"));
    REQUIRE(fs::exists(tmp.path / "train_summary.json"));
    REQUIRE(fs::exists(tmp.path / "state"));
    REQUIRE(fs::exists(tmp.path / "student.tensors"));
    REQUIRE(fs::exists(tmp.path / "generator.tensors"));
  }
}

TEST_CASE("cosine endpoint") {
  // with many epochs the final min-stage lr must be essentially zero
  TmpDir tmp;
  Rig rig;
  rig.cfg.epochs = 8;
  rig.cfg.iters_per_epoch = 1;
  rig.cfg.k_steps = 1;
  auto eng = rig.engine();
  eng.train(tmp.path.string());
  double last = -1;
  for (const auto& r : eng.history())
    if (r.stage == "min") last = r.lr;
  // the last step sits one step before the exact endpoint of the cosine
  REQUIRE(last < rig.cfg.student_lr * std::pow(std::sin(M_PI / 16.0), 2) + 1e-8);
}

TEST_CASE("determinism of identical runs") {
  Rig a(7), b(7);
  auto ea = a.engine();
  auto eb = b.engine();
  for (int s = 0; s < 10; ++s) {
    StepRecord ra = s % 3 == 2 ? ea.max_stage_step() : ea.min_stage_step();
    StepRecord rb = s % 3 == 2 ? eb.max_stage_step() : eb.min_stage_step();
    REQUIRE(ra.stage == rb.stage);
    REQUIRE(ra.components.size() == rb.components.size());
    for (size_t i = 0; i < ra.components.size(); ++i) {
      REQUIRE(ra.components[i].first == rb.components[i].first);
      REQUIRE(ra.components[i].second ==
              Catch::Approx(rb.components[i].second).margin(1e-9));
    }
  }
}

TEST_CASE("checkpoint round trip") {
  TmpDir run_a, run_b;

  // reference: 2 epochs without interruption
  Rig ref(9);
  ref.cfg.epochs = 2;
  ref.cfg.iters_per_epoch = 2;
  auto er = ref.engine();
  er.train(run_a.path.string());

  // interrupted: run 1 of the 2 epochs, rebuild everything fresh, resume
  Rig first(9);
  first.cfg.epochs = 2;
  first.cfg.iters_per_epoch = 2;
  auto e1 = first.engine();
  e1.train(run_b.path.string(), 1);

  Rig second(9);
  second.cfg.epochs = 2;
  second.cfg.iters_per_epoch = 2;
  auto e2 = second.engine();
  e2.load_state(run_b.path / "state");
  REQUIRE(e2.epoch() == 1);
  e2.train(run_b.path.string());

  // the resumed student must match the uninterrupted one exactly
  auto pa = snapshot_params(*ref.student);
  REQUIRE(params_diff(*second.student, pa) < 1e-9);
  auto ga = snapshot_params(*ref.gen);
  REQUIRE(params_diff(*second.gen, ga) < 1e-9);
}

TEST_CASE("divergence is reported, not propagated silently") {
  Rig rig;
  auto eng = rig.engine();
  // poison the generator so its output is non-finite
  for (const auto& [name, v] : rig.gen->params())
    const_cast<Tensor<double>&>(v.val()).data[0] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(eng.min_stage_step(), DivergedError);
}
