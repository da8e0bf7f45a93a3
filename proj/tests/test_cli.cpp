#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dfkd/png_io.hpp"
#include "dfkd/serialize.hpp"

#ifndef DFKD_BIN
#error "DFKD_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run(const std::string& args) {
  std::string cmd = std::string(DFKD_BIN) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunResult r;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
  int status = pclose(p);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

// One pipeline sandbox shared by the whole binary: corpus -> teacher -> distill.
// Stages are built on demand so every test case is self-sufficient.
struct Pipeline {
  fs::path root;
  std::string data, out;

  Pipeline() {
    root = fs::temp_directory_path() /
           ("dfkd_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(root);
    data = (root / "data").string();
    out = (root / "out").string();
  }
  ~Pipeline() { fs::remove_all(root); }

  // small-model settings shared by every training command below
  std::string small() const {
    return " --set data.root=" + data +
           " --set precision=float32"
           " --set models.teacher_feature_dim=16 --set models.student_feature_dim=8"
           " --set generator.latent_dim=8 --set generator.base_channels=8"
           " --set data.pretrain_batch=32";
  }

  std::string sched() const {
    return " --set schedule.iters_per_epoch=2 --set schedule.k_steps=2"
           " --set schedule.batch_size=4 --set eval.eval_every=0"
           " --set eval.per_class=2 --set eval.fid_samples=8";
  }

  void ensure_data() {
    if (fs::exists(fs::path(data) / "manifest.json")) return;
    RunResult r = run("makedata --out " + data +
                      " --train-per-class 8 --test-per-class 4 --seed 1");
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
  }

  void ensure_teacher() {
    ensure_data();
    if (fs::exists(fs::path(out) / "teacher" / "teacher.tensors")) return;
    RunResult r = run("pretrain --seed 1 --epochs 2 --out " + out + small());
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
  }

  void ensure_distilled() {
    ensure_teacher();
    if (fs::exists(fs::path(out) / "distill" / "student.tensors")) return;
    RunResult r = run("distill --seed 2 --epochs 1 --out " + out + small() + sched());
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
  }
};

Pipeline pipe_;

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  REQUIRE(run("").exit_code == 2);
  REQUIRE(run("frobnicate").exit_code == 2);
  REQUIRE(run("distill --no-such-flag").exit_code == 2);
}

TEST_CASE("makedata writes a loadable corpus") {
  pipe_.ensure_data();
  REQUIRE(fs::exists(fs::path(pipe_.data) / "manifest.json"));
  REQUIRE(fs::exists(fs::path(pipe_.data) / "train" / "class_9" / "7.png"));
}

TEST_CASE("pretrain error paths and artifacts") {
  SECTION("missing data root exits 2 and names the path") {
    RunResult r = run("pretrain --seed 1 --set data.root=" + pipe_.data + "_nope --out " +
                      pipe_.out);
    REQUIRE(r.exit_code == 2);
    REQUIRE(r.output.find(pipe_.data + "_nope") != std::string::npos);
  }

  SECTION("a successful run writes report and effective config") {
    pipe_.ensure_teacher();
    fs::path tdir = fs::path(pipe_.out) / "teacher";
    REQUIRE(fs::exists(tdir / "teacher.tensors"));
    dfkd::json report = dfkd::read_json(tdir / "teacher_report.json");
    REQUIRE(report.contains("test_accuracy"));
    // the --epochs override must be reflected in the dumped config
    std::string eff = slurp(tdir / "effective_config.toml");
    REQUIRE(eff.find("pretrain_epochs = 2") != std::string::npos);
  }
}

TEST_CASE("distill, synthesize and eval round trip") {
  pipe_.ensure_distilled();

  SECTION("distill writes metrics and checkpoints; kl-only preset is dumped") {
    fs::path ddir = fs::path(pipe_.out) / "distill";
    REQUIRE(fs::exists(ddir / "metrics.jsonl"));
    REQUIRE(fs::exists(ddir / "student.tensors"));
    REQUIRE(fs::exists(ddir / "generator.tensors"));

    RunResult abl = run("distill --seed 2 --epochs 1 --ablation kl-only --teacher " +
                        pipe_.out + "/teacher --out " + pipe_.out + "_klonly" + pipe_.small() +
                        pipe_.sched());
    INFO(abl.output);
    REQUIRE(abl.exit_code == 0);
    std::string eff = slurp(fs::path(pipe_.out + "_klonly") / "distill" /
                            "effective_config.toml");
    REQUIRE(eff.find("alpha = 0") != std::string::npos);
    REQUIRE(eff.find("gamma = 0") != std::string::npos);
    REQUIRE(eff.find("eta = 0") != std::string::npos);
    fs::remove_all(pipe_.out + "_klonly");
  }

  SECTION("synthesize contracts") {
    std::string common = " --seed 3 --out " + pipe_.out + pipe_.small();
    REQUIRE(run("synthesize --count 0" + common).exit_code == 0);
    REQUIRE(run("synthesize --classes 42" + common).exit_code == 2);

    RunResult r = run("synthesize --classes 1 --count 2" + common);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    fs::path png = fs::path(pipe_.out) / "synth" / "class_1.png";
    REQUIRE(fs::exists(png));
    dfkd::ImageU8 first = dfkd::read_png(png.string());
    REQUIRE(run("synthesize --classes 1 --count 2" + common).exit_code == 0);
    dfkd::ImageU8 second = dfkd::read_png(png.string());
    REQUIRE(first.pixels == second.pixels);  // same seed, byte-identical
  }

  SECTION("eval writes the report; data-free eval carries a notice") {
    std::string common = " --seed 4 --out " + pipe_.out + " --set eval.per_class=2" +
                         " --set eval.fid_samples=8 --set precision=float32";
    RunResult r = run("eval" + common + " --set data.root=" + pipe_.data);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    dfkd::json report =
        dfkd::read_json(fs::path(pipe_.out) / "distill" / "eval_report.json");
    for (const char* key :
         {"accuracy", "fid", "conditional_fidelity", "extractor_id", "seed"})
      REQUIRE(report.contains(key));

    RunResult nf = run("eval" + common + " --set data.root=");  // no real dataset
    INFO(nf.output);
    REQUIRE(nf.exit_code == 0);
    dfkd::json gated =
        dfkd::read_json(fs::path(pipe_.out) / "distill" / "eval_report.json");
    REQUIRE(gated.contains("notice"));
    REQUIRE_FALSE(gated.contains("fid"));

    REQUIRE(run("eval --seed 4 --out " + pipe_.root.string() + "/empty").exit_code == 2);
  }

  SECTION("unknown ablation matrix exits 2") {
    REQUIRE(run("ablate --seed 5 --matrix bogus --out " + pipe_.out + pipe_.small())
                .exit_code == 2);
  }
}
