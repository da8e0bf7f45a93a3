#include <catch2/catch_amalgamated.hpp>
#include <sstream>

#include "dfkd/config.hpp"

using namespace dfkd;

TEST_CASE("config binder set and dump") {
  RunConfig cfg;
  ConfigBinder binder(cfg);

  SECTION("dotted overrides reach nested fields") {
    binder.set("seed", "42");
    binder.set("hyperparams.alpha", "2.5");
    binder.set("schedule.batch_size", "32");
    binder.set("generator.cfe_mode", "\"plain_bn\"");
    binder.set("data.root", "some/dir");
    REQUIRE(cfg.seed == 42);
    REQUIRE(cfg.hyperparams.alpha == 2.5);
    REQUIRE(cfg.schedule.batch_size == 32);
    REQUIRE(cfg.generator.cfe_mode == "plain_bn");
    REQUIRE(cfg.data.root == "some/dir");
  }

  SECTION("unknown keys are rejected with the key in the message") {
    REQUIRE_THROWS_WITH(binder.set("schedule.bathc_size", "32"),
                        Catch::Matchers::ContainsSubstring("bathc_size"));
  }

  SECTION("dump lists every default explicitly and round-trips") {
    binder.set("seed", "7");
    std::string text = binder.dump_toml();
    REQUIRE(text.find("alpha = 5") != std::string::npos);
    REQUIRE(text.find("tau = 10") != std::string::npos);
    REQUIRE(text.find("batch_size = 128") != std::string::npos);

    RunConfig back;
    ConfigBinder b2(back);
    std::istringstream in(text);
    b2.parse_toml(in);
    REQUIRE(b2.dump_toml() == text);
    REQUIRE(back.seed == 7);
  }
}

TEST_CASE("toml parsing") {
  RunConfig cfg;
  ConfigBinder binder(cfg);

  SECTION("sections, comments and arrays") {
    std::istringstream in(
        "# a comment\n"
        "seed = 3\n"
        "[hyperparams]\n"
        "gamma = 0.25  # trailing comment\n"
        "[schedule]\n"
        "gen_decay_epochs = [10, 20]\n"
        "[data]\n"
        "root = \"/tmp/x\"\n"
        "horizontal_flip = true\n");
    binder.parse_toml(in);
    REQUIRE(cfg.seed == 3);
    REQUIRE(cfg.hyperparams.gamma == 0.25);
    REQUIRE(cfg.schedule.gen_decay_epochs == std::vector<int64_t>{10, 20});
    REQUIRE(cfg.data.root == "/tmp/x");
    REQUIRE(cfg.data.horizontal_flip);
  }

  SECTION("unknown key names the offending line") {
    std::istringstream in("[schedule]\nnot_a_key = 1\n");
    REQUIRE_THROWS_AS(binder.parse_toml(in), ConfigError);
  }
}

TEST_CASE("run config validation") {
  RunConfig cfg;
  SECTION("seed is mandatory") {
    REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("seed"));
    cfg.seed = 0;
    cfg.validate();
  }
  SECTION("precision is checked") {
    cfg.seed = 1;
    cfg.precision = "float16";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("derived module specs") {
  RunConfig cfg;
  cfg.seed = 1;

  SECTION("train config carries the loss weights and schedule") {
    TrainConfig tc = cfg.train_config();
    REQUIRE(tc.hp.alpha == 5.0);
    REQUIRE(tc.hp.beta == 1.0);
    REQUIRE(tc.hp.gamma == 0.7);
    REQUIRE(tc.hp.eta == 1.0);
    REQUIRE(tc.hp.tau == 10.0);
    REQUIRE(tc.k_steps == 5);
    REQUIRE(tc.batch_size == 128);
    tc.validate();
  }

  SECTION("adapter spec links the two feature dims") {
    AdapterSpec as = cfg.adapter_spec();
    REQUIRE(as.in_dim == cfg.models.student_feature_dim);
    REQUIRE(as.out_dim == cfg.models.teacher_feature_dim);
  }

  SECTION("generator spec mirrors the data shape") {
    GeneratorSpec gs = cfg.generator_spec();
    REQUIRE(gs.output_shape ==
            Shape{cfg.models.input_shape[0], cfg.models.input_shape[1],
                  cfg.models.input_shape[2]});
    REQUIRE(gs.num_classes == cfg.models.num_classes);
  }
}
