#include <catch2/catch_amalgamated.hpp>

#include "dfkd/losses.hpp"
#include "gradcheck.hpp"

using namespace dfkd;

namespace {

Tensor<double> t2(std::initializer_list<std::initializer_list<double>> rows) {
  int64_t r = static_cast<int64_t>(rows.size());
  int64_t c = static_cast<int64_t>(rows.begin()->size());
  Tensor<double> t({r, c});
  int64_t i = 0;
  for (const auto& row : rows)
    for (double v : row) t.data[static_cast<size_t>(i++)] = v;
  return t;
}

Tensor<double> t1(std::initializer_list<double> vals) {
  Tensor<double> t({static_cast<int64_t>(vals.size())});
  std::copy(vals.begin(), vals.end(), t.data.begin());
  return t;
}

BNStatsSnapshot<double> snap1(const std::string& id, std::initializer_list<double> mu,
                              std::initializer_list<double> s2) {
  BNStatsSnapshot<double> s;
  s.layers.push_back({id, t1(mu), t1(s2)});
  return s;
}

}  // namespace

TEST_CASE("kl_term analytic values") {
  SECTION("identical logits give zero") {
    Var<double> t(t2({{0.3, -1.2, 0.5}, {2.0, 0.0, -1.0}}), false);
    REQUIRE(kl_term(t, t).val()[0] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("near-one-hot vs uniform equals ln 2") {
    Var<double> t(t2({{40.0, -40.0}}), false);
    Var<double> s(t2({{0.0, 0.0}}), false);
    REQUIRE(kl_term(t, s).val()[0] == Catch::Approx(std::log(2.0)).margin(1e-6));
  }
  SECTION("non-negative on 1000 random logit pairs") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 1000; ++i) {
      Var<double> t(Tensor<double>::randn({2, 5}, rng, 3.0), false);
      Var<double> s(Tensor<double>::randn({2, 5}, rng, 3.0), false);
      REQUIRE(kl_term(t, s).val()[0] >= -1e-12);
    }
  }
}

TEST_CASE("r_l2_term analytic values") {
  SECTION("identical logits give zero") {
    Var<double> t(t2({{1.0, 2.0, 3.0}}), false);
    REQUIRE(r_l2_term(t, t).val()[0] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("difference (3,4) gives log 6") {
    Var<double> t(t2({{3.0, 4.0}}), false);
    Var<double> s(t2({{0.0, 0.0}}), false);
    REQUIRE(r_l2_term(t, s).val()[0] == Catch::Approx(std::log(6.0)).margin(1e-9));
  }
  SECTION("monotone in the difference norm") {
    double prev = -1.0;
    for (double scale : {0.5, 1.0, 2.0, 4.0, 8.0}) {
      Var<double> t(t2({{3.0 * scale, 4.0 * scale}}), false);
      Var<double> s(t2({{0.0, 0.0}}), false);
      double v = r_l2_term(t, s).val()[0];
      REQUIRE(v > prev);
      prev = v;
    }
  }
}

TEST_CASE("ikd_loss composition") {
  Var<double> t(t2({{3.0, 4.0}}), false);
  Var<double> s(t2({{0.0, 0.0}}), false);
  SECTION("identical logits give zero for any alpha") {
    REQUIRE(ikd_loss(t, t, 7.3).val()[0] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("alpha 0 equals the kl term") {
    REQUIRE(ikd_loss(t, s, 0.0).val()[0] == Catch::Approx(kl_term(t, s).val()[0]).margin(1e-12));
  }
  SECTION("full form equals kl + alpha * r_l2") {
    double expected = kl_term(t, s).val()[0] + 2.0 * std::log(6.0);
    REQUIRE(ikd_loss(t, s, 2.0).val()[0] == Catch::Approx(expected).margin(1e-9));
  }
  SECTION("component modes select individual terms") {
    REQUIRE(ikd_loss(t, s, 2.0, IkdMode::kl_only).val()[0] ==
            Catch::Approx(kl_term(t, s).val()[0]).margin(1e-12));
    REQUIRE(ikd_loss(t, s, 2.0, IkdMode::rl2_only).val()[0] ==
            Catch::Approx(2.0 * std::log(6.0)).margin(1e-9));
  }
}

TEST_CASE("ce_stage_loss analytic values") {
  SECTION("uniform logits over 10 classes give ln 10") {
    Var<double> logits(Tensor<double>::zeros({4, 10}), false);
    std::vector<int64_t> y{0, 3, 7, 9};
    REQUIRE(ce_stage_loss(logits, y).val()[0] == Catch::Approx(std::log(10.0)).margin(1e-6));
  }
  SECTION("peaked logits drive the loss toward zero") {
    Tensor<double> l = Tensor<double>::zeros({1, 10});
    l.at2(0, 4) = 50.0;
    REQUIRE(ce_stage_loss(Var<double>(l, false), {4}).val()[0] ==
            Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("invariant to per-sample constant shifts") {
    std::mt19937_64 rng(5);
    Tensor<double> l = Tensor<double>::randn({3, 6}, rng);
    Tensor<double> shifted = l;
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 6; ++j) shifted.at2(i, j) += 10.0 * static_cast<double>(i + 1);
    std::vector<int64_t> y{1, 4, 2};
    REQUIRE(ce_stage_loss(Var<double>(l, false), y).val()[0] ==
            Catch::Approx(ce_stage_loss(Var<double>(shifted, false), y).val()[0]).margin(1e-9));
  }
  SECTION("label out of range is rejected") {
    Var<double> logits(Tensor<double>::zeros({1, 3}), false);
    REQUIRE_THROWS_AS(ce_stage_loss(logits, {3}), std::out_of_range);
  }
}

TEST_CASE("bns_loss analytic values") {
  SECTION("matching statistics give zero") {
    auto s = snap1("bn1", {0.5, -1.0}, {1.0, 2.0});
    REQUIRE(bns_loss(s, as_batch_stats(s)).val()[0] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("1-D mean offset of 1 gives 1.0") {
    auto ref = snap1("bn1", {0.0}, {1.0});
    auto cur = snap1("bn1", {1.0}, {1.0});
    REQUIRE(bns_loss(ref, as_batch_stats(cur)).val()[0] == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("layers contribute additively") {
    BNStatsSnapshot<double> ref, cur;
    ref.layers.push_back({"a", t1({0.0}), t1({1.0})});
    ref.layers.push_back({"b", t1({0.0}), t1({1.0})});
    cur.layers.push_back({"a", t1({1.0}), t1({1.0})});
    cur.layers.push_back({"b", t1({1.0}), t1({1.0})});
    REQUIRE(bns_loss(ref, as_batch_stats(cur)).val()[0] == Catch::Approx(2.0).margin(1e-9));
  }
  SECTION("layer-list mismatch is rejected") {
    auto ref = snap1("a", {0.0}, {1.0});
    auto cur = snap1("b", {0.0}, {1.0});
    REQUIRE_THROWS_AS(bns_loss(ref, as_batch_stats(cur)), std::invalid_argument);
  }
}

TEST_CASE("scl_loss oracle values") {
  SECTION("orthonormal batch of 2 with distinct labels") {
    // frozen value from an independent direct evaluation of the formula
    RepresentationPair<double> pair;
    pair.z_t = Var<double>(t2({{1.0, 0.0}, {0.0, 1.0}}), false);
    pair.z_s = Var<double>(t2({{1.0, 0.0}, {0.0, 1.0}}), false);
    pair.labels = {0, 1};
    REQUIRE(scl_loss(pair, 1.0).val()[0] == Catch::Approx(-2.0).margin(1e-6));
  }
  SECTION("batch of 3 with a same-class pair") {
    // frozen value from an independent direct evaluation of the formula
    RepresentationPair<double> pair;
    pair.z_t = Var<double>(t2({{0.3, -1.2, 0.5}, {1.0, 0.4, -0.2}, {-0.7, 0.1, 0.9}}), false);
    pair.z_s = Var<double>(t2({{0.2, 0.8, -0.5}, {-0.3, 0.6, 1.1}, {0.9, -0.4, 0.2}}), false);
    pair.labels = {0, 0, 1};
    REQUIRE(scl_loss(pair, 0.5).val()[0] == Catch::Approx(6.6607103746841405).margin(1e-6));
  }
  SECTION("large tau approaches the uniform-similarity closed form") {
    // all exponent arguments -> 0, so each row's loss -> log(B-1)
    std::mt19937_64 rng(3);
    RepresentationPair<double> pair;
    pair.z_t = Var<double>(Tensor<double>::randn({4, 6}, rng), false);
    pair.z_s = Var<double>(Tensor<double>::randn({4, 6}, rng), false);
    pair.labels = {0, 1, 2, 3};
    REQUIRE(scl_loss(pair, 1e7).val()[0] == Catch::Approx(4.0 * std::log(3.0)).margin(1e-4));
  }
  SECTION("permuting the batch leaves the value unchanged") {
    std::mt19937_64 rng(9);
    Tensor<double> zt = Tensor<double>::randn({5, 4}, rng);
    Tensor<double> zs = Tensor<double>::randn({5, 4}, rng);
    std::vector<int64_t> labels{0, 1, 0, 2, 1};
    RepresentationPair<double> pair{Var<double>(zt, false), Var<double>(zs, false), labels};
    double base = scl_loss(pair, 0.3).val()[0];
    std::vector<int64_t> perm{3, 0, 4, 1, 2};
    Tensor<double> pzt({5, 4}), pzs({5, 4});
    std::vector<int64_t> plabels(5);
    for (int64_t i = 0; i < 5; ++i) {
      plabels[static_cast<size_t>(i)] = labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
      for (int64_t j = 0; j < 4; ++j) {
        pzt.at2(i, j) = zt.at2(perm[static_cast<size_t>(i)], j);
        pzs.at2(i, j) = zs.at2(perm[static_cast<size_t>(i)], j);
      }
    }
    RepresentationPair<double> ppair{Var<double>(pzt, false), Var<double>(pzs, false), plabels};
    REQUIRE(scl_loss(ppair, 0.3).val()[0] == Catch::Approx(base).margin(1e-9));
  }
  SECTION("batch of 1 is rejected") {
    RepresentationPair<double> pair;
    pair.z_t = Var<double>(t2({{1.0, 0.0}}), false);
    pair.z_s = Var<double>(t2({{1.0, 0.0}}), false);
    pair.labels = {0};
    REQUIRE_THROWS_AS(scl_loss(pair, 1.0), std::invalid_argument);
  }
}

TEST_CASE("loss permutation invariance over the batch") {
  std::mt19937_64 rng(17);
  Tensor<double> t = Tensor<double>::randn({6, 5}, rng);
  Tensor<double> s = Tensor<double>::randn({6, 5}, rng);
  Tensor<double> pt({6, 5}), ps({6, 5});
  std::vector<int64_t> perm{5, 2, 0, 4, 1, 3};
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      pt.at2(i, j) = t.at2(perm[static_cast<size_t>(i)], j);
      ps.at2(i, j) = s.at2(perm[static_cast<size_t>(i)], j);
    }
  Var<double> tv(t, false), sv(s, false), ptv(pt, false), psv(ps, false);
  REQUIRE(kl_term(tv, sv).val()[0] == Catch::Approx(kl_term(ptv, psv).val()[0]).margin(1e-12));
  REQUIRE(r_l2_term(tv, sv).val()[0] ==
          Catch::Approx(r_l2_term(ptv, psv).val()[0]).margin(1e-12));
}

TEST_CASE("gradients match finite differences") {
  std::mt19937_64 rng(23);
  SECTION("ikd_loss") {
    for (int rep = 0; rep < 5; ++rep) {
      auto f = [](std::vector<Var<double>>& in) { return ikd_loss(in[0], in[1], 2.5); };
      double err = testutil::max_rel_grad_err(
          f, {Tensor<double>::randn({3, 4}, rng), Tensor<double>::randn({3, 4}, rng)});
      REQUIRE(err < 1e-4);
    }
  }
  SECTION("bns_loss through batch statistics") {
    for (int rep = 0; rep < 5; ++rep) {
      Tensor<double> mu = Tensor<double>::randn({3}, rng);
      Tensor<double> s2 = Tensor<double>::randn({3}, rng);
      for (auto& v : s2.data) v = std::abs(v) + 0.5;
      BNStatsSnapshot<double> ref;
      ref.layers.push_back({"l0", mu, s2});
      auto f = [&](std::vector<Var<double>>& in) {
        BatchStats<double> batch;
        batch.layers.push_back({"l0", channel_mean(in[0]), channel_var(in[0])});
        return bns_loss(ref, batch);
      };
      double err = testutil::max_rel_grad_err(f, {Tensor<double>::randn({4, 3, 2, 2}, rng)});
      REQUIRE(err < 1e-4);
    }
  }
  SECTION("scl_loss w.r.t. both views") {
    std::vector<int64_t> labels{0, 1, 0, 2};
    for (int rep = 0; rep < 5; ++rep) {
      auto f = [&](std::vector<Var<double>>& in) {
        RepresentationPair<double> pair{in[0], in[1], labels};
        return scl_loss(pair, 0.4);
      };
      double err = testutil::max_rel_grad_err(
          f, {Tensor<double>::randn({4, 5}, rng), Tensor<double>::randn({4, 5}, rng)});
      REQUIRE(err < 1e-4);
    }
  }
}

TEST_CASE("student_objective composition") {
  std::mt19937_64 rng(31);
  Var<double> t(Tensor<double>::randn({4, 6}, rng), false);
  Var<double> s(Tensor<double>::randn({4, 6}, rng), false);
  std::vector<int64_t> y{0, 2, 5, 1};
  HyperParams hp;
  SECTION("eta 0 equals ikd_loss") {
    hp.eta = 0.0;
    REQUIRE(student_objective(t, s, y, hp).val()[0] ==
            Catch::Approx(ikd_loss(t, s, hp.alpha).val()[0]).margin(1e-12));
  }
  SECTION("equals independently summed components") {
    double expected =
        ikd_loss(t, s, hp.alpha).val()[0] + hp.eta * ce_stage_loss(s, y).val()[0];
    REQUIRE(student_objective(t, s, y, hp).val()[0] == Catch::Approx(expected).margin(1e-9));
  }
}

TEST_CASE("generator_objective composition and linearity") {
  std::mt19937_64 rng(37);
  Var<double> t(Tensor<double>::randn({4, 6}, rng), false);
  Var<double> s(Tensor<double>::randn({4, 6}, rng), false);
  std::vector<int64_t> y{0, 2, 5, 1};
  RepresentationPair<double> pair{Var<double>(Tensor<double>::randn({4, 8}, rng), false),
                                  Var<double>(Tensor<double>::randn({4, 8}, rng), false), y};
  auto ref = snap1("l0", {0.1, -0.2, 0.3}, {1.0, 0.8, 1.2});
  Tensor<double> act = Tensor<double>::randn({4, 3, 2, 2}, rng);
  auto make_batch = [&] {
    BatchStats<double> b;
    b.layers.push_back({"l0", channel_mean(Var<double>(act, false)),
                        channel_var(Var<double>(act, false))});
    return b;
  };
  HyperParams hp;

  SECTION("only beta active with matching stats gives zero") {
    HyperParams h2 = hp;
    h2.alpha = 0.0;
    h2.gamma = 0.0;
    h2.eta = 0.0;
    auto batch = as_batch_stats(ref);
    double v = generator_objective(t, t, y, pair, ref, batch, h2).val()[0];
    REQUIRE(v == Catch::Approx(0.0).margin(1e-9));  // -ikd(t,t) = 0, bns matched = 0
  }
  SECTION("decomposes linearly over the weighted terms") {
    auto batch = make_batch();
    double joint = generator_objective(t, s, y, pair, ref, batch, hp).val()[0];
    double sum = -ikd_loss(t, s, hp.alpha).val()[0] +
                 hp.beta * bns_loss(ref, batch).val()[0] -
                 hp.gamma * scl_loss(pair, hp.tau).val()[0] +
                 hp.eta * ce_stage_loss(t, y).val()[0];
    REQUIRE(joint == Catch::Approx(sum).margin(1e-9));
  }
  SECTION("flipping gamma's sign flips the scl contribution exactly") {
    auto batch = make_batch();
    HyperParams plus = hp, zero = hp;
    zero.gamma = 0.0;
    double with = generator_objective(t, s, y, pair, ref, batch, plus).val()[0];
    double without = generator_objective(t, s, y, pair, ref, batch, zero).val()[0];
    REQUIRE(with - without ==
            Catch::Approx(-hp.gamma * scl_loss(pair, hp.tau).val()[0]).margin(1e-9));
  }
}

TEST_CASE("hyperparameter validation") {
  HyperParams hp;
  REQUIRE_NOTHROW(hp.validate());
  hp.tau = 0.0;
  REQUIRE_THROWS_AS(hp.validate(), std::invalid_argument);
  hp = HyperParams{};
  hp.gamma = -1.0;
  REQUIRE_THROWS_AS(hp.validate(), std::invalid_argument);
}

TEST_CASE("student objective is minimized at matching logits") {
  // gradient descent over student logits with eta=0 converges to the teacher's
  std::mt19937_64 rng(41);
  Tensor<double> t_val = Tensor<double>::randn({2, 4}, rng);
  Var<double> t(t_val, false);
  Tensor<double> s_val = Tensor<double>::randn({2, 4}, rng);
  for (int step = 0; step < 30000; ++step) {
    Var<double> s(s_val, true);
    Var<double> loss = ikd_loss(t, s, 5.0);
    backward(loss);
    for (size_t j = 0; j < s_val.data.size(); ++j) s_val.data[j] -= 0.1 * s.grad().data[j];
  }
  // compare softmax probabilities (logits match only up to per-row shifts)
  Var<double> pt = log_softmax_rows(Var<double>(t_val, false));
  Var<double> ps = log_softmax_rows(Var<double>(s_val, false));
  REQUIRE(max_abs_diff(pt.val(), ps.val()) < 1e-3);
}
