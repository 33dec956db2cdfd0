#include "doctest.h"
#include "oracles.hpp"

#include "promptpar/errors.hpp"
#include "promptpar/objectives.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace promptpar;

namespace {

LabelMatrix random_labels(std::mt19937_64& gen, int m, int n) {
  std::bernoulli_distribution coin(0.4);
  LabelMatrix y(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y(i, j) = coin(gen) ? 1.0 : 0.0;
  return y;
}

LabelMatrix random_probs(std::mt19937_64& gen, int m, int n) {
  std::uniform_real_distribution<double> u(0.001, 0.999);
  LabelMatrix p(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) p(i, j) = u(gen);
  return p;
}

}  // namespace

TEST_CASE("attribute weights") {
  const auto w = attribute_weights({0.0, 1.0, 0.5});
  CHECK(w(0) == 1.0);
  CHECK(w(1) == doctest::Approx(0.3679).epsilon(1e-4));
  CHECK(w(2) == doctest::Approx(0.6065).epsilon(1e-4));
}

TEST_CASE("weighted bce values") {
  LabelMatrix p(1, 1), y(1, 1);
  p << 0.5;
  y << 1;
  CHECK(weighted_bce(p, y, ad::RowVector::Ones(1)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Hand evaluation with mixed labels and weights.
  LabelMatrix p2(2, 2), y2(2, 2);
  p2 << 0.8, 0.3, 0.6, 0.9;
  y2 << 1, 0, 0, 1;
  ad::RowVector w(2);
  w << 0.7, 1.3;
  const double hand =
      -(0.7 * std::log(0.8) + 1.3 * std::log(0.7) + 0.7 * std::log(0.4) + 1.3 * std::log(0.9)) / 2;
  CHECK(weighted_bce(p2, y2, w) == doctest::Approx(hand).epsilon(1e-12));

  // Duplicating every sample leaves the loss unchanged.
  LabelMatrix p4(4, 2), y4(4, 2);
  p4 << p2, p2;
  y4 << y2, y2;
  CHECK(weighted_bce(p4, y4, w) == doctest::Approx(weighted_bce(p2, y2, w)).epsilon(1e-12));

  // Perfect prediction after clamping is near zero.
  CHECK(weighted_bce(y2, y2, w) < 1e-6);

  // A confident wrong label is bounded by the clamp.
  LabelMatrix wrong(1, 1);
  wrong << 0.0;
  CHECK(weighted_bce(wrong, y, ad::RowVector::Ones(1)) ==
        doctest::Approx(-std::log(kProbabilityClamp)).epsilon(1e-9));

  CHECK_THROWS_AS(weighted_bce(p2, y, ad::RowVector::Ones(1)), ContractError);
  CHECK_THROWS_AS(weighted_bce(p2, y2, ad::RowVector::Ones(3)), ContractError);
}

TEST_CASE("gl loss and total loss") {
  const LabelMatrix half = LabelMatrix::Constant(3, 4, 0.5);
  std::mt19937_64 gen(3);
  const auto y = random_labels(gen, 3, 4);
  CHECK(gl_loss(half, y) == doctest::Approx(4 * std::log(2.0)).epsilon(1e-12));
  CHECK(gl_loss(y, y) < 1e-6);

  const auto p = random_probs(gen, 3, 4);
  CHECK(gl_loss(p, y) == weighted_bce(p, y, ad::RowVector::Ones(4)));

  CHECK(total_loss(1.0, 0.4, 0.5) == doctest::Approx(1.2));
  CHECK(total_loss(1.0, 0.4, 0.0) == 1.0);
  CHECK(total_loss(1.0, 0.8, 0.5) - total_loss(1.0, 0.4, 0.5) == doctest::Approx(0.2));
  CHECK_THROWS_AS(total_loss(1.0, 0.4, -0.1), ContractError);
}

TEST_CASE("bce is nonnegative and decreases toward the label") {
  std::mt19937_64 gen(4);
  std::uniform_int_distribution<int> pick(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = random_probs(gen, 5, 5);
    const auto y = random_labels(gen, 5, 5);
    const auto w = attribute_weights({0.1, 0.2, 0.5, 0.8, 1.0});
    const double before = weighted_bce(p, y, w);
    CHECK(before >= 0);
    const int i = pick(gen), j = pick(gen);
    p(i, j) += (y(i, j) - p(i, j)) * 0.5;
    CHECK(weighted_bce(p, y, w) < before);
  }
}

TEST_CASE("metrics small examples") {
  LabelMatrix p(2, 2), y(2, 2);
  p << 1, 0, 1, 1;
  y << 1, 0, 0, 1;
  const auto r = compute_metrics(p, y);
  CHECK(r.accuracy == doctest::Approx(0.75));
  CHECK(r.mA == doctest::Approx(0.75));
  CHECK(r.precision == doctest::Approx(0.75));
  CHECK(r.recall == doctest::Approx(1.0));
  CHECK(r.f1 == doctest::Approx(2 * 0.75 / 1.75));

  const auto perfect = compute_metrics(y, y);
  CHECK(perfect.mA == 1.0);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);
}

TEST_CASE("metrics empty-set conventions and flags") {
  LabelMatrix p(2, 2), y(2, 2);
  p << 0, 0, 0, 1;
  y << 0, 0, 1, 1;
  const auto r = compute_metrics(p, y);
  // Row 0: both sets empty, scores 1. Row 1: {1} vs {0,1}.
  CHECK(r.accuracy == doctest::Approx(0.75));
  CHECK(r.precision == doctest::Approx(1.0));
  CHECK(r.recall == doctest::Approx(0.75));

  LabelMatrix p2(1, 1), y2(1, 1);
  p2 << 0;
  y2 << 1;
  const auto miss = compute_metrics(p2, y2);
  CHECK(miss.precision == 0.0);
  CHECK(miss.f1 == 0.0);
  CHECK(miss.per_attribute[0].tnr_undefined);
  CHECK_FALSE(miss.per_attribute[0].tpr_undefined);

  const auto negatives = compute_metrics(LabelMatrix::Zero(3, 1), LabelMatrix::Zero(3, 1));
  CHECK(negatives.per_attribute[0].tpr_undefined);
  CHECK(negatives.mA == 0.5);
  CHECK(metrics_to_text(negatives).find("flag=no_positive_labels") != std::string::npos);

  CHECK_THROWS_AS(compute_metrics(LabelMatrix(0, 2), LabelMatrix(0, 2)), DataError);
  CHECK_THROWS_AS(compute_metrics(p, y, 1.0), ContractError);
  CHECK_THROWS_AS(compute_metrics(p, p2), ContractError);
}

TEST_CASE("metrics match a brute-force oracle") {
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> dim(1, 12);
  std::uniform_real_distribution<double> thr(0.1, 0.9);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = trial == 0 ? 50 : dim(gen), n = dim(gen);
    const auto p = random_probs(gen, m, n);
    const auto y = random_labels(gen, m, n);
    const double t = trial % 2 ? 0.5 : thr(gen);
    const auto r = compute_metrics(p, y, t);
    const auto o = testing::brute_force_metrics(p, y, t);
    for (int j = 0; j < n; ++j) {
      const auto& c = r.per_attribute[j];
      REQUIRE(c.tp == o.counts[j][0]);
      REQUIRE(c.fp == o.counts[j][1]);
      REQUIRE(c.tn == o.counts[j][2]);
      REQUIRE(c.fn == o.counts[j][3]);
      REQUIRE(c.tp + c.fp + c.tn + c.fn == m);
    }
    REQUIRE(std::abs(r.mA - o.mA) <= 1e-12);
    REQUIRE(std::abs(r.accuracy - o.acc) <= 1e-12);
    REQUIRE(std::abs(r.precision - o.prec) <= 1e-12);
    REQUIRE(std::abs(r.recall - o.rec) <= 1e-12);
    for (double v : {r.mA, r.accuracy, r.precision, r.recall, r.f1}) REQUIRE((v >= 0 && v <= 1));
  }
}

TEST_CASE("metrics are invariant under row permutation") {
  std::mt19937_64 gen(6);
  const auto p = random_probs(gen, 30, 6);
  const auto y = random_labels(gen, 30, 6);
  std::vector<int> order(30);
  for (int i = 0; i < 30; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), gen);
  LabelMatrix pp(30, 6), yp(30, 6);
  for (int i = 0; i < 30; ++i) {
    pp.row(i) = p.row(order[i]);
    yp.row(i) = y.row(order[i]);
  }
  const auto a = compute_metrics(p, y), b = compute_metrics(pp, yp);
  CHECK(a.mA == doctest::Approx(b.mA).epsilon(1e-12));
  CHECK(a.accuracy == doctest::Approx(b.accuracy).epsilon(1e-12));
  CHECK(a.f1 == doctest::Approx(b.f1).epsilon(1e-12));
}

TEST_CASE("metric serialization") {
  LabelMatrix p(2, 2), y(2, 2);
  p << 1, 0, 1, 1;
  y << 1, 0, 0, 1;
  const auto r = compute_metrics(p, y);
  const auto text = metrics_to_text(r, {"hat", "bag"});
  CHECK(text.find("mA=0.750000") != std::string::npos);
  CHECK(text.find("attribute.bag.tp=1") != std::string::npos);
  const auto j = nlohmann::json::parse(metrics_to_json(r, {"hat", "bag"}));
  CHECK(j["mA"].get<double>() == doctest::Approx(0.75));
  CHECK(j["per_attribute"][0]["name"] == "hat");
  CHECK(j["per_attribute"][0]["fp"] == 1);
}
