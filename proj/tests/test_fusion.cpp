#include "doctest.h"
#include "support.hpp"

#include "promptpar/errors.hpp"
#include "promptpar/fusion.hpp"

#include <cmath>

using namespace promptpar;

namespace {

double cosine(const ad::RowVector& a, const ad::RowVector& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("text projection") {
  auto enc = stub_config();
  FusionConfig fc;
  fc.phi_init = PhiInit::kIdentity;
  FusionHead head(fc, enc, 3);
  Rng rng(51);
  const ad::Matrix x = random_normal(rng, 3, enc.text_dim, 1.0);
  CHECK(head.project_text(ad::Var(x)).value() == x);

  head.params().at("phi.b").var.mutable_value().setConstant(0.25);
  const auto out = head.project_text(ad::Var(ad::Matrix::Zero(2, enc.text_dim))).value();
  CHECK(out.isConstant(0.25));
  CHECK_THROWS_AS(head.project_text(ad::Var(ad::Matrix::Zero(2, enc.text_dim + 1))), ContractError);

  const auto specs = FusionHead::describe(FusionConfig{}, clip_vit_l14_config(), 51);
  CHECK(specs[0].name == "phi.w");
  CHECK(specs[0].rows == 768);
  CHECK(specs[0].cols == 1024);
  CHECK(specs[0].group == kGroupHead);
  CHECK(specs[0].trainable);
}

TEST_CASE("fusion selects one token per attribute and is permutation equivariant") {
  const auto enc = stub_config();
  const FusionHead head(FusionConfig{}, enc, 4);
  Rng rng(52);
  const ad::Matrix text = random_normal(rng, 4, 32, 1.0);
  const ad::Matrix visual = random_normal(rng, 16, 32, 1.0);
  const auto z = head.fuse(ad::Var(text), ad::Var(visual)).value();
  CHECK(z.rows() == 4);
  CHECK(head.fuse(ad::Var(text), ad::Var(ad::Matrix(visual.topRows(5)))).value().rows() == 4);
  CHECK(head.fuse(ad::Var(text), ad::Var(visual)).value() == z);

  const std::vector<int> perm{2, 0, 3, 1};
  ad::Matrix permuted(4, 32);
  for (int i = 0; i < 4; ++i) permuted.row(i) = text.row(perm[i]);
  const auto zp = head.fuse(ad::Var(permuted), ad::Var(visual)).value();
  for (int i = 0; i < 4; ++i) CHECK((zp.row(i) - z.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);

  const auto z0 = head.fuse(ad::Var(text), ad::Var(ad::Matrix::Zero(16, 32))).value();
  CHECK((z0 - z).cwiseAbs().maxCoeff() > 1e-6);

  CHECK_THROWS_AS(head.fuse(ad::Var(ad::Matrix::Zero(4, 31)), ad::Var(visual)), ContractError);
  CHECK_THROWS_AS(head.fuse(ad::Var(ad::Matrix::Zero(3, 32)), ad::Var(visual)), ContractError);
}

TEST_CASE("fusion weights are frozen and head weights trainable") {
  const FusionHead head(FusionConfig{}, stub_config(), 5);
  for (const auto& p : head.params().all()) {
    if (p.spec.name.starts_with("mmformer.")) {
      CHECK_FALSE(p.var.requires_grad());
      CHECK(p.spec.group == kGroupFusion);
    } else {
      CHECK(p.var.requires_grad());
      CHECK(p.spec.group == kGroupHead);
    }
  }
}

TEST_CASE("classification head") {
  const auto enc = stub_config();
  FusionHead head(FusionConfig{}, enc, 3);
  Rng rng(53);
  const ad::Var z(random_normal(rng, 3, 32, 1.0));
  head.params().at("head.w").var.mutable_value().setZero();
  head.params().at("head.b").var.mutable_value().setZero();
  CHECK(head.classify(z).probs.value().isConstant(0.5));

  head.params().at("head.b").var.mutable_value().setConstant(10.0);
  CHECK(head.classify(z).probs.value()(0, 0) == doctest::Approx(logistic(10.0)).epsilon(1e-15));
  CHECK(head.classify(z).probs.value()(0, 0) > 0.9999);

  head.params().at("head.b").var.mutable_value() << 1.5, -1.5, 0.0;
  const auto p = head.classify(z).probs.value();
  CHECK(p(0, 0) + p(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p(0, 2) == 0.5);

  CHECK_THROWS_AS(head.classify(ad::Var(ad::Matrix::Zero(2, 32))), ShapeError);
}

TEST_CASE("head gradients match finite differences") {
  for (int layers : {1, 2}) {
    FusionConfig fc;
    fc.head_layers = layers;
    FusionHead head(fc, stub_config(), 3);
    Rng rng(54);
    const ad::Var z(random_normal(rng, 3, 32, 1.0));
    std::vector<ad::Var> params;
    for (auto& p : head.params().all()) {
      if (p.spec.name.starts_with("head.")) params.push_back(p.var);
    }
    auto loss = [&] {
      auto s = head.classify(z);
      return ad::sum(ad::mul(s.probs, s.logits));
    };
    CHECK(testing::max_gradient_error(loss, params) <= 1e-4);
  }
}

TEST_CASE("mlp fusion ablation") {
  FusionConfig fc;
  fc.kind = FusionKind::kMlp;
  const FusionHead head(fc, stub_config(), 3);
  Rng rng(55);
  const auto z = head.fuse(ad::Var(random_normal(rng, 3, 32, 1.0)), ad::Var(random_normal(rng, 16, 32, 1.0)));
  CHECK(z.rows() == 3);
  CHECK(head.params().at("head.mix").var.cols() == 3 + 16);
}

TEST_CASE("global-local similarity against direct cosine") {
  Rng rng(56);
  const int m = 4, n = 3, d = 8, k = 3;
  const ad::Matrix g = random_normal(rng, m, d, 1.0);
  std::vector<ad::Matrix> regions;
  std::vector<ad::Var> region_vars;
  for (int j = 0; j < k; ++j) {
    regions.push_back(random_normal(rng, m, d, 1.0));
    region_vars.emplace_back(regions.back());
  }
  const ad::Matrix t = random_normal(rng, n, d, 1.0);
  const double tau = 0.07;
  const auto s = global_local_similarity(ad::Var(g), region_vars, ad::Var(t), tau);
  const auto s_mean = global_local_similarity(ad::Var(g), region_vars, ad::Var(t), tau, RegionAggregate::kMean);
  for (int i = 0; i < m; ++i) {
    for (int a = 0; a < n; ++a) {
      const double sg = cosine(g.row(i), t.row(a));
      double best = -2, avg = 0;
      for (const auto& r : regions) {
        best = std::max(best, cosine(r.row(i), t.row(a)));
        avg += cosine(r.row(i), t.row(a)) / k;
      }
      CHECK(s.s_global.value()(i, a) == doctest::Approx(sg).epsilon(1e-12));
      CHECK(s.s_region.value()(i, a) == doctest::Approx(best).epsilon(1e-12));
      CHECK(s.p_gl.value()(i, a) == doctest::Approx(logistic((sg + best) / 2 / tau)).epsilon(1e-12));
      CHECK(s_mean.s_region.value()(i, a) == doctest::Approx(avg).epsilon(1e-12));
    }
  }

  // Positive rescaling of any feature leaves similarities unchanged.
  const auto scaled = global_local_similarity(ad::Var(ad::Matrix(g * 3.7)), region_vars,
                                              ad::Var(ad::Matrix(t * 0.2)), tau);
  CHECK((scaled.s_global.value() - s.s_global.value()).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((scaled.s_region.value() - s.s_region.value()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("similarity edge cases") {
  const ad::Matrix e1 = (ad::Matrix(1, 3) << 1, 0, 0).finished();
  const ad::Matrix e2 = (ad::Matrix(1, 3) << 0, 1, 0).finished();
  const ad::Matrix e3 = (ad::Matrix(1, 3) << 0, 0, 1).finished();
  const auto parallel = global_local_similarity(ad::Var(e1), {ad::Var(e2), ad::Var(ad::Matrix(2 * e1))},
                                                ad::Var(ad::Matrix(5 * e1)), 0.07);
  CHECK(parallel.p_gl.value()(0, 0) == doctest::Approx(logistic(1 / 0.07)).epsilon(1e-12));

  const auto orth = global_local_similarity(ad::Var(e1), {ad::Var(e2)}, ad::Var(e3), 0.07);
  CHECK(orth.p_gl.value()(0, 0) == 0.5);

  const auto single = global_local_similarity(ad::Var(e1), {ad::Var(e2)}, ad::Var(e2), 0.07);
  CHECK(single.s_region.value()(0, 0) == doctest::Approx(1.0));

  const auto zero = global_local_similarity(ad::Var(ad::Matrix::Zero(1, 3)), {ad::Var(e2)}, ad::Var(e2), 0.07);
  CHECK(std::isfinite(zero.p_gl.value()(0, 0)));
  CHECK_THROWS_AS(global_local_similarity(ad::Var(e1), {}, ad::Var(e1), 0.0), ContractError);
  ad::Matrix bad = e1;
  bad(0, 0) = NAN;
  CHECK_THROWS_AS(global_local_similarity(ad::Var(bad), {}, ad::Var(e1), 0.07), ContractError);
}
