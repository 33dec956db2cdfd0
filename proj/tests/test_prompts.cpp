#include "doctest.h"

#include "promptpar/errors.hpp"
#include "promptpar/fusion.hpp"
#include "promptpar/model.hpp"
#include "promptpar/prompts.hpp"

using namespace promptpar;

namespace {

PromptConfig small_prompts(int regions = 4) {
  PromptConfig c;
  c.visual_global = 3;
  c.per_region = 2;
  c.textual = 2;
  c.depth = 2;
  c.regions = regions;
  return c;
}

enum class Role { kGlobalCls, kGlobalPrompt, kRegionCls, kLocalPrompt, kPatch };

struct Token {
  Role role;
  int region;  // owning region for region tokens, covering region for patches
};

// Walks the sequence left to right, labelling each position.
std::vector<Token> label_sequence(int globals, int regions, int per_region, int grid, int rows_per_band_hint,
                                  const std::vector<int>& patch_region) {
  (void)rows_per_band_hint;
  std::vector<Token> t{{Role::kGlobalCls, -1}};
  for (int i = 0; i < globals; ++i) t.push_back({Role::kGlobalPrompt, -1});
  for (int j = 0; j < regions; ++j) {
    t.push_back({Role::kRegionCls, j});
    for (int i = 0; i < per_region; ++i) t.push_back({Role::kLocalPrompt, j});
  }
  for (int p = 0; p < grid; ++p) t.push_back({Role::kPatch, patch_region[p]});
  return t;
}

bool expected_allow(const Token& q, const Token& k, bool global_sees_local) {
  const bool q_local = q.role == Role::kRegionCls || q.role == Role::kLocalPrompt;
  const bool k_local = k.role == Role::kRegionCls || k.role == Role::kLocalPrompt;
  if (q_local) return k.region == q.region;
  if (!global_sees_local && (q.role == Role::kGlobalCls || q.role == Role::kGlobalPrompt) && k_local) return false;
  return true;
}

}  // namespace

TEST_CASE("region layout splits rows top to bottom") {
  const auto four = build_region_layout(16, 4);
  CHECK(four.row_ranges == std::vector<std::pair<int, int>>{{0, 3}, {4, 7}, {8, 11}, {12, 15}});
  const auto one = build_region_layout(16, 1);
  CHECK(one.row_ranges == std::vector<std::pair<int, int>>{{0, 15}});
  const auto uneven = build_region_layout(10, 4);
  CHECK(uneven.row_ranges == std::vector<std::pair<int, int>>{{0, 2}, {3, 5}, {6, 7}, {8, 9}});
  CHECK_THROWS_AS(build_region_layout(3, 4), LayoutError);
}

TEST_CASE("region layouts are exhaustive, ordered and near-even") {
  for (int rows = 1; rows <= 20; ++rows) {
    for (int k = 1; k <= rows; ++k) {
      const auto layout = build_region_layout(rows, k, rows);
      int next = 0;
      std::vector<int> population(static_cast<std::size_t>(k), 0);
      for (int j = 0; j < k; ++j) {
        const auto [first, last] = layout.row_ranges[static_cast<std::size_t>(j)];
        CHECK(first == next);
        const int size = last - first + 1;
        // Earlier bands take the remainder rows.
        CHECK(size == rows / k + (j < rows % k ? 1 : 0));
        next = last + 1;
      }
      CHECK(next == rows);
      for (int p = 0; p < rows * rows; ++p) {
        const int r = layout.patch_to_region[static_cast<std::size_t>(p)];
        REQUIRE(r >= 0);
        REQUIRE(r < k);
        ++population[static_cast<std::size_t>(r)];
        CHECK(layout.region_of_row(p / rows) == r);
      }
      int sum = 0;
      for (int n : population) sum += n;
      CHECK(sum == rows * rows);
    }
  }
}

TEST_CASE("attention mask agrees with a role-based enumeration") {
  const auto enc = stub_config();
  for (bool global_sees_local : {true, false}) {
    for (int k : {2, 3, 4}) {
      auto pc = small_prompts(k);
      pc.global_sees_local = global_sees_local;
      const auto bb = load_backbone_stub(enc);
      const PromptBank bank(pc, enc, bb.class_embedding());
      const auto layout = build_region_layout(enc.grid(), k);
      const auto mask = build_attention_mask(layout, bank);
      const auto tokens = label_sequence(pc.visual_global, k, pc.per_region, enc.grid_count(), 0,
                                         layout.patch_to_region);
      REQUIRE(mask.allow.rows() == static_cast<Eigen::Index>(tokens.size()));
      for (std::size_t q = 0; q < tokens.size(); ++q) {
        int row_sum = 0;
        for (std::size_t kk = 0; kk < tokens.size(); ++kk) {
          CHECK(mask.allow(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(kk)) ==
                expected_allow(tokens[q], tokens[kk], global_sees_local));
          row_sum += mask.allow(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(kk));
        }
        CHECK(row_sum >= 1);
        if (tokens[q].role == Role::kLocalPrompt) {
          const int j = tokens[q].region;
          int patches = 0;
          for (int r : layout.patch_to_region) patches += r == j;
          CHECK(row_sum == pc.per_region + 1 + patches);
        }
      }
    }
  }
}

TEST_CASE("single region or disabled region tokens give a permissive mask") {
  const auto enc = stub_config();
  const auto bb = load_backbone_stub(enc);
  const PromptBank one(small_prompts(1), enc, bb.class_embedding());
  CHECK(build_attention_mask(build_region_layout(4, 1), one).allow.all());
  auto off = small_prompts();
  off.region_tokens = false;
  const PromptBank none(off, enc, bb.class_embedding());
  CHECK(build_attention_mask(build_region_layout(4, 2), none).allow.all());
  const PromptBank four(small_prompts(4), enc, bb.class_embedding());
  CHECK_THROWS_AS(build_attention_mask(build_region_layout(4, 2), four), ContractError);
}

TEST_CASE("injection overwrites prompt slots and keeps the layout") {
  const auto enc = stub_config();
  const auto bb = load_backbone_stub(enc);
  const auto pc = small_prompts();
  const PromptBank bank(pc, enc, bb.class_embedding());
  const auto patches = bb.patchify(Image(32, 32, 3, 90));
  const auto seq0 = assemble_visual_sequence(bank, bb, patches);
  const auto layout = bank.layout(enc.grid_count());
  CHECK(seq0.rows() == 1 + pc.visual_global + pc.regions * (1 + pc.per_region) + enc.grid_count());
  CHECK(layout.total() == seq0.rows());

  Rng rng(41);
  const ad::Var noisy(random_normal(rng, seq0.rows(), seq0.cols(), 1.0));
  const auto once = inject(bank, 1, noisy).value();
  const auto twice = inject(bank, 1, ad::Var(once)).value();
  CHECK(once == twice);
  CHECK(once.block(layout.global_start(), 0, pc.visual_global, 32) == bank.global_prompts(1).value());
  for (int j = 0; j < pc.regions; ++j) {
    CHECK(once.block(layout.local_start(j), 0, pc.per_region, 32) == bank.local_prompts(1, j).value());
    CHECK(once.row(layout.region_cls(j)) == noisy.value().row(layout.region_cls(j)));
  }
  CHECK(once.bottomRows(enc.grid_count()) == noisy.value().bottomRows(enc.grid_count()));
  // Past the bank's depth nothing changes.
  CHECK(inject(bank, 2, noisy).value() == noisy.value());

  auto empty = pc;
  empty.visual_global = 0;
  empty.per_region = 0;
  const PromptBank bare(empty, enc, bb.class_embedding());
  const ad::Var short_seq(random_normal(rng, bare.layout(16).total(), 32, 1.0));
  CHECK(inject(bare, 0, short_seq).value() == short_seq.value());
  CHECK_THROWS_AS(inject(bank, 0, ad::Var(ad::Matrix::Zero(seq0.rows(), 31))), ContractError);
}

TEST_CASE("shallow and depth-one deep prompts are interchangeable") {
  const auto enc = stub_config();
  const auto bb = load_backbone_stub(enc);
  auto deep = small_prompts();
  deep.depth = 1;
  auto shallow = deep;
  shallow.mode = PromptMode::kShallow;
  const PromptBank a(deep, enc, bb.class_embedding());
  const PromptBank b(shallow, enc, bb.class_embedding());
  const auto mask = build_attention_mask(build_region_layout(4, 4), a);
  Rng rng(42);
  Image img(32, 32, 3);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  auto run = [&](const PromptBank& bank) {
    EncodeOptions opts;
    opts.mask = &mask.allow;
    opts.before_layer = [&bank](int l, const ad::Var& x) { return inject(bank, l, x); };
    return bb.encode_visual(assemble_visual_sequence(bank, bb, bb.patchify(img)), opts).value();
  };
  CHECK((run(a) - run(b)).cwiseAbs().maxCoeff() <= 1e-12);
  shallow.depth = 2;
  CHECK_THROWS_AS(PromptBank(shallow, enc, bb.class_embedding()), ContractError);
}

TEST_CASE("prompt banks are reproducible and trainable") {
  const auto enc = stub_config();
  const auto bb = load_backbone_stub(enc);
  const PromptBank a(small_prompts(), enc, bb.class_embedding());
  const PromptBank b(small_prompts(), enc, bb.class_embedding());
  for (std::size_t i = 0; i < a.params().all().size(); ++i) {
    const auto& p = a.params().all()[i];
    CHECK(p.var.value() == b.params().all()[i].var.value());
    CHECK(p.var.requires_grad());
    CHECK(p.spec.group == kGroupPrompts);
    if (p.spec.name.starts_with("prompts.region_cls.")) {
      CHECK(p.var.value() == bb.class_embedding());
    } else {
      const double bound = 0.5 / std::sqrt(static_cast<double>(p.var.cols()));
      CHECK(p.var.value().cwiseAbs().maxCoeff() <= bound);
    }
  }
  auto zero = small_prompts();
  zero.init = PromptInit::kZero;
  const PromptBank z(zero, enc, bb.class_embedding());
  CHECK(z.global_prompts(0).value().isZero(0));
  CHECK(z.text_prompts(1).value().isZero(0));
}

TEST_CASE("audit counts groups and rejects unfrozen backbone parameters") {
  ModelConfig mc;
  mc.prompt.visual_global = 0;
  mc.prompt.per_region = 0;
  mc.prompt.textual = 0;
  mc.prompt.region_tokens = false;
  const int n = 6;
  const auto report = trainable_parameter_audit(PromptParModel::describe(mc, n));
  const std::int64_t t = mc.encoder.text_dim, d = mc.encoder.visual_dim;
  CHECK(report.trainable == t * d + d + n * d + n);
  CHECK(report.by_group.count(kGroupPrompts) == 0);
  CHECK(report.by_group.at(kGroupHead).trainable == report.trainable);
  CHECK(report.ratio == doctest::Approx(static_cast<double>(report.trainable) / report.total));

  auto specs = PromptParModel::describe(mc, n);
  for (auto& s : specs) {
    if (s.name == "mmformer.layers.0.attn.in_w") s.trainable = true;
  }
  try {
    trainable_parameter_audit(specs);
    FAIL("expected an audit failure");
  } catch (const AuditError& e) {
    CHECK(std::string(e.what()).find("mmformer.layers.0.attn.in_w") != std::string::npos);
  }
}
