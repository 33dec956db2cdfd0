#include "doctest.h"

#include "promptpar/archive.hpp"
#include "promptpar/encoders.hpp"
#include "promptpar/errors.hpp"
#include "promptpar/prompts.hpp"

#include <filesystem>
#include <numeric>

using namespace promptpar;

namespace {

Image random_image(Rng& rng, int size, int channels = 3) {
  Image img(size, size, channels);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

std::int64_t total(const std::vector<ParamSpec>& specs) {
  std::int64_t n = 0;
  for (const auto& s : specs) n += s.rows * s.cols;
  return n;
}

// Pre-norm block: qkv + out projection, two norms, 4x MLP.
std::int64_t block_params(std::int64_t d) {
  return (3 * d * d + 3 * d) + (d * d + d) + 4 * d + (4 * d * d + 4 * d) + (4 * d * d + d);
}

}  // namespace

TEST_CASE("patch grid arithmetic") {
  CHECK(clip_vit_l14_config().grid_count() == (224 / 14) * (224 / 14));
  CHECK(clip_vit_l14_config().grid_count() == 256);
  CHECK(clip_vit_b16_config().grid_count() == 196);
  CHECK(stub_config().grid_count() == 16);
}

TEST_CASE("pretrained shapes are accepted and counted") {
  const auto l14 = clip_vit_l14_config();
  CHECK(l14.visual_dim == 1024);
  CHECK(l14.text_dim == 768);
  CHECK_NOTHROW(l14.validate());
  const std::int64_t visual = 3 * 14 * 14 * 1024 + 1024 + 257 * 1024 + 2 * 1024 + 24 * block_params(1024) +
                              2 * 1024 + 1024 * 768;
  const std::int64_t text = 49408 * 768 + 77 * 768 + 12 * block_params(768) + 2 * 768 + 768 * 768 + 1;
  CHECK(total(Backbone::describe(l14)) == visual + text);
  for (const auto& s : Backbone::describe(l14)) CHECK_FALSE(s.trainable);
}

TEST_CASE("stub backbone is a pure function of its seed") {
  const auto a = load_backbone_stub(stub_config(7));
  const auto b = load_backbone_stub(stub_config(7));
  const auto c = load_backbone_stub(stub_config(8));
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().all().size(); ++i) {
    const auto& pa = a.params().all()[i];
    CHECK(pa.var.value() == b.params().all()[i].var.value());
    CHECK_FALSE(pa.var.requires_grad());
    any_diff |= pa.var.value() != c.params().all()[i].var.value();
  }
  CHECK(any_diff);
}

TEST_CASE("patchify") {
  const auto bb = load_backbone_stub(stub_config());
  Rng rng(31);
  const Image img = random_image(rng, 32);
  const auto tokens = bb.patchify(img);
  CHECK(tokens.rows() == 16);
  CHECK(tokens.cols() == 32);

  // Patch (row 1, col 2) by hand: flatten channel-major, embed, add position 1 + index.
  const int P = 8, gy = 1, gx = 2;
  ad::RowVector flat(3 * P * P);
  int k = 0;
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < P; ++y) {
      for (int x = 0; x < P; ++x) flat(k++) = normalize_pixel(img.at(gy * P + y, gx * P + x, ch), ch);
    }
  }
  const auto& E = bb.params().at("visual.conv1").var.value();
  const auto& PE = bb.params().at("visual.positional_embedding").var.value();
  const ad::RowVector expected = flat * E + PE.row(1 + gy * 4 + gx);
  CHECK((tokens.row(gy * 4 + gx) - expected).cwiseAbs().maxCoeff() < 1e-12);

  try {
    bb.patchify(Image(30, 32, 3));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected 32x32x3") != std::string::npos);
    CHECK(msg.find("got 32x30x3") != std::string::npos);
  }
}

TEST_CASE("prompt-free sequence reproduces the plain forward pass") {
  const auto bb = load_backbone_stub(stub_config());
  PromptConfig pc;
  pc.visual_global = 0;
  pc.per_region = 0;
  pc.textual = 0;
  pc.region_tokens = false;
  const PromptBank bank(pc, bb.config(), bb.class_embedding());
  Rng rng(32);
  for (int trial = 0; trial < 3; ++trial) {
    const Image img = random_image(rng, 32);
    const auto seq = assemble_visual_sequence(bank, bb, bb.patchify(img));
    const auto out = bb.encode_visual(seq).value();
    const auto plain = bb.encode_visual_plain(img).value();
    CHECK((out - plain).cwiseAbs().maxCoeff() == 0.0);

    const ad::BoolMatrix all = ad::BoolMatrix::Constant(seq.rows(), seq.rows(), true);
    EncodeOptions opts;
    opts.mask = &all;
    CHECK((bb.encode_visual(seq, opts).value() - out).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("mask length must match the sequence") {
  const auto bb = load_backbone_stub(stub_config());
  const ad::Var seq(ad::Matrix::Ones(17, 32));
  const ad::BoolMatrix wrong = ad::BoolMatrix::Constant(10, 10, true);
  EncodeOptions opts;
  opts.mask = &wrong;
  CHECK_THROWS_AS(bb.encode_visual(seq, opts), ContractError);
  CHECK_THROWS_AS(bb.encode_visual(ad::Var(ad::Matrix::Ones(17, 31))), ContractError);
}

TEST_CASE("every input token reaches the output") {
  const auto bb = load_backbone_stub(stub_config());
  Rng rng(33);
  const ad::Matrix seq = random_normal(rng, 17, 32, 1.0);
  const ad::Matrix base = bb.encode_visual(ad::Var(seq)).value();
  for (Eigen::Index r = 0; r < seq.rows(); ++r) {
    ad::Matrix bumped = seq;
    bumped(r, 3) += 0.5;
    const ad::Matrix out = bb.encode_visual(ad::Var(bumped)).value();
    CHECK((out.row(0) - base.row(0)).cwiseAbs().maxCoeff() > 0.0);
  }

  const std::vector<std::string> words{"a", "pedestrian", "whose", "hair", "is", "long"};
  const auto reference = bb.encode_text({"a pedestrian whose hair is long"}).value();
  for (std::size_t w = 0; w < words.size(); ++w) {
    auto changed = words;
    changed[w] = "zzz";
    const std::string sentence = std::accumulate(std::next(changed.begin()), changed.end(), changed[0],
                                                 [](std::string a, const std::string& b) { return a + " " + b; });
    CHECK((bb.encode_text({sentence}).value() - reference).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("text encoding preserves arity and order") {
  const auto bb = load_backbone_stub(stub_config());
  const std::vector<std::string> s{"a pedestrian whose hair is long", "a pedestrian whose age is 31 to 45",
                                   "a pedestrian whose hair is long"};
  const auto f = bb.encode_text(s).value();
  CHECK(f.rows() == 3);
  CHECK(f.cols() == 32);
  CHECK(f.row(0) == f.row(2));
  CHECK(f.row(0) != f.row(1));
  const auto single = bb.encode_text({s[1]}).value();
  CHECK((single.row(0) - f.row(1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(bb.encode_text({}), ContractError);
}

TEST_CASE("zero-count text prompts reduce to the plain text path") {
  const auto bb = load_backbone_stub(stub_config());
  const std::vector<std::string> s{"a pedestrian whose bag is red"};
  const TextPromptFn none = [](int) { return ad::Var(); };
  CHECK(bb.encode_text(s, none, 0).value() == bb.encode_text(s).value());
}

TEST_CASE("backbone bundles") {
  const auto dir = std::filesystem::temp_directory_path() / "promptpar_bundle_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "stub.ppar").string();
  const auto bb = load_backbone_stub(stub_config(5));
  save_backbone_bundle(bb, path);

  const auto loaded = load_backbone_bundle(stub_config(5), path);
  for (std::size_t i = 0; i < bb.params().all().size(); ++i) {
    CHECK(bb.params().all()[i].var.value() == loaded.params().all()[i].var.value());
  }

  auto deeper = stub_config(5);
  deeper.visual_layers = 3;
  try {
    load_backbone_bundle(deeper, path);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("missing parameter visual.layers.2") != std::string::npos);
  }
  auto wider = stub_config(5);
  wider.text_dim = 48;
  CHECK_THROWS_AS(load_backbone_bundle(wider, path), LoadError);
  std::filesystem::remove_all(dir);
}
