#include "promptpar/encoders.hpp"

#include "promptpar/archive.hpp"
#include "promptpar/errors.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace promptpar {

namespace {

std::string shape_str(std::int64_t r, std::int64_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

void add_spec(std::vector<ParamSpec>& out, std::string name, const std::string& group,
              std::int64_t rows, std::int64_t cols, bool trainable = false) {
  out.push_back(ParamSpec{std::move(name), group, trainable, rows, cols});
}

// CLIP's image normalization constants.
constexpr double kPixelMean[3] = {0.48145466, 0.4578275, 0.40821073};
constexpr double kPixelStd[3] = {0.26862954, 0.26130258, 0.27577711};

ad::BoolMatrix text_mask(int text_len, int prompt_count) {
  const int n = text_len + prompt_count;
  ad::BoolMatrix allow = ad::BoolMatrix::Constant(n, n, true);
  for (int q = 0; q < text_len; ++q) {
    for (int k = q + 1; k < text_len; ++k) allow(q, k) = false;
  }
  return allow;
}

}  // namespace

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ContractError(std::string("encoder config: ") + what + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(visual_dim, "visual_dim");
  positive(visual_layers, "visual_layers");
  positive(visual_heads, "visual_heads");
  positive(text_dim, "text_dim");
  positive(text_layers, "text_layers");
  positive(text_heads, "text_heads");
  positive(vocab_size, "vocab_size");
  if (vocab_size < 3) throw ContractError("encoder config: vocab_size must be at least 3");
  if (context_length < 2) throw ContractError("encoder config: context_length must be at least 2");
  if (image_size % patch_size != 0) {
    throw ContractError("encoder config: image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (visual_dim % visual_heads != 0 || text_dim % text_heads != 0) {
    throw ContractError("encoder config: width not divisible by head count");
  }
}

EncoderConfig clip_vit_l14_config() {
  EncoderConfig c;
  c.backbone_id = "clip-vit-l14";
  c.image_size = 224;
  c.patch_size = 14;
  c.visual_dim = 1024;
  c.visual_layers = 24;
  c.visual_heads = 16;
  c.text_dim = 768;
  c.text_layers = 12;
  c.text_heads = 12;
  c.vocab_size = 49408;
  c.context_length = 77;
  return c;
}

EncoderConfig clip_vit_b16_config() {
  EncoderConfig c;
  c.backbone_id = "clip-vit-b16";
  c.image_size = 224;
  c.patch_size = 16;
  c.visual_dim = 768;
  c.visual_layers = 12;
  c.visual_heads = 12;
  c.text_dim = 512;
  c.text_layers = 12;
  c.text_heads = 8;
  c.vocab_size = 49408;
  c.context_length = 77;
  return c;
}

EncoderConfig stub_config(std::uint64_t seed) {
  EncoderConfig c;
  c.seed = seed;
  return c;
}

EncoderConfig encoder_config_for(const std::string& backbone_id) {
  if (backbone_id == "clip-vit-l14") return clip_vit_l14_config();
  if (backbone_id == "clip-vit-b16") return clip_vit_b16_config();
  if (backbone_id == "stub") return stub_config();
  throw ConfigError("unknown backbone id '" + backbone_id + "'");
}

LayerNames::LayerNames(const std::string& p)
    : ln1_g(p + ".ln_1.g"),
      ln1_b(p + ".ln_1.b"),
      in_w(p + ".attn.in_w"),
      in_b(p + ".attn.in_b"),
      out_w(p + ".attn.out_w"),
      out_b(p + ".attn.out_b"),
      ln2_g(p + ".ln_2.g"),
      ln2_b(p + ".ln_2.b"),
      fc_w(p + ".mlp.fc_w"),
      fc_b(p + ".mlp.fc_b"),
      proj_w(p + ".mlp.proj_w"),
      proj_b(p + ".mlp.proj_b") {}

void describe_layer(std::vector<ParamSpec>& out, const std::string& prefix,
                    const std::string& group, int d, bool trainable) {
  const LayerNames n(prefix);
  add_spec(out, n.ln1_g, group, 1, d, trainable);
  add_spec(out, n.ln1_b, group, 1, d, trainable);
  add_spec(out, n.in_w, group, d, 3 * d, trainable);
  add_spec(out, n.in_b, group, 1, 3 * d, trainable);
  add_spec(out, n.out_w, group, d, d, trainable);
  add_spec(out, n.out_b, group, 1, d, trainable);
  add_spec(out, n.ln2_g, group, 1, d, trainable);
  add_spec(out, n.ln2_b, group, 1, d, trainable);
  add_spec(out, n.fc_w, group, d, 4 * d, trainable);
  add_spec(out, n.fc_b, group, 1, 4 * d, trainable);
  add_spec(out, n.proj_w, group, 4 * d, d, trainable);
  add_spec(out, n.proj_b, group, 1, d, trainable);
}

void init_layer(ParameterStore& store, const std::vector<ParamSpec>& specs, Rng& rng, int d) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (const auto& spec : specs) {
    const auto& name = spec.name;
    auto ends_with = [&name](const char* suffix) {
      const std::string suf(suffix);
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    ad::Matrix init;
    if (ends_with(".g")) {
      init = ad::Matrix::Ones(spec.rows, spec.cols);
    } else if (ends_with(".b") || ends_with("_b")) {
      init = ad::Matrix::Zero(spec.rows, spec.cols);
    } else if (ends_with("proj_w")) {
      init = random_normal(rng, spec.rows, spec.cols, 0.5 / std::sqrt(4.0 * d));
    } else {
      init = random_normal(rng, spec.rows, spec.cols, s);
    }
    store.add(spec, std::move(init));
  }
}

ad::Var transformer_layer(const ParameterStore& store, const LayerNames& n, const ad::Var& x,
                          int heads, const ad::BoolMatrix* mask, ad::AttentionRecord* record) {
  const auto d = x.cols();
  auto p = [&store](const std::string& name) -> const ad::Var& { return store.at(name).var; };
  ad::Var h = ad::layer_norm(x, p(n.ln1_g), p(n.ln1_b));
  ad::Var qkv = ad::add_row(ad::matmul(h, p(n.in_w)), p(n.in_b));
  ad::Var q = ad::slice_cols(qkv, 0, d);
  ad::Var k = ad::slice_cols(qkv, d, d);
  ad::Var v = ad::slice_cols(qkv, 2 * d, d);
  ad::Var a = ad::attention(q, k, v, heads, mask, record);
  ad::Var y = ad::add(x, ad::add_row(ad::matmul(a, p(n.out_w)), p(n.out_b)));
  ad::Var h2 = ad::layer_norm(y, p(n.ln2_g), p(n.ln2_b));
  ad::Var m = ad::quick_gelu(ad::add_row(ad::matmul(h2, p(n.fc_w)), p(n.fc_b)));
  m = ad::add_row(ad::matmul(m, p(n.proj_w)), p(n.proj_b));
  return ad::add(y, m);
}

std::vector<ParamSpec> Backbone::describe(const EncoderConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  const int d = c.visual_dim;
  add_spec(out, "visual.conv1", kGroupVisual,
           static_cast<std::int64_t>(c.channels) * c.patch_size * c.patch_size, d);
  add_spec(out, "visual.class_embedding", kGroupVisual, 1, d);
  add_spec(out, "visual.positional_embedding", kGroupVisual, c.grid_count() + 1, d);
  add_spec(out, "visual.ln_pre.g", kGroupVisual, 1, d);
  add_spec(out, "visual.ln_pre.b", kGroupVisual, 1, d);
  for (int i = 0; i < c.visual_layers; ++i) {
    describe_layer(out, "visual.layers." + std::to_string(i), kGroupVisual, d);
  }
  add_spec(out, "visual.ln_post.g", kGroupVisual, 1, d);
  add_spec(out, "visual.ln_post.b", kGroupVisual, 1, d);
  add_spec(out, "visual.proj", kGroupVisual, d, c.text_dim);

  const int t = c.text_dim;
  add_spec(out, "text.token_embedding", kGroupText, c.vocab_size, t);
  add_spec(out, "text.positional_embedding", kGroupText, c.context_length, t);
  for (int i = 0; i < c.text_layers; ++i) {
    describe_layer(out, "text.layers." + std::to_string(i), kGroupText, t);
  }
  add_spec(out, "text.ln_final.g", kGroupText, 1, t);
  add_spec(out, "text.ln_final.b", kGroupText, 1, t);
  add_spec(out, "text.projection", kGroupText, t, t);
  add_spec(out, "text.logit_scale", kGroupText, 1, 1);
  return out;
}

namespace {

void index_layers(const EncoderConfig& c, std::vector<LayerNames>& visual,
                  std::vector<LayerNames>& text) {
  visual.clear();
  text.clear();
  for (int i = 0; i < c.visual_layers; ++i) visual.emplace_back("visual.layers." + std::to_string(i));
  for (int i = 0; i < c.text_layers; ++i) text.emplace_back("text.layers." + std::to_string(i));
}

}  // namespace

Backbone load_backbone_stub(const EncoderConfig& config) {
  const auto specs = Backbone::describe(config);
  Backbone b;
  b.config_ = config;
  Rng rng(mix_seed(config.seed, 0xBAC4B0E));
  std::size_t i = 0;
  while (i < specs.size()) {
    const auto& spec = specs[i];
    // Transformer blocks come as runs of 12 specs sharing a prefix.
    if (spec.name.find(".layers.") != std::string::npos) {
      const std::vector<ParamSpec> block(specs.begin() + static_cast<std::ptrdiff_t>(i),
                                         specs.begin() + static_cast<std::ptrdiff_t>(i + 12));
      init_layer(b.store_, block, rng, static_cast<int>(spec.cols));
      i += 12;
      continue;
    }
    ad::Matrix init;
    const auto& n = spec.name;
    if (n.ends_with(".g")) {
      init = ad::Matrix::Ones(spec.rows, spec.cols);
    } else if (n.ends_with(".b")) {
      init = ad::Matrix::Zero(spec.rows, spec.cols);
    } else if (n == "visual.conv1") {
      init = random_normal(rng, spec.rows, spec.cols, 1.0 / std::sqrt(static_cast<double>(spec.rows)));
    } else if (n == "visual.class_embedding") {
      init = random_normal(rng, spec.rows, spec.cols, 1.0 / std::sqrt(static_cast<double>(spec.cols)));
    } else if (n.ends_with("positional_embedding")) {
      init = random_normal(rng, spec.rows, spec.cols, 0.1);
    } else if (n == "text.token_embedding") {
      init = random_normal(rng, spec.rows, spec.cols, 0.5);
    } else if (n == "text.logit_scale") {
      init = ad::Matrix::Constant(1, 1, std::log(1.0 / 0.07));
    } else {
      init = random_normal(rng, spec.rows, spec.cols, 1.0 / std::sqrt(static_cast<double>(spec.rows)));
    }
    b.store_.add(spec, std::move(init));
    ++i;
  }
  index_layers(config, b.visual_layers_, b.text_layers_);
  return b;
}

Backbone load_backbone_bundle(const EncoderConfig& config, const std::string& path) {
  const auto specs = Backbone::describe(config);
  const Archive archive = Archive::load(path);
  std::vector<std::string> problems;
  std::map<std::string, bool> expected;
  for (const auto& spec : specs) {
    expected[spec.name] = true;
    const auto it = archive.tensors.find(spec.name);
    if (it == archive.tensors.end()) {
      problems.push_back("missing parameter " + spec.name);
    } else if (it->second.value.rows() != spec.rows || it->second.value.cols() != spec.cols) {
      problems.push_back("parameter " + spec.name + " has shape " +
                         shape_str(it->second.value.rows(), it->second.value.cols()) +
                         ", expected " + shape_str(spec.rows, spec.cols));
    }
  }
  for (const auto& [name, tensor] : archive.tensors) {
    if (!expected.count(name)) problems.push_back("unexpected parameter " + name);
  }
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "backbone bundle " << path << " does not match config '" << config.backbone_id << "':";
    for (const auto& p : problems) msg << "\n  " << p;
    throw LoadError(msg.str());
  }
  Backbone b;
  b.config_ = config;
  for (const auto& spec : specs) b.store_.add(spec, archive.tensors.at(spec.name).value);
  index_layers(config, b.visual_layers_, b.text_layers_);
  return b;
}

void save_backbone_bundle(const Backbone& backbone, const std::string& path) {
  Archive a;
  for (const auto& p : backbone.params().all()) {
    a.tensors[p.spec.name] = Archive::Tensor{false, p.var.value()};
  }
  a.texts["backbone_id"] = backbone.config().backbone_id;
  a.save(path);
}

double normalize_pixel(std::uint8_t value, int channel) {
  const int c = channel % 3;
  return (static_cast<double>(value) / 255.0 - kPixelMean[c]) / kPixelStd[c];
}

ad::Matrix Backbone::patchify(const Image& image) const {
  const auto& c = config_;
  if (image.height != c.image_size || image.width != c.image_size || image.channels != c.channels) {
    throw ShapeError("patchify: expected " + std::to_string(c.image_size) + "x" +
                     std::to_string(c.image_size) + "x" + std::to_string(c.channels) + ", got " +
                     std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                     std::to_string(image.channels));
  }
  const int g = c.grid();
  const int P = c.patch_size;
  ad::Matrix patches(c.grid_count(), static_cast<Eigen::Index>(c.channels) * P * P);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const int row = gy * g + gx;
      int col = 0;
      for (int ch = 0; ch < c.channels; ++ch) {
        for (int py = 0; py < P; ++py) {
          for (int px = 0; px < P; ++px) {
            patches(row, col++) = normalize_pixel(image.at(gy * P + py, gx * P + px, ch), ch);
          }
        }
      }
    }
  }
  const auto& E = store_.at("visual.conv1").var.value();
  const auto& PE = store_.at("visual.positional_embedding").var.value();
  return patches * E + PE.bottomRows(c.grid_count());
}

const ad::Matrix& Backbone::class_embedding() const {
  return store_.at("visual.class_embedding").var.value();
}

ad::Matrix Backbone::class_token() const {
  return class_embedding() + store_.at("visual.positional_embedding").var.value().topRows(1);
}

ad::Var Backbone::encode_visual(const ad::Var& sequence, const EncodeOptions& options) const {
  if (sequence.cols() != config_.visual_dim) {
    throw ContractError("encode_visual: token width " + std::to_string(sequence.cols()) +
                        " but visual_dim is " + std::to_string(config_.visual_dim));
  }
  auto p = [this](const char* name) -> const ad::Var& { return store_.at(name).var; };
  ad::Var x = ad::layer_norm(sequence, p("visual.ln_pre.g"), p("visual.ln_pre.b"));
  if (options.attention) options.attention->assign(visual_layers_.size(), {});
  for (std::size_t i = 0; i < visual_layers_.size(); ++i) {
    if (options.before_layer) x = options.before_layer(static_cast<int>(i), x);
    if (options.mask && (options.mask->rows() != x.rows() || options.mask->cols() != x.rows())) {
      throw ContractError("encode_visual: mask is " + std::to_string(options.mask->rows()) + "x" +
                          std::to_string(options.mask->cols()) + " but the sequence has " +
                          std::to_string(x.rows()) + " tokens");
    }
    x = transformer_layer(store_, visual_layers_[i], x, config_.visual_heads, options.mask,
                          options.attention ? &(*options.attention)[i] : nullptr);
  }
  return ad::layer_norm(x, p("visual.ln_post.g"), p("visual.ln_post.b"));
}

ad::Var Backbone::encode_visual_plain(const Image& image) const {
  ad::Matrix seq(config_.grid_count() + 1, config_.visual_dim);
  seq.topRows(1) = class_token();
  seq.bottomRows(config_.grid_count()) = patchify(image);
  auto p = [this](const char* name) -> const ad::Var& { return store_.at(name).var; };
  ad::Var x = ad::layer_norm(ad::constant(seq), p("visual.ln_pre.g"), p("visual.ln_pre.b"));
  for (const auto& layer : visual_layers_) {
    x = transformer_layer(store_, layer, x, config_.visual_heads, nullptr, nullptr);
  }
  return ad::layer_norm(x, p("visual.ln_post.g"), p("visual.ln_post.b"));
}

std::vector<int> Backbone::tokenize(const std::string& sentence) const {
  // Word-level hashing tokenizer: ids [0, vocab-2) for words, then SOT, EOT.
  const int sot = config_.vocab_size - 2;
  const int eot = config_.vocab_size - 1;
  std::vector<int> ids{sot};
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : word) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    ids.push_back(static_cast<int>(h % static_cast<std::uint64_t>(config_.vocab_size - 2)));
    word.clear();
  };
  for (char ch : sentence) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else {
      flush();
    }
  }
  flush();
  if (static_cast<int>(ids.size()) > config_.context_length - 1) {
    ids.resize(static_cast<std::size_t>(config_.context_length - 1));
  }
  ids.push_back(eot);
  return ids;
}

ad::Var Backbone::encode_text_one(const std::vector<int>& tokens, const TextPromptFn& prompts,
                                  int prompt_count) const {
  const int L = static_cast<int>(tokens.size());
  const int t = config_.text_dim;
  const auto& emb = store_.at("text.token_embedding").var.value();
  const auto& pos = store_.at("text.positional_embedding").var.value();
  ad::Matrix x0(L + prompt_count, t);
  for (int i = 0; i < L; ++i) x0.row(i) = emb.row(tokens[i]) + pos.row(i);
  if (prompt_count > 0) x0.bottomRows(prompt_count).setZero();
  ad::Var x = ad::constant(std::move(x0));
  const ad::BoolMatrix mask = text_mask(L, prompt_count);

  for (std::size_t i = 0; i < text_layers_.size(); ++i) {
    if (prompt_count > 0 && prompts) {
      ad::Var fresh = prompts(static_cast<int>(i));
      if (fresh.valid()) {
        if (fresh.rows() != prompt_count || fresh.cols() != t) {
          throw ContractError("encode_text: prompt block must be " + std::to_string(prompt_count) +
                              "x" + std::to_string(t));
        }
        const ad::Var parts[] = {ad::slice_rows(x, 0, L), fresh};
        x = ad::vstack(parts);
      } else if (i == 0) {
        throw ContractError("encode_text: prompt slots declared but no prompts for layer 0");
      }
    }
    x = transformer_layer(store_, text_layers_[i], x, config_.text_heads, &mask, nullptr);
  }
  auto p = [this](const char* name) -> const ad::Var& { return store_.at(name).var; };
  ad::Var eot = ad::slice_rows(x, L - 1, 1);
  eot = ad::layer_norm(eot, p("text.ln_final.g"), p("text.ln_final.b"));
  return ad::matmul(eot, p("text.projection"));
}

ad::Var Backbone::encode_text(const std::vector<std::string>& sentences, const TextPromptFn& prompts,
                              int prompt_count) const {
  if (sentences.empty()) throw ContractError("encode_text: empty sentence list");
  std::vector<ad::Var> rows;
  rows.reserve(sentences.size());
  for (const auto& s : sentences) rows.push_back(encode_text_one(tokenize(s), prompts, prompt_count));
  return ad::vstack(rows);
}

}  // namespace promptpar
