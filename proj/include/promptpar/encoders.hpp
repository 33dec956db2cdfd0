#pragma once

#include "promptpar/autodiff.hpp"
#include "promptpar/image.hpp"
#include "promptpar/params.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace promptpar {

struct EncoderConfig {
  std::string backbone_id = "stub";
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int visual_dim = 32;
  int visual_layers = 2;
  int visual_heads = 4;
  int text_dim = 32;
  int text_layers = 2;
  int text_heads = 4;
  int vocab_size = 512;
  int context_length = 16;
  std::uint64_t seed = 7;

  int grid() const { return image_size / patch_size; }
  int grid_count() const { return grid() * grid(); }
  void validate() const;  // throws ContractError
};

// Published shapes of the two pretrained pairs this library targets.
EncoderConfig clip_vit_l14_config();
EncoderConfig clip_vit_b16_config();
EncoderConfig stub_config(std::uint64_t seed = 7);
EncoderConfig encoder_config_for(const std::string& backbone_id);

// Names of the tensors of one pre-norm Transformer block.
struct LayerNames {
  std::string ln1_g, ln1_b, in_w, in_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
  explicit LayerNames(const std::string& prefix);
};

void describe_layer(std::vector<ParamSpec>& out, const std::string& prefix,
                    const std::string& group, int width, bool trainable = false);
void init_layer(ParameterStore& store, const std::vector<ParamSpec>& specs, Rng& rng, int width);

// x + attn(ln1 x), then + mlp(ln2 ·). The mask, when given, gates attention.
ad::Var transformer_layer(const ParameterStore& store, const LayerNames& names, const ad::Var& x,
                          int heads, const ad::BoolMatrix* mask, ad::AttentionRecord* record);

using LayerHook = std::function<ad::Var(int layer, const ad::Var& sequence)>;

struct EncodeOptions {
  const ad::BoolMatrix* mask = nullptr;
  LayerHook before_layer;                            // splices prompts; may be empty
  std::vector<ad::AttentionRecord>* attention = nullptr;  // one record per layer
};

// Text prompt provider: the prompt block to splice in before `layer`, or an
// invalid Var when that layer receives no fresh prompts.
using TextPromptFn = std::function<ad::Var(int layer)>;

// The frozen pretrained pair (or its deterministic stub stand-in).
class Backbone {
 public:
  static std::vector<ParamSpec> describe(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }
  const ParameterStore& params() const { return store_; }
  ParameterStore& params() { return store_; }

  // F_0^V = X E + PE for the patch tokens; grid_count × visual_dim.
  ad::Matrix patchify(const Image& image) const;
  // Backbone CLS embedding plus its position embedding; 1 × visual_dim.
  ad::Matrix class_token() const;
  const ad::Matrix& class_embedding() const;

  // ln_pre → layers (with optional prompt hook and mask) → ln_post.
  ad::Var encode_visual(const ad::Var& sequence, const EncodeOptions& options = {}) const;
  // Reference [CLS, patches] forward with no prompt machinery.
  ad::Var encode_visual_plain(const Image& image) const;

  std::vector<int> tokenize(const std::string& sentence) const;
  // One feature row (EOT token after ln_final and projection) per sentence.
  ad::Var encode_text(const std::vector<std::string>& sentences, const TextPromptFn& prompts = {},
                      int prompt_count = 0) const;

 private:
  friend Backbone load_backbone_stub(const EncoderConfig& config);
  friend Backbone load_backbone_bundle(const EncoderConfig& config, const std::string& path);

  ad::Var encode_text_one(const std::vector<int>& tokens, const TextPromptFn& prompts,
                          int prompt_count) const;

  EncoderConfig config_;
  ParameterStore store_;
  std::vector<LayerNames> visual_layers_;
  std::vector<LayerNames> text_layers_;
};

// Stub weights are a pure function of config.seed.
Backbone load_backbone_stub(const EncoderConfig& config);
// Reads an archive whose tensors must match describe(config) exactly.
Backbone load_backbone_bundle(const EncoderConfig& config, const std::string& path);
// Writes every backbone tensor into an archive readable by load_backbone_bundle.
void save_backbone_bundle(const Backbone& backbone, const std::string& path);

// Per-channel normalization applied to 8-bit pixels before patch embedding.
double normalize_pixel(std::uint8_t value, int channel);

}  // namespace promptpar
