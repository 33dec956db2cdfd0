#pragma once

#include "promptpar/attributes.hpp"
#include "promptpar/encoders.hpp"
#include "promptpar/fusion.hpp"
#include "promptpar/image.hpp"
#include "promptpar/prompts.hpp"

#include <optional>
#include <string>
#include <vector>

namespace promptpar {

struct ModelConfig {
  EncoderConfig encoder;
  PromptConfig prompt;
  FusionConfig fusion;
  std::string sentence_template{kDefaultTemplate};
};

struct VisualFeatures {
  ad::Var global_cls;               // 1×d
  std::vector<ad::Var> region_cls;  // one 1×d row per region
  ad::Var patches;                  // grid_count×d
};

struct BatchOutput {
  ad::Var logits;  // M×N
  ad::Var probs;   // M×N
  std::optional<SimilarityMatrices> similarity;
};

// Frozen backbone + prompt bank + region mask + fusion head, wired together.
class PromptParModel {
 public:
  PromptParModel(ModelConfig config, Backbone backbone, AttributeSet attributes);

  // Shapes of every parameter, without allocating any of them.
  static std::vector<ParamSpec> describe(const ModelConfig& config, int num_attributes);

  const ModelConfig& config() const { return config_; }
  const AttributeSet& attributes() const { return attributes_; }
  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }
  const PromptBank& prompts() const { return prompts_; }
  PromptBank& prompts() { return prompts_; }
  const FusionHead& head() const { return head_; }
  FusionHead& head() { return head_; }
  const RegionLayout& region_layout() const { return layout_; }
  const AttentionMask& mask() const { return mask_; }
  SequenceLayout sequence_layout() const;

  // φ(F^T): one projected feature row per attribute.
  ad::Var text_features() const;
  // `image` must already be image_size × image_size.
  VisualFeatures encode_image(const Image& image,
                              std::vector<ad::AttentionRecord>* attention = nullptr) const;
  PredictionScores score(const VisualFeatures& visual, const ad::Var& text,
                         ad::AttentionRecord* fusion_attention = nullptr) const;
  BatchOutput forward(const std::vector<Image>& images, bool with_similarity) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  AuditReport audit() const;

 private:
  ModelConfig config_;
  Backbone backbone_;
  AttributeSet attributes_;
  PromptBank prompts_;
  FusionHead head_;
  RegionLayout layout_;
  AttentionMask mask_;
};

}  // namespace promptpar
