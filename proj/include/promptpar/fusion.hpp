#pragma once

#include "promptpar/autodiff.hpp"
#include "promptpar/encoders.hpp"
#include "promptpar/params.hpp"

#include <vector>

namespace promptpar {

enum class FusionKind { kMMFormer, kMlp };
enum class RegionAggregate { kMax, kMean };
enum class PhiInit { kRandom, kIdentity };

struct FusionConfig {
  FusionKind kind = FusionKind::kMMFormer;
  int layers = 1;
  int heads = 0;  // 0: use the backbone's visual head count
  double temperature = 0.07;
  RegionAggregate aggregate = RegionAggregate::kMax;
  int head_layers = 1;
  PhiInit phi_init = PhiInit::kRandom;
  std::uint64_t seed = 13;
};

struct PredictionScores {
  ad::Var logits;  // 1×N
  ad::Var probs;   // σ(logits)
  ad::Var z;       // N×d fused attribute tokens
};

struct SimilarityMatrices {
  ad::Var s_global;  // M×N cosine similarities
  ad::Var s_region;  // M×N aggregated over region CLS tokens
  ad::Var p_gl;      // σ(((s_global + s_region)/2) / τ)
};

// φ, the frozen fusion Transformer, and the classification head.
class FusionHead {
 public:
  FusionHead(const FusionConfig& config, const EncoderConfig& encoder, int num_attributes);

  static std::vector<ParamSpec> describe(const FusionConfig& config, const EncoderConfig& encoder,
                                         int num_attributes);

  const FusionConfig& config() const { return config_; }
  int num_attributes() const { return num_attributes_; }
  int width() const { return width_; }

  ad::Var project_text(const ad::Var& text_features) const;
  // Z: post-norm fusion outputs at the N text positions. `record` receives the
  // last fusion layer's attention.
  ad::Var fuse(const ad::Var& projected_text, const ad::Var& visual_tokens,
               ad::AttentionRecord* record = nullptr) const;
  PredictionScores classify(const ad::Var& z) const;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

 private:
  FusionConfig config_;
  int num_attributes_ = 0;
  int width_ = 0;
  int text_dim_ = 0;
  int grid_count_ = 0;
  int heads_ = 1;
  std::vector<LayerNames> layers_;
  ParameterStore store_;
};

// global_cls: M×d, region_cls: K entries of M×d, text: N×d (already projected).
SimilarityMatrices global_local_similarity(const ad::Var& global_cls,
                                           const std::vector<ad::Var>& region_cls,
                                           const ad::Var& text, double temperature,
                                           RegionAggregate aggregate = RegionAggregate::kMax);

}  // namespace promptpar
