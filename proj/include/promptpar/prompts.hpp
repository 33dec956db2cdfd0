#pragma once

#include "promptpar/autodiff.hpp"
#include "promptpar/encoders.hpp"
#include "promptpar/params.hpp"

#include <map>
#include <string>
#include <vector>

namespace promptpar {

enum class PromptMode { kShallow, kDeep };
enum class PromptInit { kRandom, kZero };

struct PromptConfig {
  int visual_global = 50;
  int per_region = 12;
  int textual = 3;
  int depth = 1;
  PromptMode mode = PromptMode::kDeep;
  PromptInit init = PromptInit::kRandom;
  int regions = 4;            // K
  bool region_tokens = true;  // region CLS + local prompts present at all
  bool global_sees_local = true;
  std::uint64_t seed = 11;
};

// K contiguous bands of patch-grid rows, top to bottom.
struct RegionLayout {
  int regions = 0;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<std::pair<int, int>> row_ranges;  // inclusive [first, last]
  std::vector<int> patch_to_region;             // size grid_rows * grid_cols

  int region_of_row(int row) const;
  std::vector<int> patches_in(int region) const;
};

// Earlier regions take the extra row when grid_rows is not a multiple of K.
RegionLayout build_region_layout(int grid_rows, int regions, int grid_cols = -1);

// Token positions of [CLS^G, P^G, CLS^L1, P^L1, ..., CLS^LK, P^LK, patches].
struct SequenceLayout {
  int global_prompts = 0;
  int regions = 0;  // 0 when region tokens are disabled
  int per_region = 0;
  int patches = 0;

  int global_cls() const { return 0; }
  int global_start() const { return 1; }
  int region_cls(int j) const { return 1 + global_prompts + j * (1 + per_region); }
  int local_start(int j) const { return region_cls(j) + 1; }
  int patch_start() const { return 1 + global_prompts + regions * (1 + per_region); }
  int total() const { return patch_start() + patches; }
};

class PromptBank {
 public:
  PromptBank(const PromptConfig& config, const EncoderConfig& encoder,
             const ad::Matrix& backbone_cls_embedding);

  static std::vector<ParamSpec> describe(const PromptConfig& config, const EncoderConfig& encoder);

  const PromptConfig& config() const { return config_; }
  int visual_depth() const { return visual_depth_; }
  int text_depth() const { return text_depth_; }
  int visual_dim() const { return visual_dim_; }
  int text_dim() const { return text_dim_; }
  int regions() const { return config_.region_tokens ? config_.regions : 0; }
  SequenceLayout layout(int patches) const;

  // Empty Var when the bank holds no such block.
  ad::Var global_prompts(int layer) const;
  ad::Var local_prompts(int layer, int region) const;
  ad::Var region_cls(int region) const;
  ad::Var text_prompts(int layer) const;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

 private:
  PromptConfig config_;
  int visual_depth_ = 1;
  int text_depth_ = 1;
  int visual_dim_ = 0;
  int text_dim_ = 0;
  ParameterStore store_;
};

struct AttentionMask {
  ad::BoolMatrix allow;  // allow(q, k): query q may attend to key k
};

AttentionMask build_attention_mask(const RegionLayout& layout, const PromptBank& bank);

// Builds the layer-0 input: CLS^G, zeroed global slots, region CLS tokens (plus
// the CLS position embedding), zeroed local slots, and embedded patches.
ad::Var assemble_visual_sequence(const PromptBank& bank, const Backbone& backbone,
                                 const ad::Matrix& patch_tokens);

// Overwrites every prompt slot with the prompts owned by `layer`. Layers at or
// beyond the bank's depth return the sequence untouched.
ad::Var inject(const PromptBank& bank, int layer, const ad::Var& sequence);

struct GroupCount {
  std::int64_t trainable = 0;
  std::int64_t total = 0;
};

struct AuditReport {
  std::int64_t trainable = 0;
  std::int64_t total = 0;
  double ratio = 0.0;
  std::map<std::string, GroupCount> by_group;
};

// Counts parameters by group; throws AuditError naming the first trainable
// parameter found outside {prompts, head}.
AuditReport trainable_parameter_audit(const std::vector<ParamSpec>& specs);

}  // namespace promptpar
