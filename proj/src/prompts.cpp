#include "promptpar/prompts.hpp"

#include "promptpar/errors.hpp"

#include <cmath>

namespace promptpar {

namespace {

std::string global_name(int layer) { return "prompts.visual.global." + std::to_string(layer); }
std::string local_name(int layer) { return "prompts.visual.local." + std::to_string(layer); }
std::string region_cls_name(int j) { return "prompts.region_cls." + std::to_string(j); }
std::string text_name(int layer) { return "prompts.text." + std::to_string(layer); }

struct Depths {
  int visual;
  int text;
};

Depths resolve_depths(const PromptConfig& c, const EncoderConfig& e) {
  if (c.mode == PromptMode::kShallow) {
    if (c.depth != 1) {
      throw ContractError("shallow prompt mode requires depth 1, got " + std::to_string(c.depth));
    }
    return {1, 1};
  }
  if (c.depth < 1 || c.depth > e.visual_layers) {
    throw ContractError("prompt depth " + std::to_string(c.depth) + " outside [1, " +
                        std::to_string(e.visual_layers) + "]");
  }
  return {c.depth, std::min(c.depth, e.text_layers)};
}

void check_counts(const PromptConfig& c) {
  if (c.visual_global < 0 || c.per_region < 0 || c.textual < 0) {
    throw ContractError("prompt counts must be non-negative");
  }
  if (c.region_tokens && c.regions < 1) throw ContractError("regions.K must be at least 1");
}

}  // namespace

int RegionLayout::region_of_row(int row) const {
  for (int j = 0; j < regions; ++j) {
    if (row >= row_ranges[j].first && row <= row_ranges[j].second) return j;
  }
  throw LayoutError("row " + std::to_string(row) + " outside the patch grid");
}

std::vector<int> RegionLayout::patches_in(int region) const {
  std::vector<int> out;
  for (std::size_t p = 0; p < patch_to_region.size(); ++p) {
    if (patch_to_region[p] == region) out.push_back(static_cast<int>(p));
  }
  return out;
}

RegionLayout build_region_layout(int grid_rows, int regions, int grid_cols) {
  if (grid_cols < 0) grid_cols = grid_rows;
  if (grid_rows < 1 || grid_cols < 1) throw LayoutError("patch grid must be non-empty");
  if (regions < 1) throw LayoutError("region count must be at least 1");
  if (regions > grid_rows) {
    throw LayoutError("cannot split " + std::to_string(grid_rows) + " grid rows into " +
                      std::to_string(regions) + " regions");
  }
  RegionLayout layout;
  layout.regions = regions;
  layout.grid_rows = grid_rows;
  layout.grid_cols = grid_cols;
  const int base = grid_rows / regions;
  const int extra = grid_rows % regions;
  int row = 0;
  for (int j = 0; j < regions; ++j) {
    const int size = base + (j < extra ? 1 : 0);
    layout.row_ranges.emplace_back(row, row + size - 1);
    row += size;
  }
  layout.patch_to_region.resize(static_cast<std::size_t>(grid_rows) * grid_cols);
  for (int r = 0; r < grid_rows; ++r) {
    const int region = layout.region_of_row(r);
    for (int c = 0; c < grid_cols; ++c) layout.patch_to_region[r * grid_cols + c] = region;
  }
  return layout;
}

std::vector<ParamSpec> PromptBank::describe(const PromptConfig& c, const EncoderConfig& e) {
  check_counts(c);
  const auto [dv, dt] = resolve_depths(c, e);
  std::vector<ParamSpec> out;
  const int d = e.visual_dim;
  for (int i = 0; i < dv && c.visual_global > 0; ++i) {
    out.push_back({global_name(i), kGroupPrompts, true, c.visual_global, d});
  }
  if (c.region_tokens) {
    for (int i = 0; i < dv && c.per_region > 0; ++i) {
      out.push_back({local_name(i), kGroupPrompts, true,
                     static_cast<std::int64_t>(c.regions) * c.per_region, d});
    }
    for (int j = 0; j < c.regions; ++j) out.push_back({region_cls_name(j), kGroupPrompts, true, 1, d});
  }
  for (int i = 0; i < dt && c.textual > 0; ++i) {
    out.push_back({text_name(i), kGroupPrompts, true, c.textual, e.text_dim});
  }
  return out;
}

PromptBank::PromptBank(const PromptConfig& config, const EncoderConfig& encoder,
                       const ad::Matrix& cls_embedding)
    : config_(config), visual_dim_(encoder.visual_dim), text_dim_(encoder.text_dim) {
  const auto specs = describe(config, encoder);
  const auto depths = resolve_depths(config, encoder);
  visual_depth_ = depths.visual;
  text_depth_ = depths.text;
  if (cls_embedding.rows() != 1 || cls_embedding.cols() != encoder.visual_dim) {
    throw ContractError("prompt bank: CLS embedding must be 1x" + std::to_string(encoder.visual_dim));
  }
  Rng rng(mix_seed(config.seed, 0x9B07));
  for (const auto& spec : specs) {
    ad::Matrix init;
    if (spec.name.starts_with("prompts.region_cls.")) {
      init = cls_embedding;
    } else if (config.init == PromptInit::kZero) {
      init = ad::Matrix::Zero(spec.rows, spec.cols);
    } else {
      init = random_uniform(rng, spec.rows, spec.cols, 0.5 / std::sqrt(static_cast<double>(spec.cols)));
    }
    store_.add(spec, std::move(init));
  }
}

SequenceLayout PromptBank::layout(int patches) const {
  return SequenceLayout{config_.visual_global, regions(), config_.region_tokens ? config_.per_region : 0,
                        patches};
}

ad::Var PromptBank::global_prompts(int layer) const {
  const auto name = global_name(layer);
  return store_.contains(name) ? store_.at(name).var : ad::Var();
}

ad::Var PromptBank::local_prompts(int layer, int region) const {
  const auto name = local_name(layer);
  if (!store_.contains(name)) return {};
  return ad::slice_rows(store_.at(name).var, static_cast<Eigen::Index>(region) * config_.per_region,
                        config_.per_region);
}

ad::Var PromptBank::region_cls(int region) const {
  const auto name = region_cls_name(region);
  return store_.contains(name) ? store_.at(name).var : ad::Var();
}

ad::Var PromptBank::text_prompts(int layer) const {
  if (layer >= text_depth_) return {};
  const auto name = text_name(layer);
  return store_.contains(name) ? store_.at(name).var : ad::Var();
}

AttentionMask build_attention_mask(const RegionLayout& layout, const PromptBank& bank) {
  const int patches = static_cast<int>(layout.patch_to_region.size());
  const SequenceLayout seq = bank.layout(patches);
  const int n = seq.total();
  AttentionMask mask{ad::BoolMatrix::Constant(n, n, true)};
  if (seq.regions == 0) return mask;
  if (layout.regions != seq.regions) {
    throw ContractError("attention mask: layout has " + std::to_string(layout.regions) +
                        " regions but the prompt bank has " + std::to_string(seq.regions));
  }
  // A single region spans the whole image, so local and global coincide.
  if (seq.regions == 1) return mask;

  auto region_tokens = [&seq](int j) {
    std::vector<int> idx{seq.region_cls(j)};
    for (int p = 0; p < seq.per_region; ++p) idx.push_back(seq.local_start(j) + p);
    return idx;
  };
  for (int j = 0; j < seq.regions; ++j) {
    const auto own = region_tokens(j);
    for (int q : own) {
      mask.allow.row(q).setConstant(false);
      for (int k : own) mask.allow(q, k) = true;
      for (int p = 0; p < patches; ++p) {
        if (layout.patch_to_region[p] == j) mask.allow(q, seq.patch_start() + p) = true;
      }
    }
  }
  if (!bank.config().global_sees_local) {
    for (int q = 0; q < seq.global_start() + seq.global_prompts; ++q) {
      for (int j = 0; j < seq.regions; ++j) {
        for (int k : region_tokens(j)) mask.allow(q, k) = false;
      }
    }
  }
  return mask;
}

ad::Var assemble_visual_sequence(const PromptBank& bank, const Backbone& backbone,
                                 const ad::Matrix& patch_tokens) {
  const int d = backbone.config().visual_dim;
  if (patch_tokens.cols() != d) {
    throw ContractError("assemble: patch token width " + std::to_string(patch_tokens.cols()) +
                        " but visual_dim is " + std::to_string(d));
  }
  const SequenceLayout seq = bank.layout(static_cast<int>(patch_tokens.rows()));
  const ad::Matrix cls = backbone.class_token();
  const ad::Matrix cls_pos = cls - backbone.class_embedding();
  std::vector<ad::Var> parts;
  parts.push_back(ad::constant(cls));
  if (seq.global_prompts > 0) parts.push_back(ad::constant(ad::Matrix::Zero(seq.global_prompts, d)));
  for (int j = 0; j < seq.regions; ++j) {
    parts.push_back(ad::add(bank.region_cls(j), ad::constant(cls_pos)));
    if (seq.per_region > 0) parts.push_back(ad::constant(ad::Matrix::Zero(seq.per_region, d)));
  }
  parts.push_back(ad::constant(patch_tokens));
  return ad::vstack(parts);
}

ad::Var inject(const PromptBank& bank, int layer, const ad::Var& sequence) {
  if (layer >= bank.visual_depth()) return sequence;
  if (sequence.cols() != bank.visual_dim()) {
    throw ContractError("inject: prompt width " + std::to_string(bank.visual_dim()) +
                        " does not match token width " + std::to_string(sequence.cols()));
  }
  const int patches = static_cast<int>(sequence.rows()) -
                      bank.layout(0).patch_start();
  if (patches < 0) throw ContractError("inject: sequence shorter than the prompt layout");
  const SequenceLayout seq = bank.layout(patches);
  if (seq.global_prompts == 0 && (seq.regions == 0 || seq.per_region == 0)) return sequence;

  std::vector<ad::Var> parts;
  parts.push_back(ad::slice_rows(sequence, seq.global_cls(), 1));
  if (seq.global_prompts > 0) parts.push_back(bank.global_prompts(layer));
  for (int j = 0; j < seq.regions; ++j) {
    parts.push_back(ad::slice_rows(sequence, seq.region_cls(j), 1));
    if (seq.per_region > 0) parts.push_back(bank.local_prompts(layer, j));
  }
  parts.push_back(ad::slice_rows(sequence, seq.patch_start(), seq.patches));
  return ad::vstack(parts);
}

AuditReport trainable_parameter_audit(const std::vector<ParamSpec>& specs) {
  AuditReport report;
  for (const auto& s : specs) {
    if (s.trainable && s.group != kGroupPrompts && s.group != kGroupHead) {
      throw AuditError("parameter " + s.name + " in frozen group " + s.group + " is trainable");
    }
    auto& g = report.by_group[s.group];
    g.total += s.count();
    report.total += s.count();
    if (s.trainable) {
      g.trainable += s.count();
      report.trainable += s.count();
    }
  }
  report.ratio = report.total > 0 ? static_cast<double>(report.trainable) / report.total : 0.0;
  return report;
}

}  // namespace promptpar
