#include "promptpar/fusion.hpp"

#include "promptpar/errors.hpp"

#include <cmath>

namespace promptpar {

namespace {

std::string fusion_layer_prefix(int i) { return "mmformer.layers." + std::to_string(i); }
std::string hidden_name(int i, const char* what) {
  return "head.hidden." + std::to_string(i) + "." + what;
}

void check_config(const FusionConfig& c, int num_attributes) {
  if (num_attributes < 1) throw ContractError("fusion head needs at least one attribute");
  if (c.kind == FusionKind::kMMFormer && (c.layers < 1 || c.layers > 4)) {
    throw ContractError("fusion.layers must be in [1, 4]");
  }
  if (c.head_layers < 1) throw ContractError("head.layers must be at least 1");
  if (!(c.temperature > 0)) throw ContractError("fusion.temperature must be > 0");
}

}  // namespace

std::vector<ParamSpec> FusionHead::describe(const FusionConfig& c, const EncoderConfig& e,
                                            int n) {
  check_config(c, n);
  const int d = e.visual_dim;
  std::vector<ParamSpec> out;
  out.push_back({"phi.w", kGroupHead, true, e.text_dim, d});
  out.push_back({"phi.b", kGroupHead, true, 1, d});
  if (c.kind == FusionKind::kMMFormer) {
    for (int i = 0; i < c.layers; ++i) describe_layer(out, fusion_layer_prefix(i), kGroupFusion, d);
    out.push_back({"mmformer.norm.g", kGroupFusion, false, 1, d});
    out.push_back({"mmformer.norm.b", kGroupFusion, false, 1, d});
  } else {
    out.push_back({"head.mix", kGroupHead, true, n, n + e.grid_count()});
  }
  for (int i = 0; i + 1 < c.head_layers; ++i) {
    out.push_back({hidden_name(i, "w"), kGroupHead, true, d, d});
    out.push_back({hidden_name(i, "b"), kGroupHead, true, 1, d});
  }
  out.push_back({"head.w", kGroupHead, true, n, d});
  out.push_back({"head.b", kGroupHead, true, 1, n});
  return out;
}

FusionHead::FusionHead(const FusionConfig& config, const EncoderConfig& encoder, int n)
    : config_(config),
      num_attributes_(n),
      width_(encoder.visual_dim),
      text_dim_(encoder.text_dim),
      grid_count_(encoder.grid_count()),
      heads_(config.heads > 0 ? config.heads : encoder.visual_heads) {
  const auto specs = describe(config, encoder, n);
  if (width_ % heads_ != 0) throw ContractError("fusion width not divisible by head count");
  Rng rng(mix_seed(config.seed, 0xF05E));
  const double s = 1.0 / std::sqrt(static_cast<double>(width_));
  std::size_t i = 0;
  while (i < specs.size()) {
    const auto& spec = specs[i];
    if (spec.name.starts_with("mmformer.layers.")) {
      const std::vector<ParamSpec> block(specs.begin() + static_cast<std::ptrdiff_t>(i),
                                         specs.begin() + static_cast<std::ptrdiff_t>(i + 12));
      init_layer(store_, block, rng, width_);
      i += 12;
      continue;
    }
    ad::Matrix init;
    if (spec.name == "phi.w") {
      if (config.phi_init == PhiInit::kIdentity) {
        if (spec.rows != spec.cols) {
          throw ContractError("identity phi needs text_dim == visual_dim");
        }
        init = ad::Matrix::Identity(spec.rows, spec.cols);
      } else {
        init = random_normal(rng, spec.rows, spec.cols, 1.0 / std::sqrt(static_cast<double>(spec.rows)));
      }
    } else if (spec.name == "mmformer.norm.g") {
      init = ad::Matrix::Ones(spec.rows, spec.cols);
    } else if (spec.name.ends_with(".b")) {
      init = ad::Matrix::Zero(spec.rows, spec.cols);
    } else if (spec.name == "head.mix") {
      init = random_normal(rng, spec.rows, spec.cols, 1.0 / std::sqrt(static_cast<double>(spec.cols)));
    } else {
      init = random_normal(rng, spec.rows, spec.cols, s);
    }
    store_.add(spec, std::move(init));
    ++i;
  }
  if (config.kind == FusionKind::kMMFormer) {
    for (int l = 0; l < config.layers; ++l) layers_.emplace_back(fusion_layer_prefix(l));
  }
}

ad::Var FusionHead::project_text(const ad::Var& text_features) const {
  if (text_features.cols() != text_dim_) {
    throw ContractError("project_text: feature width " + std::to_string(text_features.cols()) +
                        " but text_dim is " + std::to_string(text_dim_));
  }
  return ad::add_row(ad::matmul(text_features, store_.at("phi.w").var), store_.at("phi.b").var);
}

ad::Var FusionHead::fuse(const ad::Var& projected_text, const ad::Var& visual_tokens,
                         ad::AttentionRecord* record) const {
  if (projected_text.cols() != width_ || visual_tokens.cols() != width_) {
    throw ContractError("fuse: text width " + std::to_string(projected_text.cols()) +
                        " and visual width " + std::to_string(visual_tokens.cols()) +
                        " must both equal " + std::to_string(width_));
  }
  if (projected_text.rows() != num_attributes_) {
    throw ContractError("fuse: expected " + std::to_string(num_attributes_) + " attribute rows");
  }
  const ad::Var parts[] = {projected_text, visual_tokens};
  ad::Var x = ad::vstack(parts);
  if (config_.kind == FusionKind::kMlp) {
    const auto& mix = store_.at("head.mix").var;
    if (mix.cols() != x.rows()) {
      throw ContractError("fuse: mlp fusion built for " + std::to_string(mix.cols()) + " tokens");
    }
    return ad::matmul(mix, x);
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const bool last = l + 1 == layers_.size();
    x = transformer_layer(store_, layers_[l], x, heads_, nullptr, last ? record : nullptr);
  }
  x = ad::layer_norm(x, store_.at("mmformer.norm.g").var, store_.at("mmformer.norm.b").var);
  return ad::slice_rows(x, 0, num_attributes_);
}

PredictionScores FusionHead::classify(const ad::Var& z) const {
  if (z.rows() != num_attributes_ || z.cols() != width_) {
    throw ShapeError("classify: Z must be " + std::to_string(num_attributes_) + "x" +
                     std::to_string(width_));
  }
  ad::Var h = z;
  for (int i = 0; i + 1 < config_.head_layers; ++i) {
    h = ad::add_row(ad::matmul(h, store_.at(hidden_name(i, "w")).var),
                    store_.at(hidden_name(i, "b")).var);
    h = ad::quick_gelu(h);
  }
  PredictionScores out;
  out.z = z;
  out.logits = ad::add(ad::rowwise_dot(h, store_.at("head.w").var), store_.at("head.b").var);
  out.probs = ad::sigmoid(out.logits);
  return out;
}

SimilarityMatrices global_local_similarity(const ad::Var& global_cls,
                                           const std::vector<ad::Var>& region_cls,
                                           const ad::Var& text, double temperature,
                                           RegionAggregate aggregate) {
  if (!(temperature > 0)) throw ContractError("similarity temperature must be > 0");
  if (global_cls.cols() != text.cols()) {
    throw ContractError("similarity: CLS width " + std::to_string(global_cls.cols()) +
                        " differs from text width " + std::to_string(text.cols()));
  }
  auto finite = [](const ad::Var& v) { return v.value().allFinite(); };
  if (!finite(global_cls) || !finite(text)) throw ContractError("similarity: non-finite features");
  const ad::Var text_unit_t = ad::transpose(ad::normalize_rows(text));
  SimilarityMatrices out;
  out.s_global = ad::matmul(ad::normalize_rows(global_cls), text_unit_t);
  if (region_cls.empty()) {
    out.s_region = out.s_global;
  } else {
    std::vector<ad::Var> per_region;
    for (const auto& r : region_cls) {
      if (!finite(r)) throw ContractError("similarity: non-finite region features");
      per_region.push_back(ad::matmul(ad::normalize_rows(r), text_unit_t));
    }
    out.s_region = aggregate == RegionAggregate::kMax ? ad::elementwise_max(per_region)
                                                      : ad::mean_of(per_region);
  }
  const ad::Var avg = ad::scale(ad::add(out.s_global, out.s_region), 0.5);
  out.p_gl = ad::sigmoid(ad::scale(avg, 1.0 / temperature));
  return out;
}

}  // namespace promptpar
