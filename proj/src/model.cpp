#include "promptpar/model.hpp"

#include "promptpar/errors.hpp"

namespace promptpar {

namespace {

RegionLayout layout_for(const ModelConfig& c) {
  const int k = c.prompt.region_tokens ? c.prompt.regions : 1;
  return build_region_layout(c.encoder.grid(), k, c.encoder.grid());
}

}  // namespace

PromptParModel::PromptParModel(ModelConfig config, Backbone backbone, AttributeSet attributes)
    : config_(std::move(config)),
      backbone_(std::move(backbone)),
      attributes_(std::move(attributes)),
      prompts_(config_.prompt, config_.encoder, backbone_.class_embedding()),
      head_(config_.fusion, config_.encoder, static_cast<int>(attributes_.size())),
      layout_(layout_for(config_)),
      mask_(build_attention_mask(layout_, prompts_)) {
  const auto& a = backbone_.config();
  const auto& b = config_.encoder;
  if (a.visual_dim != b.visual_dim || a.text_dim != b.text_dim || a.image_size != b.image_size ||
      a.patch_size != b.patch_size || a.visual_layers != b.visual_layers ||
      a.text_layers != b.text_layers) {
    throw ContractError("model: backbone shapes differ from the encoder config");
  }
}

std::vector<ParamSpec> PromptParModel::describe(const ModelConfig& config, int n) {
  auto out = Backbone::describe(config.encoder);
  for (auto& s : PromptBank::describe(config.prompt, config.encoder)) out.push_back(std::move(s));
  for (auto& s : FusionHead::describe(config.fusion, config.encoder, n)) out.push_back(std::move(s));
  return out;
}

SequenceLayout PromptParModel::sequence_layout() const {
  return prompts_.layout(config_.encoder.grid_count());
}

ad::Var PromptParModel::text_features() const {
  const PromptBank& bank = prompts_;
  TextPromptFn fn;
  const int t = bank.config().textual;
  if (t > 0) fn = [&bank](int layer) { return bank.text_prompts(layer); };
  return head_.project_text(backbone_.encode_text(attributes_.expansions(), fn, t));
}

VisualFeatures PromptParModel::encode_image(const Image& image,
                                            std::vector<ad::AttentionRecord>* attention) const {
  const ad::Matrix patches = backbone_.patchify(image);
  const ad::Var seq0 = assemble_visual_sequence(prompts_, backbone_, patches);
  EncodeOptions opts;
  opts.mask = &mask_.allow;
  opts.attention = attention;
  const PromptBank& bank = prompts_;
  opts.before_layer = [&bank](int layer, const ad::Var& x) { return inject(bank, layer, x); };
  const ad::Var out = backbone_.encode_visual(seq0, opts);

  const SequenceLayout seq = sequence_layout();
  VisualFeatures f;
  f.global_cls = ad::slice_rows(out, seq.global_cls(), 1);
  for (int j = 0; j < seq.regions; ++j) f.region_cls.push_back(ad::slice_rows(out, seq.region_cls(j), 1));
  f.patches = ad::slice_rows(out, seq.patch_start(), seq.patches);
  return f;
}

PredictionScores PromptParModel::score(const VisualFeatures& visual, const ad::Var& text,
                                       ad::AttentionRecord* fusion_attention) const {
  return head_.classify(head_.fuse(text, visual.patches, fusion_attention));
}

BatchOutput PromptParModel::forward(const std::vector<Image>& images, bool with_similarity) const {
  if (images.empty()) throw ContractError("forward: empty batch");
  const ad::Var text = text_features();
  std::vector<ad::Var> logits;
  std::vector<ad::Var> globals;
  std::vector<std::vector<ad::Var>> regions(static_cast<std::size_t>(sequence_layout().regions));
  for (const auto& image : images) {
    const VisualFeatures f = encode_image(image);
    logits.push_back(score(f, text).logits);
    if (with_similarity) {
      globals.push_back(f.global_cls);
      for (std::size_t j = 0; j < regions.size(); ++j) regions[j].push_back(f.region_cls[j]);
    }
  }
  BatchOutput out;
  out.logits = ad::vstack(logits);
  out.probs = ad::sigmoid(out.logits);
  if (with_similarity) {
    std::vector<ad::Var> region_rows;
    for (const auto& r : regions) region_rows.push_back(ad::vstack(r));
    out.similarity = global_local_similarity(ad::vstack(globals), region_rows, text,
                                             config_.fusion.temperature, config_.fusion.aggregate);
  }
  return out;
}

std::vector<Parameter*> PromptParModel::parameters() {
  std::vector<Parameter*> out;
  for (auto* store : {&backbone_.params(), &prompts_.params(), &head_.params()}) {
    for (auto& p : store->all()) out.push_back(&p);
  }
  return out;
}

std::vector<const Parameter*> PromptParModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto* store : {&backbone_.params(), &prompts_.params(), &head_.params()}) {
    for (const auto& p : store->all()) out.push_back(&p);
  }
  return out;
}

AuditReport PromptParModel::audit() const {
  std::vector<ParamSpec> specs;
  for (const auto* p : parameters()) {
    ParamSpec s = p->spec;
    s.trainable = p->var.requires_grad();
    specs.push_back(std::move(s));
  }
  return trainable_parameter_audit(specs);
}

}  // namespace promptpar
