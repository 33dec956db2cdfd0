#include "promptpar/trainer.hpp"

#include "promptpar/archive.hpp"
#include "promptpar/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace promptpar {

namespace {

constexpr const char* kCodeVersion = "promptpar 0.1.0";

nlohmann::json audit_json(const AuditReport& a) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, c] : a.by_group) groups[g] = {{"trainable", c.trainable}, {"total", c.total}};
  return {{"trainable", a.trainable}, {"total", a.total}, {"ratio", a.ratio}, {"by_group", groups}};
}

nlohmann::json metrics_json(const MetricReport& r) {
  return {{"mA", r.mA},         {"accuracy", r.accuracy}, {"precision", r.precision},
          {"recall", r.recall}, {"f1", r.f1},             {"samples", r.samples}};
}

class ManifestWriter {
 public:
  explicit ManifestWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError("cannot write manifest " + path);
  }
  void append(const nlohmann::json& row) {
    const std::string line = row.dump() + "\n";
    bytes_ += line;
    if (out_.is_open()) out_ << line << std::flush;
  }
  std::string digest() const { return digest_hex(bytes_); }

 private:
  std::ofstream out_;
  std::string bytes_;
};

struct Snapshot {
  std::vector<ad::Matrix> values;
};

std::vector<Parameter*> trainable_of(PromptParModel& model) {
  std::vector<Parameter*> out;
  for (auto* p : model.parameters()) {
    if (p->var.requires_grad()) out.push_back(p);
  }
  return out;
}

bool is_head_group(const Parameter& p) { return p.spec.group == kGroupHead; }

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

Schedule make_schedule(const TrainConfig& c, std::int64_t steps_per_epoch) {
  Schedule s;
  s.total_steps = std::max<std::int64_t>(1, c.epochs * steps_per_epoch);
  if (c.max_steps > 0) s.total_steps = std::min(s.total_steps, c.max_steps);
  s.warmup_steps = std::min<std::int64_t>(c.warmup_epochs * steps_per_epoch, s.total_steps - 1);
  return s;
}

LearningRates lr_schedule(std::int64_t step, const Schedule& s, const TrainConfig& c) {
  if (step < 0 || step >= s.total_steps) {
    throw ContractError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(s.total_steps) + ")");
  }
  double factor;
  const std::int64_t w = s.warmup_steps;
  if (w > 0 && step < w) {
    factor = w == 1 ? 1.0
                    : c.warmup_start_ratio +
                          (1.0 - c.warmup_start_ratio) * static_cast<double>(step) / static_cast<double>(w - 1);
  } else {
    const std::int64_t start = w > 0 ? w - 1 : 0;
    const std::int64_t span = s.total_steps - 1 - start;
    const double progress = span > 0 ? static_cast<double>(step - start) / static_cast<double>(span) : 1.0;
    factor = 0.5 * (1.0 + std::cos(M_PI * progress));
  }
  return {c.lr_head * factor, c.lr_prompt * factor};
}

std::vector<Image> prepare_images(const Dataset& data, const std::vector<int>& rows, int size) {
  std::vector<Image> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(pad_and_resize(data.image(static_cast<std::size_t>(r)), size));
  return out;
}

TrainResult train(PromptParModel& model, const Dataset& data, std::vector<int> train_rows,
                  std::vector<int> val_rows, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  TrainResult result;
  // Freezing contract: refuse to start if anything outside {prompts, head} trains.
  result.audit = model.audit();
  if (train_rows.empty()) throw DataError("train: empty training split");
  if (model.attributes().size() != data.num_attributes()) {
    throw DataError("train: model has " + std::to_string(model.attributes().size()) +
                    " attributes, dataset has " + std::to_string(data.num_attributes()));
  }
  if (val_rows.empty() && config.val_fraction > 0 && train_rows.size() > 1) {
    Rng rng(mix_seed(config.seed, 0x7A1));
    for (std::size_t i = train_rows.size(); i > 1; --i) std::swap(train_rows[i - 1], train_rows[rng.below(i)]);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(config.val_fraction * train_rows.size())));
    val_rows.assign(train_rows.end() - static_cast<std::ptrdiff_t>(n_val), train_rows.end());
    train_rows.resize(train_rows.size() - n_val);
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
  }

  const int size = model.config().encoder.image_size;
  const std::vector<Image> train_images = prepare_images(data, train_rows, size);
  const std::vector<Image> val_images = prepare_images(data, val_rows, size);
  const LabelMatrix y_train = data.labels(train_rows);
  const LabelMatrix y_val = data.labels(val_rows);
  const ad::RowVector weights = attribute_weights(model.attributes().prevalence());

  const auto params = trainable_of(model);
  std::vector<ad::Matrix> velocity;
  for (auto* p : params) velocity.push_back(ad::Matrix::Zero(p->var.rows(), p->var.cols()));

  const auto n = static_cast<std::int64_t>(train_rows.size());
  const std::int64_t steps_per_epoch = ceil_div(n, config.batch_size);
  const Schedule schedule = make_schedule(config, steps_per_epoch);
  const int epochs = static_cast<int>(ceil_div(schedule.total_steps, steps_per_epoch));
  result.gl_enabled = config.alpha > 0;

  ManifestWriter manifest(options.manifest_path);
  {
    nlohmann::json start{{"event", "start"},
                         {"code_version", kCodeVersion},
                         {"backbone_id", model.config().encoder.backbone_id},
                         {"seed", config.seed},
                         {"audit", audit_json(result.audit)},
                         {"gl_loss_enabled", result.gl_enabled},
                         {"grad_clip", config.grad_clip},
                         {"resampling", "bilinear"},
                         {"fusion_output", "post_norm"},
                         {"train_samples", train_rows.size()},
                         {"val_samples", val_rows.size()},
                         {"total_steps", schedule.total_steps},
                         {"warmup_steps", schedule.warmup_steps}};
    start["config"] = options.resolved_config_json.empty()
                          ? nlohmann::json::object()
                          : nlohmann::json::parse(options.resolved_config_json);
    manifest.append(start);
  }

  Snapshot best;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs && step < schedule.total_steps; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(config.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0, cls_sum = 0, gl_sum = 0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n && step < schedule.total_steps; start += config.batch_size) {
      const std::int64_t end = std::min(n, start + config.batch_size);
      std::vector<Image> batch;
      std::vector<int> local_rows;
      for (std::int64_t k = start; k < end; ++k) {
        const auto idx = order[static_cast<std::size_t>(k)];
        const Image& img = train_images[static_cast<std::size_t>(idx)];
        if (config.augment) {
          AugmentOptions aug{true, config.crop_margin, config.flip_probability};
          const auto sample_seed = mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)),
                                            static_cast<std::uint64_t>(train_rows[static_cast<std::size_t>(idx)]));
          batch.push_back(augment(img, sample_seed, aug));
        } else {
          batch.push_back(img);
        }
        local_rows.push_back(static_cast<int>(idx));
      }
      LabelMatrix y(static_cast<Eigen::Index>(local_rows.size()), y_train.cols());
      for (std::size_t i = 0; i < local_rows.size(); ++i) {
        y.row(static_cast<Eigen::Index>(i)) = y_train.row(local_rows[i]);
      }

      const BatchOutput out = model.forward(batch, result.gl_enabled);
      const ad::Var cls = weighted_bce(out.probs, y, weights);
      ad::Var loss = cls;
      double gl_value = 0;
      if (result.gl_enabled) {
        const ad::Var gl = gl_loss(out.similarity->p_gl, y);
        gl_value = gl.scalar();
        loss = total_loss(cls, gl, config.alpha);
      }
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at batch " + std::to_string(batches) + " of epoch " +
                            std::to_string(epoch) + " (step " + std::to_string(step) + ")");
      }
      for (auto* p : params) p->var.zero_grad();
      ad::backward(loss);

      double norm_sq = 0;
      for (auto* p : params) {
        if (p->var.has_grad()) norm_sq += p->var.grad().squaredNorm();
      }
      const double norm = std::sqrt(norm_sq);
      const double clip = norm > config.grad_clip ? config.grad_clip / norm : 1.0;
      if (clip < 1.0) ++result.clipped_steps;

      const LearningRates lr = lr_schedule(step, schedule, config);
      for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        if (!p.var.has_grad()) continue;
        ad::Matrix g = p.var.grad() * clip;
        const bool head = is_head_group(p);
        if (head && config.weight_decay > 0) g += config.weight_decay * p.var.value();
        velocity[i] = config.momentum * velocity[i] + g;
        p.var.mutable_value() -= (head ? lr.head : lr.prompt) * velocity[i];
      }
      for (auto* p : params) p->var.zero_grad();

      result.step_losses.push_back(value);
      loss_sum += value;
      cls_sum += cls.scalar();
      gl_sum += gl_value;
      rec.lr = lr;
      ++batches;
      ++step;
    }
    rec.steps = step;
    rec.loss = loss_sum / std::max<std::int64_t>(1, batches);
    rec.cls_loss = cls_sum / std::max<std::int64_t>(1, batches);
    rec.gl_loss = gl_sum / std::max<std::int64_t>(1, batches);

    bool improved = val_rows.empty();
    if (!val_rows.empty()) {
      const LabelMatrix p = predict_probabilities(model, val_images);
      rec.validation = compute_metrics(p, y_val, config.threshold);
      improved = result.best_epoch < 0 || rec.validation->mA > result.best_val_mA;
    }
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_mA = rec.validation ? rec.validation->mA : 0.0;
      best.values.clear();
      for (auto* p : params) best.values.push_back(p->var.value());
    }

    nlohmann::json row{{"event", "epoch"},         {"epoch", epoch},
                       {"steps", rec.steps},       {"loss", rec.loss},
                       {"cls_loss", rec.cls_loss}, {"gl_loss", rec.gl_loss},
                       {"lr_head", rec.lr.head},   {"lr_prompt", rec.lr.prompt}};
    if (rec.validation) row["validation"] = metrics_json(*rec.validation);
    manifest.append(row);
    if (options.on_epoch) options.on_epoch(rec);
    result.epochs.push_back(rec);
  }

  for (std::size_t i = 0; i < params.size() && !best.values.empty(); ++i) {
    params[i]->var.mutable_value() = best.values[i];
  }
  const std::string digest_before_end = manifest.digest();
  if (!options.checkpoint_path.empty()) {
    result.checkpoint_digest =
        save_checkpoint(model, options.checkpoint_path, options.resolved_config, digest_before_end);
  } else {
    result.checkpoint_digest = digest_hex(checkpoint_bytes(model, options.resolved_config, digest_before_end));
  }
  manifest.append({{"event", "end"},
                   {"best_epoch", result.best_epoch},
                   {"best_val_mA", result.best_val_mA},
                   {"clipped_steps", result.clipped_steps},
                   {"steps", step},
                   {"checkpoint_digest", result.checkpoint_digest}});
  return result;
}

LabelMatrix predict_probabilities(const PromptParModel& model, const std::vector<Image>& images) {
  const auto n = static_cast<Eigen::Index>(model.attributes().size());
  LabelMatrix p(static_cast<Eigen::Index>(images.size()), n);
  if (images.empty()) return p;
  const ad::Var text = model.text_features();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto scores = model.score(model.encode_image(images[i]), text);
    p.row(static_cast<Eigen::Index>(i)) = scores.probs.value().row(0);
  }
  return p;
}

MetricReport evaluate(const PromptParModel& model, const Dataset& data, const std::vector<int>& rows,
                      double threshold) {
  if (rows.empty()) throw DataError("evaluate: empty dataset");
  const auto images = prepare_images(data, rows, model.config().encoder.image_size);
  return compute_metrics(predict_probabilities(model, images), data.labels(rows), threshold);
}

std::vector<PredictionItem> predict(const PromptParModel& model, const std::vector<std::string>& paths,
                                    double threshold) {
  std::vector<PredictionItem> out;
  const ad::Var text = model.text_features();
  const auto& names = model.attributes().names();
  for (const auto& path : paths) {
    PredictionItem item;
    item.input = path;
    try {
      const Image img = pad_and_resize(read_image(path), model.config().encoder.image_size);
      const auto probs = model.score(model.encode_image(img), text).probs.value();
      for (std::size_t j = 0; j < names.size(); ++j) {
        item.scores.push_back({names[j], probs(0, static_cast<Eigen::Index>(j))});
      }
      for (const auto& s : item.scores) {
        if (s.score >= threshold) item.predicted.push_back(s);
      }
      std::stable_sort(item.predicted.begin(), item.predicted.end(),
                       [](const AttributeScore& a, const AttributeScore& b) { return a.score > b.score; });
    } catch (const Error& e) {
      item.error = e.what();
    }
    out.push_back(std::move(item));
  }
  return out;
}

std::string predictions_to_text(const std::vector<PredictionItem>& items) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& item : items) {
    os << item.input << ":";
    if (item.error) {
      os << " error: " << *item.error << "\n";
      continue;
    }
    if (item.predicted.empty()) os << " (none)";
    for (const auto& s : item.predicted) os << " " << s.name << "=" << s.score;
    os << "\n";
  }
  return os.str();
}

std::string predictions_to_json(const std::vector<PredictionItem>& items) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& item : items) {
    nlohmann::json j{{"input", item.input}};
    if (item.error) {
      j["error"] = *item.error;
    } else {
      nlohmann::json scores = nlohmann::json::object();
      for (const auto& s : item.scores) scores[s.name] = s.score;
      nlohmann::json predicted = nlohmann::json::array();
      for (const auto& s : item.predicted) predicted.push_back({{"name", s.name}, {"score", s.score}});
      j["scores"] = scores;
      j["predicted"] = predicted;
    }
    arr.push_back(j);
  }
  return arr.dump(2);
}

namespace {

AttentionMap make_map(std::string label, const ad::Matrix& row_over_patches, int grid) {
  AttentionMap m;
  m.label = std::move(label);
  m.distribution = row_over_patches;
  m.distribution.resize(grid, grid);
  const double total = m.distribution.sum();
  if (total > 0) m.distribution /= total;
  const double peak = m.distribution.maxCoeff();
  m.heat = peak > 0 ? ad::Matrix(m.distribution / peak) : ad::Matrix::Zero(grid, grid);
  return m;
}

}  // namespace

std::vector<AttentionMap> export_attention(const PromptParModel& model, const Image& image,
                                           AttentionKind kind) {
  const Image input = pad_and_resize(image, model.config().encoder.image_size);
  const int grid = model.config().encoder.grid();
  const SequenceLayout seq = model.sequence_layout();
  std::vector<ad::AttentionRecord> visual;
  const VisualFeatures f = model.encode_image(input, &visual);
  std::vector<AttentionMap> out;
  if (kind == AttentionKind::kPrompt) {
    const ad::Matrix a = visual.back().head_mean();
    auto patches_of = [&](int row) -> ad::Matrix {
      return a.block(row, seq.patch_start(), 1, seq.patches);
    };
    for (int i = 0; i < seq.global_prompts; ++i) {
      out.push_back(make_map("global_prompt_" + std::to_string(i), patches_of(seq.global_start() + i), grid));
    }
    for (int j = 0; j < seq.regions; ++j) {
      for (int i = 0; i < seq.per_region; ++i) {
        out.push_back(make_map("region" + std::to_string(j) + "_prompt_" + std::to_string(i),
                               patches_of(seq.local_start(j) + i), grid));
      }
    }
    return out;
  }
  ad::AttentionRecord fusion;
  model.score(f, model.text_features(), &fusion);
  if (fusion.probs.empty()) throw ContractError("export_attention: fusion kind records no attention");
  const ad::Matrix a = fusion.head_mean();
  const auto n = static_cast<Eigen::Index>(model.attributes().size());
  for (Eigen::Index j = 0; j < n; ++j) {
    out.push_back(make_map("attribute_" + model.attributes().names()[static_cast<std::size_t>(j)],
                           a.block(j, n, 1, seq.patches), grid));
  }
  return out;
}

std::vector<std::string> write_attention_maps(const std::vector<AttentionMap>& maps,
                                              const std::string& directory, int cell) {
  std::filesystem::create_directories(directory);
  std::vector<std::string> paths;
  for (const auto& m : maps) {
    const int rows = static_cast<int>(m.heat.rows());
    const int cols = static_cast<int>(m.heat.cols());
    Image img(cols * cell, rows * cell, 1);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        img.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(255.0 * m.heat(y / cell, x / cell)));
      }
    }
    std::string safe = m.label;
    for (char& c : safe) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
    }
    const std::string path = (std::filesystem::path(directory) / (safe + ".png")).string();
    write_image(path, img);
    paths.push_back(path);
  }
  return paths;
}

namespace {

Archive checkpoint_archive(const PromptParModel& model, const std::string& config_text,
                           const std::string& manifest_digest) {
  Archive a;
  const bool stub = model.config().encoder.backbone_id == "stub";
  for (const auto* p : model.parameters()) {
    const bool backbone = p->spec.group == kGroupVisual || p->spec.group == kGroupText;
    if (backbone && !stub) continue;
    a.tensors[p->spec.name] = {p->var.requires_grad(), p->var.value()};
  }
  const auto& attrs = model.attributes();
  nlohmann::json j{{"names", attrs.names()}, {"expansions", attrs.expansions()},
                   {"prevalence", attrs.prevalence()}};
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : attrs.groups()) groups.push_back(g ? nlohmann::json(*g) : nlohmann::json());
  j["groups"] = groups;
  a.texts["attributes"] = j.dump();
  a.texts["config"] = config_text;
  a.texts["manifest_digest"] = manifest_digest;
  a.texts["code_version"] = kCodeVersion;
  return a;
}

}  // namespace

std::string checkpoint_bytes(const PromptParModel& model, const std::string& config_text,
                             const std::string& manifest_digest) {
  return checkpoint_archive(model, config_text, manifest_digest).serialize();
}

std::string save_checkpoint(const PromptParModel& model, const std::string& path,
                            const std::string& config_text, const std::string& manifest_digest) {
  const Archive a = checkpoint_archive(model, config_text, manifest_digest);
  a.save(path);
  return digest_hex(a.serialize());
}

std::unique_ptr<PromptParModel> build_model(const Config& config, AttributeSet attributes) {
  const ModelConfig mc = model_config_from(config);
  const std::string bundle = config.get_string("backbone.bundle");
  Backbone backbone = mc.encoder.backbone_id == "stub" && bundle.empty()
                          ? load_backbone_stub(mc.encoder)
                          : load_backbone_bundle(mc.encoder, bundle);
  return std::make_unique<PromptParModel>(mc, std::move(backbone), std::move(attributes));
}

Checkpoint load_checkpoint(const std::string& path) {
  const Archive a = Archive::load(path);
  auto text = [&](const char* key) -> const std::string& {
    auto it = a.texts.find(key);
    if (it == a.texts.end()) throw LoadError(path + ": checkpoint lacks '" + key + "'");
    return it->second;
  };
  Checkpoint ck;
  ck.config_text = text("config");
  ck.manifest_digest = text("manifest_digest");
  Config config;
  config.load_text(ck.config_text, "checkpoint");

  AttributeSet attrs;
  try {
    const auto j = nlohmann::json::parse(text("attributes"));
    std::vector<std::optional<std::string>> groups;
    for (const auto& g : j.at("groups")) {
      groups.push_back(g.is_null() ? std::nullopt : std::optional<std::string>(g.get<std::string>()));
    }
    attrs = AttributeSet(j.at("names").get<std::vector<std::string>>(),
                         j.at("expansions").get<std::vector<std::string>>(),
                         j.at("prevalence").get<std::vector<double>>(), groups);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": bad attribute record: " + e.what());
  }
  ck.model = build_model(config, std::move(attrs));
  for (auto* p : ck.model->parameters()) {
    auto it = a.tensors.find(p->spec.name);
    const bool backbone = p->spec.group == kGroupVisual || p->spec.group == kGroupText;
    if (it == a.tensors.end()) {
      if (backbone) continue;
      throw LoadError(path + ": checkpoint lacks tensor " + p->spec.name);
    }
    const auto& v = it->second.value;
    if (v.rows() != p->var.rows() || v.cols() != p->var.cols()) {
      throw LoadError(path + ": tensor " + p->spec.name + " has shape " + std::to_string(v.rows()) + "x" +
                      std::to_string(v.cols()) + ", expected " + std::to_string(p->var.rows()) + "x" +
                      std::to_string(p->var.cols()));
    }
    p->var.mutable_value() = v;
  }
  return ck;
}

}  // namespace promptpar
