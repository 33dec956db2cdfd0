#pragma once

#include "promptpar/config.hpp"
#include "promptpar/data.hpp"
#include "promptpar/model.hpp"
#include "promptpar/objectives.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace promptpar {

struct LearningRates {
  double head = 0.0;
  double prompt = 0.0;
};

struct Schedule {
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
};

// Linear warmup from ratio·base to base at step warmup_steps - 1, then cosine
// decay to zero at step total_steps - 1.
LearningRates lr_schedule(std::int64_t step, const Schedule& schedule, const TrainConfig& config);
Schedule make_schedule(const TrainConfig& config, std::int64_t steps_per_epoch);

struct EpochRecord {
  int epoch = 0;
  std::int64_t steps = 0;
  double loss = 0.0;
  double cls_loss = 0.0;
  double gl_loss = 0.0;
  LearningRates lr;
  std::optional<MetricReport> validation;
};

struct TrainOptions {
  std::string manifest_path;    // JSON lines; empty skips the manifest
  std::string checkpoint_path;  // empty skips the checkpoint
  std::string resolved_config;  // Config::resolved_text()
  std::string resolved_config_json;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  AuditReport audit;
  int best_epoch = -1;
  double best_val_mA = 0.0;
  bool gl_enabled = true;
  std::int64_t clipped_steps = 0;
  std::string checkpoint_digest;
};

// Optimizes the prompt bank, φ and head; every other parameter stays frozen.
// `val` empty: a val_fraction slice of `train` is held out for checkpoint
// selection. The model is left at the best-by-validation state.
TrainResult train(PromptParModel& model, const Dataset& data, std::vector<int> train_rows,
                  std::vector<int> val_rows, const TrainConfig& config,
                  const TrainOptions& options = {});

// M×N probabilities without augmentation.
LabelMatrix predict_probabilities(const PromptParModel& model, const std::vector<Image>& images);
std::vector<Image> prepare_images(const Dataset& data, const std::vector<int>& rows, int size);

MetricReport evaluate(const PromptParModel& model, const Dataset& data, const std::vector<int>& rows,
                      double threshold = 0.5);

struct AttributeScore {
  std::string name;
  double score = 0.0;
};

struct PredictionItem {
  std::string input;
  std::optional<std::string> error;
  std::vector<AttributeScore> scores;     // vocabulary order
  std::vector<AttributeScore> predicted;  // score >= threshold, highest first
};

std::vector<PredictionItem> predict(const PromptParModel& model, const std::vector<std::string>& paths,
                                    double threshold = 0.5);
std::string predictions_to_text(const std::vector<PredictionItem>& items);
std::string predictions_to_json(const std::vector<PredictionItem>& items);

enum class AttentionKind { kPrompt, kAttribute };

struct AttentionMap {
  std::string label;
  ad::Matrix distribution;  // grid_rows × grid_cols, sums to 1
  ad::Matrix heat;          // distribution / max, in [0, 1]
};

std::vector<AttentionMap> export_attention(const PromptParModel& model, const Image& image,
                                           AttentionKind kind);
// One grayscale PNG per map, upsampled to the model's input size.
std::vector<std::string> write_attention_maps(const std::vector<AttentionMap>& maps,
                                              const std::string& directory, int cell);

struct Checkpoint {
  std::unique_ptr<PromptParModel> model;
  std::string config_text;
  std::string manifest_digest;
};

// Returns the digest of the written archive.
std::string save_checkpoint(const PromptParModel& model, const std::string& path,
                            const std::string& config_text, const std::string& manifest_digest = "");
std::string checkpoint_bytes(const PromptParModel& model, const std::string& config_text,
                             const std::string& manifest_digest = "");
Checkpoint load_checkpoint(const std::string& path);

// Builds a model from a resolved config and attribute set; the backbone comes
// from the stub seed or the configured bundle.
std::unique_ptr<PromptParModel> build_model(const Config& config, AttributeSet attributes);

}  // namespace promptpar
