#pragma once

#include "promptpar/model.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace promptpar {

// Layered key-value configuration: defaults < file < environment < flags.
// Every key has a default; unknown keys are rejected. Values are read through
// typed getters, which record the key as consumed.
class Config {
 public:
  struct Entry {
    std::string value;
    std::string source;  // "default", "file:<path>", "env:<NAME>", "flag"
    std::string help;
  };

  Config();

  void load_file(const std::string& path);
  void load_text(const std::string& text, const std::string& source);
  void apply_env();
  void set(const std::string& key, const std::string& value, const std::string& source = "flag");
  // "key=value" as given on the command line.
  void set_assignment(const std::string& assignment);

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  std::string get_string(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::int64_t get_int64(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  const std::set<std::string>& consumed() const { return consumed_; }
  static std::string env_name(const std::string& key);

  // "key = value" lines for every key, sorted.
  std::string resolved_text() const;
  // {key: {value, source, consumed}}
  std::string resolved_json() const;

 private:
  const Entry& entry(const std::string& key) const;
  std::map<std::string, Entry> entries_;
  mutable std::set<std::string> consumed_;
};

ModelConfig model_config_from(const Config& config);

struct TrainConfig {
  int epochs = 40;
  double lr_head = 8e-3;
  double lr_prompt = 4e-3;
  double momentum = 0.9;
  int warmup_epochs = 5;
  double warmup_start_ratio = 0.01;
  double weight_decay = 1e-4;
  int batch_size = 16;
  double alpha = 0.5;
  double grad_clip = 10.0;
  double val_fraction = 0.1;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  bool augment = true;
  int crop_margin = 8;
  double flip_probability = 0.5;
  std::int64_t max_steps = 0;  // 0: no cap

  void validate() const;  // throws ConfigError
};

TrainConfig train_config_from(const Config& config);

}  // namespace promptpar
