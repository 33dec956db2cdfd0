#include "promptpar/config.hpp"

#include "promptpar/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace promptpar {

namespace {

struct Default {
  const char* key;
  const char* value;
  const char* help;
};

constexpr Default kDefaults[] = {
    {"backbone.id", "stub", "stub | clip-vit-l14 | clip-vit-b16"},
    {"backbone.bundle", "", "weight archive for pretrained backbones"},
    {"stub.seed", "7", "stub backbone weight seed"},
    {"stub.image_size", "32", ""},
    {"stub.patch_size", "8", ""},
    {"stub.channels", "3", ""},
    {"stub.visual_dim", "32", ""},
    {"stub.visual_layers", "2", ""},
    {"stub.visual_heads", "4", ""},
    {"stub.text_dim", "32", ""},
    {"stub.text_layers", "2", ""},
    {"stub.text_heads", "4", ""},
    {"stub.vocab_size", "512", ""},
    {"stub.context_length", "16", ""},
    {"prompt.visual_global", "50", "global visual prompts per layer"},
    {"prompt.per_region", "12", "local visual prompts per region per layer"},
    {"prompt.textual", "3", "textual prompts per layer"},
    {"prompt.depth", "all", "layers receiving fresh prompts, or all"},
    {"prompt.mode", "deep", "deep | shallow"},
    {"prompt.init", "random", "random | zero"},
    {"prompt.seed", "11", ""},
    {"regions.K", "4", "horizontal body regions"},
    {"regions.enabled", "true", "region CLS tokens and local prompts"},
    {"regions.global_sees_local", "true", "global tokens may attend to region tokens"},
    {"fusion", "mmformer", "mmformer | mlp"},
    {"fusion.layers", "1", ""},
    {"fusion.heads", "0", "0 uses the backbone head count"},
    {"fusion.temperature", "0.07", "similarity temperature"},
    {"fusion.aggregate", "max", "max | mean over regions"},
    {"fusion.phi_init", "random", "random | identity"},
    {"fusion.seed", "13", ""},
    {"head.layers", "1", "affine layers in the classification head"},
    {"attributes.template", kDefaultTemplate.data(), "sentence template"},
    {"train.epochs", "40", ""},
    {"train.lr_head", "8e-3", ""},
    {"train.lr_prompt", "4e-3", ""},
    {"train.momentum", "0.9", ""},
    {"train.warmup_epochs", "5", ""},
    {"train.warmup_start_ratio", "0.01", ""},
    {"train.weight_decay", "1e-4", "applied to head and phi only"},
    {"train.batch_size", "16", ""},
    {"train.alpha", "0.5", "weight of the global-local loss"},
    {"train.grad_clip", "10", "global gradient norm cap"},
    {"train.val_fraction", "0.1", "held out for checkpoint selection when no val split"},
    {"train.seed", "0", ""},
    {"train.max_steps", "0", "0 for no cap"},
    {"augment.enabled", "true", ""},
    {"augment.crop_margin", "8", ""},
    {"augment.flip_probability", "0.5", ""},
    {"eval.threshold", "0.5", ""},
    {"data.fail_fast", "true", "stop at the first bad annotation row"},
};

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

}  // namespace

Config::Config() {
  for (const auto& d : kDefaults) entries_[d.key] = {d.value, "default", d.help};
}

void Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), "file:" + path);
}

void Config::load_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source + ":" + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set(key, trim(line.substr(eq + 1)), source);
  }
}

std::string Config::env_name(const std::string& key) {
  std::string out = "PROMPTPAR_";
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

void Config::apply_env() {
  for (auto& [key, e] : entries_) {
    const std::string name = env_name(key);
    if (const char* v = std::getenv(name.c_str())) {
      e.value = v;
      e.source = "env:" + name;
    }
  }
}

void Config::set(const std::string& key, const std::string& value, const std::string& source) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "' (" + source + ")");
  it->second.value = value;
  it->second.source = source;
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), "flag");
}

const Config::Entry& Config::entry(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string Config::get_string(const std::string& key) const { return entry(key).value; }
int Config::get_int(const std::string& key) const { return parse_number<int>(key, entry(key).value); }
std::int64_t Config::get_int64(const std::string& key) const {
  return parse_number<std::int64_t>(key, entry(key).value);
}
std::uint64_t Config::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, entry(key).value);
}
double Config::get_double(const std::string& key) const {
  return parse_number<double>(key, entry(key).value);
}

bool Config::get_bool(const std::string& key) const {
  std::string v = entry(key).value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::string Config::resolved_text() const {
  std::string out;
  for (const auto& [key, e] : entries_) out += key + " = " + e.value + "\n";
  return out;
}

std::string Config::resolved_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, e] : entries_) {
    j[key] = {{"value", e.value}, {"source", e.source}, {"consumed", consumed_.count(key) > 0}};
  }
  return j.dump();
}

ModelConfig model_config_from(const Config& c) {
  ModelConfig m;
  const std::string id = c.get_string("backbone.id");
  if (id == "stub") {
    auto& e = m.encoder;
    e.seed = c.get_u64("stub.seed");
    e.image_size = c.get_int("stub.image_size");
    e.patch_size = c.get_int("stub.patch_size");
    e.channels = c.get_int("stub.channels");
    e.visual_dim = c.get_int("stub.visual_dim");
    e.visual_layers = c.get_int("stub.visual_layers");
    e.visual_heads = c.get_int("stub.visual_heads");
    e.text_dim = c.get_int("stub.text_dim");
    e.text_layers = c.get_int("stub.text_layers");
    e.text_heads = c.get_int("stub.text_heads");
    e.vocab_size = c.get_int("stub.vocab_size");
    e.context_length = c.get_int("stub.context_length");
  } else {
    m.encoder = encoder_config_for(id);
  }
  try {
    m.encoder.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }

  auto& p = m.prompt;
  p.visual_global = c.get_int("prompt.visual_global");
  p.per_region = c.get_int("prompt.per_region");
  p.textual = c.get_int("prompt.textual");
  const std::string mode = c.get_string("prompt.mode");
  if (mode != "deep" && mode != "shallow") throw ConfigError("prompt.mode must be deep or shallow");
  p.mode = mode == "deep" ? PromptMode::kDeep : PromptMode::kShallow;
  const std::string depth = c.get_string("prompt.depth");
  if (depth == "all") {
    p.depth = p.mode == PromptMode::kDeep ? m.encoder.visual_layers : 1;
  } else {
    p.depth = c.get_int("prompt.depth");
  }
  const std::string init = c.get_string("prompt.init");
  if (init != "random" && init != "zero") throw ConfigError("prompt.init must be random or zero");
  p.init = init == "zero" ? PromptInit::kZero : PromptInit::kRandom;
  p.seed = c.get_u64("prompt.seed");
  p.regions = c.get_int("regions.K");
  p.region_tokens = c.get_bool("regions.enabled");
  p.global_sees_local = c.get_bool("regions.global_sees_local");

  auto& f = m.fusion;
  const std::string kind = c.get_string("fusion");
  if (kind != "mmformer" && kind != "mlp") throw ConfigError("fusion must be mmformer or mlp");
  f.kind = kind == "mlp" ? FusionKind::kMlp : FusionKind::kMMFormer;
  f.layers = c.get_int("fusion.layers");
  f.heads = c.get_int("fusion.heads");
  f.temperature = c.get_double("fusion.temperature");
  const std::string agg = c.get_string("fusion.aggregate");
  if (agg != "max" && agg != "mean") throw ConfigError("fusion.aggregate must be max or mean");
  f.aggregate = agg == "mean" ? RegionAggregate::kMean : RegionAggregate::kMax;
  const std::string phi = c.get_string("fusion.phi_init");
  if (phi != "random" && phi != "identity") throw ConfigError("fusion.phi_init must be random or identity");
  f.phi_init = phi == "identity" ? PhiInit::kIdentity : PhiInit::kRandom;
  f.seed = c.get_u64("fusion.seed");
  f.head_layers = c.get_int("head.layers");
  m.sentence_template = c.get_string("attributes.template");

  if (f.kind == FusionKind::kMMFormer && (f.layers < 1 || f.layers > 4)) {
    throw ConfigError("fusion.layers must be in [1, 4]");
  }
  if (!(f.temperature > 0)) throw ConfigError("fusion.temperature must be > 0");
  if (f.head_layers < 1) throw ConfigError("head.layers must be at least 1");
  if (p.region_tokens && (p.regions < 1 || p.regions > m.encoder.grid())) {
    throw ConfigError("regions.K must be in [1, " + std::to_string(m.encoder.grid()) + "]");
  }
  if (p.mode == PromptMode::kShallow && p.depth != 1) throw ConfigError("shallow prompts need prompt.depth 1");
  if (p.depth < 1 || p.depth > m.encoder.visual_layers) {
    throw ConfigError("prompt.depth must be in [1, " + std::to_string(m.encoder.visual_layers) + "]");
  }
  if (p.visual_global < 0 || p.per_region < 0 || p.textual < 0) {
    throw ConfigError("prompt counts must be non-negative");
  }
  return m;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (!(lr_head > 0) || !(lr_prompt > 0)) throw ConfigError("learning rates must be > 0");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs must be in [0, epochs)");
  }
  if (!(warmup_start_ratio > 0 && warmup_start_ratio <= 1)) {
    throw ConfigError("train.warmup_start_ratio must be in (0, 1]");
  }
  if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(alpha >= 0)) throw ConfigError("train.alpha must be >= 0");
  if (!(grad_clip > 0)) throw ConfigError("train.grad_clip must be > 0");
  if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("train.val_fraction must be in [0, 1)");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("eval.threshold must be in (0, 1)");
  if (crop_margin < 0) throw ConfigError("augment.crop_margin must be >= 0");
  if (flip_probability < 0 || flip_probability > 1) {
    throw ConfigError("augment.flip_probability must be in [0, 1]");
  }
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
}

TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.epochs = c.get_int("train.epochs");
  t.lr_head = c.get_double("train.lr_head");
  t.lr_prompt = c.get_double("train.lr_prompt");
  t.momentum = c.get_double("train.momentum");
  t.warmup_epochs = c.get_int("train.warmup_epochs");
  t.warmup_start_ratio = c.get_double("train.warmup_start_ratio");
  t.weight_decay = c.get_double("train.weight_decay");
  t.batch_size = c.get_int("train.batch_size");
  t.alpha = c.get_double("train.alpha");
  t.grad_clip = c.get_double("train.grad_clip");
  t.val_fraction = c.get_double("train.val_fraction");
  t.seed = c.get_u64("train.seed");
  t.max_steps = c.get_int64("train.max_steps");
  t.augment = c.get_bool("augment.enabled");
  t.crop_margin = c.get_int("augment.crop_margin");
  t.flip_probability = c.get_double("augment.flip_probability");
  t.threshold = c.get_double("eval.threshold");
  t.validate();
  return t;
}

}  // namespace promptpar
