#include "promptpar/config.hpp"
#include "promptpar/data.hpp"
#include "promptpar/errors.hpp"
#include "promptpar/prompts.hpp"
#include "promptpar/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
using namespace promptpar;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kAudit = 3, kData = 4 };

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "config file (key = value)");
  cmd->add_option("-s,--set", c.sets, "override, key=value (repeatable)");
}

Config resolve(const Common& c) {
  Config cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  cfg.apply_env();
  for (const auto& s : c.sets) cfg.set_assignment(s);
  return cfg;
}

struct DataArgs {
  std::string dir;
  std::string benchmark;
  std::string images;
  std::string split_file;
  std::string part = "test";
};

void add_data_options(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--data", d.dir, "dataset directory (vocabulary.tsv, annotations.tsv, images/)");
  cmd->add_option("--benchmark", d.benchmark, "benchmark annotation JSON");
  cmd->add_option("--images", d.images, "images root for --benchmark");
  cmd->add_option("--split", d.split_file, "split file written by `split`");
}

struct LoadedData {
  Dataset dataset;
  std::optional<SplitSpec> split;
};

LoadedData load_data(const DataArgs& d, bool fail_fast) {
  LoadedData out;
  if (!d.benchmark.empty()) {
    auto b = load_benchmark_json(d.benchmark, d.images);
    out.dataset = std::move(b.dataset);
    out.split = b.split;
  } else if (!d.dir.empty()) {
    auto r = load_dataset_directory(d.dir, fail_fast);
    for (const auto& w : r.warnings) std::cerr << "warning: line " << w.line << ": " << w.message << "\n";
    for (const auto& e : r.errors) std::cerr << "error: line " << e.line << ": " << e.message << "\n";
    if (!r.errors.empty()) {
      throw DataError(std::to_string(r.errors.size()) + " annotation rows rejected");
    }
    out.dataset = std::move(r.dataset);
  } else {
    throw ConfigError("no dataset given (use --data or --benchmark)");
  }
  if (!d.split_file.empty()) {
    std::ifstream in(d.split_file);
    if (!in) throw DataError("cannot read split file " + d.split_file);
    std::stringstream ss;
    ss << in.rdbuf();
    out.split = parse_split(ss.str());
  }
  if (out.dataset.samples.empty()) throw DataError("dataset is empty");
  return out;
}

std::vector<int> all_rows(const Dataset& d) {
  std::vector<int> rows(d.samples.size());
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

std::vector<int> part_rows(const LoadedData& data, const std::string& part) {
  if (!data.split) return all_rows(data.dataset);
  if (part == "train") return data.split->train;
  if (part == "val") return data.split->val;
  if (part == "test") return data.split->test;
  if (part == "all") return all_rows(data.dataset);
  throw ConfigError("unknown split part '" + part + "'");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad ratio '" + item + "'");
    }
  }
  return out;
}

void print_audit(const AuditReport& a) {
  std::cout << "trainable=" << a.trainable << "\ntotal=" << a.total << "\nratio_percent=" << 100.0 * a.ratio
            << "\n";
  for (const auto& [g, c] : a.by_group) {
    std::cout << "group." << g << ".trainable=" << c.trainable << "\ngroup." << g << ".total=" << c.total
              << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pedestrian attribute recognition with region-aware prompt tuning"};
  app.require_subcommand(1);

  Common train_c, eval_c, audit_c, split_c;
  DataArgs train_d, eval_d, split_d;

  auto* train_cmd = app.add_subcommand("train", "train prompts and head on a dataset");
  add_config_options(train_cmd, train_c);
  add_data_options(train_cmd, train_d);
  std::string out_dir = "run";
  train_cmd->add_option("-o,--out", out_dir, "output directory for checkpoint and manifest");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_data_options(eval_cmd, eval_d);
  std::string eval_ckpt;
  bool eval_json = false;
  double eval_threshold = -1;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--part", eval_d.part, "split part: train | val | test | all");
  eval_cmd->add_option("--threshold", eval_threshold, "decision threshold (default: from checkpoint)");
  eval_cmd->add_flag("--json", eval_json);

  auto* predict_cmd = app.add_subcommand("predict", "predict attributes for images");
  std::string pred_ckpt;
  std::vector<std::string> pred_inputs;
  bool pred_json = false;
  double pred_threshold = -1;
  predict_cmd->add_option("--checkpoint", pred_ckpt)->required();
  predict_cmd->add_option("images", pred_inputs, "image paths")->required();
  predict_cmd->add_option("--threshold", pred_threshold);
  predict_cmd->add_flag("--json", pred_json);

  auto* split_cmd = app.add_subcommand("split", "write a train/val/test split");
  add_data_options(split_cmd, split_d);
  std::string split_mode = "standard";
  std::string split_ratios = "0.8,0.1,0.1";
  std::uint64_t split_seed = 0;
  std::string split_out = "split.json";
  split_cmd->add_option("--mode", split_mode, "standard | zero-shot");
  split_cmd->add_option("--ratios", split_ratios, "train,test or train,val,test fractions");
  split_cmd->add_option("--seed", split_seed);
  split_cmd->add_option("-o,--out", split_out);

  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic benchmark");
  SynthConfig synth;
  std::string synth_out = "synthetic";
  std::vector<std::string> synth_skew;
  synth_cmd->add_option("--samples", synth.samples);
  synth_cmd->add_option("--attributes", synth.attributes, "1..8");
  synth_cmd->add_option("--size", synth.image_size);
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--identities", synth.identities, "0: one per sample");
  synth_cmd->add_option("--skew", synth_skew, "index=rate (repeatable)");
  synth_cmd->add_option("-o,--out", synth_out);

  auto* audit_cmd = app.add_subcommand("audit", "count trainable parameters from shapes");
  add_config_options(audit_cmd, audit_c);
  int audit_attributes = 51;
  std::vector<std::string> audit_unfreeze;
  audit_cmd->add_option("--attributes", audit_attributes, "number of attributes");
  audit_cmd->add_option("--unfreeze", audit_unfreeze, "mark a parameter group trainable");

  auto* attn_cmd = app.add_subcommand("attn", "export attention heat maps");
  std::string attn_ckpt, attn_image, attn_which = "prompt", attn_out = "attention";
  attn_cmd->add_option("--checkpoint", attn_ckpt)->required();
  attn_cmd->add_option("--image", attn_image)->required();
  attn_cmd->add_option("--which", attn_which, "prompt | attribute");
  attn_cmd->add_option("-o,--out", attn_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) {
      Config cfg = resolve(train_c);
      const TrainConfig tc = train_config_from(cfg);
      const LoadedData data = load_data(train_d, cfg.get_bool("data.fail_fast"));
      std::vector<int> train_rows = data.split ? data.split->train : all_rows(data.dataset);
      std::vector<int> val_rows = data.split ? data.split->val : std::vector<int>{};
      const AttributeSet attrs = load_attribute_set(data.dataset.vocabulary, data.dataset.labels(train_rows),
                                                    cfg.get_string("attributes.template"));
      auto model = build_model(cfg, attrs);
      fs::create_directories(out_dir);
      TrainOptions opts;
      opts.manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
      opts.checkpoint_path = (fs::path(out_dir) / "checkpoint.ppar").string();
      opts.resolved_config = cfg.resolved_text();
      opts.resolved_config_json = cfg.resolved_json();
      opts.on_epoch = [](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << " loss=" << r.loss << " cls=" << r.cls_loss << " gl=" << r.gl_loss;
        if (r.validation) std::cout << " val_mA=" << r.validation->mA << " val_f1=" << r.validation->f1;
        std::cout << std::endl;
      };
      const TrainResult res = train(*model, data.dataset, train_rows, val_rows, tc, opts);
      std::cout << "best_epoch=" << res.best_epoch << " checkpoint=" << opts.checkpoint_path
                << " digest=" << res.checkpoint_digest << "\n";
      return kOk;
    }
    if (*eval_cmd) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      Config cfg;
      cfg.load_text(ck.config_text, "checkpoint");
      const double threshold = eval_threshold > 0 ? eval_threshold : cfg.get_double("eval.threshold");
      const LoadedData data = load_data(eval_d, cfg.get_bool("data.fail_fast"));
      const auto rows = part_rows(data, eval_d.part);
      const MetricReport r = evaluate(*ck.model, data.dataset, rows, threshold);
      std::cout << (eval_json ? metrics_to_json(r, ck.model->attributes().names()) + "\n"
                              : metrics_to_text(r, ck.model->attributes().names()));
      return kOk;
    }
    if (*predict_cmd) {
      Checkpoint ck = load_checkpoint(pred_ckpt);
      Config cfg;
      cfg.load_text(ck.config_text, "checkpoint");
      const double threshold = pred_threshold > 0 ? pred_threshold : cfg.get_double("eval.threshold");
      const auto items = predict(*ck.model, pred_inputs, threshold);
      std::cout << (pred_json ? predictions_to_json(items) + "\n" : predictions_to_text(items));
      for (const auto& it : items) {
        if (it.error) return kData;
      }
      return kOk;
    }
    if (*split_cmd) {
      const LoadedData data = load_data(split_d, true);
      const auto ratios = parse_ratios(split_ratios);
      SplitSpec s;
      if (split_mode == "zero-shot" || split_mode == "zero_shot") {
        s = zero_shot_split(data.dataset.samples, ratios, split_seed);
      } else if (split_mode == "standard") {
        s = standard_split(data.dataset.samples.size(), ratios, split_seed);
      } else {
        throw ConfigError("unknown split mode '" + split_mode + "'");
      }
      write_text(split_out, format_split(s) + "\n");
      std::cout << "train=" << s.train.size() << " val=" << s.val.size() << " test=" << s.test.size() << "\n";
      return kOk;
    }
    if (*synth_cmd) {
      for (const auto& kv : synth_skew) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--skew expects index=rate");
        synth.skew[std::stoi(kv.substr(0, eq))] = std::stod(kv.substr(eq + 1));
      }
      const Dataset ds = generate_synthetic(synth);
      nlohmann::json manifest{{"generator", "synthetic"},     {"samples", synth.samples},
                              {"attributes", synth.attributes}, {"image_size", synth.image_size},
                              {"seed", synth.seed},           {"identities", synth.identities}};
      nlohmann::json skew = nlohmann::json::object();
      for (const auto& [k, v] : synth.skew) skew[std::to_string(k)] = v;
      manifest["skew"] = skew;
      write_dataset(synth_out, ds, manifest.dump(2) + "\n");
      std::cout << "wrote " << ds.samples.size() << " samples to " << synth_out << "\n";
      return kOk;
    }
    if (*audit_cmd) {
      Config cfg = resolve(audit_c);
      auto specs = PromptParModel::describe(model_config_from(cfg), audit_attributes);
      for (auto& s : specs) {
        for (const auto& g : audit_unfreeze) {
          if (s.group == g) s.trainable = true;
        }
      }
      print_audit(trainable_parameter_audit(specs));
      return kOk;
    }
    if (*attn_cmd) {
      Checkpoint ck = load_checkpoint(attn_ckpt);
      if (attn_which != "prompt" && attn_which != "attribute") {
        throw ConfigError("--which must be prompt or attribute");
      }
      const auto kind = attn_which == "prompt" ? AttentionKind::kPrompt : AttentionKind::kAttribute;
      const auto maps = export_attention(*ck.model, read_image(attn_image), kind);
      const auto paths = write_attention_maps(maps, attn_out, ck.model->config().encoder.patch_size);
      for (const auto& p : paths) std::cout << p << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const AuditError& e) {
    std::cerr << "audit failure: " << e.what() << "\n";
    return kAudit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
