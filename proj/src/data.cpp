#include "promptpar/data.hpp"

#include "promptpar/errors.hpp"
#include "promptpar/params.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace promptpar {

LabelMatrix Dataset::labels() const {
  std::vector<int> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  return labels(all);
}

LabelMatrix Dataset::labels(const std::vector<int>& rows) const {
  LabelMatrix y(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(num_attributes()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = samples.at(static_cast<std::size_t>(rows[i]));
    if (s.labels.size() != num_attributes()) {
      throw DataError("sample " + s.image_ref + " has " + std::to_string(s.labels.size()) +
                      " labels, expected " + std::to_string(num_attributes()));
    }
    for (std::size_t j = 0; j < s.labels.size(); ++j) {
      y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.labels[j];
    }
  }
  return y;
}

Image Dataset::image(std::size_t index) const {
  const auto& s = samples.at(index);
  if (s.pixels) return *s.pixels;
  return read_image((fs::path(images_root) / s.image_ref).string());
}

Image resize_bilinear(const Image& src, int width, int height) {
  if (src.empty() || width <= 0 || height <= 0) throw DataError("resize: empty image");
  if (src.width == width && src.height == height) return src;
  Image out(width, height, src.channels);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        const double v = top * (1 - wy) + bottom * wy;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Image pad_and_resize(const Image& image, int target) {
  if (image.empty()) throw DataError("pad_and_resize: image has zero width or height");
  if (target <= 0) throw DataError("pad_and_resize: target must be positive");
  if (image.width == image.height) return resize_bilinear(image, target, target);
  const int side = std::max(image.width, image.height);
  Image canvas(side, side, image.channels, 0);
  const int ox = (side - image.width) / 2;
  const int oy = (side - image.height) / 2;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) canvas.at(y + oy, x + ox, c) = image.at(y, x, c);
    }
  }
  return resize_bilinear(canvas, target, target);
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height, image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
      }
    }
  }
  return out;
}

Image augment(const Image& image, std::uint64_t seed, const AugmentOptions& options) {
  if (!options.training) return image;
  Rng rng(seed);
  const int m = std::max(0, options.crop_margin);
  Image out = image;
  if (m > 0) {
    const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * m + 1)));
    const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * m + 1)));
    // Crop window of the original size from the image padded by m on each side.
    Image cropped(image.width, image.height, image.channels, 0);
    for (int y = 0; y < image.height; ++y) {
      const int sy = y + dy - m;
      if (sy < 0 || sy >= image.height) continue;
      for (int x = 0; x < image.width; ++x) {
        const int sx = x + dx - m;
        if (sx < 0 || sx >= image.width) continue;
        for (int c = 0; c < image.channels; ++c) cropped.at(y, x, c) = image.at(sy, sx, c);
      }
    }
    out = std::move(cropped);
  }
  if (rng.uniform() < options.flip_probability) out = flip_horizontal(out);
  return out;
}

namespace {

std::vector<std::size_t> boundaries(std::size_t count, const std::vector<double>& ratios) {
  if (ratios.size() != 2 && ratios.size() != 3) {
    throw SplitError("split ratios must list train/test or train/val/test fractions");
  }
  double total = 0;
  for (double r : ratios) {
    if (!(r >= 0)) throw SplitError("split ratios must be non-negative");
    total += r;
  }
  if (!(total > 0)) throw SplitError("split ratios sum to zero");
  std::vector<std::size_t> out{0};
  double cum = 0;
  for (double r : ratios) {
    cum += r / total;
    out.push_back(static_cast<std::size_t>(std::llround(cum * static_cast<double>(count))));
  }
  out.back() = count;
  return out;
}

template <typename T>
void shuffle(std::vector<T>& v, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5EED));
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

void assign(SplitSpec& spec, const std::vector<double>& ratios, std::size_t part,
            std::vector<int> indices) {
  std::sort(indices.begin(), indices.end());
  if (ratios.size() == 2) {
    (part == 0 ? spec.train : spec.test) = std::move(indices);
  } else {
    (part == 0 ? spec.train : part == 1 ? spec.val : spec.test) = std::move(indices);
  }
}

}  // namespace

SplitSpec standard_split(std::size_t count, const std::vector<double>& ratios, std::uint64_t seed) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  shuffle(idx, seed);
  const auto b = boundaries(count, ratios);
  SplitSpec spec;
  spec.mode = SplitMode::kStandard;
  spec.seed = seed;
  for (std::size_t part = 0; part + 1 < b.size(); ++part) {
    assign(spec, ratios, part,
           std::vector<int>(idx.begin() + static_cast<std::ptrdiff_t>(b[part]),
                            idx.begin() + static_cast<std::ptrdiff_t>(b[part + 1])));
  }
  return spec;
}

SplitSpec zero_shot_split(const std::vector<Sample>& samples, const std::vector<double>& ratios,
                          std::uint64_t seed) {
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].identity.empty()) {
      missing.push_back("#" + std::to_string(i) + " (" + samples[i].image_ref + ")");
    }
  }
  if (!missing.empty()) {
    std::string msg = "zero-shot split: samples without identity:";
    for (const auto& m : missing) msg += " " + m;
    throw SplitError(msg);
  }
  const std::set<std::string> unique_ids = [&] {
    std::set<std::string> s;
    for (const auto& sample : samples) s.insert(sample.identity);
    return s;
  }();
  std::vector<std::string> ids(unique_ids.begin(), unique_ids.end());
  shuffle(ids, seed);
  const auto b = boundaries(ids.size(), ratios);
  std::map<std::string, std::size_t> part_of;
  for (std::size_t part = 0; part + 1 < b.size(); ++part) {
    for (std::size_t k = b[part]; k < b[part + 1]; ++k) part_of[ids[k]] = part;
  }
  std::vector<std::vector<int>> parts(ratios.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    parts[part_of.at(samples[i].identity)].push_back(static_cast<int>(i));
  }
  SplitSpec spec;
  spec.mode = SplitMode::kZeroShot;
  spec.seed = seed;
  for (std::size_t part = 0; part < parts.size(); ++part) assign(spec, ratios, part, parts[part]);
  return spec;
}

std::string format_split(const SplitSpec& split) {
  nlohmann::json j;
  j["mode"] = split.mode == SplitMode::kZeroShot ? "zero_shot" : "standard";
  j["seed"] = split.seed;
  j["train"] = split.train;
  j["val"] = split.val;
  j["test"] = split.test;
  return j.dump(2);
}

SplitSpec parse_split(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SplitSpec s;
    s.mode = j.at("mode").get<std::string>() == "zero_shot" ? SplitMode::kZeroShot : SplitMode::kStandard;
    s.seed = j.value("seed", std::uint64_t{0});
    s.train = j.at("train").get<std::vector<int>>();
    s.val = j.value("val", std::vector<int>{});
    s.test = j.at("test").get<std::vector<int>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SplitError(std::string("malformed split file: ") + e.what());
  }
}

std::vector<VocabularyEntry> synthetic_schema() {
  return {
      {"UpperRed", {"upper body color", "red"}, "upper"},
      {"LowerBlue", {"lower body color", "blue"}, "lower"},
      {"UpperGreen", {"upper body color", "green"}, "upper"},
      {"LowerRed", {"lower body color", "red"}, "lower"},
      {"Border", {"frame", "present"}, "global"},
      {"Bright", {"lighting", "bright"}, "global"},
      {"UpperBlue", {"upper body color", "blue"}, "upper"},
      {"LowerGreen", {"lower body color", "green"}, "lower"},
  };
}

Dataset generate_synthetic(const SynthConfig& config) {
  if (config.attributes < 1 || config.attributes > 8) {
    throw DataError("synthetic generator supports 1..8 attributes");
  }
  if (config.samples < 1) throw DataError("synthetic generator needs at least one sample");
  if (config.image_size < 4 * SynthLevels::kBorder) throw DataError("synthetic image too small");
  const auto schema = synthetic_schema();
  Dataset ds;
  ds.vocabulary.assign(schema.begin(), schema.begin() + config.attributes);

  // Channel driven by each colour attribute: (half, channel).
  const int half_of[8] = {0, 1, 0, 1, -1, -1, 0, 1};
  const int channel_of[8] = {0, 2, 1, 0, -1, -1, 2, 1};

  const int S = config.image_size;
  for (int i = 0; i < config.samples; ++i) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(i)));
    Sample s;
    s.labels.resize(static_cast<std::size_t>(config.attributes));
    for (int j = 0; j < config.attributes; ++j) {
      const auto it = config.skew.find(j);
      const double rate = it == config.skew.end() ? 0.5 : it->second;
      s.labels[j] = rng.uniform() < rate ? 1 : 0;
    }
    bool high[2][3] = {};
    for (int j = 0; j < config.attributes; ++j) {
      if (half_of[j] >= 0) high[half_of[j]][channel_of[j]] = s.labels[j] != 0;
    }
    const bool border = config.attributes > 4 && s.labels[4];
    const int boost = config.attributes > 5 && s.labels[5] ? SynthLevels::kBrightBoost : 0;

    Image img(S, S, 3);
    for (int y = 0; y < S; ++y) {
      const int half = y < S / 2 ? 0 : 1;
      for (int x = 0; x < S; ++x) {
        const bool ring = x < SynthLevels::kBorder || y < SynthLevels::kBorder ||
                          x >= S - SynthLevels::kBorder || y >= S - SynthLevels::kBorder;
        for (int c = 0; c < 3; ++c) {
          if (ring && border) {
            img.at(y, x, c) = 255;
            continue;
          }
          const int level = (high[half][c] ? SynthLevels::kHigh : SynthLevels::kLow) + boost;
          const int noise = static_cast<int>(rng.below(2 * SynthLevels::kNoise + 1)) - SynthLevels::kNoise;
          img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(level + noise, 0, 254));
        }
      }
    }
    std::ostringstream name;
    name << "img_" << std::setw(6) << std::setfill('0') << i << ".png";
    s.image_ref = name.str();
    const int ids = config.identities > 0 ? config.identities : config.samples;
    s.identity = "id" + std::to_string(i % ids);
    s.pixels = std::move(img);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

LoadResult parse_annotations(const std::string& text, const std::string& images_root,
                             std::size_t num_attributes, bool fail_fast, bool check_images) {
  LoadResult result;
  result.dataset.images_root = images_root;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> first_seen;
  auto fail = [&](std::size_t l, std::string msg) {
    if (fail_fast) throw DataError("annotation line " + std::to_string(l) + ": " + msg);
    result.errors.push_back({l, std::move(msg)});
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      fail(lineno, "expected 3 tab-separated fields, found " + std::to_string(fields.size()));
      continue;
    }
    const std::string& name = fields[0];
    const std::string& bits = fields[2];
    if (name.empty()) {
      fail(lineno, "empty image name");
      continue;
    }
    if (bits.size() != num_attributes) {
      fail(lineno, "row '" + name + "' has " + std::to_string(bits.size()) +
                       " labels, expected " + std::to_string(num_attributes));
      continue;
    }
    if (bits.find_first_not_of("01") != std::string::npos) {
      fail(lineno, "row '" + name + "' has a label that is not 0 or 1");
      continue;
    }
    if (check_images && !fs::exists(fs::path(images_root) / name)) {
      fail(lineno, "missing image " + (fs::path(images_root) / name).string());
      continue;
    }
    if (auto [it, inserted] = first_seen.emplace(name, lineno); !inserted) {
      result.warnings.push_back(
          {lineno, "duplicate image name '" + name + "' (first on line " +
                       std::to_string(it->second) + "); both kept"});
    }
    Sample s;
    s.image_ref = name;
    s.identity = fields[1];
    for (char b : bits) s.labels.push_back(b == '1' ? 1 : 0);
    result.dataset.samples.push_back(std::move(s));
  }
  return result;
}

LoadResult load_dataset(const std::string& annotation_path, const std::string& images_root,
                        std::size_t num_attributes, bool fail_fast) {
  std::ifstream in(annotation_path);
  if (!in) throw DataError("cannot read annotation file " + annotation_path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str(), images_root, num_attributes, fail_fast, true);
}

std::string format_annotations(const Dataset& dataset) {
  std::string out;
  for (const auto& s : dataset.samples) {
    out += s.image_ref + '\t' + s.identity + '\t';
    for (auto b : s.labels) out += b ? '1' : '0';
    out += '\n';
  }
  return out;
}

BenchmarkData load_benchmark_json(const std::string& path, const std::string& images_root) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read benchmark annotation " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  BenchmarkData out;
  auto& ds = out.dataset;
  ds.images_root = images_root;
  try {
    for (const auto& name : j.at("attr_name")) {
      const auto label = name.get<std::string>();
      ds.vocabulary.push_back({label, {"action", label}, std::nullopt});
    }
    if (j.contains("attr_schema")) {
      // Optional [[subject, value], ...] aligned with attr_name.
      const auto& schema = j.at("attr_schema");
      for (std::size_t k = 0; k < schema.size() && k < ds.vocabulary.size(); ++k) {
        ds.vocabulary[k].mapping = {schema[k].at(0).get<std::string>(), schema[k].at(1).get<std::string>()};
      }
    }
    const auto& names = j.at("image_name");
    const auto& labels = j.at("label");
    if (names.size() != labels.size()) {
      throw DataError(path + ": image_name and label lengths differ");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      Sample s;
      s.image_ref = names[i].get<std::string>();
      if (j.contains("identity")) s.identity = j.at("identity").at(i).get<std::string>();
      if (labels[i].size() != ds.vocabulary.size()) {
        throw DataError(path + ": label row " + std::to_string(i) + " (" + s.image_ref + ") has " +
                        std::to_string(labels[i].size()) + " values, expected " +
                        std::to_string(ds.vocabulary.size()));
      }
      for (const auto& v : labels[i]) s.labels.push_back(v.get<int>() != 0 ? 1 : 0);
      ds.samples.push_back(std::move(s));
    }
    if (j.contains("partition")) {
      SplitSpec split;
      const auto& p = j.at("partition");
      split.train = p.value("train", std::vector<int>{});
      split.val = p.value("val", std::vector<int>{});
      split.test = p.value("test", std::vector<int>{});
      out.split = split;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return out;
}

LoadResult load_dataset_directory(const std::string& directory, bool fail_fast) {
  const fs::path root(directory);
  auto vocabulary = read_vocabulary_file((root / "vocabulary.tsv").string());
  LoadResult r = load_dataset((root / "annotations.tsv").string(), (root / "images").string(),
                              vocabulary.size(), fail_fast);
  r.dataset.vocabulary = std::move(vocabulary);
  return r;
}

void write_dataset(const std::string& directory, const Dataset& dataset,
                   const std::string& manifest_json) {
  const fs::path root(directory);
  fs::create_directories(root / "images");
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    write_image((root / "images" / dataset.samples[i].image_ref).string(), dataset.image(i));
  }
  auto write_text = [&root](const char* name, const std::string& text) {
    std::ofstream out(root / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (root / name).string());
    out << text;
  };
  write_text("annotations.tsv", format_annotations(dataset));
  write_text("vocabulary.tsv", format_vocabulary(dataset.vocabulary));
  write_text("manifest.json", manifest_json);
}

}  // namespace promptpar
