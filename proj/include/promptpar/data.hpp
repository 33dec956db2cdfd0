#pragma once

#include "promptpar/attributes.hpp"
#include "promptpar/image.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace promptpar {

struct Sample {
  std::string image_ref;       // file name relative to the images root
  std::optional<Image> pixels;  // embedded raster, when already in memory
  std::vector<std::uint8_t> labels;
  std::string identity;  // empty when unknown
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<VocabularyEntry> vocabulary;
  std::string images_root;

  std::size_t num_attributes() const { return vocabulary.size(); }
  LabelMatrix labels() const;
  LabelMatrix labels(const std::vector<int>& rows) const;
  Image image(std::size_t index) const;  // embedded pixels or read from disk
};

// Centers the image on a black square of side max(H, W), then bilinearly
// resamples to target × target.
Image pad_and_resize(const Image& image, int target = 224);
Image resize_bilinear(const Image& image, int width, int height);
Image flip_horizontal(const Image& image);

struct AugmentOptions {
  bool training = true;
  int crop_margin = 8;
  double flip_probability = 0.5;
};

// Pad-and-crop by up to `crop_margin` pixels, then maybe flip. Identity in
// evaluation mode.
Image augment(const Image& image, std::uint64_t seed, const AugmentOptions& options = {});

enum class SplitMode { kStandard, kZeroShot };

struct SplitSpec {
  SplitMode mode = SplitMode::kStandard;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::uint64_t seed = 0;
};

// `ratios` holds {train, test} or {train, val, test} fractions.
SplitSpec standard_split(std::size_t count, const std::vector<double>& ratios, std::uint64_t seed);
// Partitions identities rather than samples; every sample must have one.
SplitSpec zero_shot_split(const std::vector<Sample>& samples, const std::vector<double>& ratios,
                          std::uint64_t seed);

std::string format_split(const SplitSpec& split);
SplitSpec parse_split(const std::string& text);

struct SynthConfig {
  int samples = 1000;
  int attributes = 6;
  int image_size = 32;
  std::uint64_t seed = 1;
  int identities = 0;  // 0: one identity per sample
  std::map<int, double> skew;  // attribute index -> positive rate (default 0.5)
};

// Fixed schema of pixel-decidable attributes, in generation order.
std::vector<VocabularyEntry> synthetic_schema();
Dataset generate_synthetic(const SynthConfig& config);

// Per-channel levels used by the synthetic generator.
struct SynthLevels {
  static constexpr int kLow = 30;
  static constexpr int kHigh = 170;
  static constexpr int kBrightBoost = 60;
  static constexpr int kNoise = 10;
  static constexpr int kBorder = 2;
};

struct IngestIssue {
  std::size_t line = 0;
  std::string message;
};

struct LoadResult {
  Dataset dataset;
  std::vector<IngestIssue> errors;
  std::vector<IngestIssue> warnings;
};

// Annotation lines: image_name<TAB>identity<TAB>bit-string. With fail_fast the
// first error throws DataError; otherwise bad rows are skipped and reported.
LoadResult load_dataset(const std::string& annotation_path, const std::string& images_root,
                        std::size_t num_attributes, bool fail_fast = true);
LoadResult parse_annotations(const std::string& text, const std::string& images_root,
                             std::size_t num_attributes, bool fail_fast = true,
                             bool check_images = true);
std::string format_annotations(const Dataset& dataset);

// Common public-benchmark shape: {"attr_name": [...], "image_name": [...],
// "label": [[...]], "identity": [...]?, "partition": {"train": [...], ...}?}.
struct BenchmarkData {
  Dataset dataset;
  std::optional<SplitSpec> split;
};
BenchmarkData load_benchmark_json(const std::string& path, const std::string& images_root);

// Reads a directory laid out by write_dataset.
LoadResult load_dataset_directory(const std::string& directory, bool fail_fast = true);

// Writes images/, annotations.tsv, vocabulary.tsv and manifest.json.
void write_dataset(const std::string& directory, const Dataset& dataset,
                   const std::string& manifest_json);

}  // namespace promptpar
