#pragma once

#include "promptpar/config.hpp"
#include "promptpar/data.hpp"
#include "promptpar/trainer.hpp"

#include <memory>
#include <string>
#include <vector>

namespace testing {

// Synthetic dataset, split and a stub model built from `overrides`.
struct Run {
  promptpar::Dataset data;
  promptpar::SplitSpec split;
  promptpar::Config config;
  std::unique_ptr<promptpar::PromptParModel> model;
};

inline Run make_run(int samples, int attributes, const std::vector<std::string>& overrides,
                    std::uint64_t data_seed = 1) {
  using namespace promptpar;
  Run run;
  SynthConfig sc;
  sc.samples = samples;
  sc.attributes = attributes;
  sc.seed = data_seed;
  run.data = generate_synthetic(sc);
  run.split = standard_split(run.data.samples.size(), {0.8, 0.2}, data_seed);
  for (const auto& o : overrides) run.config.set_assignment(o);
  const AttributeSet attrs = load_attribute_set(run.data.vocabulary, run.data.labels(run.split.train),
                                                run.config.get_string("attributes.template"));
  run.model = build_model(run.config, attrs);
  return run;
}

// Small prompt counts keep the unit tests quick.
inline std::vector<std::string> small_prompts(std::vector<std::string> extra = {}) {
  std::vector<std::string> out{"prompt.visual_global=4", "prompt.per_region=2", "prompt.textual=2"};
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

}  // namespace testing
