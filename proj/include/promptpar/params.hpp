#pragma once

#include "promptpar/autodiff.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace promptpar {

// Parameter groups. Only kPrompts and kHead may ever be trainable.
inline constexpr const char* kGroupVisual = "backbone.visual";
inline constexpr const char* kGroupText = "backbone.text";
inline constexpr const char* kGroupFusion = "mmformer";
inline constexpr const char* kGroupPrompts = "prompts";
inline constexpr const char* kGroupHead = "head";

struct ParamSpec {
  std::string name;
  std::string group;
  bool trainable = false;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  std::int64_t count() const { return rows * cols; }
};

struct Parameter {
  ParamSpec spec;
  ad::Var var;
};

// Owns every named tensor of an assembled model, in insertion order.
class ParameterStore {
 public:
  Parameter& add(ParamSpec spec, ad::Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::vector<ParamSpec> specs() const;

  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Deterministic generator used for every random initialization. Independent of
// the standard library's distribution implementations so that a seed means the
// same numbers on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double uniform();                    // [0, 1)
  double uniform(double lo, double hi);
  double normal();                     // standard normal (Box-Muller)
  std::uint64_t below(std::uint64_t n);  // [0, n)

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

ad::Matrix random_normal(Rng& rng, std::int64_t rows, std::int64_t cols, double stddev);
ad::Matrix random_uniform(Rng& rng, std::int64_t rows, std::int64_t cols, double bound);

}  // namespace promptpar
