#include "promptpar/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace promptpar {

Parameter& ParameterStore::add(ParamSpec spec, ad::Matrix init) {
  if (index_.count(spec.name)) throw std::logic_error("duplicate parameter " + spec.name);
  if (init.rows() != spec.rows || init.cols() != spec.cols) {
    throw std::logic_error("parameter " + spec.name + " initialized with wrong shape");
  }
  index_[spec.name] = params_.size();
  const bool trainable = spec.trainable;
  params_.push_back(Parameter{std::move(spec), ad::Var(std::move(init), trainable)});
  return params_.back();
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return params_[it->second];
}

std::vector<ParamSpec> ParameterStore::specs() const {
  std::vector<ParamSpec> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.spec);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

// splitmix64
Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  have_spare_ = true;
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  return next_u64() % n;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  Rng r(a * 0x9E3779B97F4A7C15ULL ^ (b + 0x632BE59BD9B4E019ULL));
  return r.next_u64();
}

ad::Matrix random_normal(Rng& rng, std::int64_t rows, std::int64_t cols, double stddev) {
  ad::Matrix m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  return m;
}

ad::Matrix random_uniform(Rng& rng, std::int64_t rows, std::int64_t cols, double bound) {
  ad::Matrix m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace promptpar
