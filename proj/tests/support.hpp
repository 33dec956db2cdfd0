#pragma once

#include "promptpar/autodiff.hpp"
#include "promptpar/params.hpp"

#include <filesystem>
#include <functional>
#include <string>

namespace testing {

using promptpar::ad::Matrix;
using promptpar::ad::Var;

// Central difference of a scalar function at one coordinate of `x`.
inline double central_difference(const std::function<double()>& f, Matrix& x, Eigen::Index r,
                                 Eigen::Index c, double h = 1e-6) {
  const double saved = x(r, c);
  x(r, c) = saved + h;
  const double up = f();
  x(r, c) = saved - h;
  const double down = f();
  x(r, c) = saved;
  return (up - down) / (2 * h);
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Compares every gradient coordinate of `params` against central differences of
// `loss`, a closure that rebuilds the graph from current parameter values.
inline double max_gradient_error(const std::function<Var()>& loss, std::vector<Var>& params,
                                 double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  promptpar::ad::backward(loss());
  std::vector<Matrix> grads;
  for (auto& p : params) grads.push_back(p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols()));
  double worst = 0;
  const auto f = [&] { return loss().scalar(); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& x = params[i].mutable_value();
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double fd = central_difference(f, x, r, c, h);
        const double err = std::abs(fd - grads[i](r, c)) / std::max({std::abs(fd), std::abs(grads[i](r, c)), 1e-6});
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

inline Var random_var(promptpar::Rng& rng, Eigen::Index r, Eigen::Index c, bool grad = true, double s = 1.0) {
  return Var(promptpar::random_normal(rng, r, c, s), grad);
}

// Fresh empty directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("promptpar_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path_.string() : (path_ / child).string();
  }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
