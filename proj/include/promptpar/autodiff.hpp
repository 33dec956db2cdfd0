#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// Every Var owns a shared node holding its value. Nodes created by an op keep
// their inputs alive and know how to push their gradient back into them.
// Gradients are only ever allocated on nodes that require them, so a frozen
// parameter's grad buffer stays empty for its whole lifetime.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace promptpar::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backprop;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() > 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const;

  bool valid() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Wraps a node produced by an op.
  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

// Seeds d(out)/d(out) = 1 and propagates through the recorded graph.
void backward(const Var& scalar_output);

// Attention probabilities captured by a forward pass, one matrix per head.
struct AttentionRecord {
  std::vector<Matrix> probs;
  Matrix head_mean() const;
};

Var constant(Matrix value);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row(const Var& a, const Var& row);  // broadcasts a 1×c row over a's rows

Var vstack(std::span<const Var> parts);
Var hstack(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var quick_gelu(const Var& x);
Var sigmoid(const Var& x);

// Scaled dot-product attention split across `heads` column groups. Keys with
// allow(q, k) == false receive exactly zero probability. A null mask means
// every key is visible.
Var attention(const Var& q, const Var& k, const Var& v, int heads, const BoolMatrix* allow,
              AttentionRecord* record = nullptr);

// Rows divided by max(||row||, eps).
Var normalize_rows(const Var& x, double eps = 1e-8);
Var elementwise_max(std::span<const Var> parts);
Var mean_of(std::span<const Var> parts);
Var sum(const Var& x);
Var mean_rows(const Var& x);

// out(0, j) = dot(z.row(j), w.row(j)); returns 1×N.
Var rowwise_dot(const Var& z, const Var& w);

// -(1/M) Σ_i Σ_j w_j (y log p + (1-y) log(1-p)), with p clamped to [eps, 1-eps].
Var binary_cross_entropy(const Var& p, const Matrix& y, const RowVector& weights, double normalizer,
                         double eps = 1e-7);

}  // namespace promptpar::ad
