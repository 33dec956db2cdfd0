#include "promptpar/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace promptpar::ad {

namespace {

Var make(Matrix value, std::vector<std::shared_ptr<Node>> inputs,
         std::function<void(const Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                    [](const auto& n) { return n->requires_grad; });
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backprop = std::move(backprop);
  }
  return Var::from_node(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("scalar(): value is not 1x1");
  return node_->value(0, 0);
}

void backward(const Var& out) {
  if (out.rows() != 1 || out.cols() != 1) {
    throw std::invalid_argument("backward: output must be a scalar");
  }
  if (!out.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(out.node().get(), 0);
  visited.insert(out.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  out.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() > 0) node->backprop(*node);
  }
}

Matrix AttentionRecord::head_mean() const {
  if (probs.empty()) return {};
  Matrix m = probs.front();
  for (std::size_t h = 1; h < probs.size(); ++h) m += probs[h];
  return m / static_cast<double>(probs.size());
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](const Node& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a.node(), b.node()}, [](const Node& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](const Node& self) {
    const auto& x = self.inputs[0];
    const auto& y = self.inputs[1];
    if (x->requires_grad) x->accumulate(self.grad.cwiseProduct(y->value));
    if (y->requires_grad) y->accumulate(self.grad.cwiseProduct(x->value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()},
              [s](const Node& self) { self.inputs[0]->accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make(a.value().array() + s, {a.node()},
              [](const Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                                std::to_string(b.rows()) + " differ");
  }
  return make(a.value() * b.value(), {a.node(), b.node()}, [](const Node& self) {
    const auto& x = self.inputs[0];
    const auto& y = self.inputs[1];
    if (x->requires_grad) x->accumulate(self.grad * y->value.transpose());
    if (y->requires_grad) y->accumulate(x->value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a.node()},
              [](const Node& self) { self.inputs[0]->accumulate(self.grad.transpose()); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: bias width " + std::to_string(row.cols()) +
                                " does not match " + std::to_string(a.cols()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a.node(), row.node()}, [](const Node& self) {
    self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(self.grad.colwise().sum());
  });
}

Var vstack(std::span<const Var> parts) {
  Eigen::Index rows = 0;
  Eigen::Index cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("vstack: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.rows() > 0) out.middleRows(r, p.rows()) = p.value();
    inputs.push_back(p.node());
    offsets.push_back(r);
    r += p.rows();
  }
  return make(std::move(out), std::move(inputs), [offsets](const Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (in->requires_grad && in->value.rows() > 0) {
        in->accumulate(self.grad.middleRows(offsets[i], in->value.rows()));
      }
    }
  });
}

Var hstack(std::span<const Var> parts) {
  Eigen::Index cols = 0;
  Eigen::Index rows = parts.empty() ? 0 : parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("hstack: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.cols() > 0) out.middleCols(c, p.cols()) = p.value();
    inputs.push_back(p.node());
    offsets.push_back(c);
    c += p.cols();
  }
  return make(std::move(out), std::move(inputs), [offsets](const Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (in->requires_grad && in->value.cols() > 0) {
        in->accumulate(self.grad.middleCols(offsets[i], in->value.cols()));
      }
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range exceeds " + std::to_string(a.rows()) + " rows");
  }
  return make(a.value().middleRows(start, count), {a.node()}, [start, count](const Node& self) {
    const auto& in = self.inputs[0];
    Matrix g = Matrix::Zero(in->value.rows(), in->value.cols());
    g.middleRows(start, count) = self.grad;
    in->accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range exceeds " + std::to_string(a.cols()) + " columns");
  }
  return make(a.value().middleCols(start, count), {a.node()}, [start, count](const Node& self) {
    const auto& in = self.inputs[0];
    Matrix g = Matrix::Zero(in->value.rows(), in->value.cols());
    g.middleCols(start, count) = self.grad;
    in->accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.cols() != d || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: affine width does not match input");
  }
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mean) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return make(std::move(out), {x.node(), gamma.node(), beta.node()},
              [xhat, inv_std](const Node& self) {
                const auto& xin = self.inputs[0];
                const auto& g = self.inputs[1];
                const auto& b = self.inputs[2];
                if (g->requires_grad) g->accumulate((self.grad.cwiseProduct(xhat)).colwise().sum());
                if (b->requires_grad) b->accumulate(self.grad.colwise().sum());
                if (!xin->requires_grad) return;
                const double d = static_cast<double>(xhat.cols());
                Matrix dxhat = self.grad.array().rowwise() * g->value.row(0).array();
                Matrix dx(xhat.rows(), xhat.cols());
                for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                  const double s1 = dxhat.row(i).sum();
                  const double s2 = dxhat.row(i).dot(xhat.row(i));
                  dx.row(i) = inv_std(i) / d *
                              (d * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
                }
                xin->accumulate(dx);
              });
}

Var quick_gelu(const Var& x) {
  // x * sigmoid(1.702 x)
  Matrix sig = (1.0 + (-1.702 * x.value().array()).exp()).inverse();
  Matrix out = x.value().cwiseProduct(sig);
  return make(std::move(out), {x.node()}, [sig](const Node& self) {
    const auto& xv = self.inputs[0]->value;
    Matrix d = sig.array() + 1.702 * xv.array() * sig.array() * (1.0 - sig.array());
    self.inputs[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

Var sigmoid(const Var& x) {
  Matrix out = x.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return make(out, {x.node()}, [out](const Node& self) {
    self.inputs[0]->accumulate(self.grad.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, const BoolMatrix* allow,
              AttentionRecord* record) {
  const Eigen::Index nq = q.rows();
  const Eigen::Index nk = k.rows();
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != nk) {
    throw std::invalid_argument("attention: q/k/v shapes disagree");
  }
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(d) +
                                " not divisible into " + std::to_string(heads) + " heads");
  }
  if (allow && (allow->rows() != nq || allow->cols() != nk)) {
    throw std::invalid_argument("attention: mask is " + std::to_string(allow->rows()) + "x" +
                                std::to_string(allow->cols()) + " but sequence is " +
                                std::to_string(nq) + "x" + std::to_string(nk));
  }
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> probs(heads);
  Matrix out(nq, d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix scores = (qh * kh.transpose()) * inv_sqrt;
    Matrix& p = probs[h];
    p.resize(nq, nk);
    for (Eigen::Index i = 0; i < nq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < nk; ++j) {
        if (!allow || (*allow)(i, j)) mx = std::max(mx, scores(i, j));
      }
      if (!std::isfinite(mx)) throw std::invalid_argument("attention: query row with no allowed key");
      double total = 0.0;
      for (Eigen::Index j = 0; j < nk; ++j) {
        const double e = (!allow || (*allow)(i, j)) ? std::exp(scores(i, j) - mx) : 0.0;
        p(i, j) = e;
        total += e;
      }
      p.row(i) /= total;
    }
    out.middleCols(h * dh, dh) = p * vh;
  }
  if (record) record->probs = probs;

  return make(std::move(out), {q.node(), k.node(), v.node()},
              [probs = std::move(probs), heads, dh, inv_sqrt](const Node& self) {
                const auto& qn = self.inputs[0];
                const auto& kn = self.inputs[1];
                const auto& vn = self.inputs[2];
                Matrix dq = Matrix::Zero(qn->value.rows(), qn->value.cols());
                Matrix dk = Matrix::Zero(kn->value.rows(), kn->value.cols());
                Matrix dv = Matrix::Zero(vn->value.rows(), vn->value.cols());
                for (int h = 0; h < heads; ++h) {
                  const Matrix& p = probs[h];
                  const auto go = self.grad.middleCols(h * dh, dh);
                  dv.middleCols(h * dh, dh) = p.transpose() * go;
                  Matrix dp = go * vn->value.middleCols(h * dh, dh).transpose();
                  Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
                  Matrix ds = p.cwiseProduct((dp.colwise() - rowdot).matrix()) * inv_sqrt;
                  dq.middleCols(h * dh, dh) = ds * kn->value.middleCols(h * dh, dh);
                  dk.middleCols(h * dh, dh) = ds.transpose() * qn->value.middleCols(h * dh, dh);
                }
                qn->accumulate(dq);
                kn->accumulate(dk);
                vn->accumulate(dv);
              });
}

Var normalize_rows(const Var& x, double eps) {
  const Eigen::Index n = x.rows();
  Eigen::VectorXd norms = x.value().rowwise().norm();
  Eigen::VectorXd denom = norms.cwiseMax(eps);
  Matrix out = x.value().array().colwise() / denom.array();
  return make(out, {x.node()}, [out, norms, denom, eps, n](const Node& self) {
    Matrix dx(self.grad.rows(), self.grad.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      if (norms(i) > eps) {
        const double proj = self.grad.row(i).dot(out.row(i));
        dx.row(i) = (self.grad.row(i) - proj * out.row(i)) / denom(i);
      } else {
        dx.row(i) = self.grad.row(i) / denom(i);
      }
    }
    self.inputs[0]->accumulate(dx);
  });
}

Var elementwise_max(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("elementwise_max: no inputs");
  const auto& first = parts.front();
  Matrix out = first.value();
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax =
      Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(out.rows(),
                                                                                 out.cols());
  std::vector<std::shared_ptr<Node>> inputs{first.node()};
  for (std::size_t p = 1; p < parts.size(); ++p) {
    require_same_shape(first, parts[p], "elementwise_max");
    inputs.push_back(parts[p].node());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      for (Eigen::Index j = 0; j < out.cols(); ++j) {
        if (parts[p].value()(i, j) > out(i, j)) {
          out(i, j) = parts[p].value()(i, j);
          argmax(i, j) = static_cast<int>(p);
        }
      }
    }
  }
  return make(std::move(out), std::move(inputs), [argmax](const Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      if (!self.inputs[p]->requires_grad) continue;
      Matrix g = (argmax.array() == static_cast<int>(p)).cast<double>() * self.grad.array();
      self.inputs[p]->accumulate(g);
    }
  });
}

Var mean_of(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("mean_of: no inputs");
  Matrix out = parts.front().value();
  std::vector<std::shared_ptr<Node>> inputs{parts.front().node()};
  for (std::size_t p = 1; p < parts.size(); ++p) {
    require_same_shape(parts.front(), parts[p], "mean_of");
    out += parts[p].value();
    inputs.push_back(parts[p].node());
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  out *= inv;
  return make(std::move(out), std::move(inputs), [inv](const Node& self) {
    for (const auto& in : self.inputs) in->accumulate(self.grad * inv);
  });
}

Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make(std::move(out), {x.node()}, [](const Node& self) {
    const auto& in = self.inputs[0];
    in->accumulate(Matrix::Constant(in->value.rows(), in->value.cols(), self.grad(0, 0)));
  });
}

Var mean_rows(const Var& x) {
  const double n = static_cast<double>(x.rows());
  Matrix out = x.value().colwise().sum() / n;
  return make(std::move(out), {x.node()}, [n](const Node& self) {
    const auto& in = self.inputs[0];
    Matrix g = self.grad.replicate(in->value.rows(), 1) / n;
    in->accumulate(g);
  });
}

Var rowwise_dot(const Var& z, const Var& w) {
  require_same_shape(z, w, "rowwise_dot");
  Matrix out = z.value().cwiseProduct(w.value()).rowwise().sum().transpose();
  return make(std::move(out), {z.node(), w.node()}, [](const Node& self) {
    const auto& zn = self.inputs[0];
    const auto& wn = self.inputs[1];
    const Eigen::VectorXd g = self.grad.row(0).transpose();
    if (zn->requires_grad) zn->accumulate(wn->value.array().colwise() * g.array());
    if (wn->requires_grad) wn->accumulate(zn->value.array().colwise() * g.array());
  });
}

Var binary_cross_entropy(const Var& p, const Matrix& y, const RowVector& weights,
                         double normalizer, double eps) {
  if (y.rows() != p.rows() || y.cols() != p.cols()) {
    throw std::invalid_argument("binary_cross_entropy: prediction " + std::to_string(p.rows()) +
                                "x" + std::to_string(p.cols()) + " vs labels " +
                                std::to_string(y.rows()) + "x" + std::to_string(y.cols()));
  }
  if (weights.size() != p.cols()) {
    throw std::invalid_argument("binary_cross_entropy: weight count does not match attributes");
  }
  if (!(normalizer > 0)) throw std::invalid_argument("binary_cross_entropy: normalizer must be > 0");
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double pc = std::clamp(p.value()(i, j), eps, 1.0 - eps);
      total += weights(j) * (y(i, j) * std::log(pc) + (1.0 - y(i, j)) * std::log(1.0 - pc));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = -total / normalizer;
  return make(std::move(out), {p.node()}, [y, weights, normalizer, eps](const Node& self) {
    const auto& pn = self.inputs[0];
    Matrix g(pn->value.rows(), pn->value.cols());
    const double upstream = self.grad(0, 0);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        const double pv = pn->value(i, j);
        if (pv < eps || pv > 1.0 - eps) {
          g(i, j) = 0.0;
        } else {
          g(i, j) = -upstream * weights(j) * (y(i, j) / pv - (1.0 - y(i, j)) / (1.0 - pv)) /
                    normalizer;
        }
      }
    }
    pn->accumulate(g);
  });
}

}  // namespace promptpar::ad
