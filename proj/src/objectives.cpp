#include "promptpar/objectives.hpp"

#include "promptpar/errors.hpp"

#include "json.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace promptpar {

ad::RowVector attribute_weights(const std::vector<double>& prevalence) {
  ad::RowVector w(static_cast<Eigen::Index>(prevalence.size()));
  for (std::size_t j = 0; j < prevalence.size(); ++j) w(static_cast<Eigen::Index>(j)) = std::exp(-prevalence[j]);
  return w;
}

ad::Var weighted_bce(const ad::Var& p, const LabelMatrix& y, const ad::RowVector& w) {
  if (p.rows() != y.rows() || p.cols() != y.cols()) {
    throw ContractError("weighted_bce: predictions " + std::to_string(p.rows()) + "x" +
                        std::to_string(p.cols()) + " vs labels " + std::to_string(y.rows()) + "x" +
                        std::to_string(y.cols()));
  }
  if (w.size() != y.cols()) throw ContractError("weighted_bce: one weight per attribute required");
  if (y.rows() == 0) throw ContractError("weighted_bce: empty batch");
  return ad::binary_cross_entropy(p, y, w, static_cast<double>(y.rows()), kProbabilityClamp);
}

double weighted_bce(const LabelMatrix& p, const LabelMatrix& y, const ad::RowVector& w) {
  return weighted_bce(ad::constant(p), y, w).scalar();
}

ad::Var gl_loss(const ad::Var& p_gl, const LabelMatrix& y) {
  return weighted_bce(p_gl, y, ad::RowVector::Ones(y.cols()));
}

double gl_loss(const LabelMatrix& p_gl, const LabelMatrix& y) {
  return gl_loss(ad::constant(p_gl), y).scalar();
}

ad::Var total_loss(const ad::Var& cls_loss, const ad::Var& gl, double alpha) {
  if (!(alpha >= 0)) throw ContractError("total_loss: alpha must be >= 0");
  return ad::add(cls_loss, ad::scale(gl, alpha));
}

double total_loss(double cls_loss, double gl, double alpha) {
  if (!(alpha >= 0)) throw ContractError("total_loss: alpha must be >= 0");
  return cls_loss + alpha * gl;
}

MetricReport compute_metrics(const LabelMatrix& p, const LabelMatrix& y, double threshold) {
  if (p.rows() != y.rows() || p.cols() != y.cols()) {
    throw ContractError("compute_metrics: prediction and label shapes differ");
  }
  if (!(threshold > 0 && threshold < 1)) throw ContractError("compute_metrics: threshold outside (0,1)");
  const Eigen::Index m = p.rows();
  const Eigen::Index n = p.cols();
  if (m == 0) throw DataError("compute_metrics: no samples");

  MetricReport r;
  r.threshold = threshold;
  r.samples = static_cast<long>(m);
  r.per_attribute.resize(static_cast<std::size_t>(n));

  double acc = 0, prec = 0, rec = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    long inter = 0, predicted = 0, actual = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool hat = p(i, j) >= threshold;
      const bool gt = y(i, j) > 0.5;
      auto& c = r.per_attribute[static_cast<std::size_t>(j)];
      if (hat && gt) ++c.tp;
      if (hat && !gt) ++c.fp;
      if (!hat && !gt) ++c.tn;
      if (!hat && gt) ++c.fn;
      inter += hat && gt;
      predicted += hat;
      actual += gt;
    }
    const long uni = predicted + actual - inter;
    acc += uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    if (predicted == 0) {
      prec += actual == 0 ? 1.0 : 0.0;
    } else {
      prec += static_cast<double>(inter) / predicted;
    }
    if (actual == 0) {
      rec += predicted == 0 ? 1.0 : 0.0;
    } else {
      rec += static_cast<double>(inter) / actual;
    }
  }
  r.accuracy = acc / m;
  r.precision = prec / m;
  r.recall = rec / m;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;

  double ma = 0;
  for (auto& c : r.per_attribute) {
    c.tpr_undefined = c.tp + c.fn == 0;
    c.tnr_undefined = c.tn + c.fp == 0;
    const double tpr = c.tpr_undefined ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fn);
    const double tnr = c.tnr_undefined ? 0.0 : static_cast<double>(c.tn) / (c.tn + c.fp);
    r.per_attribute_mA.push_back(0.5 * (tpr + tnr));
    ma += 0.5 * (tpr + tnr);
  }
  r.mA = ma / n;
  return r;
}

namespace {

std::string name_of(const std::vector<std::string>& names, std::size_t j) {
  return j < names.size() ? names[j] : "attr" + std::to_string(j);
}

}  // namespace

std::string metrics_to_text(const MetricReport& r, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "mA=" << r.mA << "\naccuracy=" << r.accuracy << "\nprecision=" << r.precision
     << "\nrecall=" << r.recall << "\nf1=" << r.f1 << "\nthreshold=" << r.threshold
     << "\nsamples=" << r.samples << '\n';
  for (std::size_t j = 0; j < r.per_attribute.size(); ++j) {
    const auto& c = r.per_attribute[j];
    const std::string key = "attribute." + name_of(names, j);
    os << key << ".tp=" << c.tp << '\n'
       << key << ".fp=" << c.fp << '\n'
       << key << ".tn=" << c.tn << '\n'
       << key << ".fn=" << c.fn << '\n'
       << key << ".mA=" << r.per_attribute_mA[j] << '\n';
    if (c.tpr_undefined) os << key << ".flag=no_positive_labels\n";
    if (c.tnr_undefined) os << key << ".flag=no_negative_labels\n";
  }
  return os.str();
}

std::string metrics_to_json(const MetricReport& r, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["mA"] = r.mA;
  j["accuracy"] = r.accuracy;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["threshold"] = r.threshold;
  j["samples"] = r.samples;
  auto& table = j["per_attribute"] = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_attribute.size(); ++k) {
    const auto& c = r.per_attribute[k];
    nlohmann::json row{{"name", name_of(names, k)}, {"tp", c.tp},  {"fp", c.fp},
                       {"tn", c.tn},                {"fn", c.fn},  {"mA", r.per_attribute_mA[k]}};
    nlohmann::json flags = nlohmann::json::array();
    if (c.tpr_undefined) flags.push_back("no_positive_labels");
    if (c.tnr_undefined) flags.push_back("no_negative_labels");
    row["flags"] = flags;
    table.push_back(row);
  }
  return j.dump(2);
}

}  // namespace promptpar
