#pragma once

#include "promptpar/attributes.hpp"
#include "promptpar/autodiff.hpp"

#include <string>
#include <vector>

namespace promptpar {

inline constexpr double kProbabilityClamp = 1e-7;

// w_j = exp(-r_j)
ad::RowVector attribute_weights(const std::vector<double>& prevalence);

// -(1/M) Σ_i Σ_j w_j (y_ij log p_ij + (1 - y_ij) log(1 - p_ij)). No 1/N.
ad::Var weighted_bce(const ad::Var& p, const LabelMatrix& y, const ad::RowVector& w);
double weighted_bce(const LabelMatrix& p, const LabelMatrix& y, const ad::RowVector& w);

// weighted_bce with every w_j = 1.
ad::Var gl_loss(const ad::Var& p_gl, const LabelMatrix& y);
double gl_loss(const LabelMatrix& p_gl, const LabelMatrix& y);

ad::Var total_loss(const ad::Var& cls_loss, const ad::Var& gl, double alpha);
double total_loss(double cls_loss, double gl, double alpha);

struct AttributeCounts {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;
  bool tpr_undefined = false;  // no positive labels
  bool tnr_undefined = false;  // no negative labels
};

struct MetricReport {
  double mA = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  long samples = 0;
  std::vector<AttributeCounts> per_attribute;
  std::vector<double> per_attribute_mA;
};

// Label-based mA plus example-based accuracy, precision, recall and F1.
MetricReport compute_metrics(const LabelMatrix& p, const LabelMatrix& y, double threshold = 0.5);

std::string metrics_to_text(const MetricReport& report, const std::vector<std::string>& names = {});
std::string metrics_to_json(const MetricReport& report, const std::vector<std::string>& names = {});

}  // namespace promptpar
