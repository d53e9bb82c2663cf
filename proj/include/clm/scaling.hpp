#pragma once

#include <span>
#include <string>
#include <vector>

#include "clm/csv.hpp"
#include "clm/transfer.hpp"

namespace clm {

// 1 - AUC for classification, identity for error metrics.
double to_lower_is_better(double value, TaskKind kind);

// Pearson correlation of average ranks. Needs >= 3 finite pairs and
// non-constant series.
double spearman_rho(std::span<const double> x, std::span<const double> y);

// Mean ranks (1-based) with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> v);

double huber(double r, double delta);

struct ScalingPoint {
  double n = 0;  // non-embedding parameters
  double d = 0;  // training tokens
  double loss = 0;
};

struct ScalingFit {
  double a = 0, b = 0, e = 0;  // log A, log B, log E
  double alpha = 0, beta = 0;
  double delta = 0;
  double r_squared = 0;
  double objective = 0;

  double A() const;
  double B() const;
  double E() const;
  static ScalingFit from_linear(double A, double B, double E, double alpha, double beta);
};

// E + A/N^alpha + B/D^beta, summed in log space.
double predict_loss(const ScalingFit& fit, double n, double d);
double log_predict_loss(const ScalingFit& fit, double n, double d);

// 1 - SS_res/SS_tot.
double r_squared(std::span<const double> observed, std::span<const double> predicted);

struct FitOptions {
  std::vector<double> deltas{1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  std::vector<double> exponent_grid{0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<double> log_e_grid;  // empty: log 0.01, log 0.1, log 1
  std::size_t max_iterations = 500;
  double gradient_tolerance = 1e-8;
};

// Huber fit on log residuals, multi-start L-BFGS per delta; the delta with the
// best R^2 (log losses) wins.
ScalingFit fit_scaling_law(std::span<const ScalingPoint> points, const FitOptions& options = {});

// Objective sum_i huber(log Lhat_i - log L_i) and its gradient with respect to
// (a, b, e, alpha, beta).
double scaling_objective(std::span<const ScalingPoint> points, const double* theta, double delta, double* grad);

struct ComputeBudget {
  double n = 0;
  double d_train = 0;
  double flops_total = 0;
  double pf_days = 0;
};

ComputeBudget pf_days(double n, double d_train);

std::vector<ScalingPoint> parse_scaling_points(const CsvTable& table);
std::string fit_report(const ScalingFit& fit, std::size_t n_points);

// Spearman rho between l_pre and each downstream quantity across the
// checkpoints of a metrics CSV. Seeds are averaged before ranking; metrics are
// made lower-is-better first. rho is NaN when a series is constant.
struct ConsistencyRow {
  std::string task;
  std::string axis;
  std::string mode;  // ft | lp | l_down
  double rho = 0;
  std::size_t n_checkpoints = 0;
};

std::vector<ConsistencyRow> consistency_from_metrics(const CsvTable& metrics, const std::string& axis);

}  // namespace clm
