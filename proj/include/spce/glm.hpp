#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "spce/core_data.hpp"

namespace spce {

struct GlmOptions {
  double tol = 1e-8;         // gradient max-norm
  int max_iter = 100;
  double ridge = 0.0;        // L2 penalty on slopes only; 0 = plain MLE
  std::optional<Eigen::VectorXd> start;
};

struct LogisticFit {
  Eigen::VectorXd coefficients;  // (intercept, slopes)
  bool converged = false;
  double log_likelihood = 0.0;
  int iterations = 0;
  double max_abs_gradient = 0.0;
  double condition_number = 0.0;  // of the standardized design

  double linear_predictor(std::span<const double> x) const;
};

// `x` holds covariates without an intercept; the fit adds it.
LogisticFit fit_logistic(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const GlmOptions& opt = {});
double logistic_log_likelihood(const Eigen::VectorXd& coef, const Eigen::VectorXd& y,
                               const Eigen::MatrixXd& x);

double predict_prob(const LogisticFit& fit, std::span<const double> x);
Eigen::VectorXd predict_prob(const LogisticFit& fit, const Eigen::MatrixXd& x);

double expit(double eta);
double logit(double p);

struct MultinomialFit {
  std::vector<Stratum> strata;  // row order of `coefficients`
  Stratum reference = Stratum::s00;
  Eigen::MatrixXd coefficients;  // K x (p+1); the reference row is zero
  bool converged = false;
  double log_likelihood = 0.0;
  int iterations = 0;

  Eigen::VectorXd probabilities(std::span<const double> x) const;
  // n x K
  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& x) const;
  // Position of u in `strata`, or -1.
  int position(Stratum u) const;
};

// Soft labels: `weights` is n x K with rows of nonnegative stratum weights.
MultinomialFit fit_multinomial(const Eigen::MatrixXd& weights, const Eigen::MatrixXd& x,
                               const std::vector<Stratum>& strata, Stratum reference,
                               const GlmOptions& opt = {});
MultinomialFit fit_multinomial(std::span<const Stratum> labels, const Eigen::MatrixXd& x,
                               const std::vector<Stratum>& strata, Stratum reference,
                               const GlmOptions& opt = {});

// Row-wise softmax of linear predictors eta (n x K), computed stably.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& eta);

struct PrincipalScores {
  double pi11 = 0.0;
  double pi00 = 0.0;
  double pi01 = 0.0;
};

PrincipalScores principal_scores(double p0, double p1);
PrincipalScores principal_scores_from_ice_models(const LogisticFit& fit0, const LogisticFit& fit1,
                                                 std::span<const double> x);

struct PrincipalScoreSummary {
  std::vector<PrincipalScores> scores;
  std::size_t negative_pi01 = 0;
};
PrincipalScoreSummary principal_scores_from_ice_models(const LogisticFit& fit0, const LogisticFit& fit1,
                                                       const Eigen::MatrixXd& x);

}  // namespace spce
