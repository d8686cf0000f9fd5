#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spce/core_data.hpp"

namespace spce {

// S(t | x). Models with a cumulative hazard of the form
// Lambda(t | x) = rr(x) * sum_{t_j <= t} dLambda_j expose their jumps so that
// martingale integrals can be evaluated as exact sums.
class ConditionalSurvival {
 public:
  virtual ~ConditionalSurvival() = default;
  virtual double survival(double t, std::span<const double> x) const = 0;
  // S(t- | x)
  virtual double survival_left(double t, std::span<const double> x) const { return survival(t, x); }
  virtual bool has_jumps() const { return false; }
  virtual std::span<const double> jump_times() const { return {}; }
  virtual std::span<const double> baseline_increments() const { return {}; }
  virtual double relative_risk(std::span<const double>) const { return 1.0; }
};

using SurvivalPtr = std::shared_ptr<const ConditionalSurvival>;

struct CoxOptions {
  double tol = 1e-8;
  int max_iter = 50;
  // Skips optimization and evaluates the Breslow baseline at these coefficients.
  std::optional<Eigen::VectorXd> fixed_coefficients;
};

class CoxFit : public ConditionalSurvival {
 public:
  CoxFit() = default;
  // Direct construction of a step-hazard model. `center` is subtracted from x
  // before applying `coefficients`; increments are the baseline at x == center.
  CoxFit(Eigen::VectorXd coefficients, Eigen::VectorXd center, std::vector<double> times,
         std::vector<double> increments);

  double survival(double t, std::span<const double> x) const override;
  double survival_left(double t, std::span<const double> x) const override;
  bool has_jumps() const override { return true; }
  std::span<const double> jump_times() const override { return times_; }
  std::span<const double> baseline_increments() const override { return increments_; }
  double relative_risk(std::span<const double> x) const override;

  // Baseline cumulative hazard at x == center, right-continuous.
  double baseline_cumhaz(double t) const;
  double baseline_cumhaz_left(double t) const;
  // Baseline at x == 0 as (time, cumulative hazard) pairs.
  std::vector<std::pair<double, double>> baseline_at_zero() const;

  const Eigen::VectorXd& coefficients() const { return coef_; }
  const Eigen::VectorXd& center() const { return center_; }

  bool converged = true;
  int iterations = 0;
  double log_partial_likelihood = 0.0;
  std::size_t num_events = 0;
  std::size_t num_records = 0;
  int cell_arm = -1;
  int cell_ice = -1;

 private:
  Eigen::VectorXd coef_;
  Eigen::VectorXd center_;
  std::vector<double> times_;
  std::vector<double> increments_;
  std::vector<double> cumulative_;
};

CoxFit fit_cox(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
               const CoxOptions& opt = {});
// Fits the censoring hazard by treating censored records as events.
CoxFit fit_censoring(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
                     const CoxOptions& opt = {});
std::vector<int> flip_indicator(std::span<const int> event);

// Breslow log partial likelihood at beta, ties included.
double cox_log_partial_likelihood(const Eigen::VectorXd& beta, std::span<const double> time,
                                  std::span<const int> event, const Eigen::MatrixXd& x);

double survival_at(const ConditionalSurvival& fit, double t, std::span<const double> x);

void write_baseline_csv(const CoxFit& fit, const std::string& path);

// Applies a column selection to the covariate row before delegating.
class SubsetSurvival : public ConditionalSurvival {
 public:
  SubsetSurvival(SurvivalPtr inner, std::vector<std::size_t> columns)
      : inner_(std::move(inner)), columns_(std::move(columns)) {}
  double survival(double t, std::span<const double> x) const override;
  double survival_left(double t, std::span<const double> x) const override;
  bool has_jumps() const override { return inner_->has_jumps(); }
  std::span<const double> jump_times() const override { return inner_->jump_times(); }
  std::span<const double> baseline_increments() const override { return inner_->baseline_increments(); }
  double relative_risk(std::span<const double> x) const override;
  const ConditionalSurvival& inner() const { return *inner_; }

 private:
  std::vector<double> select(std::span<const double> x) const;
  SurvivalPtr inner_;
  std::vector<std::size_t> columns_;
};

// Continuous survival given by a callable.
class FunctionSurvival : public ConditionalSurvival {
 public:
  explicit FunctionSurvival(std::function<double(double, std::span<const double>)> f) : f_(std::move(f)) {}
  double survival(double t, std::span<const double> x) const override { return f_(t, x); }

 private:
  std::function<double(double, std::span<const double>)> f_;
};

// Weibull PH: h(t|x) = t^(phi-1) exp(psi + x'gamma), H(t|x) = t^phi exp(psi + x'gamma) / phi.
struct WeibullParams {
  double log_shape = 0.0;  // log phi
  double psi = 0.0;
  Eigen::VectorXd gamma;

  double shape() const { return std::exp(log_shape); }
  // Parameter vector (log phi, psi, gamma).
  Eigen::VectorXd pack() const;
  static WeibullParams unpack(const Eigen::VectorXd& theta);
};

double weibull_cumhaz(double t, double shape, double linear_predictor);
double weibull_hazard(double t, double shape, double linear_predictor);
double weibull_survival(const WeibullParams& p, double t, std::span<const double> x);
double weibull_linear_predictor(const WeibullParams& p, std::span<const double> x);
// Inversion draw from S(t|x) given V ~ U(0,1).
double weibull_inverse(double v, double shape, double linear_predictor);

struct WeibullLoglik {
  double value = 0.0;
  Eigen::VectorXd gradient;  // w.r.t. (log phi, psi, gamma)
  Eigen::MatrixXd hessian;   // filled when requested
};

// Per-record contribution delta*log h(t) - H(t).
double weibull_log_density(double t, int event, double shape, double linear_predictor);

WeibullLoglik weibull_loglik(const WeibullParams& p, std::span<const double> time, std::span<const int> event,
                             const Eigen::MatrixXd& x, std::span<const double> weights = {},
                             bool with_hessian = false);
WeibullLoglik weibull_loglik_and_grad(const WeibullParams& p, std::span<const double> time,
                                      std::span<const int> event, const Eigen::MatrixXd& x);

struct WeibullFitOptions {
  double tol = 1e-8;
  int max_iter = 200;
  double gamma_prior_sd = 0.0;  // > 0 adds a N(0, sd^2) penalty on gamma
  std::optional<WeibullParams> start;
};

struct WeibullFit {
  WeibullParams params;
  double log_likelihood = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Weighted (penalized) maximum likelihood by damped Newton.
WeibullFit fit_weibull(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
                       std::span<const double> weights = {}, const WeibullFitOptions& opt = {});

class WeibullSurvival : public ConditionalSurvival {
 public:
  explicit WeibullSurvival(WeibullParams p) : p_(std::move(p)) {}
  double survival(double t, std::span<const double> x) const override { return weibull_survival(p_, t, x); }
  const WeibullParams& params() const { return p_; }

 private:
  WeibullParams p_;
};

}  // namespace spce
