#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "spce/core_data.hpp"
#include "spce/survival.hpp"

namespace spce {

// Normal prior scales. sigma_beta/sigma_gamma act on standardized covariates.
// The optional scales turn the default flat priors on rho, psi and log(phi)
// into proper normal priors (used for calibration checks).
struct PriorSpec {
  double sigma_beta = 2.5;
  double sigma_gamma = 2.5;
  std::optional<double> sigma_rho;
  std::optional<double> sigma_psi;
  std::optional<double> sigma_log_shape;
  double psi_mean = 0.0;
  double log_shape_mean = 0.0;
  void validate() const;
};

struct SamplerOptions {
  std::size_t chains = 6;
  std::size_t iters = 2000;
  std::size_t burnin = 1000;  // iterations discarded per chain, including adaptation
  std::size_t thin = 1;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  bool standardize = true;   // fit on centered/scaled covariates; draws reported on the data scale
  bool keep_labels = false;  // store latent labels with each retained draw
  // Metropolis steps on theta use the likelihood with the latent strata summed
  // out; labels are then drawn from their full conditional. false: every step
  // conditions on the current labels.
  bool marginal_updates = true;
};

// Parameters on the data's covariate scale.
struct MixtureParams {
  std::vector<Stratum> strata;  // admissible strata, row order of beta
  Stratum reference = Stratum::s00;
  Eigen::MatrixXd beta;  // K x (p+1): intercept rho_u then slopes; reference row zero
  std::array<std::array<std::optional<WeibullParams>, 4>, 2> outcome;  // [arm][stratum]

  // n x K stratum probabilities.
  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& x) const;
  int position(Stratum u) const;
};

struct MixtureDraw {
  std::size_t chain = 0;
  std::size_t iteration = 0;
  MixtureParams params;
  std::array<double, 4> proportions{};  // mean over records of pi_u(X); 0 for inadmissible strata
  // sum_i pi_u(X_i) S_{z,u}(t|X_i) / sum_i pi_u(X_i) on the grid; [arm][stratum]
  std::array<std::array<std::vector<double>, 4>, 2> survival;
  std::vector<std::uint8_t> labels;  // optional, stratum index per record
};

struct Band {
  std::vector<double> mean, lo, hi;
};

struct ScalarSummary {
  double mean = 0.0, lo = 0.0, hi = 0.0;
};

struct CovariateProfile {
  Stratum stratum = Stratum::s00;
  std::vector<ScalarSummary> covariates;  // per covariate, over draws
};

struct PosteriorSummary {
  TimeGrid grid{std::vector<double>{1.0}};
  Monotonicity monotonicity = Monotonicity::none;
  bool exclusion_restriction = false;
  std::vector<Stratum> strata;
  std::array<std::array<std::optional<Band>, 4>, 2> survival;
  std::array<std::optional<Band>, 4> spce;
  std::array<std::optional<ScalarSummary>, 4> proportions;
  std::vector<CovariateProfile> profiles;
  std::vector<std::string> covariate_names;
  std::map<std::string, double> rhat;
  double max_rhat = 0.0;
  bool converged = true;  // all split-Rhat < 1.05
  std::map<std::string, double> acceptance;  // post-burn-in acceptance per block
  std::size_t chains = 0, iters = 0, burnin = 0, draws = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

struct MixtureFit {
  PosteriorSummary summary;
  std::vector<MixtureDraw> draws;  // ordered by (chain, iteration)
};

MixtureFit run_sampler(const Dataset& d, const AssumptionConfig& config, const PriorSpec& prior,
                       const TimeGrid& grid, const SamplerOptions& options);

struct EmOptions {
  double tol = 1e-8;
  std::size_t max_iter = 1000;
  std::uint64_t seed = 1;
  // Known strata for every record: the E-step is skipped.
  std::optional<std::vector<Stratum>> revealed;
};

struct EmFit {
  MixtureParams params;
  std::array<double, 4> proportions{};
  std::array<std::array<std::vector<double>, 4>, 2> survival;
  std::array<std::vector<double>, 4> spce;
  std::vector<double> log_likelihood;  // after each M-step
  std::size_t iterations = 0;
  bool converged = false;
  TimeGrid grid{std::vector<double>{1.0}};
};

EmFit run_em(const Dataset& d, const AssumptionConfig& config, const TimeGrid& grid, const EmOptions& options = {});

// Observed-data log-likelihood sum_i log sum_u pi_u(X_i) f_{Z_i,u}(Y_i, delta_i | X_i).
double mixture_log_likelihood(const MixtureParams& p, const Dataset& d, const AssumptionConfig& config);

// Strata allowed in cell (arm, ice) with their positions in p.strata.
std::vector<Stratum> admissible_for_cell(const std::vector<Stratum>& strata, int arm, int ice);

std::vector<CovariateProfile> strata_covariate_profile(const std::vector<MixtureDraw>& draws, const Dataset& d);

struct SpceDraws {
  std::array<std::optional<Band>, 4> bands;
  // per draw and stratum: tau^k_u(t)
  std::vector<std::array<std::vector<double>, 4>> per_draw;
};
SpceDraws spce_from_draws(const std::vector<MixtureDraw>& draws, const TimeGrid& grid);

// ITT contrast of one draw from its mixed curves: mean_i sum_u pi_u(X_i) [S_{1,u} - S_{0,u}](t|X_i).
std::vector<double> itt_from_draw(const MixtureDraw& draw, const Dataset& d, const TimeGrid& grid);

// Per-draw step (c) curves from parameters.
std::array<std::array<std::vector<double>, 4>, 2> weighted_survival(const MixtureParams& p, const Eigen::MatrixXd& x,
                                                                    const TimeGrid& grid,
                                                                    std::array<double, 4>* proportions = nullptr);

// Split-Rhat over chains (each inner vector is one chain).
double split_rhat(const std::vector<std::vector<double>>& chains);

nlohmann::json to_json(const PosteriorSummary& s);
nlohmann::json to_json(const EmFit& e);
// One row per draw per stratum per grid point.
void write_draws_csv(const MixtureFit& fit, const std::string& path);

}  // namespace spce
