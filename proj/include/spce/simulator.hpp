#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "spce/core_data.hpp"
#include "spce/survival.hpp"

namespace spce {

struct CovariateSpec {
  double p_male = 0.65;
  double age_mean = 62.0;
  double age_sd = 10.0;
  double age_min = 18.0;
  double age_max = 90.0;
  double p_nephrectomy = 0.15;
  double p_riskfac = 0.10;
};

// Column order of simulated covariates; age enters as (age - age_mean) / age_sd.
inline const std::vector<std::string> kSimCovariates = {"male", "age_std", "nephrectomy", "riskfac"};

struct DgpSpec {
  std::size_t n = 732;
  std::size_t n_treated = 363;
  CovariateSpec covariates;
  // (intercept, slopes) per stratum relative to 00; absent = stratum does not occur.
  std::array<std::optional<Eigen::VectorXd>, 4> strata_coefficients;
  // outcome[arm][stratum]
  std::array<std::array<WeibullParams, 4>, 2> outcome;
  bool censoring = true;
  double censoring_intercept = -5.0;
  Eigen::VectorXd censoring_slopes;

  static DgpSpec appendix_d();
  // Same DGP with stratum 01 removed (so D(0) >= D(1) holds) and principal
  // ignorability imposed: S_{1,10} := S_{1,00}, S_{0,10} := S_{0,11}.
  static DgpSpec assumption_compliant();

  void validate() const;
  // Arm sizes for a different total n at the default allocation ratio.
  void set_n(std::size_t total);

  std::size_t num_covariates() const { return 4; }
  std::array<double, 4> principal_scores(std::span<const double> x) const;
  double ice_probability(int arm, std::span<const double> x) const;
  double survival(int arm, Stratum u, double t, std::span<const double> x) const;
  // S_{z,d}(t | x): survival in observed cell (z, d), mixing the compatible strata.
  double cell_survival(int arm, int ice, double t, std::span<const double> x) const;
  double censoring_rate(std::span<const double> x) const;
  double propensity() const { return static_cast<double>(n_treated) / static_cast<double>(n); }
  bool has_stratum(Stratum u) const { return strata_coefficients[index(u)].has_value(); }
};

nlohmann::json to_json(const DgpSpec& s);
DgpSpec dgp_from_json(const nlohmann::json& j);

struct SimulatedTrial {
  Dataset data;
  std::vector<Stratum> strata;
  std::vector<double> time0;
  std::vector<double> time1;
  std::vector<double> censor_time;  // +inf when censoring is off
  DgpSpec spec;
  std::uint64_t seed = 0;
};

SimulatedTrial simulate(const DgpSpec& spec, std::uint64_t seed);

struct TrueSpce {
  TimeGrid grid{std::vector<double>{1.0}};
  // survival[arm][stratum][k]; empty for absent strata
  std::array<std::array<std::vector<double>, 4>, 2> survival;
  std::array<std::array<std::vector<double>, 4>, 2> survival_se;
  std::array<std::vector<double>, 4> tau;
  std::array<std::vector<double>, 4> tau_se;
  std::array<double, 4> proportions{};
  std::size_t mc_size = 0;
};

// Stratified Monte Carlo over the covariate distribution: proportional
// allocation across the binary covariate patterns, paired stratified draws of age.
TrueSpce true_spce(const DgpSpec& spec, const TimeGrid& grid, std::size_t mc_size = 1000000,
                   std::uint64_t seed = 20240917);
// Deterministic cross-check: exact sum over binary patterns, adaptive quadrature over age.
TrueSpce true_spce_quadrature(const DgpSpec& spec, const TimeGrid& grid);

void write_truth(const SimulatedTrial& trial, const std::string& path);
void write_true_spce_csv(const TrueSpce& truth, const std::string& path);

}  // namespace spce
