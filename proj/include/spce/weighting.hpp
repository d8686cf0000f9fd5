#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spce/core_data.hpp"
#include "spce/glm.hpp"
#include "spce/simulator.hpp"
#include "spce/survival.hpp"

namespace spce {

// Covariate names per nuisance model; an empty list means all covariates.
struct CovariateSets {
  std::vector<std::string> propensity;
  std::vector<std::string> principal;
  std::vector<std::string> outcome;
  std::vector<std::string> censoring;
};

using ScoreFn = std::function<double(std::span<const double>)>;

// Fitted parameters behind a bundle, kept for export.
struct FittedNuisance {
  LogisticFit propensity;
  std::array<LogisticFit, 2> ice;
  std::array<std::array<std::shared_ptr<const CoxFit>, 2>, 2> event;      // [arm][ice]
  std::array<std::array<std::shared_ptr<const CoxFit>, 2>, 2> censoring;  // null: cell without censoring
  std::vector<std::size_t> propensity_columns, principal_columns, outcome_columns, censoring_columns;
  std::vector<std::string> covariate_names;
};

// Nuisance functions of the full covariate row.
struct NuisanceBundle {
  ScoreFn propensity;                                  // e(X) = P(Z=1|X)
  std::array<ScoreFn, 2> ice;                          // p_z(X) = P(D=1|Z=z,X)
  std::array<std::array<SurvivalPtr, 2>, 2> event;     // S_{z,d}(t|X)
  std::array<std::array<SurvivalPtr, 2>, 2> censoring; // S^C_{z,d}(t|X)
  std::shared_ptr<const FittedNuisance> fitted;

  // Same functions with the arm indicator reversed.
  NuisanceBundle flipped() const;
};

// Nuisances fit on data already in the D(1) >= D(0) orientation.
NuisanceBundle fit_nuisances(const Dataset& canonical, const CovariateSets& sets = {});

// Data-generating nuisance functions. Censoring is the exponential model
// discretized to a step hazard with `censor_steps` jumps up to `horizon`.
NuisanceBundle oracle_nuisances(const DgpSpec& spec, double horizon, std::size_t censor_steps = 500);

struct SensitivityPoint {
  double zeta = 0.0;
  double xi0 = 0.0;
  double xi1 = 0.0;
  bool is_benchmark() const { return zeta == 0.0 && xi0 == 0.0 && xi1 == 0.0; }
};

// pi_u = a + b p0 + c p1 for each stratum, with sensitivity parameter zeta.
struct ScoreCoefficients {
  double a = 0.0, b = 0.0, c = 0.0;
};
std::array<ScoreCoefficients, 4> zeta_coefficients(double zeta);
std::array<double, 4> zeta_scores(double p0, double p1, double zeta);
double zeta_max(double p0, double p1);

struct WeightingDiagnostics {
  std::size_t propensity_truncated = 0;
  std::size_t ice_truncated = 0;
  std::size_t negative_scores = 0;
  std::size_t tilt_clipped = 0;
  std::size_t tilt_evaluations = 0;
  std::size_t survival_clipped = 0;
  std::vector<std::string> warnings;
};

struct Bands {
  std::array<std::array<std::vector<double>, 4>, 2> survival_lo, survival_hi;
  std::array<std::vector<double>, 4> tau_lo, tau_hi;
  std::array<double, 4> proportion_lo{}, proportion_hi{};
  std::size_t replicates = 0;
  std::size_t failures = 0;
  std::map<std::string, std::size_t> failure_reasons;  // error message -> count
  bool approximate = false;  // nuisances reused across replicates
};

struct MrEstimate {
  TimeGrid grid{std::vector<double>{1.0}};
  Monotonicity monotonicity = Monotonicity::treated_geq_control;
  SensitivityPoint point;
  std::array<bool, 4> present{};
  // [arm][stratum][k]; survival is clipped to [0,1], survival_raw is not
  std::array<std::array<std::vector<double>, 4>, 2> survival;
  std::array<std::array<std::vector<double>, 4>, 2> survival_raw;
  std::array<std::vector<double>, 4> tau;  // from raw curves
  std::array<double, 4> proportions{};
  double p0 = 0.0;  // doubly robust P(D(0)=1)
  double p1 = 0.0;  // doubly robust P(D(1)=1)
  WeightingDiagnostics diagnostics;
  std::optional<Bands> bands;
};

struct MrOptions {
  double positivity_eps = 0.01;
};

// Core estimator on canonical data and nuisances; labels are canonical.
MrEstimate mr_survival(const NuisanceBundle& bundle, const Dataset& canonical, const TimeGrid& grid,
                       const SensitivityPoint& point = {}, const MrOptions& opt = {});

// Per-subject augmentation term int_0^t dM^C/(S S^C) for each grid time,
// for the records in cell (z,d); rows follow `rows`.
Eigen::MatrixXd martingale_terms(const NuisanceBundle& bundle, const Dataset& canonical, int arm, int ice,
                                 const std::vector<std::size_t>& rows, const TimeGrid& grid);

// Orientation handling: the canonical engine assumes D(1) >= D(0).
Dataset to_canonical(const Dataset& d, Monotonicity m);
MrEstimate to_actual(MrEstimate canonical, Monotonicity m);

struct WeightingConfig {
  AssumptionConfig assumptions{Monotonicity::control_geq_treated};
  CovariateSets covariates;
  MrOptions options;
};

// Fit nuisances and estimate, in the data's own labels.
MrEstimate estimate_weighting(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config);
// Same with caller-supplied nuisances given in the data's own orientation.
MrEstimate estimate_with_nuisances(const NuisanceBundle& bundle, const Dataset& d, const TimeGrid& grid,
                                   const WeightingConfig& config);

struct BootstrapConfig {
  std::size_t replicates = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 0;  // 0: hardware concurrency
  bool reuse_nuisances = false;
};

// One estimate per point, each with percentile bands from a common set of
// arm-stratified resamples.
std::vector<MrEstimate> bootstrap_sweep(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config,
                                        const std::vector<SensitivityPoint>& points, const BootstrapConfig& boot);
MrEstimate bootstrap_ci(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config,
                        const BootstrapConfig& boot);

// Type-7 sample quantile.
double quantile(std::vector<double> v, double prob);

struct SmdRow {
  std::string covariate;
  std::string contrast;  // stratum label in the data's own orientation
  double unweighted = 0.0;
  double weighted = 0.0;
  bool degenerate = false;
};

std::vector<SmdRow> weighted_smd(const NuisanceBundle& canonical_bundle, const Dataset& canonical,
                                 Monotonicity m);
std::vector<SmdRow> weighted_smd(const Dataset& d, const WeightingConfig& config);

struct StratumProfile {
  Stratum stratum = Stratum::s00;
  double proportion = 0.0;
  std::vector<double> mean;
  std::vector<double> sd;
  bool suppressed = false;
};

std::vector<StratumProfile> strata_covariate_profile_weighting(const NuisanceBundle& canonical_bundle,
                                                               const Dataset& canonical, Monotonicity m);

enum class Misspecification { none, outcome, principal_and_outcome, propensity, censoring };
std::string to_string(Misspecification m);

struct RobustnessReport {
  Misspecification scenario = Misspecification::none;
  std::size_t replicates = 0;
  std::size_t n = 0;
  // max_t |mean estimate - truth| per [arm][stratum]; NaN for absent strata
  std::array<std::array<double, 4>, 2> max_abs_bias{};
  double worst = 0.0;
  std::size_t failures = 0;
};

// Misspecified models drop the third covariate ("nephrectomy").
RobustnessReport multiply_robustness_check(const DgpSpec& spec, Misspecification scenario, std::size_t n,
                                           std::size_t replicates, const TimeGrid& grid, std::uint64_t seed,
                                           unsigned threads = 0);

// Runs f(i) for i in [0, count) across threads; exceptions propagate.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& f);

}  // namespace spce
