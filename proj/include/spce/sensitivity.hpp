#pragma once

#include <string>
#include <vector>

#include "spce/output.hpp"
#include "spce/weighting.hpp"

namespace spce {

enum class SweepKind { zeta, xi };

struct SweepResult {
  SweepKind kind = SweepKind::zeta;
  std::vector<SensitivityPoint> points;
  std::vector<MrEstimate> estimates;  // one per point, same order
  double zeta_bound = 1.0;            // zeta_max from the benchmark fit
  bool approximate = false;           // bands reuse benchmark nuisances
};

// Rejects any zeta at or above zeta_max computed from the data.
SweepResult zeta_sweep(const Dataset& d, const std::vector<double>& zetas, const TimeGrid& grid,
                       const WeightingConfig& config, const BootstrapConfig& boot);

// Full product grid xi0 x xi1.
SweepResult xi_sweep(const Dataset& d, const std::vector<double>& xi0, const std::vector<double>& xi1,
                     const TimeGrid& grid, const WeightingConfig& config, const BootstrapConfig& boot);

MrEstimate xi_tilted_spce(const Dataset& d, double xi0, double xi1, const TimeGrid& grid,
                          const WeightingConfig& config, const BootstrapConfig& boot);

// Largest spread max_p tau_u(t) - min_p tau_u(t) over sweep points p,
// taken over the listed strata and the grid.
double max_tau_drift(const SweepResult& s, const std::vector<Stratum>& strata);

// Label used in the long-format output for a sweep point.
std::string point_label(SweepKind kind, const SensitivityPoint& p);

// Long format: zeta_or_xi, stratum, t, estimate, lo, hi (SPCE curves).
void write_sweep_csv(const SweepResult& s, const std::string& path);
std::vector<SvgPanel> sweep_panels(const SweepResult& s);

}  // namespace spce
