#include "spce/sensitivity.hpp"

#include <cmath>
#include <sstream>

namespace spce {

namespace {

double bound_from(const MrEstimate& benchmark) {
  // canonical orientation: treated is the arm with the larger ICE rate
  const bool flip = benchmark.monotonicity == Monotonicity::control_geq_treated;
  const double p0 = flip ? benchmark.p1 : benchmark.p0;
  const double p1 = flip ? benchmark.p0 : benchmark.p1;
  return zeta_max(p0, p1);
}

}  // namespace

SweepResult zeta_sweep(const Dataset& d, const std::vector<double>& zetas, const TimeGrid& grid,
                       const WeightingConfig& config, const BootstrapConfig& boot) {
  if (zetas.empty()) throw InvalidArgument("empty zeta list");
  WeightingConfig bench = config;
  bench.assumptions.zeta = 0.0;
  bench.assumptions.xi0 = bench.assumptions.xi1 = 0.0;
  SweepResult out;
  out.kind = SweepKind::zeta;
  out.zeta_bound = bound_from(estimate_weighting(d, grid, bench));
  for (double z : zetas) {
    if (!(z >= 0.0)) throw InvalidArgument("zeta must be nonnegative, got " + format_double(z));
    if (z >= out.zeta_bound)
      throw InvalidArgument("zeta " + format_double(z) + " is not below zeta_max = " + format_double(out.zeta_bound));
    out.points.push_back({z, 0.0, 0.0});
  }
  out.estimates = bootstrap_sweep(d, grid, bench, out.points, boot);
  out.approximate = boot.reuse_nuisances && boot.replicates > 0;
  return out;
}

SweepResult xi_sweep(const Dataset& d, const std::vector<double>& xi0, const std::vector<double>& xi1,
                     const TimeGrid& grid, const WeightingConfig& config, const BootstrapConfig& boot) {
  if (xi0.empty() || xi1.empty()) throw InvalidArgument("empty xi grid");
  WeightingConfig bench = config;
  bench.assumptions.zeta = 0.0;
  SweepResult out;
  out.kind = SweepKind::xi;
  for (double a : xi0)
    for (double b : xi1) {
      if (!std::isfinite(a) || !std::isfinite(b)) throw InvalidArgument("xi values must be finite");
      out.points.push_back({0.0, a, b});
    }
  out.estimates = bootstrap_sweep(d, grid, bench, out.points, boot);
  out.approximate = boot.reuse_nuisances && boot.replicates > 0;
  return out;
}

MrEstimate xi_tilted_spce(const Dataset& d, double xi0, double xi1, const TimeGrid& grid,
                          const WeightingConfig& config, const BootstrapConfig& boot) {
  return xi_sweep(d, {xi0}, {xi1}, grid, config, boot).estimates.front();
}

double max_tau_drift(const SweepResult& s, const std::vector<Stratum>& strata) {
  double drift = 0.0;
  for (Stratum u : strata) {
    const int iu = index(u);
    std::vector<double> lo, hi;
    for (const auto& e : s.estimates) {
      if (!e.present[iu]) continue;
      const auto& tau = e.tau[iu];
      if (lo.empty()) {
        lo = hi = tau;
        continue;
      }
      for (std::size_t k = 0; k < tau.size(); ++k) {
        lo[k] = std::min(lo[k], tau[k]);
        hi[k] = std::max(hi[k], tau[k]);
      }
    }
    for (std::size_t k = 0; k < lo.size(); ++k) drift = std::max(drift, hi[k] - lo[k]);
  }
  return drift;
}

std::string point_label(SweepKind kind, const SensitivityPoint& p) {
  if (kind == SweepKind::zeta) return format_double(p.zeta);
  return "xi0=" + format_double(p.xi0) + ";xi1=" + format_double(p.xi1);
}

void write_sweep_csv(const SweepResult& s, const std::string& path) {
  std::ostringstream o;
  o << "zeta_or_xi,stratum,t,estimate,lo,hi\n";
  for (std::size_t p = 0; p < s.points.size(); ++p) {
    const auto& e = s.estimates[p];
    const std::string label = point_label(s.kind, s.points[p]);
    for (Stratum u : kAllStrata) {
      const int iu = index(u);
      if (!e.present[iu]) continue;
      for (std::size_t k = 0; k < e.grid.size(); ++k) {
        o << label << "," << to_string(u) << "," << format_double(e.grid[k]) << "," << format_double(e.tau[iu][k])
          << ",";
        if (e.bands && std::isfinite(e.bands->tau_lo[iu][k]))
          o << format_double(e.bands->tau_lo[iu][k]) << "," << format_double(e.bands->tau_hi[iu][k]);
        else
          o << ",";
        o << "\n";
      }
    }
  }
  write_text(path, o.str());
}

std::vector<SvgPanel> sweep_panels(const SweepResult& s) {
  std::vector<SvgPanel> panels;
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    SvgPanel panel;
    panel.title = "SPCE stratum " + to_string(u) + (s.approximate ? " (approximate bands)" : "");
    panel.ylabel = "treated - control survival";
    panel.zero_line = true;
    for (std::size_t p = 0; p < s.points.size(); ++p) {
      const auto& e = s.estimates[p];
      if (!e.present[iu]) continue;
      SvgSeries ser;
      ser.label = (s.kind == SweepKind::zeta ? "zeta=" : "") + point_label(s.kind, s.points[p]);
      ser.color = palette()[p % palette().size()];
      ser.x = e.grid.points();
      ser.y = e.tau[iu];
      panel.series.push_back(ser);
    }
    if (!panel.series.empty()) panels.push_back(panel);
  }
  return panels;
}

}  // namespace spce
