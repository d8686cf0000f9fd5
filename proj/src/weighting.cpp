#include "spce/weighting.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include <boost/random/uniform_int_distribution.hpp>

#include "spce/random.hpp"

namespace spce {

void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& f) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

std::vector<double> pick(std::span<const double> x, const std::vector<std::size_t>& cols) {
  std::vector<double> out(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) out[j] = x[cols[j]];
  return out;
}

std::vector<std::size_t> resolve(const Dataset& d, const std::vector<std::string>& names) {
  if (names.empty()) {
    std::vector<std::size_t> all(d.num_covariates());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
    return all;
  }
  return d.column_indices(names);
}

template <class F>
auto with_context(const std::string& model, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw ModelError(e.kind(), model + ": " + e.what());
  }
}

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

std::shared_ptr<const CoxFit> no_jump_model(std::size_t p) {
  return std::make_shared<CoxFit>(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p)),
                                  Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p)), std::vector<double>{},
                                  std::vector<double>{});
}

}  // namespace

NuisanceBundle NuisanceBundle::flipped() const {
  NuisanceBundle out;
  auto e = propensity;
  out.propensity = [e](std::span<const double> x) { return 1.0 - e(x); };
  out.ice = {ice[1], ice[0]};
  for (int d = 0; d < 2; ++d) {
    out.event[0][d] = event[1][d];
    out.event[1][d] = event[0][d];
    out.censoring[0][d] = censoring[1][d];
    out.censoring[1][d] = censoring[0][d];
  }
  return out;
}

NuisanceBundle fit_nuisances(const Dataset& d, const CovariateSets& sets) {
  auto fitted = std::make_shared<FittedNuisance>();
  fitted->covariate_names = d.covariate_names();
  fitted->propensity_columns = resolve(d, sets.propensity);
  fitted->principal_columns = resolve(d, sets.principal);
  fitted->outcome_columns = resolve(d, sets.outcome);
  fitted->censoring_columns = resolve(d, sets.censoring);
  const Eigen::MatrixXd x = d.covariates();
  const auto n = static_cast<Eigen::Index>(d.size());

  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = d[static_cast<std::size_t>(i)].arm;
  fitted->propensity = with_context("propensity model", [&] {
    return fit_logistic(z, x(Eigen::all, fitted->propensity_columns));
  });

  std::array<std::vector<std::size_t>, 2> arm_rows;
  std::array<std::array<std::vector<std::size_t>, 2>, 2> cell_rows;
  for (std::size_t i = 0; i < d.size(); ++i) {
    arm_rows[d[i].arm].push_back(i);
    cell_rows[d[i].arm][d[i].ice].push_back(i);
  }
  for (int a = 0; a < 2; ++a) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(arm_rows[a].size()));
    for (std::size_t k = 0; k < arm_rows[a].size(); ++k) y(static_cast<Eigen::Index>(k)) = d[arm_rows[a][k]].ice;
    fitted->ice[a] = with_context("ICE model arm " + std::to_string(a), [&] {
      return fit_logistic(y, rows_of(x, arm_rows[a])(Eigen::all, fitted->principal_columns));
    });
  }
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) {
      const auto& rows = cell_rows[a][c];
      std::vector<double> t(rows.size());
      std::vector<int> ev(rows.size());
      std::size_t censored = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        t[k] = d[rows[k]].time;
        ev[k] = d[rows[k]].event;
        censored += ev[k] == 0;
      }
      const std::string cell = "(Z=" + std::to_string(a) + ", D=" + std::to_string(c) + ")";
      Eigen::MatrixXd xr = rows_of(x, rows);
      fitted->event[a][c] = with_context("event model " + cell, [&] {
        return std::make_shared<const CoxFit>(fit_cox(t, ev, xr(Eigen::all, fitted->outcome_columns)));
      });
      if (censored == 0) {
        fitted->censoring[a][c] = nullptr;
      } else {
        fitted->censoring[a][c] = with_context("censoring model " + cell, [&] {
          return std::make_shared<const CoxFit>(fit_censoring(t, ev, xr(Eigen::all, fitted->censoring_columns)));
        });
      }
    }

  NuisanceBundle b;
  std::shared_ptr<const FittedNuisance> f = fitted;
  b.fitted = f;
  b.propensity = [f](std::span<const double> xx) {
    return predict_prob(f->propensity, pick(xx, f->propensity_columns));
  };
  for (int a = 0; a < 2; ++a)
    b.ice[a] = [f, a](std::span<const double> xx) { return predict_prob(f->ice[a], pick(xx, f->principal_columns)); };
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) {
      b.event[a][c] = std::make_shared<SubsetSurvival>(f->event[a][c], f->outcome_columns);
      SurvivalPtr cens = f->censoring[a][c] ? SurvivalPtr(f->censoring[a][c]) : SurvivalPtr(no_jump_model(0));
      b.censoring[a][c] = std::make_shared<SubsetSurvival>(
          cens, f->censoring[a][c] ? f->censoring_columns : std::vector<std::size_t>{});
    }
  return b;
}

NuisanceBundle oracle_nuisances(const DgpSpec& spec, double horizon, std::size_t steps) {
  auto s = std::make_shared<const DgpSpec>(spec);
  NuisanceBundle b;
  const double e = spec.propensity();
  b.propensity = [e](std::span<const double>) { return e; };
  for (int a = 0; a < 2; ++a)
    b.ice[a] = [s, a](std::span<const double> x) { return s->ice_probability(a, x); };
  std::shared_ptr<const CoxFit> cens;
  if (spec.censoring) {
    if (!(horizon > 0.0) || steps == 0) throw InvalidArgument("oracle censoring needs a positive horizon");
    const double h = horizon / static_cast<double>(steps);
    std::vector<double> times(steps), inc(steps, std::exp(spec.censoring_intercept) * h);
    for (std::size_t k = 0; k < steps; ++k) times[k] = h * static_cast<double>(k + 1);
    cens = std::make_shared<const CoxFit>(spec.censoring_slopes, Eigen::VectorXd::Zero(4), times, inc);
  } else {
    cens = no_jump_model(4);
  }
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) {
      b.event[a][c] = std::make_shared<FunctionSurvival>(
          [s, a, c](double t, std::span<const double> x) { return s->cell_survival(a, c, t, x); });
      b.censoring[a][c] = cens;
    }
  return b;
}

std::array<ScoreCoefficients, 4> zeta_coefficients(double zeta) {
  const double k = 1.0 / (1.0 - zeta);
  std::array<ScoreCoefficients, 4> c{};
  c[index(Stratum::s01)] = {0.0, -k, k};
  c[index(Stratum::s00)] = {1.0, -1.0 + k, -k};
  c[index(Stratum::s11)] = {0.0, k, 1.0 - k};
  c[index(Stratum::s10)] = {0.0, -zeta * k, zeta * k};
  return c;
}

std::array<double, 4> zeta_scores(double p0, double p1, double zeta) {
  auto c = zeta_coefficients(zeta);
  std::array<double, 4> out{};
  for (Stratum u : kAllStrata) out[index(u)] = c[index(u)].a + c[index(u)].b * p0 + c[index(u)].c * p1;
  return out;
}

double zeta_max(double p0, double p1) { return 1.0 - (p1 - p0) / std::min(p1, 1.0 - p0); }

namespace {

struct CellWork {
  std::vector<std::size_t> rows;
  Eigen::MatrixXd psi;  // rows x m
};

// Augmentation integral for one record; writes m values.
void record_integral(const ConditionalSurvival& event, const ConditionalSurvival& cens, const TrialRecord& r,
                     const TimeGrid& grid, double* out) {
  const std::size_t m = grid.size();
  auto times = cens.jump_times();
  auto inc = cens.baseline_increments();
  const std::span<const double> x(r.covariates);
  const double rr = cens.has_jumps() ? cens.relative_risk(x) : 0.0;
  const double y = r.time;
  double dn = 0.0;  // dN^C contribution, active for t >= Y
  if (r.event == 0 && cens.has_jumps()) {
    double s = std::max(event.survival(y, x), 1e-300);
    dn = 1.0 / (s * cens.survival_left(y, x));
  }
  double lam = 0.0, comp = 0.0;
  std::size_t j = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const double t = grid[k];
    const double limit = std::min(t, y);
    while (j < times.size() && times[j] <= limit) {
      double sc_left = std::exp(-rr * lam);
      double s = std::max(event.survival(times[j], x), 1e-300);
      comp += rr * inc[j] / (s * sc_left);
      lam += inc[j];
      ++j;
    }
    out[k] = (r.event == 0 && y <= t ? dn : 0.0) - comp;
  }
}

}  // namespace

Eigen::MatrixXd martingale_terms(const NuisanceBundle& bundle, const Dataset& d, int arm, int ice,
                                 const std::vector<std::size_t>& rows, const TimeGrid& grid) {
  const auto& cens = *bundle.censoring[arm][ice];
  if (!cens.has_jumps()) throw InvalidArgument("censoring model must expose its hazard jumps");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(grid.size()));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tmp(out.rows(), out.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    record_integral(*bundle.event[arm][ice], cens, d[rows[k]], grid, tmp.row(static_cast<Eigen::Index>(k)).data());
  out = tmp;
  return out;
}

MrEstimate mr_survival(const NuisanceBundle& bundle, const Dataset& d, const TimeGrid& grid,
                       const SensitivityPoint& point, const MrOptions& opt) {
  if (!(point.zeta >= 0.0 && point.zeta < 1.0)) throw InvalidArgument("zeta must lie in [0, 1)");
  if (point.zeta != 0.0 && (point.xi0 != 0.0 || point.xi1 != 0.0))
    throw InvalidArgument("zeta and xi cannot both depart from their benchmark values");
  if (d.empty()) throw DataError("weighting estimator on an empty dataset");
  const double eps = opt.positivity_eps;
  const std::size_t n = d.size(), m = grid.size();
  const double nd = static_cast<double>(n);

  MrEstimate est;
  est.grid = grid;
  est.point = point;
  auto& diag = est.diagnostics;

  std::vector<double> e(n), p0(n), p1(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> x(d[i].covariates);
    auto clip = [&](double v, std::size_t& counter) {
      if (v < eps) {
        ++counter;
        return eps;
      }
      if (v > 1.0 - eps) {
        ++counter;
        return 1.0 - eps;
      }
      return v;
    };
    e[i] = clip(bundle.propensity(x), diag.propensity_truncated);
    p0[i] = clip(bundle.ice[0](x), diag.ice_truncated);
    p1[i] = clip(bundle.ice[1](x), diag.ice_truncated);
  }
  double P0 = 0.0, P1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = d[i];
    P0 += ((1 - r.arm) * (r.ice - p0[i]) / (1.0 - e[i]) + p0[i]) / nd;
    P1 += (r.arm * (r.ice - p1[i]) / e[i] + p1[i]) / nd;
  }
  est.p0 = P0;
  est.p1 = P1;

  const auto coef = zeta_coefficients(point.zeta);
  std::vector<Stratum> strata = {Stratum::s00, Stratum::s01, Stratum::s11};
  if (point.zeta > 0.0) strata = {Stratum::s00, Stratum::s01, Stratum::s10, Stratum::s11};

  // conditional survival per cell: mu[z][d](i, k)
  std::array<std::array<Eigen::MatrixXd, 2>, 2> mu;
  std::array<std::array<bool, 2>, 2> needed{};
  for (Stratum u : strata)
    for (int z = 0; z < 2; ++z) needed[z][ice_under(u, z)] = true;
  std::array<std::array<CellWork, 2>, 2> cells;
  for (std::size_t i = 0; i < n; ++i) cells[d[i].arm][d[i].ice].rows.push_back(i);
  for (int z = 0; z < 2; ++z)
    for (int c = 0; c < 2; ++c) {
      if (!needed[z][c]) continue;
      const auto& ev = *bundle.event[z][c];
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mm(n, m);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> x(d[i].covariates);
        for (std::size_t k = 0; k < m; ++k) mm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = ev.survival(grid[k], x);
      }
      mu[z][c] = mm;
      auto& cw = cells[z][c];
      const auto& cens = *bundle.censoring[z][c];
      if (!cens.has_jumps()) throw InvalidArgument("censoring model must expose its hazard jumps");
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> psi(cw.rows.size(), m);
      std::vector<double> integral(m);
      for (std::size_t k = 0; k < cw.rows.size(); ++k) {
        const auto& r = d[cw.rows[k]];
        std::span<const double> x(r.covariates);
        record_integral(ev, cens, r, grid, integral.data());
        for (std::size_t q = 0; q < m; ++q) {
          const double t = grid[q];
          double ipcw = r.time >= t ? 1.0 / cens.survival_left(t, x) : 0.0;
          psi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(q)) =
              ipcw + mm(static_cast<Eigen::Index>(cw.rows[k]), static_cast<Eigen::Index>(q)) * integral[q];
        }
      }
      cw.psi = psi;
    }

  std::vector<double> pi(n), w(n), ifu(n);
  std::vector<double> tilt(m);
  for (Stratum u : strata) {
    const int iu = index(u);
    const auto& cf = coef[iu];
    double Pu = cf.a + cf.b * P0 + cf.c * P1;
    if (!(Pu > 0.0)) {
      diag.warnings.push_back("stratum " + to_string(u) + " has nonpositive estimated proportion " +
                              format_double(Pu) + "; its curves are not reported");
      est.proportions[iu] = Pu;
      continue;
    }
    est.present[iu] = true;
    est.proportions[iu] = Pu;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = d[i];
      pi[i] = cf.a + cf.b * p0[i] + cf.c * p1[i];
      if (pi[i] < 0.0) ++diag.negative_scores;
      w[i] = std::max(pi[i], 0.0);
      ifu[i] = cf.b * (1 - r.arm) / (1.0 - e[i]) * (r.ice - p0[i]) + cf.c * r.arm / e[i] * (r.ice - p1[i]);
    }
    for (int z = 0; z < 2; ++z) {
      const int c = ice_under(u, z);
      const auto& M = mu[z][c];
      const auto& cw = cells[z][c];
      const double xi = z == 1 ? point.xi1 : point.xi0;
      // tilted strata: (1,01),(1,11) share cell (1,1); (0,01),(0,00) share cell (0,0)
      const bool tilted = xi != 0.0 && ((z == 1 && (u == Stratum::s01 || u == Stratum::s11)) ||
                                        (z == 0 && (u == Stratum::s01 || u == Stratum::s00)));
      if (tilted)
        for (std::size_t k = 0; k < m; ++k) tilt[k] = std::exp(xi * grid[k] / grid.t_max());
      std::vector<double> sum(m, 0.0);
      std::size_t next_cell = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = d[i];
        const bool in_cell = r.arm == z && r.ice == c;
        const double ez = z == 1 ? e[i] : 1.0 - e[i];
        const double pz = z == 1 ? p1[i] : p0[i];
        const double q = c == 1 ? pz : 1.0 - pz;
        const double ipw = in_cell ? w[i] / (ez * q) : 0.0;
        const auto row = static_cast<Eigen::Index>(i);
        const Eigen::Index prow = in_cell ? static_cast<Eigen::Index>(next_cell++) : -1;
        // clipped scores for the tilt split
        double s01 = 0.0, sother = 0.0, mass = 0.0;
        if (tilted) {
          auto sc = zeta_scores(p0[i], p1[i], 0.0);
          s01 = std::max(sc[index(Stratum::s01)], 0.0);
          sother = std::max(sc[z == 1 ? index(Stratum::s11) : index(Stratum::s00)], 0.0);
          mass = s01 + sother;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double muv = M(row, static_cast<Eigen::Index>(k));
          double ratio = 1.0;
          if (tilted) {
            double denom = s01 * tilt[k] + sother;
            ratio = denom > 0.0 ? (u == Stratum::s01 ? tilt[k] : 1.0) * mass / denom : 1.0;
            ++diag.tilt_evaluations;
            if (ratio * muv > 1.0) {
              ++diag.tilt_clipped;
              ratio = muv > 0.0 ? 1.0 / muv : 1.0;
            }
          }
          double term = ratio * muv * (ifu[i] - ipw) + w[i] * ratio * muv;
          if (in_cell) term += ipw * ratio * cw.psi(prow, static_cast<Eigen::Index>(k));
          sum[k] += term;
        }
      }
      auto& raw = est.survival_raw[z][iu];
      auto& clipped = est.survival[z][iu];
      raw.resize(m);
      clipped.resize(m);
      for (std::size_t k = 0; k < m; ++k) {
        raw[k] = sum[k] / nd / Pu;
        clipped[k] = std::clamp(raw[k], 0.0, 1.0);
        if (clipped[k] != raw[k]) ++diag.survival_clipped;
      }
    }
    est.tau[iu].resize(m);
    for (std::size_t k = 0; k < m; ++k) est.tau[iu][k] = est.survival_raw[1][iu][k] - est.survival_raw[0][iu][k];
  }
  if (diag.tilt_evaluations > 0 &&
      static_cast<double>(diag.tilt_clipped) > 0.1 * static_cast<double>(diag.tilt_evaluations))
    diag.warnings.push_back("WARNING: tilt pushed conditional survival above 1 in " +
                            std::to_string(diag.tilt_clipped) + " of " + std::to_string(diag.tilt_evaluations) +
                            " evaluations (>10%); this xi is implausible");
  if (diag.negative_scores > 0)
    diag.warnings.push_back(std::to_string(diag.negative_scores) +
                            " negative fitted principal scores clipped to 0 in the weights");
  if (diag.propensity_truncated + diag.ice_truncated > 0)
    diag.warnings.push_back("positivity guard truncated " +
                            std::to_string(diag.propensity_truncated + diag.ice_truncated) + " probabilities to [" +
                            format_double(eps) + ", " + format_double(1.0 - eps) + "]");
  return est;
}

Dataset to_canonical(const Dataset& d, Monotonicity m) {
  return m == Monotonicity::control_geq_treated ? d.with_flipped_arm() : d;
}

MrEstimate to_actual(MrEstimate c, Monotonicity m) {
  c.monotonicity = m;
  if (m != Monotonicity::control_geq_treated) return c;
  MrEstimate a = c;
  for (Stratum u : kAllStrata) {
    const int from = index(u), to = index(swap_potential(u));
    a.present[to] = c.present[from];
    a.proportions[to] = c.proportions[from];
    for (int z = 0; z < 2; ++z) {
      a.survival[1 - z][to] = c.survival[z][from];
      a.survival_raw[1 - z][to] = c.survival_raw[z][from];
    }
    a.tau[to] = c.tau[from];
    for (double& v : a.tau[to]) v = -v;
  }
  a.p0 = c.p1;
  a.p1 = c.p0;
  return a;
}

namespace {

void require_direction(const WeightingConfig& config) {
  config.assumptions.validate();
  if (config.assumptions.monotonicity == Monotonicity::none)
    throw InvalidArgument("the weighting engine needs a monotonicity direction (d1>=d0 or d0>=d1); "
                          "departures from it are handled through zeta");
}

SensitivityPoint point_of(const AssumptionConfig& a) { return {a.zeta, a.xi0, a.xi1}; }

void check_zeta(const MrEstimate& canonical, const SensitivityPoint& p) {
  if (p.zeta == 0.0) return;
  double bound = zeta_max(canonical.p0, canonical.p1);
  if (p.zeta >= bound)
    throw InvalidArgument("zeta " + format_double(p.zeta) + " is not below the bound zeta_max = " +
                          format_double(bound) + " implied by the estimated ICE proportions");
}

}  // namespace

MrEstimate estimate_with_nuisances(const NuisanceBundle& bundle, const Dataset& d, const TimeGrid& grid,
                                   const WeightingConfig& config) {
  require_direction(config);
  const auto m = config.assumptions.monotonicity;
  const bool flip = m == Monotonicity::control_geq_treated;
  Dataset canon = to_canonical(d, m);
  auto cb = flip ? bundle.flipped() : bundle;
  auto est = mr_survival(cb, canon, grid, point_of(config.assumptions), config.options);
  check_zeta(est, point_of(config.assumptions));
  return to_actual(std::move(est), m);
}

MrEstimate estimate_weighting(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config) {
  require_direction(config);
  Dataset canon = to_canonical(d, config.assumptions.monotonicity);
  auto bundle = fit_nuisances(canon, config.covariates);
  auto est = mr_survival(bundle, canon, grid, point_of(config.assumptions), config.options);
  check_zeta(est, point_of(config.assumptions));
  return to_actual(std::move(est), config.assumptions.monotonicity);
}

double quantile(std::vector<double> v, double prob) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  double h = prob * static_cast<double>(v.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

namespace {

// Flattened reported quantities of an estimate: clipped curves, tau, proportions.
std::vector<double> flatten(const MrEstimate& e, const std::array<bool, 4>& present, std::size_t m) {
  std::vector<double> out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Stratum u : kAllStrata) {
    if (!present[index(u)]) continue;
    bool ok = e.present[index(u)];
    for (int z = 0; z < 2; ++z)
      for (std::size_t k = 0; k < m; ++k) out.push_back(ok ? e.survival[z][index(u)][k] : nan);
    for (std::size_t k = 0; k < m; ++k) out.push_back(ok ? e.tau[index(u)][k] : nan);
    out.push_back(ok ? e.proportions[index(u)] : nan);
  }
  return out;
}

void attach_bands(MrEstimate& est, const std::vector<std::vector<double>>& reps, std::size_t failures,
                  bool approximate, const std::vector<std::string>& errors = {}) {
  const std::size_t m = est.grid.size();
  Bands b;
  b.replicates = reps.size();
  b.failures = failures;
  for (const auto& e : errors)
    if (!e.empty()) ++b.failure_reasons[e];
  b.approximate = approximate;
  std::size_t pos = 0;
  std::vector<double> col;
  auto band = [&](double& lo, double& hi) {
    col.clear();
    for (const auto& r : reps)
      if (std::isfinite(r[pos])) col.push_back(r[pos]);
    lo = quantile(col, 0.025);
    hi = quantile(col, 0.975);
    ++pos;
  };
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (!est.present[iu]) continue;
    for (int z = 0; z < 2; ++z) {
      b.survival_lo[z][iu].resize(m);
      b.survival_hi[z][iu].resize(m);
      for (std::size_t k = 0; k < m; ++k) band(b.survival_lo[z][iu][k], b.survival_hi[z][iu][k]);
    }
    b.tau_lo[iu].resize(m);
    b.tau_hi[iu].resize(m);
    for (std::size_t k = 0; k < m; ++k) band(b.tau_lo[iu][k], b.tau_hi[iu][k]);
    band(b.proportion_lo[iu], b.proportion_hi[iu]);
  }
  const std::size_t total = reps.size() + failures;
  if (total > 0 && static_cast<double>(failures) > 0.05 * static_cast<double>(total))
  {
    std::string why;
    for (const auto& [msg, count] : b.failure_reasons) why += "; " + std::to_string(count) + "x " + msg;
    est.diagnostics.warnings.push_back("WARNING: " + std::to_string(failures) + " of " + std::to_string(total) +
                                       " bootstrap replicates failed (>5%)" + why);
  }
  if (approximate)
    est.diagnostics.warnings.push_back("bootstrap bands reuse point-estimate nuisances (approximation)");
  est.bands = std::move(b);
}

}  // namespace

std::vector<MrEstimate> bootstrap_sweep(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config,
                                        const std::vector<SensitivityPoint>& points, const BootstrapConfig& boot) {
  require_direction(config);
  if (points.empty()) throw InvalidArgument("no sensitivity points given");
  const auto mono = config.assumptions.monotonicity;
  Dataset canon = to_canonical(d, mono);
  auto bundle = fit_nuisances(canon, config.covariates);
  std::vector<MrEstimate> estimates;
  std::vector<MrEstimate> canonical_estimates;
  for (const auto& p : points) {
    AssumptionConfig a = config.assumptions;
    a.zeta = p.zeta;
    a.xi0 = p.xi0;
    a.xi1 = p.xi1;
    a.validate();
    auto c = mr_survival(bundle, canon, grid, p, config.options);
    check_zeta(c, p);
    estimates.push_back(to_actual(c, mono));
  }
  if (boot.replicates == 0) return estimates;
  if (boot.replicates < 2) throw InvalidArgument("bootstrap needs at least 2 replicates");

  const std::size_t m = grid.size();
  const std::size_t B = boot.replicates;
  std::array<std::vector<std::size_t>, 2> arm_rows;
  for (std::size_t i = 0; i < d.size(); ++i) arm_rows[d[i].arm].push_back(i);
  // reps[point][replicate] -> flattened vector (empty on failure)
  std::vector<std::vector<std::vector<double>>> reps(points.size(), std::vector<std::vector<double>>(B));
  std::vector<std::string> errors(B);
  parallel_for(B, boot.threads, [&](std::size_t r) {
    Rng rng = make_rng(boot.seed, r);
    std::vector<std::size_t> idx;
    idx.reserve(d.size());
    for (int a = 0; a < 2; ++a) {
      const auto& rows = arm_rows[a];
      if (rows.empty()) continue;
      boost::random::uniform_int_distribution<std::size_t> pickrow(0, rows.size() - 1);
      for (std::size_t k = 0; k < rows.size(); ++k) idx.push_back(rows[pickrow(rng)]);
    }
    try {
      Dataset rs = canon.subset(idx);
      NuisanceBundle rb = boot.reuse_nuisances ? bundle : fit_nuisances(rs, config.covariates);
      for (std::size_t p = 0; p < points.size(); ++p) {
        auto c = mr_survival(rb, rs, grid, points[p], config.options);
        reps[p][r] = flatten(to_actual(std::move(c), mono), estimates[p].present, m);
      }
    } catch (const Error& e) {
      for (auto& v : reps) v[r].clear();
      errors[r] = e.what();
    }
  });
  for (std::size_t p = 0; p < points.size(); ++p) {
    std::vector<std::vector<double>> ok;
    std::size_t failures = 0;
    for (auto& v : reps[p]) {
      if (v.empty()) ++failures;
      else ok.push_back(std::move(v));
    }
    attach_bands(estimates[p], ok, failures, boot.reuse_nuisances, errors);
  }
  return estimates;
}

MrEstimate bootstrap_ci(const Dataset& d, const TimeGrid& grid, const WeightingConfig& config,
                        const BootstrapConfig& boot) {
  return bootstrap_sweep(d, grid, config, {point_of(config.assumptions)}, boot).front();
}

namespace {

struct CanonicalScores {
  std::vector<double> p0, p1;
  double P0 = 0.0, P1 = 0.0;
};

CanonicalScores canonical_scores(const NuisanceBundle& b, const Dataset& d, double eps) {
  CanonicalScores s;
  const std::size_t n = d.size();
  s.p0.resize(n);
  s.p1.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> x(d[i].covariates);
    double e = std::clamp(b.propensity(x), eps, 1.0 - eps);
    s.p0[i] = std::clamp(b.ice[0](x), eps, 1.0 - eps);
    s.p1[i] = std::clamp(b.ice[1](x), eps, 1.0 - eps);
    const auto& r = d[i];
    s.P0 += ((1 - r.arm) * (r.ice - s.p0[i]) / (1.0 - e) + s.p0[i]) / static_cast<double>(n);
    s.P1 += (r.arm * (r.ice - s.p1[i]) / e + s.p1[i]) / static_cast<double>(n);
  }
  return s;
}

}  // namespace

std::vector<SmdRow> weighted_smd(const NuisanceBundle& b, const Dataset& d, Monotonicity mono) {
  const std::size_t n = d.size(), p = d.num_covariates();
  auto sc = canonical_scores(b, d, 0.01);
  const bool flip = mono == Monotonicity::control_geq_treated;
  const double pi01 = sc.P1 - sc.P0, pi00 = 1.0 - sc.P1, pi11 = sc.P0;

  // W per record for each (arm, stratum) that is weighted
  std::vector<double> w101(n), w001(n), w000(n), w111(n);
  for (std::size_t i = 0; i < n; ++i) {
    double q01 = std::max(sc.p1[i] - sc.p0[i], 0.0), q00 = 1.0 - sc.p1[i], q11 = sc.p0[i];
    w101[i] = (q01 / sc.p1[i]) / (pi01 / sc.P1);
    w001[i] = (q01 / (1.0 - sc.p0[i])) / (pi01 / (1.0 - sc.P0));
    w000[i] = (q00 / (1.0 - sc.p0[i])) / (pi00 / (1.0 - sc.P0));
    w111[i] = (q11 / sc.p1[i]) / (pi11 / sc.P1);
  }
  std::vector<double> ones(n, 1.0);

  auto cell_mean = [&](int z, int c, const std::vector<double>& w, std::size_t j) {
    double num = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (d[i].arm == z && d[i].ice == c) {
        num += w[i] * d[i].covariates[j];
        cnt += 1.0;
      }
    return cnt > 0.0 ? num / cnt : 0.0;
  };
  auto cell_var = [&](int z, int c, std::size_t j) {
    double s = 0.0, s2 = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (d[i].arm == z && d[i].ice == c) {
        s += d[i].covariates[j];
        cnt += 1.0;
      }
    if (cnt < 2.0) return 0.0;
    double mean = s / cnt;
    for (std::size_t i = 0; i < n; ++i)
      if (d[i].arm == z && d[i].ice == c) s2 += (d[i].covariates[j] - mean) * (d[i].covariates[j] - mean);
    return s2 / (cnt - 1.0);
  };

  struct Contrast {
    Stratum u;
    int z1, d1, z0, d0;
    const std::vector<double>* w1;
    const std::vector<double>* w0;
  };
  const std::vector<Contrast> contrasts = {
      {Stratum::s01, 1, 1, 0, 0, &w101, &w001},
      {Stratum::s00, 1, 0, 0, 0, &ones, &w000},
      {Stratum::s11, 1, 1, 0, 1, &w111, &ones},
  };
  std::vector<SmdRow> rows;
  for (const auto& c : contrasts)
    for (std::size_t j = 0; j < p; ++j) {
      SmdRow r;
      r.covariate = d.covariate_names()[j];
      r.contrast = to_string(flip ? swap_potential(c.u) : c.u);
      double sigma = std::sqrt((cell_var(c.z1, c.d1, j) + cell_var(c.z0, c.d0, j)) / 2.0);
      if (!(sigma > 0.0)) {
        r.degenerate = true;
      } else {
        double sign = flip ? -1.0 : 1.0;
        r.unweighted = sign * (cell_mean(c.z1, c.d1, ones, j) - cell_mean(c.z0, c.d0, ones, j)) / sigma;
        r.weighted = sign * (cell_mean(c.z1, c.d1, *c.w1, j) - cell_mean(c.z0, c.d0, *c.w0, j)) / sigma;
      }
      rows.push_back(r);
    }
  return rows;
}

std::vector<SmdRow> weighted_smd(const Dataset& d, const WeightingConfig& config) {
  require_direction(config);
  Dataset canon = to_canonical(d, config.assumptions.monotonicity);
  auto b = fit_nuisances(canon, config.covariates);
  return weighted_smd(b, canon, config.assumptions.monotonicity);
}

std::vector<StratumProfile> strata_covariate_profile_weighting(const NuisanceBundle& b, const Dataset& d,
                                                               Monotonicity mono) {
  const std::size_t n = d.size(), p = d.num_covariates();
  auto sc = canonical_scores(b, d, 0.01);
  const bool flip = mono == Monotonicity::control_geq_treated;
  std::vector<StratumProfile> out;
  for (Stratum u : {Stratum::s00, Stratum::s01, Stratum::s11}) {
    StratumProfile prof;
    prof.stratum = flip ? swap_potential(u) : u;
    std::vector<double> w(n);
    double tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::max(zeta_scores(sc.p0[i], sc.p1[i], 0.0)[index(u)], 0.0);
      tot += w[i];
    }
    prof.proportion = tot / static_cast<double>(n);
    prof.mean.assign(p, 0.0);
    prof.sd.assign(p, 0.0);
    if (prof.proportion < 1e-3) {
      prof.suppressed = true;
      out.push_back(prof);
      continue;
    }
    for (std::size_t j = 0; j < p; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += w[i] * d[i].covariates[j];
      m /= tot;
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += w[i] * (d[i].covariates[j] - m) * (d[i].covariates[j] - m);
      prof.mean[j] = m;
      prof.sd[j] = std::sqrt(v / tot);
    }
    out.push_back(prof);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b2) { return index(a.stratum) < index(b2.stratum); });
  return out;
}

std::string to_string(Misspecification m) {
  switch (m) {
    case Misspecification::none: return "none";
    case Misspecification::outcome: return "outcome";
    case Misspecification::principal_and_outcome: return "principal+outcome";
    case Misspecification::propensity: return "propensity";
    case Misspecification::censoring: return "censoring";
  }
  return "?";
}

RobustnessReport multiply_robustness_check(const DgpSpec& spec, Misspecification scenario, std::size_t n,
                                           std::size_t replicates, const TimeGrid& grid, std::uint64_t seed,
                                           unsigned threads) {
  if (replicates == 0) throw InvalidArgument("need at least one replicate");
  DgpSpec s = spec;
  s.set_n(n);
  std::vector<std::string> reduced;
  for (const auto& name : kSimCovariates)
    if (name != "nephrectomy") reduced.push_back(name);
  WeightingConfig cfg;
  cfg.assumptions.monotonicity = Monotonicity::control_geq_treated;
  switch (scenario) {
    case Misspecification::none: break;
    case Misspecification::outcome: cfg.covariates.outcome = reduced; break;
    case Misspecification::principal_and_outcome:
      cfg.covariates.outcome = reduced;
      cfg.covariates.principal = reduced;
      break;
    case Misspecification::propensity: cfg.covariates.propensity = reduced; break;
    case Misspecification::censoring: cfg.covariates.censoring = reduced; break;
  }
  const std::size_t m = grid.size();
  std::vector<std::optional<MrEstimate>> results(replicates);
  parallel_for(replicates, threads, [&](std::size_t r) {
    auto trial = simulate(s, splitmix64(seed) + r);
    try {
      results[r] = estimate_weighting(trial.data, grid, cfg);
    } catch (const Error&) {
    }
  });
  auto truth = true_spce(s, grid, 1000000, seed ^ 0x5eedULL);
  RobustnessReport rep;
  rep.scenario = scenario;
  rep.n = n;
  for (auto& row : rep.max_abs_bias) row.fill(std::numeric_limits<double>::quiet_NaN());
  std::size_t ok = 0;
  std::array<std::array<std::vector<double>, 4>, 2> mean;
  for (const auto& r : results) {
    if (!r) {
      ++rep.failures;
      continue;
    }
    ++ok;
    for (Stratum u : kAllStrata)
      if (r->present[index(u)])
        for (int z = 0; z < 2; ++z) {
          auto& v = mean[z][index(u)];
          v.resize(m, 0.0);
          for (std::size_t k = 0; k < m; ++k) v[k] += r->survival_raw[z][index(u)][k];
        }
  }
  rep.replicates = ok;
  for (Stratum u : kAllStrata)
    for (int z = 0; z < 2; ++z) {
      const auto& v = mean[z][index(u)];
      if (v.empty() || truth.survival[z][index(u)].empty()) continue;
      double worst = 0.0;
      for (std::size_t k = 0; k < m; ++k)
        worst = std::max(worst, std::abs(v[k] / static_cast<double>(ok) - truth.survival[z][index(u)][k]));
      rep.max_abs_bias[z][index(u)] = worst;
      rep.worst = std::max(rep.worst, worst);
    }
  return rep;
}

}  // namespace spce
