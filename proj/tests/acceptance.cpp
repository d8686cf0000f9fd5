// Acceptance run: one PASS/FAIL line per criterion. Exit code 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "spce/glm.hpp"
#include "spce/mixture.hpp"
#include "spce/sensitivity.hpp"
#include "spce/simulator.hpp"
#include "spce/survival.hpp"
#include "spce/weighting.hpp"

using namespace spce;

namespace {

// Tolerances and sizes.
constexpr double kFreqTol = 0.01;
constexpr double kCensorTol = 0.02;
constexpr double kWeightingTol = 0.05;
constexpr double kOracleTol = 0.02;
constexpr double kBiasTol = 0.03;
constexpr double kMixtureTol = 0.05;
constexpr double kCoverage = 0.90;
constexpr double kIttTol = 1e-10;
constexpr double kCoxTol = 1e-4;
constexpr double kWeibullGradTol = 1e-5;
constexpr double kQuadratureTol = 1e-8;
constexpr double kLogisticTol = 1e-4;
constexpr double kSmdTol = 0.1;

struct Outcome {
  bool pass = true;
  std::string detail;
  double limit_seconds = 0.0;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void note(Outcome& o, const std::string& s) {
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += s;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

AssumptionConfig monotone() {
  AssumptionConfig c;
  c.monotonicity = Monotonicity::control_geq_treated;
  return c;
}

Outcome dgp_fidelity() {
  Outcome o{true, "", 30.0};
  auto spec = DgpSpec::appendix_d();
  spec.set_n(100000);
  auto trial = simulate(spec, 42);
  std::array<double, 4> f{};
  double cens = 0.0;
  const double n = static_cast<double>(trial.data.size());
  for (std::size_t i = 0; i < trial.data.size(); ++i) {
    f[index(trial.strata[i])] += 1.0 / n;
    cens += (1 - trial.data[i].event) / n;
  }
  const std::map<Stratum, double> target = {
      {Stratum::s00, 0.44}, {Stratum::s10, 0.12}, {Stratum::s11, 0.40}, {Stratum::s01, 0.04}};
  for (const auto& [u, v] : target) {
    o.pass &= std::abs(f[index(u)] - v) < kFreqTol;
    note(o, to_string(u) + " " + fmt("%.4f", f[index(u)]));
  }
  o.pass &= std::abs(cens - 0.10) < kCensorTol;
  note(o, "censored " + fmt("%.4f", cens));
  return o;
}

Outcome weighting_recovery() {
  Outcome o{true, "", 600.0};
  WeightingConfig cfg;
  const std::map<Stratum, double> target = {{Stratum::s00, 0.45}, {Stratum::s10, 0.117}, {Stratum::s11, 0.435}};
  std::array<double, 4> mean{};
  const int seeds = 20;
  for (int s = 1; s <= seeds; ++s) {
    auto trial = simulate(DgpSpec::appendix_d(), static_cast<std::uint64_t>(s));
    auto est = estimate_weighting(trial.data, default_grid(trial.data), cfg);
    for (int u = 0; u < 4; ++u) mean[u] += est.proportions[u] / seeds;
  }
  for (const auto& [u, v] : target) {
    o.pass &= std::abs(mean[index(u)] - v) < kWeightingTol;
    note(o, "mean " + to_string(u) + " " + fmt("%.3f", mean[index(u)]));
  }
  // One full trial with B=1000, timed on its own.
  auto t0 = std::chrono::steady_clock::now();
  auto trial = simulate(DgpSpec::appendix_d(), 1);
  BootstrapConfig boot;
  boot.replicates = 1000;
  boot.seed = 1;
  auto est = bootstrap_ci(trial.data, default_grid(trial.data), cfg, boot);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& b = *est.bands;
  o.pass &= secs < 600.0 && b.replicates - b.failures > 0;
  note(o, "B=1000 trial " + fmt("%.1fs", secs) + ", 00 " + fmt("%.3f", est.proportions[index(Stratum::s00)]) +
              fmt(" (%.3f", b.proportion_lo[index(Stratum::s00)]) + fmt(", %.3f)", b.proportion_hi[index(Stratum::s00)]) +
              ", failed replicates " + std::to_string(b.failures));
  return o;
}

Outcome oracle_check() {
  Outcome o{true, "", 120.0};
  auto spec = DgpSpec::assumption_compliant();
  spec.set_n(20000);
  auto trial = simulate(spec, 2024);
  auto grid = TimeGrid::equispaced(40.0, 40);
  auto truth = true_spce_quadrature(spec, grid);
  auto est = estimate_with_nuisances(oracle_nuisances(spec, 200.0), trial.data, grid, WeightingConfig{});
  double worst = 0.0;
  for (Stratum u : {Stratum::s00, Stratum::s11})
    for (int z = 0; z < 2; ++z)
      worst = std::max(worst, max_abs_diff(est.survival_raw[z][index(u)], truth.survival[z][index(u)]));
  o.pass = worst < kOracleTol;
  note(o, "max error " + fmt("%.4f", worst));
  return o;
}

Outcome robustness() {
  Outcome o{true, "", 1800.0};
  auto spec = DgpSpec::assumption_compliant();
  auto grid = TimeGrid::equispaced(40.0, 40);
  auto r = multiply_robustness_check(spec, Misspecification::outcome, 10000, 50, grid, 7);
  o.pass = r.worst < kBiasTol && r.failures == 0;
  note(o, "max bias " + fmt("%.4f", r.worst) + ", failed replicates " + std::to_string(r.failures));
  return o;
}

Outcome mixture_recovery() {
  Outcome o{true, "", 1800.0};
  auto trial = simulate(DgpSpec::appendix_d(), 1);
  auto grid = default_grid(trial.data);
  SamplerOptions opt;
  opt.chains = 6;
  opt.iters = 2000;
  opt.burnin = 1000;
  opt.seed = 1;
  auto fit = run_sampler(trial.data, monotone(), PriorSpec{}, grid, opt);
  const auto& s = fit.summary;
  const std::map<Stratum, double> target = {{Stratum::s00, 0.511}, {Stratum::s10, 0.009}, {Stratum::s11, 0.480}};
  for (const auto& [u, v] : target) {
    double m = s.proportions[index(u)]->mean;
    o.pass &= std::abs(m - v) < kMixtureTol;
    note(o, to_string(u) + " " + fmt("%.3f", m));
  }
  auto truth = true_spce_quadrature(trial.spec, grid);
  const auto& band = *s.spce[index(Stratum::s00)];
  const auto& tau = truth.tau[index(Stratum::s00)];
  std::size_t covered = 0;
  for (std::size_t k = 0; k < grid.size(); ++k) covered += band.lo[k] <= tau[k] && tau[k] <= band.hi[k];
  double cov = static_cast<double>(covered) / static_cast<double>(grid.size());
  o.pass &= cov >= kCoverage;
  note(o, "00 coverage " + fmt("%.2f", cov) + ", max split-Rhat " + fmt("%.3f", s.max_rhat));
  return o;
}

bool same_curves(const MrEstimate& a, const MrEstimate& b) {
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (a.present[iu] != b.present[iu]) return false;
    if (!a.present[iu]) continue;
    if (a.tau[iu] != b.tau[iu] || a.proportions[iu] != b.proportions[iu]) return false;
    for (int z = 0; z < 2; ++z)
      if (a.survival[z][iu] != b.survival[z][iu]) return false;
  }
  return true;
}

template <class F>
double timed(F&& f) {
  auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome identities() {
  Outcome o{true, "", 0.0};
  double slowest = 0.0;

  bool sums = true;
  slowest = std::max(slowest, timed([&] {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int r = 0; r < 100000; ++r) {
      double p0 = u(rng), p1 = u(rng);
      double lo = std::min(p0, p1), hi = std::max(p0, p1);
      auto m = principal_scores(lo, hi);
      sums &= std::abs(m.pi00 + m.pi01 + m.pi11 - 1.0) < 1e-12;
      auto s = zeta_scores(p0, p1, 0.99 * zeta_max(p0, p1) * u(rng));
      sums &= std::abs(s[0] + s[1] + s[2] + s[3] - 1.0) < 1e-12;
    }
  }));
  o.pass &= sums;
  note(o, std::string("scores sum to one ") + (sums ? "yes" : "no"));

  bool bitwise = true;
  slowest = std::max(slowest, timed([&] {
    auto trial = simulate(DgpSpec::appendix_d(), 101);
    auto grid = default_grid(trial.data, 25);
    WeightingConfig cfg;
    BootstrapConfig boot;
    boot.replicates = 0;
    auto plain = estimate_weighting(trial.data, grid, cfg);
    auto zs = zeta_sweep(trial.data, {0.0}, grid, cfg, boot);
    auto xs = xi_sweep(trial.data, {0.0}, {0.0}, grid, cfg, boot);
    bitwise = same_curves(zs.estimates[0], plain) && same_curves(xs.estimates[0], plain);
  }));
  o.pass &= bitwise;
  note(o, std::string("zeta=0 and xi=0 bitwise ") + (bitwise ? "yes" : "no"));

  double itt_err = 0.0;
  slowest = std::max(slowest, timed([&] {
    auto trial = simulate(DgpSpec::appendix_d(), 10);
    auto grid = default_grid(trial.data, 20);
    SamplerOptions opt;
    opt.chains = 1;
    opt.iters = 40;
    opt.burnin = 20;
    auto fit = run_sampler(trial.data, monotone(), PriorSpec{}, grid, opt);
    auto sp = spce_from_draws(fit.draws, grid);
    for (std::size_t r = 0; r < fit.draws.size(); ++r) {
      const auto& dr = fit.draws[r];
      auto itt = itt_from_draw(dr, trial.data, grid);
      for (std::size_t k = 0; k < grid.size(); ++k) {
        double sum = 0.0;
        for (Stratum u : dr.params.strata) sum += dr.proportions[index(u)] * sp.per_draw[r][index(u)][k];
        itt_err = std::max(itt_err, std::abs(sum - itt[k]));
      }
    }
  }));
  o.pass &= itt_err < kIttTol;
  note(o, "ITT decomposition error " + fmt("%.1e", itt_err));

  bool zero = true;
  slowest = std::max(slowest, timed([&] {
    auto spec = DgpSpec::appendix_d();
    spec.censoring = false;
    auto trial = simulate(spec, 11);
    Dataset canon = to_canonical(trial.data, Monotonicity::control_geq_treated);
    auto b = fit_nuisances(canon);
    auto grid = default_grid(canon, 50);
    for (int z = 0; z < 2; ++z)
      for (int c = 0; c < 2; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < canon.size(); ++i)
          if (canon[i].arm == z && canon[i].ice == c) rows.push_back(i);
        zero &= (martingale_terms(b, canon, z, c, rows, grid).array() == 0.0).all();
      }
  }));
  o.pass &= zero;
  note(o, std::string("martingale terms zero without censoring ") + (zero ? "yes" : "no"));

  o.pass &= slowest < 1.0;
  note(o, "slowest identity " + fmt("%.2fs", slowest));
  return o;
}

double breslow_pl(double beta, const std::vector<double>& t, const std::vector<int>& e,
                  const std::vector<double>& x) {
  std::map<double, std::pair<int, double>> groups;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (e[i]) {
      groups[t[i]].first += 1;
      groups[t[i]].second += x[i];
    }
  double ll = 0.0;
  for (const auto& [time, g] : groups) {
    double risk = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j)
      if (t[j] >= time) risk += std::exp(beta * x[j]);
    ll += beta * g.second - g.first * std::log(risk);
  }
  return ll;
}

double bernoulli_loglik(double a, double b, const std::vector<double>& x, const std::vector<double>& y) {
  double ll = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-(a + b * x[i])));
    ll += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return ll;
}

Outcome numerical_oracles() {
  Outcome o{true, "", 60.0};
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;

  {
    const int n = 30;
    std::vector<double> t(n), x(n);
    std::vector<int> e(n);
    Eigen::MatrixXd xm(n, 1);
    for (int i = 0; i < n; ++i) {
      x[i] = nd(rng);
      xm(i, 0) = x[i];
      double ti = -std::log(ud(rng)) / std::exp(0.8 * x[i]);
      double ci = -std::log(ud(rng)) / 0.3;
      t[i] = std::min(ti, ci);
      e[i] = ti <= ci;
    }
    auto fit = fit_cox(t, e, xm);
    double c = 0.0, h = 4.0;
    for (int level = 0; level < 14; ++level) {
      double best = -INFINITY, bb = c;
      for (int i = -40; i <= 40; ++i) {
        double b = c + h * i / 40.0, v = breslow_pl(b, t, e, x);
        if (v > best) best = v, bb = b;
      }
      c = bb;
      h /= 10.0;
    }
    double err = std::abs(fit.coefficients()(0) - c);
    o.pass &= err < kCoxTol;
    note(o, "Cox " + fmt("%.1e", err));
  }

  {
    const int n = 40;
    Eigen::MatrixXd x(n, 3);
    std::vector<double> t(n), w(n);
    std::vector<int> e(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = nd(rng);
      t[i] = 0.05 + 5.0 * ud(rng);
      e[i] = ud(rng) < 0.7;
      w[i] = ud(rng);
    }
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      WeibullParams p{0.5 * nd(rng), nd(rng) - 1.0, 0.5 * Eigen::VectorXd::NullaryExpr(3, [&] { return nd(rng); })};
      auto r = weibull_loglik(p, t, e, x, w, true);
      Eigen::VectorXd th = p.pack();
      for (Eigen::Index k = 0; k < th.size(); ++k) {
        double h = 1e-5 * std::max(1.0, std::abs(th(k)));
        Eigen::VectorXd a = th, b = th;
        a(k) += h;
        b(k) -= h;
        double fd = (weibull_loglik(WeibullParams::unpack(a), t, e, x, w, false).value -
                     weibull_loglik(WeibullParams::unpack(b), t, e, x, w, false).value) /
                    (2 * h);
        worst = std::max(worst, std::abs(fd - r.gradient(k)) / std::max(1.0, std::abs(r.gradient(k))));
      }
    }
    o.pass &= worst < kWeibullGradTol;
    note(o, "Weibull gradient " + fmt("%.1e", worst));
  }

  {
    using Q = boost::math::quadrature::gauss_kronrod<double, 31>;
    double worst = 0.0;
    for (double shape : {0.8, 1.0, 1.6, 2.5}) {
      WeibullParams p{std::log(shape), -4.5, Eigen::VectorXd::Constant(2, 0.3)};
      std::vector<double> x = {1.0, -0.5};
      double lin = weibull_linear_predictor(p, x);
      for (double t : {0.5, 2.0, 7.5, 15.0, 30.0}) {
        double integral = Q::integrate([&](double s) { return weibull_hazard(s, shape, lin); }, 0.0, t, 20, 1e-14);
        worst = std::max(worst, std::abs(weibull_survival(p, t, x) - std::exp(-integral)));
      }
    }
    o.pass &= worst < kQuadratureTol;
    note(o, "survival quadrature " + fmt("%.1e", worst));
  }

  {
    const int n = 200;
    std::vector<double> xs(n), ys(n);
    Eigen::MatrixXd x(n, 1);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      xs[i] = nd(rng);
      ys[i] = ud(rng) < 1.0 / (1.0 + std::exp(-(-0.4 + 1.1 * xs[i]))) ? 1.0 : 0.0;
      x(i, 0) = xs[i];
      y(i) = ys[i];
    }
    auto fit = fit_logistic(y, x);
    double ca = 0.0, cb = 0.0, h = 4.0;
    for (int level = 0; level < 12; ++level) {
      double best = -INFINITY, ba = ca, bb = cb;
      for (int i = -20; i <= 20; ++i)
        for (int j = -20; j <= 20; ++j) {
          double a = ca + h * i / 20.0, b = cb + h * j / 20.0, v = bernoulli_loglik(a, b, xs, ys);
          if (v > best) best = v, ba = a, bb = b;
        }
      ca = ba;
      cb = bb;
      h /= 8.0;
    }
    double err = std::max(std::abs(fit.coefficients(0) - ca), std::abs(fit.coefficients(1) - cb));
    o.pass &= err < kLogisticTol;
    note(o, "logistic " + fmt("%.1e", err));
  }
  return o;
}

Outcome balance() {
  Outcome o{true, "", 60.0};
  auto spec = DgpSpec::assumption_compliant();
  spec.set_n(5000);
  auto trial = simulate(spec, 77);
  auto rows = weighted_smd(trial.data, WeightingConfig{});
  double worst = 0.0;
  for (const auto& r : rows) worst = std::max(worst, std::abs(r.weighted));
  o.pass = !rows.empty() && worst < kSmdTol;
  note(o, std::to_string(rows.size()) + " contrasts, max |SMD| " + fmt("%.4f", worst));
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 DGP fidelity", dgp_fidelity},
      {"2 weighting recovery", weighting_recovery},
      {"3 oracle multiply-robust check", oracle_check},
      {"4 outcome misspecification robustness", robustness},
      {"5 mixture recovery", mixture_recovery},
      {"6 algebraic identities", identities},
      {"7 numerical oracles", numerical_oracles},
      {"8 balance diagnostic", balance},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    double secs = 0.0;
    try {
      secs = timed([&] { o = run(); });
      if (o.limit_seconds > 0.0 && secs >= o.limit_seconds) {
        o.pass = false;
        note(o, "over the time limit");
      }
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
