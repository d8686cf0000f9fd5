#include <cmath>
#include <map>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "doctest.h"
#include "spce/simulator.hpp"
#include "spce/survival.hpp"

using namespace spce;

namespace {

// Breslow partial likelihood for one covariate, written out directly.
double breslow_pl(double beta, const std::vector<double>& t, const std::vector<int>& e,
                  const std::vector<double>& x) {
  std::map<double, std::pair<int, double>> groups;  // time -> (deaths, sum x over deaths)
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

std::vector<std::pair<double, double>> nelson_aalen(const std::vector<double>& t, const std::vector<int>& e) {
  std::map<double, int> deaths;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (e[i]) deaths[t[i]]++;
  std::vector<std::pair<double, double>> out;
  double acc = 0.0;
  for (const auto& [time, d] : deaths) {
    int at_risk = 0;
    for (double s : t) at_risk += s >= time;
    acc += static_cast<double>(d) / at_risk;
    out.emplace_back(time, acc);
  }
  return out;
}

Eigen::MatrixXd column(const std::vector<double>& v) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

}  // namespace

TEST_CASE("null Cox model baseline equals Nelson-Aalen") {
  std::vector<double> t = {2.0, 3.0, 3.0, 5.0, 7.0, 7.0, 8.0, 11.0};
  std::vector<int> e = {1, 1, 0, 1, 1, 1, 0, 1};
  std::vector<double> xv = {0.5, -1.0, 0.2, 1.5, 0.0, -0.3, 2.0, 0.7};
  CoxOptions opt;
  opt.fixed_coefficients = Eigen::VectorXd::Zero(1);
  auto fit = fit_cox(t, e, column(xv), opt);
  auto na = nelson_aalen(t, e);
  auto base = fit.baseline_at_zero();
  REQUIRE(base.size() == na.size());
  for (std::size_t k = 0; k < na.size(); ++k) {
    CHECK(base[k].first == na[k].first);
    CHECK(base[k].second == doctest::Approx(na[k].second).epsilon(1e-14));
  }
  // p = 0 gives the same
  auto fit0 = fit_cox(t, e, Eigen::MatrixXd(8, 0));
  std::vector<double> none;
  for (const auto& [time, h] : na) CHECK(fit0.survival(time, none) == doctest::Approx(std::exp(-h)).epsilon(1e-14));
}

TEST_CASE("Cox MLE matches a 1-D partial likelihood grid") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  const int n = 20;
  std::vector<double> t(n), x(n);
  std::vector<int> e(n);
  for (int i = 0; i < n; ++i) {
    x[i] = nd(rng);
    double ti = -std::log(ud(rng)) / std::exp(0.8 * x[i]);
    double ci = -std::log(ud(rng)) / 0.3;
    t[i] = std::min(ti, ci);
    e[i] = ti <= ci;
  }
  auto fit = fit_cox(t, e, column(x));
  double c = 0.0, h = 4.0;
  for (int level = 0; level < 14; ++level) {
    double best = -INFINITY, bb = c;
    for (int i = -40; i <= 40; ++i) {
      double b = c + h * i / 40.0;
      double v = breslow_pl(b, t, e, x);
      if (v > best) {
        best = v;
        bb = b;
      }
    }
    c = bb;
    h /= 10.0;
  }
  CHECK(std::abs(fit.coefficients()(0) - c) < 1e-4);
  CHECK(fit.log_partial_likelihood == doctest::Approx(breslow_pl(c, t, e, x)).epsilon(1e-10));
}

TEST_CASE("identical covariate rows contribute equal relative risk") {
  // Rows 0 and 1 share x = 1; row 2 has x = 0. Distinct event times 1, 2, 3.
  std::vector<double> t = {1.0, 2.0, 3.0};
  std::vector<int> e = {1, 1, 1};
  std::vector<double> xv = {1.0, 1.0, 0.0};
  double beta = 0.4;
  double hand = (beta - std::log(2 * std::exp(beta) + 1.0)) + (beta - std::log(std::exp(beta) + 1.0)) +
                (0.0 - std::log(1.0));
  CHECK(cox_log_partial_likelihood(Eigen::VectorXd::Constant(1, beta), t, e, column(xv)) ==
        doctest::Approx(hand).epsilon(1e-14));
  CoxOptions opt;
  opt.fixed_coefficients = Eigen::VectorXd::Constant(1, beta);
  auto fit = fit_cox(t, e, column(xv), opt);
  std::vector<double> a = {1.0};
  std::vector<double> b = {1.0};
  CHECK(fit.relative_risk(a) == fit.relative_risk(b));
  // Breslow increments at x = 0: 1/(2e^b+1), 1/(e^b+1), 1/1
  auto base = fit.baseline_at_zero();
  double eb = std::exp(beta);
  CHECK(base[0].second == doctest::Approx(1.0 / (2 * eb + 1)).epsilon(1e-14));
  CHECK(base[2].second == doctest::Approx(1.0 / (2 * eb + 1) + 1.0 / (eb + 1) + 1.0).epsilon(1e-14));
}

TEST_CASE("Cox error paths") {
  std::vector<double> t = {1.0, 2.0};
  std::vector<int> none = {0, 0};
  CHECK_THROWS_AS(fit_cox(t, none, Eigen::MatrixXd(2, 0)), DataError);
  std::vector<int> all = {1, 1};
  CHECK_THROWS_AS(fit_censoring(t, all, Eigen::MatrixXd(2, 0)), DataError);
  // complete ordering by x gives a monotone likelihood
  std::vector<double> t2 = {1, 2, 3, 4, 5, 6};
  std::vector<int> e2 = {1, 1, 1, 1, 1, 1};
  std::vector<double> x2 = {6, 5, 4, 3, 2, 1};
  CHECK_THROWS_AS(fit_cox(t2, e2, column(x2)), ConvergenceError);
}

TEST_CASE("flip is an involution") {
  std::vector<int> e = {1, 0, 0, 1, 1};
  auto f = flip_indicator(e);
  CHECK(f == std::vector<int>{0, 1, 1, 0, 0});
  CHECK(flip_indicator(f) == e);
}

TEST_CASE("survival_at step-function properties") {
  std::vector<double> t = {1.0, 2.0, 4.0, 4.5, 6.0};
  std::vector<int> e = {1, 1, 1, 1, 1};
  auto fit = fit_cox(t, e, Eigen::MatrixXd(5, 0));
  std::vector<double> x;
  CHECK(survival_at(fit, 0.0, x) == 1.0);
  // exp(-NA) hand computed: 1/5, 1/4, 1/3, 1/2, 1
  double na[] = {0.2, 0.2 + 0.25, 0.2 + 0.25 + 1.0 / 3, 0.2 + 0.25 + 1.0 / 3 + 0.5,
                 0.2 + 0.25 + 1.0 / 3 + 0.5 + 1.0};
  for (int k = 0; k < 5; ++k) {
    CHECK(survival_at(fit, t[static_cast<std::size_t>(k)], x) == doctest::Approx(std::exp(-na[k])).epsilon(1e-14));
    CHECK(survival_at(fit, t[static_cast<std::size_t>(k)] + 0.01, x) ==
          survival_at(fit, t[static_cast<std::size_t>(k)], x));
  }
  CHECK(fit.survival_left(2.0, x) == doctest::Approx(std::exp(-0.2)).epsilon(1e-14));
  CHECK(survival_at(fit, 100.0, x) == survival_at(fit, 6.0, x));
  CHECK_THROWS(survival_at(fit, -1.0, x));
}

TEST_CASE("Cox survival invariants on random fits") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 60;
    Eigen::MatrixXd x(n, 2);
    std::vector<double> t(n);
    std::vector<int> e(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = nd(rng);
      x(i, 1) = ud(rng) < 0.5;
      t[i] = std::round(-std::log(ud(rng)) / std::exp(0.5 * x(i, 0) - 0.3 * x(i, 1)) * 10.0) / 10.0;
      e[i] = ud(rng) < 0.8;
    }
    e[0] = 1;
    auto fit = fit_cox(t, e, x);
    auto base = fit.baseline_at_zero();
    for (std::size_t k = 1; k < base.size(); ++k) CHECK(base[k].second >= base[k - 1].second);
    std::vector<double> xa = {nd(rng), 1.0}, xb = {nd(rng), 0.0};
    double ratio = std::exp((xa[0] - xb[0]) * fit.coefficients()(0) + (xa[1] - xb[1]) * fit.coefficients()(1));
    double prev = 1.0;
    for (double s = 0.0; s <= 5.0; s += 0.05) {
      double sa = fit.survival(s, xa), sb = fit.survival(s, xb);
      CHECK(sa <= prev + 1e-15);
      CHECK(sa >= 0.0);
      CHECK(sa <= 1.0);
      prev = sa;
      if (sb < 1.0 && sb > 0.0) CHECK(std::log(sa) / std::log(sb) == doctest::Approx(ratio).epsilon(1e-10));
    }
  }
}

TEST_CASE("censoring model recovers the censoring direction") {
  auto spec = DgpSpec::appendix_d();
  spec.set_n(10000);
  auto trial = simulate(spec, 314);
  const auto& d = trial.data;
  std::vector<double> t = d.times();
  std::vector<int> e(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) e[i] = d[i].event;
  auto fit = fit_censoring(t, e, d.covariates());
  Eigen::VectorXd truth = spec.censoring_slopes;
  double cosine = fit.coefficients().dot(truth) / (fit.coefficients().norm() * truth.norm());
  CHECK(cosine > 0.95);
}

TEST_CASE("exponential special case of the Weibull likelihood") {
  std::vector<double> t = {0.5, 1.2, 3.0, 0.7, 2.2};
  std::vector<int> e = {1, 0, 1, 1, 0};
  Eigen::MatrixXd x(5, 1);
  x << 0.1, -0.4, 1.0, 0.0, 2.0;
  WeibullParams p{0.0, -0.3, Eigen::VectorXd::Constant(1, 0.25)};
  double expected = 0.0;
  for (int i = 0; i < 5; ++i) {
    double rate = std::exp(-0.3 + 0.25 * x(i, 0));
    expected += e[static_cast<std::size_t>(i)] * std::log(rate) - rate * t[static_cast<std::size_t>(i)];
  }
  CHECK(weibull_loglik_and_grad(p, t, e, x).value == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("Weibull gradient and Hessian match finite differences") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
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
  double worst_g = 0.0, worst_h = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    WeibullParams p{0.5 * nd(rng), nd(rng) - 1.0, 0.5 * Eigen::VectorXd::NullaryExpr(3, [&] { return nd(rng); })};
    auto r = weibull_loglik(p, t, e, x, w, true);
    Eigen::VectorXd th = p.pack();
    for (Eigen::Index k = 0; k < th.size(); ++k) {
      double h = 1e-5 * std::max(1.0, std::abs(th(k)));
      Eigen::VectorXd a = th, b = th;
      a(k) += h;
      b(k) -= h;
      auto ra = weibull_loglik(WeibullParams::unpack(a), t, e, x, w, false);
      auto rb = weibull_loglik(WeibullParams::unpack(b), t, e, x, w, false);
      double fd = (ra.value - rb.value) / (2 * h);
      worst_g = std::max(worst_g, std::abs(fd - r.gradient(k)) / std::max(1.0, std::abs(r.gradient(k))));
      Eigen::VectorXd fdh = (ra.gradient - rb.gradient) / (2 * h);
      for (Eigen::Index j = 0; j < th.size(); ++j)
        worst_h = std::max(worst_h, std::abs(fdh(j) - r.hessian(k, j)) / std::max(1.0, std::abs(r.hessian(k, j))));
    }
  }
  CHECK(worst_g < 1e-5);
  CHECK(worst_h < 1e-5);
}

TEST_CASE("Weibull survival equals exp of the integrated hazard") {
  using Q = boost::math::quadrature::gauss_kronrod<double, 31>;
  for (double shape : {0.8, 1.0, 1.6, 2.5}) {
    WeibullParams p{std::log(shape), -4.5, Eigen::VectorXd::Constant(2, 0.3)};
    std::vector<double> x = {1.0, -0.5};
    double lin = weibull_linear_predictor(p, x);
    for (double t : {0.5, 2.0, 7.5, 15.0, 30.0}) {
      double integral = Q::integrate([&](double s) { return weibull_hazard(s, shape, lin); }, 0.0, t, 20, 1e-14);
      CHECK(std::abs(weibull_survival(p, t, x) - std::exp(-integral)) < 1e-8);
    }
  }
}

TEST_CASE("weighted Weibull MLE recovers parameters") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  const int n = 20000;
  Eigen::MatrixXd x(n, 2);
  std::vector<double> t(n);
  std::vector<int> e(n);
  const double shape = 1.7, psi = -3.0;
  for (int i = 0; i < n; ++i) {
    x(i, 0) = nd(rng);
    x(i, 1) = ud(rng) < 0.3;
    double lin = psi + 0.4 * x(i, 0) - 0.6 * x(i, 1);
    double ti = weibull_inverse(ud(rng), shape, lin);
    double ci = -std::log(ud(rng)) / 0.05;
    t[i] = std::min(ti, ci);
    e[i] = ti <= ci;
  }
  auto fit = fit_weibull(t, e, x);
  CHECK(fit.converged);
  CHECK(fit.params.shape() == doctest::Approx(shape).epsilon(0.03));
  CHECK(fit.params.psi == doctest::Approx(psi).epsilon(0.03));
  CHECK(fit.params.gamma(0) == doctest::Approx(0.4).epsilon(0.08));
  CHECK(fit.params.gamma(1) == doctest::Approx(-0.6).epsilon(0.08));
  auto g = weibull_loglik(fit.params, t, e, x).gradient;
  CHECK(g.lpNorm<Eigen::Infinity>() < 1e-6 * n);
}
