#include <cmath>
#include <random>

#include "doctest.h"
#include "spce/glm.hpp"
#include "spce/simulator.hpp"

using namespace spce;

namespace {

// Exact Bernoulli log-likelihood, written independently of the library.
double bernoulli_loglik(double a, double b, const std::vector<double>& x, const std::vector<double>& y) {
  double ll = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-(a + b * x[i])));
    ll += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return ll;
}

// Zooming 2-D grid search.
std::pair<double, double> grid_argmax(const std::function<double(double, double)>& f, double ca, double cb,
                                      double half_width) {
  double h = half_width;
  for (int level = 0; level < 12; ++level) {
    double best = -INFINITY, ba = ca, bb = cb;
    for (int i = -20; i <= 20; ++i)
      for (int j = -20; j <= 20; ++j) {
        double a = ca + h * i / 20.0, b = cb + h * j / 20.0;
        double v = f(a, b);
        if (v > best) {
          best = v;
          ba = a;
          bb = b;
        }
      }
    ca = ba;
    cb = bb;
    h /= 8.0;
  }
  return {ca, cb};
}

}  // namespace

TEST_CASE("intercept-only logistic fit is the sample logit") {
  Eigen::VectorXd y(10);
  y << 1, 1, 1, 0, 1, 1, 0, 1, 0, 1;
  auto fit = fit_logistic(y, Eigen::MatrixXd(10, 0));
  CHECK(fit.converged);
  CHECK(fit.coefficients(0) == doctest::Approx(std::log(0.7 / 0.3)).epsilon(1e-12));
  CHECK(fit.coefficients(0) == doctest::Approx(0.8473).epsilon(1e-4));
}

TEST_CASE("degenerate and separated responses are rejected") {
  Eigen::VectorXd y = Eigen::VectorXd::Ones(8);
  CHECK_THROWS_AS(fit_logistic(y, Eigen::MatrixXd(8, 0)), SeparationError);

  Eigen::MatrixXd x(8, 1);
  x << -4, -3, -2, -1, 1, 2, 3, 4;
  y << 0, 0, 0, 0, 1, 1, 1, 1;
  try {
    fit_logistic(y, x);
    FAIL("expected separation");
  } catch (const SeparationError& e) {
    CHECK(std::string(e.what()).find("direction") != std::string::npos);
  }
}

TEST_CASE("rank-deficient design is rejected") {
  Eigen::MatrixXd x(6, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10, 6, 12;
  Eigen::VectorXd y(6);
  y << 0, 1, 0, 1, 1, 0;
  CHECK_THROWS_AS(fit_logistic(y, x), RankError);
}

TEST_CASE("logistic MLE matches a brute-force likelihood grid") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
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
  auto [a, b] = grid_argmax([&](double a, double b) { return bernoulli_loglik(a, b, xs, ys); }, 0.0, 0.0, 4.0);
  CHECK(std::abs(fit.coefficients(0) - a) < 1e-4);
  CHECK(std::abs(fit.coefficients(1) - b) < 1e-4);
  CHECK(fit.log_likelihood == doctest::Approx(bernoulli_loglik(a, b, xs, ys)).epsilon(1e-9));
}

TEST_CASE("logistic score equations vanish at the MLE") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  const int n = 500;
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = nd(rng) * (j + 1) + j;
    double eta = 0.3 - 0.5 * x(i, 0) + 0.2 * x(i, 1) + 0.1 * x(i, 2);
    y(i) = ud(rng) < expit(eta) ? 1.0 : 0.0;
  }
  auto fit = fit_logistic(y, x);
  Eigen::MatrixXd design = with_intercept(x);
  Eigen::VectorXd p = predict_prob(fit, x);
  Eigen::VectorXd score = design.transpose() * (y - p);
  CHECK(score.lpNorm<Eigen::Infinity>() <= 1e-8 * n);
  CHECK(fit.condition_number > 1.0);
}

TEST_CASE("predict_prob") {
  LogisticFit f;
  f.coefficients = Eigen::VectorXd::Zero(3);
  std::vector<double> x = {1.5, -2.0};
  CHECK(predict_prob(f, x) == 0.5);
  f.coefficients(0) = std::log(0.7 / 0.3);
  CHECK(predict_prob(f, x) == doctest::Approx(0.7).epsilon(1e-14));
  f.coefficients << 0.2, -0.7, 1.3;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (int r = 0; r < 5; ++r) {
    std::vector<double> row = {nd(rng), nd(rng)};
    double eta = 0.2 - 0.7 * row[0] + 1.3 * row[1];
    CHECK(predict_prob(f, row) == doctest::Approx(1.0 / (1.0 + std::exp(-eta))).epsilon(1e-14));
  }
  std::vector<double> bad = {1.0};
  CHECK_THROWS_AS(predict_prob(f, bad), InvalidArgument);
}

TEST_CASE("multinomial with two strata equals logistic") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  const int n = 300;
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  std::vector<Stratum> labels(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = nd(rng);
    x(i, 1) = ud(rng) < 0.4 ? 1.0 : 0.0;
    y(i) = ud(rng) < expit(-0.2 + 0.8 * x(i, 0) - 0.5 * x(i, 1)) ? 1.0 : 0.0;
    labels[i] = y(i) == 1.0 ? Stratum::s11 : Stratum::s00;
  }
  auto lf = fit_logistic(y, x);
  auto mf = fit_multinomial(labels, x, {Stratum::s00, Stratum::s11}, Stratum::s00);
  Eigen::VectorXd row = mf.coefficients.row(mf.position(Stratum::s11)).transpose();
  CHECK((row - lf.coefficients).lpNorm<Eigen::Infinity>() < 1e-8);
  CHECK(mf.coefficients.row(mf.position(Stratum::s00)).isZero());
  CHECK(mf.log_likelihood == doctest::Approx(lf.log_likelihood).epsilon(1e-10));
}

TEST_CASE("intercept-only multinomial reproduces the proportions") {
  std::vector<Stratum> labels;
  auto add = [&](Stratum u, int k) { labels.insert(labels.end(), k, u); };
  add(Stratum::s00, 44);
  add(Stratum::s01, 12);
  add(Stratum::s10, 40);
  add(Stratum::s11, 4);
  std::vector<Stratum> strata(kAllStrata.begin(), kAllStrata.end());
  auto fit = fit_multinomial(labels, Eigen::MatrixXd(100, 0), strata, Stratum::s00);
  std::vector<double> none;
  auto p = fit.probabilities(std::span<const double>(none));
  CHECK(p(0) == doctest::Approx(0.44).epsilon(1e-10));
  CHECK(p(1) == doctest::Approx(0.12).epsilon(1e-10));
  CHECK(p(2) == doctest::Approx(0.40).epsilon(1e-10));
  CHECK(p(3) == doctest::Approx(0.04).epsilon(1e-10));
}

TEST_CASE("multinomial empty stratum is an error") {
  std::vector<Stratum> labels = {Stratum::s00, Stratum::s11, Stratum::s00, Stratum::s11};
  CHECK_THROWS_AS(fit_multinomial(labels, Eigen::MatrixXd(4, 0), {Stratum::s00, Stratum::s10, Stratum::s11},
                                  Stratum::s00),
                  DataError);
}

TEST_CASE("multinomial recovers simulated strata proportions at n=100000") {
  auto spec = DgpSpec::appendix_d();
  spec.set_n(100000);
  auto trial = simulate(spec, 2024);
  Eigen::MatrixXd x = trial.data.covariates();
  std::vector<Stratum> strata(kAllStrata.begin(), kAllStrata.end());
  auto fit = fit_multinomial(trial.strata, x, strata, Stratum::s00);
  Eigen::MatrixXd p = fit.probabilities(x);
  Eigen::VectorXd mean = p.colwise().mean().transpose();
  CHECK(std::abs(mean(index(Stratum::s00)) - 0.44) < 0.02);
  CHECK(std::abs(mean(index(Stratum::s01)) - 0.04) < 0.02);
  CHECK(std::abs(mean(index(Stratum::s10)) - 0.12) < 0.02);
  CHECK(std::abs(mean(index(Stratum::s11)) - 0.40) < 0.02);
  for (Eigen::Index i = 0; i < p.rows(); i += 997) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
  // β_10 has slope 0.5 on the last covariate
  CHECK(fit.coefficients(index(Stratum::s10), 4) == doctest::Approx(0.5).epsilon(0.5));
}

TEST_CASE("principal scores from ICE models") {
  auto s = principal_scores(0.2, 0.6);
  CHECK(s.pi11 == doctest::Approx(0.2));
  CHECK(s.pi00 == doctest::Approx(0.4));
  CHECK(s.pi01 == doctest::Approx(0.4));
  auto e = principal_scores(0.37, 0.37);
  CHECK(e.pi01 == 0.0);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ud;
  for (int r = 0; r < 1000; ++r) {
    auto q = principal_scores(ud(rng), ud(rng));
    CHECK(std::abs(q.pi11 + q.pi00 + q.pi01 - 1.0) < 1e-12);
  }
}

TEST_CASE("fitted principal scores match Monte Carlo stratum frequencies") {
  auto spec = DgpSpec::appendix_d();
  spec.set_n(100000);
  auto trial = simulate(spec, 77);
  // Simulated data satisfy D(0) >= D(1) up to the small 01 stratum; flip arms so that
  // the D(1) >= D(0) mapping applies.
  Dataset d = trial.data.with_flipped_arm();
  Eigen::MatrixXd x = d.covariates();
  std::vector<std::size_t> r0, r1;
  for (std::size_t i = 0; i < d.size(); ++i) (d[i].arm ? r1 : r0).push_back(i);
  auto fit_arm = [&](const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd xs(static_cast<Eigen::Index>(rows.size()), x.cols());
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      xs.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
      y(static_cast<Eigen::Index>(k)) = d[rows[k]].ice;
    }
    return fit_logistic(y, xs);
  };
  auto f0 = fit_arm(r0), f1 = fit_arm(r1);
  auto summary = principal_scores_from_ice_models(f0, f1, x);
  double m11 = 0, m00 = 0, m01 = 0;
  for (const auto& s : summary.scores) {
    m11 += s.pi11;
    m00 += s.pi00;
    m01 += s.pi01;
    CHECK(std::abs(s.pi11 + s.pi00 + s.pi01 - 1.0) < 1e-12);
  }
  const double n = static_cast<double>(summary.scores.size());
  double freq[4] = {0, 0, 0, 0};
  for (Stratum u : trial.strata) freq[index(u)] += 1.0 / n;
  // flipped arms: D'(0) = D(1), D'(1) = D(0)
  CHECK(std::abs(m11 / n - (freq[index(Stratum::s11)] + freq[index(Stratum::s01)])) < 0.02);
  CHECK(std::abs(m00 / n - (freq[index(Stratum::s00)] + freq[index(Stratum::s01)])) < 0.02);
  CHECK(std::abs(m01 / n - (freq[index(Stratum::s10)] - freq[index(Stratum::s01)])) < 0.02);
}
