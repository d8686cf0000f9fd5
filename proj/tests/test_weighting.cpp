#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "spce/weighting.hpp"

using namespace spce;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace

TEST_CASE("zeta scores sum to one and reduce to the monotone scores") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < 1000; ++r) {
    double p0 = u(rng), p1 = u(rng), zeta = 0.99 * u(rng);
    auto s = zeta_scores(p0, p1, zeta);
    CHECK(std::abs(s[0] + s[1] + s[2] + s[3] - 1.0) < 1e-12);
    auto b = zeta_scores(p0, p1, 0.0);
    CHECK(b[index(Stratum::s10)] == 0.0);
    CHECK(b[index(Stratum::s11)] == p0);
    CHECK(b[index(Stratum::s00)] == 1.0 - p1);
    CHECK(b[index(Stratum::s01)] == p1 - p0);
  }
  // zeta_max makes the 01 score vanish at the aggregate level
  double p0 = 0.3, p1 = 0.5;
  double zm = zeta_max(p0, p1);
  auto s = zeta_scores(p0, p1, zm);
  double smallest = *std::min_element(s.begin(), s.end());
  CHECK(std::abs(smallest) < 1e-12);
}

TEST_CASE("without censoring every martingale term is zero") {
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
      auto m = martingale_terms(*&b, canon, z, c, rows, grid);
      CHECK(m.size() > 0);
      CHECK((m.array() == 0.0).all());
    }
}

TEST_CASE("martingale correction has mean zero under a correct censoring model") {
  auto spec = DgpSpec::appendix_d();
  spec.set_n(10000);
  auto trial = simulate(spec, 21);
  Dataset canon = to_canonical(trial.data, Monotonicity::control_geq_treated);
  auto b = fit_nuisances(canon);
  auto grid = default_grid(canon, 20);
  for (int z = 0; z < 2; ++z)
    for (int c = 0; c < 2; ++c) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < canon.size(); ++i)
        if (canon[i].arm == z && canon[i].ice == c) rows.push_back(i);
      auto m = martingale_terms(b, canon, z, c, rows, grid);
      const double nr = static_cast<double>(m.rows());
      for (Eigen::Index k = 0; k < m.cols(); ++k) {
        double mean = m.col(k).mean();
        double sd = std::sqrt((m.col(k).array() - mean).square().sum() / (nr - 1.0));
        CHECK(std::abs(mean) < 3.0 * sd / std::sqrt(nr) + 1e-12);
      }
    }
}

TEST_CASE("oracle nuisances recover the true curves at n=20000") {
  auto spec = DgpSpec::assumption_compliant();
  spec.set_n(20000);
  auto trial = simulate(spec, 2024);
  auto grid = TimeGrid::equispaced(40.0, 40);
  auto truth = true_spce(spec, grid, 400000);
  WeightingConfig cfg;
  auto est = estimate_with_nuisances(oracle_nuisances(spec, 200.0), trial.data, grid, cfg);
  for (Stratum u : {Stratum::s00, Stratum::s11})
    for (int z = 0; z < 2; ++z) {
      double err = max_abs_diff(est.survival_raw[z][index(u)], truth.survival[z][index(u)]);
      CHECK_MESSAGE(err < 0.02, "arm ", z, " stratum ", to_string(u), " error ", err);
    }
  CHECK(est.present[index(Stratum::s10)]);
  CHECK_FALSE(est.present[index(Stratum::s01)]);
}

TEST_CASE("proportions sum to one, also with zeta") {
  auto trial = simulate(DgpSpec::appendix_d(), 3);
  auto grid = default_grid(trial.data, 10);
  WeightingConfig cfg;
  auto est = estimate_weighting(trial.data, grid, cfg);
  double s = 0.0;
  for (Stratum u : kAllStrata)
    if (est.present[index(u)]) s += est.proportions[index(u)];
  CHECK(std::abs(s - 1.0) < 1e-12);
  CHECK(est.present[index(Stratum::s10)]);
  CHECK_FALSE(est.present[index(Stratum::s01)]);
  cfg.assumptions.zeta = 0.05;
  auto ez = estimate_weighting(trial.data, grid, cfg);
  double sz = 0.0;
  for (double p : ez.proportions) sz += p;
  CHECK(std::abs(sz - 1.0) < 1e-12);
  for (Stratum u : kAllStrata) CHECK(ez.present[index(u)]);
  cfg.assumptions.zeta = 0.95;
  CHECK_THROWS_AS(estimate_weighting(trial.data, grid, cfg), InvalidArgument);
}

TEST_CASE("estimates are invariant to row order") {
  auto trial = simulate(DgpSpec::appendix_d(), 4);
  std::vector<std::size_t> perm(trial.data.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  auto shuffled = trial.data.subset(perm);
  auto grid = default_grid(trial.data, 20);
  WeightingConfig cfg;
  auto a = estimate_weighting(trial.data, grid, cfg);
  auto b = estimate_weighting(shuffled, grid, cfg);
  for (Stratum u : kAllStrata) {
    if (!a.present[index(u)]) continue;
    CHECK(std::abs(a.proportions[index(u)] - b.proportions[index(u)]) < 1e-10);
    for (int z = 0; z < 2; ++z) CHECK(max_abs_diff(a.survival_raw[z][index(u)], b.survival_raw[z][index(u)]) < 1e-9);
  }
}

TEST_CASE("intercept-only propensity is the treated fraction") {
  auto trial = simulate(DgpSpec::appendix_d(), 5);
  Eigen::VectorXd z(static_cast<Eigen::Index>(trial.data.size()));
  for (std::size_t i = 0; i < trial.data.size(); ++i) z(static_cast<Eigen::Index>(i)) = trial.data[i].arm;
  auto fit = fit_logistic(z, Eigen::MatrixXd(z.size(), 0));
  CHECK(expit(fit.coefficients(0)) == doctest::Approx(363.0 / 732.0).epsilon(1e-10));
}

TEST_CASE("orientation flip relabels strata and arms") {
  auto trial = simulate(DgpSpec::appendix_d(), 6);
  auto grid = default_grid(trial.data, 15);
  WeightingConfig down;
  auto a = estimate_weighting(trial.data, grid, down);
  WeightingConfig up;
  up.assumptions.monotonicity = Monotonicity::treated_geq_control;
  auto b = estimate_weighting(trial.data.with_flipped_arm(), grid, up);
  for (Stratum u : kAllStrata) {
    Stratum v = swap_potential(u);
    REQUIRE(a.present[index(u)] == b.present[index(v)]);
    if (!a.present[index(u)]) continue;
    CHECK(a.proportions[index(u)] == doctest::Approx(b.proportions[index(v)]).epsilon(1e-12));
    for (int z = 0; z < 2; ++z)
      CHECK(max_abs_diff(a.survival_raw[z][index(u)], b.survival_raw[1 - z][index(v)]) < 1e-12);
  }
  CHECK(a.p0 == doctest::Approx(b.p1).epsilon(1e-12));
  WeightingConfig none;
  none.assumptions.monotonicity = Monotonicity::none;
  CHECK_THROWS_AS(estimate_weighting(trial.data, grid, none), InvalidArgument);
}

TEST_CASE("weighted SMD is small with a correct principal model") {
  auto spec = DgpSpec::assumption_compliant();
  spec.set_n(5000);
  auto trial = simulate(spec, 77);
  WeightingConfig cfg;
  auto rows = weighted_smd(trial.data, cfg);
  CHECK(rows.size() == 12);
  for (const auto& r : rows) {
    CHECK_FALSE(r.degenerate);
    CHECK_MESSAGE(std::abs(r.weighted) < 0.1, r.contrast, " ", r.covariate, " ", r.weighted);
  }
}

TEST_CASE("constant covariate is flagged degenerate") {
  auto trial = simulate(DgpSpec::appendix_d(), 12);
  std::vector<TrialRecord> recs;
  for (std::size_t i = 0; i < trial.data.size(); ++i) {
    auto r = trial.data[i];
    r.covariates.push_back(1.0);
    recs.push_back(r);
  }
  auto names = trial.data.covariate_names();
  names.push_back("constant");
  Dataset d(recs, names);
  WeightingConfig cfg;
  cfg.covariates.principal = {"male", "age_std", "nephrectomy", "riskfac"};
  cfg.covariates.propensity = cfg.covariates.principal;
  cfg.covariates.outcome = cfg.covariates.principal;
  cfg.covariates.censoring = cfg.covariates.principal;
  auto rows = weighted_smd(d, cfg);
  for (const auto& r : rows)
    if (r.covariate == "constant") {
      CHECK(r.degenerate);
      CHECK(r.weighted == 0.0);
    }
}

TEST_CASE("weighted covariate profile") {
  auto spec = DgpSpec::appendix_d();
  spec.set_n(20000);
  auto trial = simulate(spec, 31);
  Dataset canon = to_canonical(trial.data, Monotonicity::control_geq_treated);
  auto b = fit_nuisances(canon);
  auto prof = strata_covariate_profile_weighting(b, canon, Monotonicity::control_geq_treated);
  REQUIRE(prof.size() == 3);
  for (const auto& p : prof) {
    // binary covariates: weighted variance equals m (1 - m)
    for (std::size_t j : {0u, 2u, 3u}) CHECK(p.sd[j] * p.sd[j] == doctest::Approx(p.mean[j] * (1 - p.mean[j])));
    if (p.stratum == Stratum::s00) {
      double truth = 0.0, cnt = 0.0;
      for (std::size_t i = 0; i < trial.data.size(); ++i)
        if (trial.strata[i] == Stratum::s00) {
          truth += trial.data[i].covariates[1];
          cnt += 1.0;
        }
      CHECK(std::abs(p.mean[1] - truth / cnt) < 0.05);
    }
  }
}

TEST_CASE("bootstrap is reproducible and independent of thread count") {
  auto trial = simulate(DgpSpec::appendix_d(), 13);
  auto grid = default_grid(trial.data, 10);
  WeightingConfig cfg;
  BootstrapConfig boot;
  boot.replicates = 8;
  boot.seed = 99;
  boot.threads = 1;
  auto a = bootstrap_ci(trial.data, grid, cfg, boot);
  boot.threads = 3;
  auto b = bootstrap_ci(trial.data, grid, cfg, boot);
  REQUIRE(a.bands);
  REQUIRE(b.bands);
  CHECK(a.bands->replicates + a.bands->failures == 8);
  const int u = index(Stratum::s00);
  CHECK(a.bands->survival_lo[1][u] == b.bands->survival_lo[1][u]);
  CHECK(a.bands->tau_hi[u] == b.bands->tau_hi[u]);
  for (std::size_t k = 0; k < grid.size(); ++k) CHECK(a.bands->survival_lo[0][u][k] <= a.bands->survival_hi[0][u][k]);
  boot.replicates = 2;
  auto c = bootstrap_ci(trial.data, grid, cfg, boot);
  CHECK(c.bands->replicates == 2);
}

TEST_CASE("bootstrap band width shrinks like 1/sqrt(n)") {
  auto grid = TimeGrid::equispaced(30.0, 6);
  WeightingConfig cfg;
  BootstrapConfig boot;
  boot.replicates = 100;
  boot.seed = 3;
  auto width = [&](std::size_t n) {
    auto spec = DgpSpec::appendix_d();
    spec.set_n(n);
    auto est = bootstrap_ci(simulate(spec, 8).data, grid, cfg, boot);
    const int u = index(Stratum::s00);
    return est.bands->proportion_hi[u] - est.bands->proportion_lo[u];
  };
  double w500 = width(500), w2000 = width(2000), w8000 = width(8000);
  // quadrupling n halves the width, within 30%
  CHECK(w500 / w2000 > 2.0 * 0.7);
  CHECK(w500 / w2000 < 2.0 * 1.3);
  CHECK(w2000 / w8000 > 2.0 * 0.7);
  CHECK(w2000 / w8000 < 2.0 * 1.3);
}

TEST_CASE("ICE direction on the simulator at n=732") {
  int positive = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto trial = simulate(DgpSpec::appendix_d(), seed);
    auto e = estimate_weighting(trial.data, default_grid(trial.data, 5), WeightingConfig{});
    positive += e.p0 > e.p1;
  }
  CHECK(positive == 20);
}

TEST_CASE("DR proportions collapse to the plug-in mean with saturated models") {
  auto trial = simulate(DgpSpec::appendix_d(), 14);
  Dataset canon = to_canonical(trial.data, Monotonicity::control_geq_treated);
  auto b = fit_nuisances(canon);
  auto c = cell_counts(canon);
  const double n1 = c.n[1][0] + c.n[1][1], n0 = c.n[0][0] + c.n[0][1];
  const double e = n1 / (n0 + n1), q0 = c.n[0][1] / n0, q1 = c.n[1][1] / n1;
  b.propensity = [e](std::span<const double>) { return e; };
  b.ice[0] = [q0](std::span<const double>) { return q0; };
  b.ice[1] = [q1](std::span<const double>) { return q1; };
  auto est = mr_survival(b, canon, default_grid(canon, 5));
  CHECK(est.p0 == doctest::Approx(q0).epsilon(1e-12));
  CHECK(est.p1 == doctest::Approx(q1).epsilon(1e-12));
}

TEST_CASE("weighted profiles with true scores match the latent strata at n=100000") {
  auto spec = DgpSpec::assumption_compliant();
  spec.set_n(100000);
  auto trial = simulate(spec, 41);
  Dataset canon = to_canonical(trial.data, Monotonicity::control_geq_treated);
  auto b = oracle_nuisances(spec, 100.0).flipped();
  auto prof = strata_covariate_profile_weighting(b, canon, Monotonicity::control_geq_treated);
  // fitted logistic ICE models are only approximately right here (the true
  // p_z(X) are sums of multinomial probabilities); see the decisions notes
  for (const auto& p : prof) {
    std::vector<double> sum(4, 0.0);
    double cnt = 0.0;
    for (std::size_t i = 0; i < trial.data.size(); ++i)
      if (trial.strata[i] == p.stratum) {
        for (std::size_t j = 0; j < 4; ++j) sum[j] += trial.data[i].covariates[j];
        cnt += 1.0;
      }
    CHECK(std::abs(p.proportion - cnt / 100000.0) < 0.02);
    for (std::size_t j = 0; j < 4; ++j)
      CHECK_MESSAGE(std::abs(p.mean[j] - sum[j] / cnt) < 0.02, to_string(p.stratum), " covariate ", j);
  }
}

TEST_CASE("type-7 quantile") {
  CHECK(quantile({1.0, 2.0, 3.0, 4.0}, 0.5) == 2.5);
  CHECK(quantile({5.0}, 0.9) == 5.0);
  CHECK(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.025) == doctest::Approx(1.1));
}

TEST_CASE("parallel_for propagates exceptions") {
  CHECK_THROWS_AS(parallel_for(10, 2, [](std::size_t i) {
                    if (i == 7) throw DataError("boom");
                  }),
                  DataError);
}
