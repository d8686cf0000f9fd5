#include "spce/simulator.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include "spce/random.hpp"

namespace spce {

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

WeibullParams weib(double shape, double psi, std::initializer_list<double> gamma) {
  return WeibullParams{std::log(shape), psi, vec(gamma)};
}

}  // namespace

DgpSpec DgpSpec::appendix_d() {
  DgpSpec s;
  s.strata_coefficients[index(Stratum::s00)] = Eigen::VectorXd::Zero(5);
  s.strata_coefficients[index(Stratum::s10)] = vec({-1.4, 0.0, 0.1, 0.2, 0.5});
  s.strata_coefficients[index(Stratum::s11)] = vec({0.0, -0.1, -0.1, -0.1, 0.0});
  s.strata_coefficients[index(Stratum::s01)] = vec({-2.3, -0.1, -0.1, -0.1, 0.5});
  auto& o = s.outcome;
  o[0][index(Stratum::s11)] = weib(2.0, -5.0, {-0.3, 0.3, 1.0, 1.0});
  o[1][index(Stratum::s11)] = weib(2.0, -5.2, {-0.3, 0.3, 1.0, 1.0});
  o[0][index(Stratum::s01)] = weib(2.0, -4.8, {-0.3, 0.3, 1.0, 1.0});
  o[1][index(Stratum::s01)] = weib(1.6, -5.5, {-0.5, 0.6, 1.5, 1.5});
  o[0][index(Stratum::s10)] = weib(2.5, -4.0, {-0.5, 0.6, 0.5, 1.0});
  o[1][index(Stratum::s10)] = weib(2.5, -4.5, {-0.5, 0.6, 0.5, 0.5});
  o[0][index(Stratum::s00)] = weib(2.2, -4.5, {-0.6, 0.5, 0.9, 0.5});
  o[1][index(Stratum::s00)] = weib(1.6, -5.5, {-0.5, 0.6, 1.4, 1.5});
  s.censoring_slopes = vec({-1.0, -1.0, -1.0, -1.0});
  return s;
}

DgpSpec DgpSpec::assumption_compliant() {
  DgpSpec s = appendix_d();
  s.strata_coefficients[index(Stratum::s01)].reset();
  s.outcome[1][index(Stratum::s10)] = s.outcome[1][index(Stratum::s00)];
  s.outcome[0][index(Stratum::s10)] = s.outcome[0][index(Stratum::s11)];
  return s;
}

void DgpSpec::validate() const {
  if (n == 0) throw InvalidArgument("simulation needs n > 0");
  if (n_treated > n) throw InvalidArgument("n_treated exceeds n");
  if (!has_stratum(Stratum::s00)) throw InvalidArgument("reference stratum 00 must be present");
  for (Stratum u : kAllStrata) {
    if (!has_stratum(u)) continue;
    if (strata_coefficients[index(u)]->size() != 5)
      throw InvalidArgument("stratum " + to_string(u) + " needs 5 coefficients (intercept + 4 slopes)");
    for (int z = 0; z < 2; ++z) {
      const auto& w = outcome[z][index(u)];
      if (!std::isfinite(w.log_shape)) throw InvalidArgument("Weibull shape must be positive");
      if (w.gamma.size() != 4) throw InvalidArgument("outcome slopes need 4 entries");
    }
  }
  if (censoring_slopes.size() != 4) throw InvalidArgument("censoring slopes need 4 entries");
  const auto& c = covariates;
  if (!(c.age_sd > 0.0) || !(c.age_min < c.age_max)) throw InvalidArgument("invalid age distribution");
  for (double p : {c.p_male, c.p_nephrectomy, c.p_riskfac})
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("covariate probabilities must lie in [0,1]");
}

void DgpSpec::set_n(std::size_t total) {
  n = total;
  n_treated = static_cast<std::size_t>(std::llround(static_cast<double>(total) * 363.0 / 732.0));
}

std::array<double, 4> DgpSpec::principal_scores(std::span<const double> x) const {
  std::array<double, 4> eta{};
  double mx = -std::numeric_limits<double>::infinity();
  for (Stratum u : kAllStrata) {
    if (!has_stratum(u)) continue;
    const auto& b = *strata_coefficients[index(u)];
    double e = b(0);
    for (int j = 0; j < 4; ++j) e += b(j + 1) * x[static_cast<std::size_t>(j)];
    eta[index(u)] = e;
    mx = std::max(mx, e);
  }
  std::array<double, 4> p{};
  double s = 0.0;
  for (Stratum u : kAllStrata)
    if (has_stratum(u)) s += (p[index(u)] = std::exp(eta[index(u)] - mx));
  for (double& v : p) v /= s;
  return p;
}

double DgpSpec::ice_probability(int arm, std::span<const double> x) const {
  auto p = principal_scores(x);
  double out = 0.0;
  for (Stratum u : kAllStrata)
    if (ice_under(u, arm) == 1) out += p[index(u)];
  return out;
}

double DgpSpec::survival(int arm, Stratum u, double t, std::span<const double> x) const {
  return weibull_survival(outcome[arm][index(u)], t, x);
}

double DgpSpec::cell_survival(int arm, int ice, double t, std::span<const double> x) const {
  auto p = principal_scores(x);
  double num = 0.0, den = 0.0;
  for (Stratum u : kAllStrata) {
    if (!has_stratum(u) || ice_under(u, arm) != ice) continue;
    num += p[index(u)] * survival(arm, u, t, x);
    den += p[index(u)];
  }
  return den > 0.0 ? num / den : 1.0;
}

double DgpSpec::censoring_rate(std::span<const double> x) const {
  double e = censoring_intercept;
  for (int j = 0; j < 4; ++j) e += censoring_slopes(j) * x[static_cast<std::size_t>(j)];
  return std::exp(e);
}

nlohmann::json to_json(const DgpSpec& s) {
  nlohmann::json j;
  j["n"] = s.n;
  j["n_treated"] = s.n_treated;
  const auto& c = s.covariates;
  j["covariates"] = {{"p_male", c.p_male},     {"age_mean", c.age_mean}, {"age_sd", c.age_sd},
                     {"age_min", c.age_min},   {"age_max", c.age_max},   {"p_nephrectomy", c.p_nephrectomy},
                     {"p_riskfac", c.p_riskfac}, {"order", kSimCovariates}};
  nlohmann::json strata = nlohmann::json::object();
  for (Stratum u : kAllStrata) {
    if (s.has_stratum(u)) {
      const auto& b = *s.strata_coefficients[index(u)];
      strata[to_string(u)] = std::vector<double>(b.data(), b.data() + b.size());
    } else {
      strata[to_string(u)] = nullptr;
    }
  }
  j["strata_coefficients"] = strata;
  nlohmann::json out = nlohmann::json::array();
  for (int z = 0; z < 2; ++z)
    for (Stratum u : kAllStrata) {
      const auto& w = s.outcome[z][index(u)];
      out.push_back({{"arm", z},
                     {"stratum", to_string(u)},
                     {"shape", w.shape()},
                     {"psi", w.psi},
                     {"gamma", std::vector<double>(w.gamma.data(), w.gamma.data() + w.gamma.size())}});
    }
  j["outcome"] = out;
  j["censoring"] = {{"enabled", s.censoring},
                    {"intercept", s.censoring_intercept},
                    {"slopes", std::vector<double>(s.censoring_slopes.data(),
                                                   s.censoring_slopes.data() + s.censoring_slopes.size())}};
  return j;
}

DgpSpec dgp_from_json(const nlohmann::json& j) {
  auto as_vec = [](const nlohmann::json& a) {
    auto v = a.get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  try {
    std::string preset = j.value("preset", std::string("appendix_d"));
    DgpSpec s;
    if (preset == "appendix_d") s = DgpSpec::appendix_d();
    else if (preset == "assumption_compliant") s = DgpSpec::assumption_compliant();
    else throw SchemaError("unknown preset '" + preset + "'");
    if (j.contains("n")) {
      s.set_n(j.at("n").get<std::size_t>());
    }
    if (j.contains("n_treated")) s.n_treated = j.at("n_treated").get<std::size_t>();
    if (j.contains("covariates")) {
      const auto& c = j.at("covariates");
      auto& d = s.covariates;
      d.p_male = c.value("p_male", d.p_male);
      d.age_mean = c.value("age_mean", d.age_mean);
      d.age_sd = c.value("age_sd", d.age_sd);
      d.age_min = c.value("age_min", d.age_min);
      d.age_max = c.value("age_max", d.age_max);
      d.p_nephrectomy = c.value("p_nephrectomy", d.p_nephrectomy);
      d.p_riskfac = c.value("p_riskfac", d.p_riskfac);
    }
    if (j.contains("strata_coefficients")) {
      for (const auto& [k, v] : j.at("strata_coefficients").items()) {
        Stratum u = parse_stratum(k);
        if (v.is_null()) s.strata_coefficients[index(u)].reset();
        else s.strata_coefficients[index(u)] = as_vec(v);
      }
    }
    if (j.contains("outcome")) {
      for (const auto& o : j.at("outcome")) {
        int z = o.at("arm").get<int>();
        if (z != 0 && z != 1) throw SchemaError("outcome arm must be 0 or 1");
        Stratum u = parse_stratum(o.at("stratum").get<std::string>());
        auto& w = s.outcome[z][index(u)];
        if (o.contains("shape")) {
          double phi = o.at("shape").get<double>();
          if (!(phi > 0.0)) throw SchemaError("Weibull shape must be positive");
          w.log_shape = std::log(phi);
        }
        if (o.contains("psi")) w.psi = o.at("psi").get<double>();
        if (o.contains("gamma")) w.gamma = as_vec(o.at("gamma"));
      }
    }
    if (j.contains("censoring")) {
      const auto& c = j.at("censoring");
      s.censoring = c.value("enabled", s.censoring);
      s.censoring_intercept = c.value("intercept", s.censoring_intercept);
      if (c.contains("slopes")) s.censoring_slopes = as_vec(c.at("slopes"));
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("invalid simulation config: ") + e.what());
  }
}

namespace {

double draw_age(const CovariateSpec& c, Rng& rng) {
  boost::random::normal_distribution<double> norm(c.age_mean, c.age_sd);
  for (;;) {
    double a = norm(rng);
    if (a >= c.age_min && a <= c.age_max) return a;
  }
}

}  // namespace

SimulatedTrial simulate(const DgpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, 0);
  const std::size_t n = spec.n;
  std::vector<int> arm(n, 0);
  for (std::size_t i = 0; i < spec.n_treated; ++i) arm[i] = 1;
  for (std::size_t i = n; i > 1; --i) {
    boost::random::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(arm[i - 1], arm[pick(rng)]);
  }

  SimulatedTrial out;
  out.spec = spec;
  out.seed = seed;
  out.strata.resize(n);
  out.time0.resize(n);
  out.time1.resize(n);
  out.censor_time.resize(n);
  std::vector<TrialRecord> records(n);
  const auto& c = spec.covariates;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(4);
    x[0] = uniform01(rng) < c.p_male ? 1.0 : 0.0;
    x[1] = (draw_age(c, rng) - c.age_mean) / c.age_sd;
    x[2] = uniform01(rng) < c.p_nephrectomy ? 1.0 : 0.0;
    x[3] = uniform01(rng) < c.p_riskfac ? 1.0 : 0.0;

    auto pi = spec.principal_scores(x);
    double v = uniform01(rng), acc = 0.0;
    Stratum u = Stratum::s00;
    for (Stratum cand : kAllStrata) {
      if (!spec.has_stratum(cand)) continue;
      acc += pi[index(cand)];
      u = cand;
      if (v < acc) break;
    }
    double t[2];
    for (int z = 0; z < 2; ++z) {
      const auto& w = spec.outcome[z][index(u)];
      t[z] = weibull_inverse(uniform01(rng), w.shape(), weibull_linear_predictor(w, x));
    }
    double cens = std::numeric_limits<double>::infinity();
    double uc = uniform01(rng);
    if (spec.censoring) cens = -std::log(uc) / spec.censoring_rate(x);

    TrialRecord& r = records[i];
    r.arm = arm[i];
    r.ice = ice_under(u, r.arm);
    double tz = t[r.arm];
    r.time = std::min(tz, cens);
    r.event = tz <= cens ? 1 : 0;
    r.covariates = std::move(x);
    out.strata[i] = u;
    out.time0[i] = t[0];
    out.time1[i] = t[1];
    out.censor_time[i] = cens;
  }
  out.data = Dataset(std::move(records), kSimCovariates);
  return out;
}

namespace {

struct PatternWeight {
  std::array<double, 3> bits;  // male, nephrectomy, riskfac
  double prob;
};

std::vector<PatternWeight> binary_patterns(const CovariateSpec& c) {
  std::vector<PatternWeight> out;
  for (int m = 0; m < 2; ++m)
    for (int ne = 0; ne < 2; ++ne)
      for (int r = 0; r < 2; ++r) {
        double p = (m ? c.p_male : 1.0 - c.p_male) * (ne ? c.p_nephrectomy : 1.0 - c.p_nephrectomy) *
                   (r ? c.p_riskfac : 1.0 - c.p_riskfac);
        out.push_back({{double(m), double(ne), double(r)}, p});
      }
  return out;
}

TrueSpce empty_truth(const DgpSpec& spec, const TimeGrid& grid) {
  TrueSpce out;
  out.grid = grid;
  const std::size_t m = grid.size();
  for (Stratum u : kAllStrata) {
    if (!spec.has_stratum(u)) continue;
    for (int z = 0; z < 2; ++z) {
      out.survival[z][index(u)].assign(m, 0.0);
      out.survival_se[z][index(u)].assign(m, 0.0);
    }
    out.tau[index(u)].assign(m, 0.0);
    out.tau_se[index(u)].assign(m, 0.0);
  }
  return out;
}

}  // namespace

TrueSpce true_spce(const DgpSpec& spec, const TimeGrid& grid, std::size_t mc_size, std::uint64_t seed) {
  spec.validate();
  if (mc_size < 16) throw InvalidArgument("Monte Carlo size too small");
  const auto& c = spec.covariates;
  boost::math::normal_distribution<double> nd;
  const double fa = boost::math::cdf(nd, (c.age_min - c.age_mean) / c.age_sd);
  const double fb = boost::math::cdf(nd, (c.age_max - c.age_mean) / c.age_sd);
  const std::size_t m = grid.size();

  std::vector<Stratum> present;
  for (Stratum u : kAllStrata)
    if (spec.has_stratum(u)) present.push_back(u);
  // t_k^phi per (arm, stratum)
  std::array<std::array<std::vector<double>, 4>, 2> tpow;
  for (int z = 0; z < 2; ++z)
    for (Stratum u : present) {
      double phi = spec.outcome[z][index(u)].shape();
      auto& v = tpow[z][index(u)];
      v.resize(m);
      for (std::size_t k = 0; k < m; ++k) v[k] = grid[k] > 0.0 ? std::pow(grid[k], phi) : 0.0;
    }

  // Accumulators; y = pi*S, x = pi, pairs differenced for the variance.
  std::array<double, 4> sum_pi{}, sxx{};
  std::array<std::array<std::vector<double>, 4>, 2> sy, syy, sxy;
  std::array<std::vector<double>, 4> sdd, sdx;
  for (Stratum u : present) {
    for (int z = 0; z < 2; ++z) {
      sy[z][index(u)].assign(m, 0.0);
      syy[z][index(u)].assign(m, 0.0);
      sxy[z][index(u)].assign(m, 0.0);
    }
    sdd[index(u)].assign(m, 0.0);
    sdx[index(u)].assign(m, 0.0);
  }

  Rng rng = make_rng(seed, 0);
  auto patterns = binary_patterns(c);
  std::vector<double> sa(m), sb(m);
  std::array<std::vector<double>, 2> ya, yb;
  ya[0].resize(m); ya[1].resize(m); yb[0].resize(m); yb[1].resize(m);
  std::size_t total = 0;
  for (const auto& pat : patterns) {
    if (pat.prob <= 0.0) continue;
    auto bins = static_cast<std::size_t>(std::max<long long>(1, std::llround(pat.prob * double(mc_size) / 2.0)));
    const double w = pat.prob / (2.0 * double(bins));
    total += 2 * bins;
    for (std::size_t b = 0; b < bins; ++b) {
      std::array<std::array<double, 4>, 2> x;
      std::array<std::array<double, 4>, 2> pis;
      for (int h = 0; h < 2; ++h) {
        double uq = (double(b) + uniform01(rng)) / double(bins);
        double zq = boost::math::quantile(nd, fa + uq * (fb - fa));
        x[h] = {pat.bits[0], zq, pat.bits[1], pat.bits[2]};
        pis[h] = spec.principal_scores(x[h]);
      }
      for (Stratum u : present) {
        const int iu = index(u);
        const double pa = pis[0][iu], pb = pis[1][iu];
        sum_pi[iu] += w * (pa + pb);
        sxx[iu] += w * w * (pa - pb) * (pa - pb);
        for (int z = 0; z < 2; ++z) {
          const auto& wp = spec.outcome[z][iu];
          const double phi = wp.shape();
          const double ca = std::exp(weibull_linear_predictor(wp, x[0])) / phi;
          const double cb = std::exp(weibull_linear_predictor(wp, x[1])) / phi;
          const auto& tp = tpow[z][iu];
          auto& Y = sy[z][iu];
          auto& YY = syy[z][iu];
          auto& XY = sxy[z][iu];
          for (std::size_t k = 0; k < m; ++k) {
            double va = pa * std::exp(-ca * tp[k]);
            double vb = pb * std::exp(-cb * tp[k]);
            ya[z][k] = va;
            yb[z][k] = vb;
            Y[k] += w * (va + vb);
            double dy = va - vb;
            YY[k] += w * w * dy * dy;
            XY[k] += w * w * dy * (pa - pb);
          }
        }
        auto& DD = sdd[iu];
        auto& DX = sdx[iu];
        for (std::size_t k = 0; k < m; ++k) {
          double dy = (ya[1][k] - yb[1][k]) - (ya[0][k] - yb[0][k]);
          DD[k] += w * w * dy * dy;
          DX[k] += w * w * dy * (pa - pb);
        }
      }
    }
  }

  TrueSpce out = empty_truth(spec, grid);
  out.mc_size = total;
  for (Stratum u : present) {
    const int iu = index(u);
    const double bsum = sum_pi[iu];
    out.proportions[iu] = bsum;
    for (std::size_t k = 0; k < m; ++k) {
      double r[2];
      for (int z = 0; z < 2; ++z) {
        r[z] = sy[z][iu][k] / bsum;
        double v = syy[z][iu][k] - 2.0 * r[z] * sxy[z][iu][k] + r[z] * r[z] * sxx[iu];
        out.survival[z][iu][k] = r[z];
        out.survival_se[z][iu][k] = std::sqrt(std::max(v, 0.0)) / bsum;
      }
      double d = r[1] - r[0];
      double v = sdd[iu][k] - 2.0 * d * sdx[iu][k] + d * d * sxx[iu];
      out.tau[iu][k] = d;
      out.tau_se[iu][k] = std::sqrt(std::max(v, 0.0)) / bsum;
    }
  }
  return out;
}

TrueSpce true_spce_quadrature(const DgpSpec& spec, const TimeGrid& grid) {
  spec.validate();
  const auto& c = spec.covariates;
  boost::math::normal_distribution<double> nd;
  const double lo = (c.age_min - c.age_mean) / c.age_sd;
  const double hi = (c.age_max - c.age_mean) / c.age_sd;
  const double mass = boost::math::cdf(nd, hi) - boost::math::cdf(nd, lo);
  TrueSpce out = empty_truth(spec, grid);
  const std::size_t m = grid.size();
  std::array<double, 4> den{};
  std::array<std::array<std::vector<double>, 4>, 2> num;
  for (Stratum u : kAllStrata)
    if (spec.has_stratum(u))
      for (int z = 0; z < 2; ++z) num[z][index(u)].assign(m, 0.0);

  using Q = boost::math::quadrature::gauss_kronrod<double, 61>;
  for (const auto& pat : binary_patterns(c)) {
    if (pat.prob <= 0.0) continue;
    auto xrow = [&](double a) { return std::array<double, 4>{pat.bits[0], a, pat.bits[1], pat.bits[2]}; };
    auto dens = [&](double a) { return boost::math::pdf(nd, a) / mass; };
    for (Stratum u : kAllStrata) {
      if (!spec.has_stratum(u)) continue;
      const int iu = index(u);
      den[iu] += pat.prob * Q::integrate([&](double a) { return dens(a) * spec.principal_scores(xrow(a))[iu]; },
                                         lo, hi, 15, 1e-13);
      for (int z = 0; z < 2; ++z)
        for (std::size_t k = 0; k < m; ++k) {
          const double t = grid[k];
          num[z][iu][k] += pat.prob * Q::integrate(
              [&](double a) {
                auto x = xrow(a);
                return dens(a) * spec.principal_scores(x)[iu] * spec.survival(z, u, t, x);
              },
              lo, hi, 15, 1e-13);
        }
    }
  }
  for (Stratum u : kAllStrata) {
    if (!spec.has_stratum(u)) continue;
    const int iu = index(u);
    out.proportions[iu] = den[iu];
    for (std::size_t k = 0; k < m; ++k) {
      for (int z = 0; z < 2; ++z) out.survival[z][iu][k] = num[z][iu][k] / den[iu];
      out.tau[iu][k] = out.survival[1][iu][k] - out.survival[0][iu][k];
    }
  }
  return out;
}

void write_truth(const SimulatedTrial& trial, const std::string& path) {
  const std::size_t n = trial.data.size();
  std::vector<ExtraColumn> extra(5);
  extra[0].name = "latent_d0";
  extra[1].name = "latent_d1";
  extra[2].name = "latent_t0";
  extra[3].name = "latent_t1";
  extra[4].name = "latent_c";
  for (auto& e : extra) e.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    extra[0].values[i] = ice_under(trial.strata[i], 0);
    extra[1].values[i] = ice_under(trial.strata[i], 1);
    extra[2].values[i] = trial.time0[i];
    extra[3].values[i] = trial.time1[i];
    extra[4].values[i] = trial.censor_time[i];
  }
  write_csv(trial.data, path, extra);
}

void write_true_spce_csv(const TrueSpce& truth, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot write '" + path + "'");
  out << "stratum,t,s0,s1,tau,s0_se,s1_se,tau_se\n";
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (truth.tau[iu].empty()) continue;
    for (std::size_t k = 0; k < truth.grid.size(); ++k)
      out << to_string(u) << ',' << format_double(truth.grid[k]) << ',' << format_double(truth.survival[0][iu][k])
          << ',' << format_double(truth.survival[1][iu][k]) << ',' << format_double(truth.tau[iu][k]) << ','
          << format_double(truth.survival_se[0][iu][k]) << ',' << format_double(truth.survival_se[1][iu][k])
          << ',' << format_double(truth.tau_se[iu][k]) << '\n';
  }
}

}  // namespace spce
