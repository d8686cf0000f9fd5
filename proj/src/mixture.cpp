#include "spce/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include <boost/random/normal_distribution.hpp>

#include "spce/output.hpp"
#include "spce/random.hpp"
#include "spce/weighting.hpp"

namespace spce {

void PriorSpec::validate() const {
  if (!(sigma_beta > 0.0) || !(sigma_gamma > 0.0)) throw InvalidArgument("prior scales must be positive");
  for (const auto& s : {sigma_rho, sigma_psi, sigma_log_shape})
    if (s && !(*s > 0.0)) throw InvalidArgument("prior scales must be positive");
}

int MixtureParams::position(Stratum u) const {
  for (std::size_t k = 0; k < strata.size(); ++k)
    if (strata[k] == u) return static_cast<int>(k);
  return -1;
}

Eigen::MatrixXd MixtureParams::probabilities(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd eta = (x * beta.rightCols(beta.cols() - 1).transpose()).rowwise() + beta.col(0).transpose();
  return softmax_rows(eta);
}

std::vector<Stratum> admissible_for_cell(const std::vector<Stratum>& strata, int arm, int ice) {
  std::vector<Stratum> out;
  for (Stratum u : strata)
    if (ice_under(u, arm) == ice) out.push_back(u);
  return out;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

std::vector<Stratum> model_strata(Monotonicity m) {
  std::vector<Stratum> s;
  for (Stratum u : admissible_strata(m)) s.push_back(u);
  std::sort(s.begin(), s.end(), [](Stratum a, Stratum b) { return index(a) < index(b); });
  return s;
}

// Weibull record log-likelihood on the internal covariate scale.
inline double weibull_ll(const Eigen::VectorXd& theta, double logy, int event, const double* x, Eigen::Index p) {
  double lin = theta(1);
  for (Eigen::Index j = 0; j < p; ++j) lin += theta(2 + j) * x[j];
  const double phi = std::exp(theta(0));
  const double logh = (phi - 1.0) * logy + lin;
  const double H = std::exp(phi * logy + lin - theta(0));
  return (event ? logh : 0.0) - H;
}

struct Block {
  std::vector<int> arms;
  Stratum u = Stratum::s00;
  int k = 0;  // stratum position
  std::string name;
};

struct Model {
  std::vector<Stratum> strata;
  int K = 0;
  int ref = 0;
  Eigen::Index p = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xs;  // internal scale, n x p
  Eigen::MatrixXd xd;                                                         // [1, xs]
  Eigen::VectorXd center, scale;
  std::vector<double> y, logy;
  std::vector<int> ev, arm, ice;
  std::vector<std::vector<int>> compat;  // per record: stratum positions
  std::vector<Block> blocks;
  std::array<std::array<int, 4>, 2> block_of{};
  std::vector<std::vector<int>> cand_rows;  // per block: records whose cell admits it
  std::size_t n = 0;
};

Model build_model(const Dataset& d, const AssumptionConfig& config, bool standardize) {
  config.validate();
  if (config.zeta != 0.0 || config.xi0 != 0.0 || config.xi1 != 0.0)
    throw InvalidArgument("the mixture engine takes no zeta/xi; sensitivity runs toggle monotonicity and ER instead");
  if (d.empty()) throw DataError("mixture model on an empty dataset");
  Model m;
  m.strata = model_strata(config.monotonicity);
  m.K = static_cast<int>(m.strata.size());
  for (int k = 0; k < m.K; ++k)
    if (m.strata[k] == Stratum::s00) m.ref = k;
  m.n = d.size();
  Eigen::MatrixXd x = d.covariates();
  m.p = x.cols();
  m.center = Eigen::VectorXd::Zero(m.p);
  m.scale = Eigen::VectorXd::Ones(m.p);
  if (standardize)
    for (Eigen::Index j = 0; j < m.p; ++j) {
      double mean = x.col(j).mean();
      double sd = std::sqrt((x.col(j).array() - mean).square().sum() / std::max<double>(1.0, double(m.n) - 1.0));
      m.center(j) = mean;
      m.scale(j) = sd > 0.0 ? sd : 1.0;
    }
  m.xs = (x.rowwise() - m.center.transpose()).array().rowwise() / m.scale.transpose().array();
  m.xd.resize(static_cast<Eigen::Index>(m.n), m.p + 1);
  m.xd.col(0).setOnes();
  m.xd.rightCols(m.p) = m.xs;
  for (std::size_t i = 0; i < m.n; ++i) {
    const auto& r = d[i];
    if (!(r.time > 0.0)) throw DataError("row " + std::to_string(i) + ": the Weibull mixture needs positive times");
    m.y.push_back(r.time);
    m.logy.push_back(std::log(r.time));
    m.ev.push_back(r.event);
    m.arm.push_back(r.arm);
    m.ice.push_back(r.ice);
    std::vector<int> c;
    for (int k = 0; k < m.K; ++k)
      if (ice_under(m.strata[k], r.arm) == r.ice) c.push_back(k);
    if (c.empty())
      throw DataError("row " + std::to_string(i) + ": cell (Z=" + std::to_string(r.arm) + ", D=" +
                      std::to_string(r.ice) + ") has no admissible stratum under monotonicity " +
                      to_string(config.monotonicity));
    m.compat.push_back(std::move(c));
  }
  for (auto& row : m.block_of) row.fill(-1);
  for (int k = 0; k < m.K; ++k) {
    Stratum u = m.strata[k];
    if (config.exclusion_restriction && u == Stratum::s11) {
      m.block_of[0][index(u)] = m.block_of[1][index(u)] = static_cast<int>(m.blocks.size());
      m.blocks.push_back({{0, 1}, u, k, "outcome[u=11,tied]"});
      continue;
    }
    for (int z = 0; z < 2; ++z) {
      m.block_of[z][index(u)] = static_cast<int>(m.blocks.size());
      m.blocks.push_back({{z}, u, k, "outcome[z=" + std::to_string(z) + ",u=" + to_string(u) + "]"});
    }
  }
  m.cand_rows.resize(m.blocks.size());
  for (std::size_t i = 0; i < m.n; ++i)
    for (int k : m.compat[i]) m.cand_rows[m.block_of[m.arm[i]][index(m.strata[k])]].push_back(static_cast<int>(i));
  return m;
}

struct State {
  Eigen::MatrixXd beta;                 // K x (p+1), internal scale
  std::vector<Eigen::VectorXd> theta;   // per block
  std::vector<int> label;               // stratum position per record
};

double block_prior(const Eigen::VectorXd& th, const PriorSpec& pr, Eigen::Index p) {
  double lp = 0.0;
  for (Eigen::Index j = 0; j < p; ++j) lp -= 0.5 * th(2 + j) * th(2 + j) / (pr.sigma_gamma * pr.sigma_gamma);
  if (pr.sigma_log_shape) {
    double z = (th(0) - pr.log_shape_mean) / *pr.sigma_log_shape;
    lp -= 0.5 * z * z;
  }
  if (pr.sigma_psi) {
    double z = (th(1) - pr.psi_mean) / *pr.sigma_psi;
    lp -= 0.5 * z * z;
  }
  return lp;
}

double beta_prior(const Eigen::VectorXd& b, const PriorSpec& pr) {
  double lp = 0.0;
  for (Eigen::Index j = 1; j < b.size(); ++j) lp -= 0.5 * b(j) * b(j) / (pr.sigma_beta * pr.sigma_beta);
  if (pr.sigma_rho) lp -= 0.5 * b(0) * b(0) / (*pr.sigma_rho * *pr.sigma_rho);
  return lp;
}

double block_loglik(const Model& m, const Eigen::VectorXd& th, const std::vector<int>& rows) {
  double ll = 0.0;
  for (int i : rows) ll += weibull_ll(th, m.logy[i], m.ev[i], m.xs.row(i).data(), m.p);
  return ll;
}

Eigen::VectorXd default_theta(const Model& m, const std::vector<int>& rows) {
  Eigen::VectorXd th = Eigen::VectorXd::Zero(2 + m.p);
  double ysum = 0.0, events = 0.0;
  for (int i : rows) {
    ysum += m.y[i];
    events += m.ev[i];
  }
  th(1) = std::log(std::max(events, 0.5) / std::max(ysum, 1e-8));
  return th;
}

Eigen::VectorXd fit_block(const Model& m, const std::vector<int>& rows, const std::vector<double>& w,
                          const Eigen::VectorXd* start, double gamma_sd, double tol) {
  std::vector<double> t(rows.size()), ww;
  std::vector<int> e(rows.size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), m.p);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    t[r] = m.y[rows[r]];
    e[r] = m.ev[rows[r]];
    x.row(static_cast<Eigen::Index>(r)) = m.xs.row(rows[r]);
  }
  if (!w.empty()) ww = w;
  WeibullFitOptions opt;
  opt.tol = tol;
  opt.gamma_prior_sd = gamma_sd;
  if (start) opt.start = WeibullParams::unpack(*start);
  return fit_weibull(t, e, x, ww, opt).params.pack();
}

// Parameters on the data scale.
MixtureParams to_data_scale(const Model& m, const Eigen::MatrixXd& beta, const std::vector<Eigen::VectorXd>& theta) {
  MixtureParams out;
  out.strata = m.strata;
  out.reference = m.strata[m.ref];
  out.beta = beta;
  for (int k = 0; k < m.K; ++k) {
    for (Eigen::Index j = 0; j < m.p; ++j) {
      out.beta(k, 1 + j) = beta(k, 1 + j) / m.scale(j);
      out.beta(k, 0) -= beta(k, 1 + j) * m.center(j) / m.scale(j);
    }
  }
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    WeibullParams w;
    w.log_shape = theta[b](0);
    w.psi = theta[b](1);
    w.gamma.resize(m.p);
    for (Eigen::Index j = 0; j < m.p; ++j) {
      w.gamma(j) = theta[b](2 + j) / m.scale(j);
      w.psi -= theta[b](2 + j) * m.center(j) / m.scale(j);
    }
    for (int z : m.blocks[b].arms) out.outcome[z][index(m.blocks[b].u)] = w;
  }
  return out;
}

Eigen::MatrixXd sym_inverse(Eigen::MatrixXd info) {
  const Eigen::Index d = info.rows();
  for (double ridge = 0.0;; ridge = ridge == 0.0 ? 1e-8 : ridge * 10.0) {
    Eigen::MatrixXd a = info + ridge * Eigen::MatrixXd::Identity(d, d);
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() == Eigen::Success) return llt.solve(Eigen::MatrixXd::Identity(d, d));
    if (ridge > 1e6) return Eigen::MatrixXd::Identity(d, d);
  }
}

struct Proposal {
  Eigen::MatrixXd chol;  // lower factor of the proposal covariance shape
  double log_scale = 0.0;
  std::size_t accepted = 0, proposed = 0;        // current batch
  std::size_t kept_accepted = 0, kept_proposed = 0;  // after burn-in
  std::size_t batches = 0;
  std::vector<Eigen::VectorXd> history;

  void set_covariance(const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) chol = llt.matrixL();
    else chol = cov.diagonal().cwiseMax(1e-10).cwiseSqrt().asDiagonal();
    log_scale = std::log(2.38 / std::sqrt(static_cast<double>(cov.rows())));
  }
};

Eigen::MatrixXd empirical_cov(const std::vector<Eigen::VectorXd>& h, std::size_t from) {
  const Eigen::Index d = h.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  const double cnt = static_cast<double>(h.size() - from);
  for (std::size_t i = from; i < h.size(); ++i) mean += h[i] / cnt;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = from; i < h.size(); ++i) cov += (h[i] - mean) * (h[i] - mean).transpose() / (cnt - 1.0);
  return cov + 1e-8 * Eigen::MatrixXd::Identity(d, d);
}

struct ChainResult {
  std::vector<MixtureDraw> draws;
  std::vector<std::vector<double>> scalars;  // per retained draw
  std::vector<std::pair<std::size_t, std::size_t>> acceptance;  // per block, beta blocks last
};

std::vector<std::string> scalar_names(const Model& m) {
  std::vector<std::string> names;
  for (int k = 0; k < m.K; ++k) {
    if (k == m.ref) continue;
    for (Eigen::Index j = 0; j <= m.p; ++j)
      names.push_back("beta[" + to_string(m.strata[k]) + "][" + std::to_string(j) + "]");
  }
  for (const auto& b : m.blocks) {
    names.push_back(b.name + ".log_shape");
    names.push_back(b.name + ".psi");
    for (Eigen::Index j = 0; j < m.p; ++j) names.push_back(b.name + ".gamma[" + std::to_string(j) + "]");
  }
  for (Stratum u : m.strata) names.push_back("proportion[" + to_string(u) + "]");
  return names;
}

ChainResult run_chain(const Model& m, const PriorSpec& prior, const TimeGrid& grid, const SamplerOptions& opt,
                      const Eigen::MatrixXd& x_data, std::size_t chain) {
  Rng rng = make_rng(opt.seed, 1000 + chain);
  boost::random::normal_distribution<double> normal;
  const std::size_t n = m.n;
  const Eigen::Index kp = m.p + 1;
  State s;
  s.label.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = m.compat[i];
    s.label[i] = c[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(c.size())) % c.size()];
  }
  // initial values
  s.beta = Eigen::MatrixXd::Zero(m.K, kp);
  {
    std::vector<Stratum> lab(n);
    for (std::size_t i = 0; i < n; ++i) lab[i] = m.strata[s.label[i]];
    try {
      GlmOptions g;
      g.ridge = 1.0 / (prior.sigma_beta * prior.sigma_beta);
      auto f = fit_multinomial(std::span<const Stratum>(lab), Eigen::MatrixXd(m.xs), m.strata, m.strata[m.ref], g);
      s.beta = f.coefficients;
    } catch (const Error&) {
    }
    for (int k = 0; k < m.K; ++k)
      if (k != m.ref)
        for (Eigen::Index j = 0; j < kp; ++j) s.beta(k, j) += 0.1 * normal(rng);
  }
  std::vector<std::vector<int>> rows(m.blocks.size());
  auto rebuild_rows = [&] {
    for (auto& r : rows) r.clear();
    for (std::size_t i = 0; i < n; ++i)
      rows[m.block_of[m.arm[i]][index(m.strata[s.label[i]])]].push_back(static_cast<int>(i));
  };
  rebuild_rows();
  s.theta.resize(m.blocks.size());
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    try {
      s.theta[b] = fit_block(m, rows[b], {}, nullptr, prior.sigma_gamma, 1e-6);
    } catch (const Error&) {
      s.theta[b] = default_theta(m, rows[b]);
    }
    s.theta[b](1) += 0.2 * normal(rng);
    s.theta[b](0) += 0.05 * normal(rng);
  }

  // proposals
  std::vector<Proposal> wprop(m.blocks.size());
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    std::vector<double> t(rows[b].size());
    std::vector<int> e(rows[b].size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows[b].size()), m.p);
    for (std::size_t r = 0; r < rows[b].size(); ++r) {
      t[r] = m.y[rows[b][r]];
      e[r] = m.ev[rows[b][r]];
      x.row(static_cast<Eigen::Index>(r)) = m.xs.row(rows[b][r]);
    }
    Eigen::MatrixXd info = Eigen::MatrixXd::Identity(2 + m.p, 2 + m.p);
    if (!rows[b].empty()) {
      auto w = weibull_loglik(WeibullParams::unpack(s.theta[b]), t, e, x, {}, true);
      info = -w.hessian;
    }
    for (Eigen::Index j = 0; j < m.p; ++j) info(2 + j, 2 + j) += 1.0 / (prior.sigma_gamma * prior.sigma_gamma);
    wprop[b].set_covariance(sym_inverse(info));
  }
  Eigen::MatrixXd eta = m.xd * s.beta.transpose();  // n x K
  std::vector<Proposal> bprop(m.K);
  {
    Eigen::MatrixXd pi = softmax_rows(eta);
    for (int k = 0; k < m.K; ++k) {
      if (k == m.ref) continue;
      Eigen::MatrixXd info = Eigen::MatrixXd::Zero(kp, kp);
      for (std::size_t i = 0; i < n; ++i) {
        const double w = pi(static_cast<Eigen::Index>(i), k) * (1.0 - pi(static_cast<Eigen::Index>(i), k));
        info += w * m.xd.row(static_cast<Eigen::Index>(i)).transpose() * m.xd.row(static_cast<Eigen::Index>(i));
      }
      for (Eigen::Index j = 1; j < kp; ++j) info(j, j) += 1.0 / (prior.sigma_beta * prior.sigma_beta);
      bprop[k].set_covariance(sym_inverse(info));
    }
  }

  const std::size_t burn = opt.burnin;
  ChainResult out;
  std::vector<double> logw(m.K);
  std::vector<std::vector<double>> comp(n);
  for (std::size_t i = 0; i < n; ++i) comp[i].resize(m.compat[i].size());
  const std::size_t batch = 50;
  for (std::size_t it = 0; it < opt.iters; ++it) {
    auto draw_labels = [&] {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& c = m.compat[i];
        if (c.size() == 1) {
          s.label[i] = c[0];
          continue;
        }
        const auto ii = static_cast<Eigen::Index>(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < c.size(); ++a) {
          const int k = c[a];
          const int b = m.block_of[m.arm[i]][index(m.strata[k])];
          logw[a] = eta(ii, k) + weibull_ll(s.theta[b], m.logy[i], m.ev[i], m.xs.row(ii).data(), m.p);
          mx = std::max(mx, logw[a]);
        }
        if (!std::isfinite(mx))
          throw ModelError("non_finite", "non-finite likelihood at draw " + std::to_string(it) + " (chain " +
                                             std::to_string(chain) + ", record " + std::to_string(i) + ")");
        double tot = 0.0;
        for (std::size_t a = 0; a < c.size(); ++a) tot += (logw[a] = std::exp(logw[a] - mx));
        double r = uniform01(rng) * tot;
        std::size_t pick = 0;
        while (pick + 1 < c.size() && r >= logw[pick]) r -= logw[pick++];
        s.label[i] = c[pick];
      }
      rebuild_rows();
    };
    auto refresh_components = [&] {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& c = m.compat[i];
        for (std::size_t a = 0; a < c.size(); ++a)
          comp[i][a] = weibull_ll(s.theta[m.block_of[m.arm[i]][index(m.strata[c[a]])]], m.logy[i], m.ev[i],
                                  m.xs.row(static_cast<Eigen::Index>(i)).data(), m.p);
      }
    };
    if (!opt.marginal_updates) draw_labels();  // (a) latent strata from their full conditional

    const bool adapting = it < burn;
    auto step = [&](Proposal& pr, Eigen::VectorXd& cur, const std::function<double(const Eigen::VectorXd&)>& lp,
                    double& lp_cur) {
      Eigen::VectorXd zv(cur.size());
      for (Eigen::Index j = 0; j < zv.size(); ++j) zv(j) = normal(rng);
      Eigen::VectorXd prop = cur + std::exp(pr.log_scale) * (pr.chol * zv);
      double lp_new = lp(prop);
      ++pr.proposed;
      if (!adapting) ++pr.kept_proposed;
      if (std::isfinite(lp_new) && std::log(uniform01(rng)) < lp_new - lp_cur) {
        cur = prop;
        lp_cur = lp_new;
        ++pr.accepted;
        if (!adapting) ++pr.kept_accepted;
      }
      if (adapting) {
        pr.history.push_back(cur);
        if (pr.proposed == batch) {
          ++pr.batches;
          double rate = static_cast<double>(pr.accepted) / static_cast<double>(batch);
          pr.log_scale += (rate - 0.3) / std::sqrt(static_cast<double>(pr.batches));
          pr.accepted = pr.proposed = 0;
        }
        // covariance refresh from the adaptation history
        if ((it + 1 == burn / 2 || it + 1 == (3 * burn) / 4) && burn >= 200) {
          const std::size_t from = pr.history.size() / 2;
          if (pr.history.size() - from > static_cast<std::size_t>(4 * cur.size())) {
            pr.set_covariance(empirical_cov(pr.history, from));
            pr.batches = 0;
          }
        }
      }
    };

    if (opt.marginal_updates) {
      // (b) with the latent strata summed out of the likelihood
      auto record_marginal = [&](std::size_t i, int over_block, const Eigen::VectorXd* th, int over_k,
                                 const Eigen::VectorXd* col) {
        const auto ii = static_cast<Eigen::Index>(i);
        double emx = -std::numeric_limits<double>::infinity();
        for (int q = 0; q < m.K; ++q) emx = std::max(emx, q == over_k ? (*col)(ii) : eta(ii, q));
        double esum = 0.0;
        for (int q = 0; q < m.K; ++q) esum += std::exp((q == over_k ? (*col)(ii) : eta(ii, q)) - emx);
        const double lse = emx + std::log(esum);
        const auto& c = m.compat[i];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < c.size(); ++a) {
          const int k = c[a];
          const int b = m.block_of[m.arm[i]][index(m.strata[k])];
          const double e = k == over_k ? (*col)(ii) : eta(ii, k);
          const double ll = b == over_block ? weibull_ll(*th, m.logy[i], m.ev[i], m.xs.row(ii).data(), m.p)
                                            : comp[i][a];
          logw[a] = e - lse + ll;
          mx = std::max(mx, logw[a]);
        }
        double tot = 0.0;
        for (std::size_t a = 0; a < c.size(); ++a) tot += std::exp(logw[a] - mx);
        return mx + std::log(tot);
      };
      refresh_components();
      for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        auto lp = [&](const Eigen::VectorXd& th) {
          double ll = 0.0;
          for (int i : m.cand_rows[b]) ll += record_marginal(static_cast<std::size_t>(i), static_cast<int>(b), &th, -1, nullptr);
          return ll + block_prior(th, prior, m.p);
        };
        double cur = lp(s.theta[b]);
        if (!std::isfinite(cur))
          throw ModelError("non_finite", "non-finite likelihood at draw " + std::to_string(it) + " (chain " +
                                             std::to_string(chain) + ", " + m.blocks[b].name + ")");
        step(wprop[b], s.theta[b], lp, cur);
        refresh_components();
      }
      for (int k = 0; k < m.K; ++k) {
        if (k == m.ref) continue;
        Eigen::VectorXd bk = s.beta.row(k).transpose();
        auto lp = [&](const Eigen::VectorXd& cand) {
          Eigen::VectorXd col = m.xd * cand;
          double ll = 0.0;
          for (std::size_t i = 0; i < n; ++i) ll += record_marginal(i, -1, nullptr, k, &col);
          return ll + beta_prior(cand, prior);
        };
        double cur = lp(bk);
        step(bprop[k], bk, lp, cur);
        s.beta.row(k) = bk.transpose();
        eta.col(k) = m.xd * bk;
      }
      draw_labels();
    } else {
      // (b) conditional on the current labels
      for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        auto lp = [&](const Eigen::VectorXd& th) { return block_loglik(m, th, rows[b]) + block_prior(th, prior, m.p); };
        double cur = lp(s.theta[b]);
        if (!std::isfinite(cur))
          throw ModelError("non_finite", "non-finite likelihood at draw " + std::to_string(it) + " (chain " +
                                             std::to_string(chain) + ", " + m.blocks[b].name + ")");
        step(wprop[b], s.theta[b], lp, cur);
      }
      for (int k = 0; k < m.K; ++k) {
        if (k == m.ref) continue;
        Eigen::VectorXd bk = s.beta.row(k).transpose();
        auto lp = [&](const Eigen::VectorXd& cand) {
          Eigen::VectorXd col = m.xd * cand;
          double ll = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            double mx = col(ii);
            for (int q = 0; q < m.K; ++q)
              if (q != k) mx = std::max(mx, eta(ii, q));
            double sum = 0.0;
            for (int q = 0; q < m.K; ++q) sum += std::exp((q == k ? col(ii) : eta(ii, q)) - mx);
            ll += (s.label[i] == k ? col(ii) : eta(ii, s.label[i])) - mx - std::log(sum);
          }
          return ll + beta_prior(cand, prior);
        };
        double cur = lp(bk);
        step(bprop[k], bk, lp, cur);
        s.beta.row(k) = bk.transpose();
        eta.col(k) = m.xd * bk;
      }
    }

    if (it >= burn && (it - burn) % std::max<std::size_t>(opt.thin, 1) == 0) {
      MixtureDraw dr;
      dr.chain = chain;
      dr.iteration = it;
      dr.params = to_data_scale(m, s.beta, s.theta);
      dr.survival = weighted_survival(dr.params, x_data, grid, &dr.proportions);
      if (opt.keep_labels) {
        dr.labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) dr.labels[i] = static_cast<std::uint8_t>(index(m.strata[s.label[i]]));
      }
      std::vector<double> sc;
      for (int k = 0; k < m.K; ++k) {
        if (k == m.ref) continue;
        for (Eigen::Index j = 0; j <= m.p; ++j) sc.push_back(dr.params.beta(k, j));
      }
      for (const auto& b : m.blocks) {
        const auto& w = *dr.params.outcome[b.arms.front()][index(b.u)];
        sc.push_back(w.log_shape);
        sc.push_back(w.psi);
        for (Eigen::Index j = 0; j < m.p; ++j) sc.push_back(w.gamma(j));
      }
      for (Stratum u : m.strata) sc.push_back(dr.proportions[index(u)]);
      out.scalars.push_back(std::move(sc));
      out.draws.push_back(std::move(dr));
    }
  }
  for (const auto& p : wprop) out.acceptance.emplace_back(p.kept_accepted, p.kept_proposed);
  for (int k = 0; k < m.K; ++k)
    if (k != m.ref) out.acceptance.emplace_back(bprop[k].kept_accepted, bprop[k].kept_proposed);
  return out;
}

Band band_of(const std::vector<std::vector<double>>& draws) {
  Band b;
  if (draws.empty()) return b;
  const std::size_t m = draws.front().size();
  b.mean.assign(m, 0.0);
  b.lo.resize(m);
  b.hi.resize(m);
  std::vector<double> col(draws.size());
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t r = 0; r < draws.size(); ++r) {
      col[r] = draws[r][k];
      b.mean[k] += col[r] / static_cast<double>(draws.size());
    }
    b.lo[k] = quantile(col, 0.025);
    b.hi[k] = quantile(col, 0.975);
  }
  return b;
}

ScalarSummary scalar_of(const std::vector<double>& v) {
  ScalarSummary s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  s.lo = quantile(v, 0.025);
  s.hi = quantile(v, 0.975);
  return s;
}

}  // namespace

std::array<std::array<std::vector<double>, 4>, 2> weighted_survival(const MixtureParams& p, const Eigen::MatrixXd& x,
                                                                    const TimeGrid& grid,
                                                                    std::array<double, 4>* proportions) {
  std::array<std::array<std::vector<double>, 4>, 2> out;
  const Eigen::MatrixXd pi = p.probabilities(x);
  const Eigen::Index n = x.rows();
  const std::size_t m = grid.size();
  if (proportions) proportions->fill(0.0);
  std::vector<double> tphi(m);
  for (std::size_t k = 0; k < p.strata.size(); ++k) {
    const Stratum u = p.strata[k];
    const double tot = pi.col(static_cast<Eigen::Index>(k)).sum();
    if (proportions) (*proportions)[index(u)] = tot / static_cast<double>(n);
    for (int z = 0; z < 2; ++z) {
      const auto& w = p.outcome[z][index(u)];
      if (!w) continue;
      const double phi = w->shape();
      for (std::size_t q = 0; q < m; ++q) tphi[q] = grid[q] > 0.0 ? std::pow(grid[q], phi) / phi : 0.0;
      Eigen::VectorXd rate = ((x * w->gamma).array() + w->psi).exp();
      std::vector<double> acc(m, 0.0);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double wi = pi(i, static_cast<Eigen::Index>(k)), ri = rate(i);
        for (std::size_t q = 0; q < m; ++q) acc[q] += wi * std::exp(-tphi[q] * ri);
      }
      for (double& v : acc) v = tot > 0.0 ? v / tot : std::numeric_limits<double>::quiet_NaN();
      out[z][index(u)] = std::move(acc);
    }
  }
  return out;
}

double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::vector<std::vector<double>> halves;
  for (const auto& c : chains) {
    const std::size_t h = c.size() / 2;
    if (h < 2) continue;
    halves.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
    halves.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
  }
  if (halves.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double len = static_cast<double>(halves.front().size());
  double w = 0.0, grand = 0.0;
  std::vector<double> means;
  for (const auto& h : halves) {
    double mu = 0.0;
    for (double v : h) mu += v / len;
    double var = 0.0;
    for (double v : h) var += (v - mu) * (v - mu) / (len - 1.0);
    means.push_back(mu);
    w += var / static_cast<double>(halves.size());
    grand += mu / static_cast<double>(halves.size());
  }
  double b = 0.0;
  for (double mu : means) b += (mu - grand) * (mu - grand) * len / (static_cast<double>(means.size()) - 1.0);
  if (!(w > 0.0)) return b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return std::sqrt(((len - 1.0) / len * w + b / len) / w);
}

std::vector<CovariateProfile> strata_covariate_profile(const std::vector<MixtureDraw>& draws, const Dataset& d) {
  std::vector<CovariateProfile> out;
  if (draws.empty()) throw InvalidArgument("covariate profile needs at least one draw");
  const Eigen::MatrixXd x = d.covariates();
  const auto p = static_cast<std::size_t>(x.cols());
  const auto& strata = draws.front().params.strata;
  std::vector<std::vector<std::vector<double>>> vals(strata.size(), std::vector<std::vector<double>>(p));
  for (const auto& dr : draws) {
    Eigen::MatrixXd pi = dr.params.probabilities(x);
    for (std::size_t k = 0; k < strata.size(); ++k) {
      const double tot = pi.col(static_cast<Eigen::Index>(k)).sum();
      Eigen::VectorXd mean = x.transpose() * pi.col(static_cast<Eigen::Index>(k)) / tot;
      for (std::size_t j = 0; j < p; ++j) vals[k][j].push_back(mean(static_cast<Eigen::Index>(j)));
    }
  }
  for (std::size_t k = 0; k < strata.size(); ++k) {
    CovariateProfile cp;
    cp.stratum = strata[k];
    for (std::size_t j = 0; j < p; ++j) cp.covariates.push_back(scalar_of(vals[k][j]));
    out.push_back(cp);
  }
  return out;
}

SpceDraws spce_from_draws(const std::vector<MixtureDraw>& draws, const TimeGrid& grid) {
  SpceDraws out;
  const std::size_t m = grid.size();
  std::array<std::vector<std::vector<double>>, 4> per;
  for (const auto& dr : draws) {
    std::array<std::vector<double>, 4> tau;
    for (Stratum u : kAllStrata) {
      const int iu = index(u);
      if (dr.survival[0][iu].empty() || dr.survival[1][iu].empty()) continue;
      tau[iu].resize(m);
      for (std::size_t k = 0; k < m; ++k) tau[iu][k] = dr.survival[1][iu][k] - dr.survival[0][iu][k];
      per[iu].push_back(tau[iu]);
    }
    out.per_draw.push_back(std::move(tau));
  }
  for (Stratum u : kAllStrata)
    if (!per[index(u)].empty()) out.bands[index(u)] = band_of(per[index(u)]);
  return out;
}

std::vector<double> itt_from_draw(const MixtureDraw& draw, const Dataset& d, const TimeGrid& grid) {
  const Eigen::MatrixXd x = d.covariates();
  const Eigen::MatrixXd pi = draw.params.probabilities(x);
  const std::size_t m = grid.size();
  std::vector<double> itt(m, 0.0);
  const double n = static_cast<double>(x.rows());
  for (std::size_t k = 0; k < draw.params.strata.size(); ++k) {
    const Stratum u = draw.params.strata[k];
    std::array<const WeibullParams*, 2> w = {&*draw.params.outcome[0][index(u)], &*draw.params.outcome[1][index(u)]};
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::VectorXd row = x.row(i).transpose();
      std::span<const double> xr(row.data(), static_cast<std::size_t>(row.size()));
      for (std::size_t q = 0; q < m; ++q)
        itt[q] += pi(i, static_cast<Eigen::Index>(k)) *
                  (weibull_survival(*w[1], grid[q], xr) - weibull_survival(*w[0], grid[q], xr)) / n;
    }
  }
  return itt;
}

MixtureFit run_sampler(const Dataset& d, const AssumptionConfig& config, const PriorSpec& prior,
                       const TimeGrid& grid, const SamplerOptions& opt) {
  prior.validate();
  if (opt.chains == 0) throw InvalidArgument("need at least one chain");
  if (opt.iters <= opt.burnin) throw InvalidArgument("iters must exceed burnin");
  Model m = build_model(d, config, opt.standardize);
  const Eigen::MatrixXd x = d.covariates();
  std::vector<ChainResult> chains(opt.chains);
  parallel_for(opt.chains, opt.threads, [&](std::size_t c) { chains[c] = run_chain(m, prior, grid, opt, x, c); });

  MixtureFit fit;
  auto& s = fit.summary;
  s.grid = grid;
  s.monotonicity = config.monotonicity;
  s.exclusion_restriction = config.exclusion_restriction;
  s.strata = m.strata;
  s.covariate_names = d.covariate_names();
  s.chains = opt.chains;
  s.iters = opt.iters;
  s.burnin = opt.burnin;
  s.seed = opt.seed;
  for (auto& c : chains)
    for (auto& dr : c.draws) fit.draws.push_back(std::move(dr));
  s.draws = fit.draws.size();

  const auto names = scalar_names(m);
  for (std::size_t j = 0; j < names.size(); ++j) {
    std::vector<std::vector<double>> per_chain;
    for (const auto& c : chains) {
      std::vector<double> v;
      for (const auto& sc : c.scalars) v.push_back(sc[j]);
      per_chain.push_back(std::move(v));
    }
    double r = split_rhat(per_chain);
    s.rhat[names[j]] = r;
    if (std::isfinite(r) || std::isinf(r)) s.max_rhat = std::max(s.max_rhat, r);
  }
  s.converged = s.max_rhat < 1.05;
  if (!s.converged)
    s.warnings.push_back("NOT CONVERGED: max split-Rhat " + format_double(s.max_rhat) + " >= 1.05");

  std::vector<std::string> block_names;
  for (const auto& b : m.blocks) block_names.push_back(b.name);
  for (int k = 0; k < m.K; ++k)
    if (k != m.ref) block_names.push_back("beta[" + to_string(m.strata[k]) + "]");
  for (std::size_t b = 0; b < block_names.size(); ++b) {
    std::size_t acc = 0, tot = 0;
    for (const auto& c : chains) {
      acc += c.acceptance[b].first;
      tot += c.acceptance[b].second;
    }
    s.acceptance[block_names[b]] = tot ? static_cast<double>(acc) / static_cast<double>(tot) : 0.0;
  }

  for (Stratum u : m.strata) {
    const int iu = index(u);
    std::vector<double> prop;
    for (const auto& dr : fit.draws) prop.push_back(dr.proportions[iu]);
    s.proportions[iu] = scalar_of(prop);
    if (s.proportions[iu]->mean * static_cast<double>(m.n) < 2.0)
      s.warnings.push_back("stratum " + to_string(u) + " has expected occupancy below 2 records");
    for (int z = 0; z < 2; ++z) {
      std::vector<std::vector<double>> curves;
      for (const auto& dr : fit.draws) curves.push_back(dr.survival[z][iu]);
      s.survival[z][iu] = band_of(curves);
    }
  }
  s.spce = spce_from_draws(fit.draws, grid).bands;
  s.profiles = strata_covariate_profile(fit.draws, d);
  return fit;
}

double mixture_log_likelihood(const MixtureParams& p, const Dataset& d, const AssumptionConfig&) {
  const Eigen::MatrixXd x = d.covariates();
  const Eigen::MatrixXd pi = p.probabilities(x);
  double ll = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& r = d[i];
    std::span<const double> xi(r.covariates);
    double tot = 0.0;
    for (std::size_t k = 0; k < p.strata.size(); ++k) {
      const Stratum u = p.strata[k];
      if (ice_under(u, r.arm) != r.ice) continue;
      const auto& w = *p.outcome[r.arm][index(u)];
      const double lin = weibull_linear_predictor(w, xi);
      double f = std::exp(-weibull_cumhaz(r.time, w.shape(), lin));
      if (r.event) f *= weibull_hazard(r.time, w.shape(), lin);
      tot += pi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * f;
    }
    ll += std::log(tot);
  }
  return ll;
}


EmFit run_em(const Dataset& d, const AssumptionConfig& config, const TimeGrid& grid, const EmOptions& opt) {
  Model m = build_model(d, config, true);
  const auto n = static_cast<Eigen::Index>(m.n);
  const Eigen::Index kp = m.p + 1;
  Rng rng = make_rng(opt.seed, 7);
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, m.K);
  if (opt.revealed) {
    if (opt.revealed->size() != m.n) throw InvalidArgument("revealed strata must cover every record");
    for (Eigen::Index i = 0; i < n; ++i) {
      int k = -1;
      for (int q : m.compat[i])
        if (m.strata[q] == (*opt.revealed)[i]) k = q;
      if (k < 0) throw DataError("row " + std::to_string(i) + ": revealed stratum is not admissible for its cell");
      W(i, k) = 1.0;
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      double tot = 0.0;
      for (int k : m.compat[i]) tot += (W(i, k) = 0.2 + uniform01(rng));
      for (int k : m.compat[i]) W(i, k) /= tot;
    }
  }
  // records that can belong to each outcome block
  std::vector<std::vector<int>> rows(m.blocks.size());
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    for (std::size_t i = 0; i < m.n; ++i)
      for (int z : m.blocks[b].arms)
        if (z == m.arm[i] && ice_under(m.blocks[b].u, z) == m.ice[i]) rows[b].push_back(static_cast<int>(i));

  Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(m.K, kp);
  std::vector<Eigen::VectorXd> theta(m.blocks.size());
  bool started = false;
  auto m_step = [&] {
    GlmOptions g;
    g.tol = 1e-10;
    g.max_iter = 500;
    if (started) {
      Eigen::VectorXd start((m.K - 1) * kp);
      Eigen::Index a = 0;
      for (int k = 0; k < m.K; ++k)
        if (k != m.ref) start.segment(kp * a++, kp) = beta.row(k).transpose();
      g.start = start;
    }
    beta = fit_multinomial(W, Eigen::MatrixXd(m.xs), m.strata, m.strata[m.ref], g).coefficients;
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
      std::vector<double> w;
      for (int i : rows[b]) w.push_back(W(i, m.blocks[b].k));
      theta[b] = fit_block(m, rows[b], w, started ? &theta[b] : nullptr, 0.0, 1e-11);
    }
    started = true;
  };
  auto e_step = [&](Eigen::MatrixXd& next) {
    Eigen::MatrixXd pi = softmax_rows(m.xd * beta.transpose());
    next.setZero(n, m.K);
    double ll = 0.0;
    std::vector<double> lw(m.K);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& c = m.compat[i];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < c.size(); ++a) {
        const int k = c[a];
        const int b = m.block_of[m.arm[i]][index(m.strata[k])];
        lw[a] = std::log(pi(i, k)) + weibull_ll(theta[b], m.logy[i], m.ev[i], m.xs.row(i).data(), m.p);
        mx = std::max(mx, lw[a]);
      }
      if (!std::isfinite(mx)) throw ModelError("non_finite", "EM: non-finite likelihood at record " + std::to_string(i));
      double tot = 0.0;
      for (std::size_t a = 0; a < c.size(); ++a) tot += std::exp(lw[a] - mx);
      for (std::size_t a = 0; a < c.size(); ++a) next(i, c[a]) = std::exp(lw[a] - mx) / tot;
      ll += mx + std::log(tot);
    }
    return ll;
  };

  EmFit fit;
  fit.grid = grid;
  Eigen::MatrixXd next;
  while (true) {
    m_step();
    ++fit.iterations;
    const double ll = e_step(next);
    if (!fit.log_likelihood.empty()) {
      const double diff = ll - fit.log_likelihood.back();
      if (diff < -1e-10)
        throw ModelError("em_decrease", "EM log-likelihood decreased by " + format_double(-diff) + " at iteration " +
                                            std::to_string(fit.iterations));
      fit.log_likelihood.push_back(ll);
      if (diff < opt.tol) {
        fit.converged = true;
        break;
      }
    } else {
      fit.log_likelihood.push_back(ll);
    }
    if (opt.revealed) {
      fit.converged = true;
      break;
    }
    if (fit.iterations >= opt.max_iter) break;
    W = next;
  }
  fit.params = to_data_scale(m, beta, theta);
  fit.survival = weighted_survival(fit.params, d.covariates(), grid, &fit.proportions);
  for (Stratum u : m.strata) {
    const int iu = index(u);
    fit.spce[iu].resize(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) fit.spce[iu][k] = fit.survival[1][iu][k] - fit.survival[0][iu][k];
  }
  return fit;
}

namespace {

nlohmann::json band_json(const Band& b) { return {{"mean", b.mean}, {"lo", b.lo}, {"hi", b.hi}}; }

nlohmann::json weibull_json(const WeibullParams& w) {
  return {{"log_shape", w.log_shape}, {"psi", w.psi}, {"gamma", std::vector<double>(w.gamma.begin(), w.gamma.end())}};
}

}  // namespace

nlohmann::json to_json(const PosteriorSummary& s) {
  nlohmann::json j;
  j["method"] = "bayesian_mixture";
  j["monotonicity"] = to_string(s.monotonicity);
  j["exclusion_restriction"] = s.exclusion_restriction;
  j["grid"] = s.grid.points();
  j["sampler"] = {{"chains", s.chains}, {"iters", s.iters}, {"burnin", s.burnin}, {"draws", s.draws}, {"seed", s.seed}};
  nlohmann::json strata = nlohmann::json::object();
  for (Stratum u : s.strata) {
    const int iu = index(u);
    nlohmann::json o;
    if (s.proportions[iu]) {
      const auto& p = *s.proportions[iu];
      o["proportion"] = {{"mean", p.mean}, {"lo", p.lo}, {"hi", p.hi}};
    }
    if (s.survival[0][iu]) o["survival_control"] = band_json(*s.survival[0][iu]);
    if (s.survival[1][iu]) o["survival_treated"] = band_json(*s.survival[1][iu]);
    if (s.spce[iu]) o["spce"] = band_json(*s.spce[iu]);
    strata[to_string(u)] = o;
  }
  j["strata"] = strata;
  nlohmann::json prof = nlohmann::json::object();
  for (const auto& cp : s.profiles) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t k = 0; k < cp.covariates.size(); ++k) {
      const auto& c = cp.covariates[k];
      const std::string name = k < s.covariate_names.size() ? s.covariate_names[k] : "x" + std::to_string(k);
      o[name] = {{"mean", c.mean}, {"lo", c.lo}, {"hi", c.hi}};
    }
    prof[to_string(cp.stratum)] = o;
  }
  j["covariate_profiles"] = prof;
  j["diagnostics"] = {{"rhat", s.rhat},
                      {"max_rhat", s.max_rhat},
                      {"converged", s.converged},
                      {"acceptance", s.acceptance},
                      {"warnings", s.warnings}};
  return j;
}

nlohmann::json to_json(const EmFit& e) {
  nlohmann::json j;
  j["method"] = "em";
  j["grid"] = e.grid.points();
  j["iterations"] = e.iterations;
  j["converged"] = e.converged;
  j["log_likelihood"] = e.log_likelihood.empty() ? 0.0 : e.log_likelihood.back();
  j["log_likelihood_trace"] = e.log_likelihood;
  nlohmann::json strata = nlohmann::json::object();
  for (std::size_t k = 0; k < e.params.strata.size(); ++k) {
    const Stratum u = e.params.strata[k];
    const int iu = index(u);
    nlohmann::json o;
    o["proportion"] = e.proportions[iu];
    o["beta"] = std::vector<double>(e.params.beta.row(static_cast<Eigen::Index>(k)).begin(),
                                    e.params.beta.row(static_cast<Eigen::Index>(k)).end());
    if (e.params.outcome[0][iu]) o["outcome_control"] = weibull_json(*e.params.outcome[0][iu]);
    if (e.params.outcome[1][iu]) o["outcome_treated"] = weibull_json(*e.params.outcome[1][iu]);
    o["survival_control"] = e.survival[0][iu];
    o["survival_treated"] = e.survival[1][iu];
    o["spce"] = e.spce[iu];
    strata[to_string(u)] = o;
  }
  j["strata"] = strata;
  return j;
}

void write_draws_csv(const MixtureFit& fit, const std::string& path) {
  std::ostringstream o;
  o << "chain,iteration,stratum,t,proportion,survival_control,survival_treated,spce\n";
  const auto& g = fit.summary.grid;
  for (const auto& dr : fit.draws)
    for (Stratum u : dr.params.strata) {
      const int iu = index(u);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double s0 = dr.survival[0][iu][k], s1 = dr.survival[1][iu][k];
        o << dr.chain << "," << dr.iteration << "," << to_string(u) << "," << format_double(g[k]) << ","
          << format_double(dr.proportions[iu]) << "," << format_double(s0) << "," << format_double(s1) << ","
          << format_double(s1 - s0) << "\n";
      }
    }
  write_text(path, o.str());
}

}  // namespace spce
