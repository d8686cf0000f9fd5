#include "spce/survival.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace spce {

CoxFit::CoxFit(Eigen::VectorXd coefficients, Eigen::VectorXd center, std::vector<double> times,
               std::vector<double> increments)
    : coef_(std::move(coefficients)), center_(std::move(center)), times_(std::move(times)),
      increments_(std::move(increments)) {
  if (coef_.size() != center_.size()) throw InvalidArgument("coefficients and center differ in length");
  if (times_.size() != increments_.size()) throw InvalidArgument("jump times and increments differ in length");
  cumulative_.resize(times_.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < times_.size(); ++k) {
    if (k > 0 && times_[k] <= times_[k - 1]) throw InvalidArgument("jump times must be strictly increasing");
    if (increments_[k] < 0.0) throw InvalidArgument("hazard increments must be nonnegative");
    acc += increments_[k];
    cumulative_[k] = acc;
  }
}

double CoxFit::relative_risk(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) != coef_.size())
    throw InvalidArgument("covariate dimension " + std::to_string(x.size()) + " does not match Cox fit (" +
                          std::to_string(coef_.size()) + ")");
  double eta = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) eta += coef_(static_cast<Eigen::Index>(j)) * (x[j] - center_(j));
  return std::exp(eta);
}

double CoxFit::baseline_cumhaz(double t) const {
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 0.0 : cumulative_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double CoxFit::baseline_cumhaz_left(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 0.0 : cumulative_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double CoxFit::survival(double t, std::span<const double> x) const {
  return std::exp(-baseline_cumhaz(t) * relative_risk(x));
}

double CoxFit::survival_left(double t, std::span<const double> x) const {
  return std::exp(-baseline_cumhaz_left(t) * relative_risk(x));
}

std::vector<std::pair<double, double>> CoxFit::baseline_at_zero() const {
  double shift = std::exp(-coef_.dot(center_));
  std::vector<std::pair<double, double>> out;
  out.reserve(times_.size());
  for (std::size_t k = 0; k < times_.size(); ++k) out.emplace_back(times_[k], cumulative_[k] * shift);
  return out;
}

namespace {

struct PartialLik {
  double ll = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd info;
  std::vector<double> times;
  std::vector<double> increments;
};

PartialLik partial_likelihood(const Eigen::VectorXd& beta, std::span<const double> time,
                              std::span<const int> event, const Eigen::MatrixXd& xc,
                              const std::vector<std::size_t>& order, bool derivatives, bool baseline) {
  const Eigen::Index p = xc.cols();
  PartialLik out;
  out.score = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd eta = p > 0 ? Eigen::VectorXd(xc * beta) : Eigen::VectorXd::Zero(xc.rows());
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
  auto i = static_cast<std::ptrdiff_t>(order.size()) - 1;
  while (i >= 0) {
    double t = time[order[static_cast<std::size_t>(i)]];
    std::ptrdiff_t j = i;
    while (j >= 0 && time[order[static_cast<std::size_t>(j)]] == t) {
      std::size_t r = order[static_cast<std::size_t>(j)];
      double w = std::exp(eta(static_cast<Eigen::Index>(r)));
      s0 += w;
      if (derivatives && p > 0) {
        auto xr = xc.row(static_cast<Eigen::Index>(r)).transpose();
        s1 += w * xr;
        s2.noalias() += w * xr * xr.transpose();
      }
      --j;
    }
    double d = 0.0;
    Eigen::VectorXd sumx = Eigen::VectorXd::Zero(p);
    for (std::ptrdiff_t k = j + 1; k <= i; ++k) {
      std::size_t r = order[static_cast<std::size_t>(k)];
      if (event[r] != 1) continue;
      d += 1.0;
      out.ll += eta(static_cast<Eigen::Index>(r));
      if (derivatives && p > 0) sumx += xc.row(static_cast<Eigen::Index>(r)).transpose();
    }
    if (d > 0.0) {
      out.ll -= d * std::log(s0);
      if (derivatives && p > 0) {
        Eigen::VectorXd m = s1 / s0;
        out.score += sumx - d * m;
        out.info += d * (s2 / s0 - m * m.transpose());
      }
      if (baseline) {
        out.times.push_back(t);
        out.increments.push_back(d / s0);
      }
    }
    i = j;
  }
  std::reverse(out.times.begin(), out.times.end());
  std::reverse(out.increments.begin(), out.increments.end());
  return out;
}

std::vector<std::size_t> time_order(std::span<const double> time) {
  std::vector<std::size_t> order(time.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
  return order;
}

}  // namespace

double cox_log_partial_likelihood(const Eigen::VectorXd& beta, std::span<const double> time,
                                  std::span<const int> event, const Eigen::MatrixXd& x) {
  return partial_likelihood(beta, time, event, x, time_order(time), false, false).ll;
}

CoxFit fit_cox(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
               const CoxOptions& opt) {
  const auto n = static_cast<Eigen::Index>(time.size());
  if (static_cast<Eigen::Index>(event.size()) != n || x.rows() != n)
    throw InvalidArgument("time, event and design lengths differ");
  std::size_t events = 0;
  for (std::size_t i = 0; i < time.size(); ++i) {
    if (!std::isfinite(time[i]) || time[i] < 0.0) throw InvalidArgument("Cox fit: times must be nonnegative");
    if (event[i] != 0 && event[i] != 1) throw InvalidArgument("Cox fit: event indicators must be 0 or 1");
    events += static_cast<std::size_t>(event[i]);
  }
  if (events == 0) throw DataError("Cox fit: cell has no events");
  const Eigen::Index p = x.cols();
  Eigen::VectorXd center = p > 0 ? Eigen::VectorXd(x.colwise().mean().transpose()) : Eigen::VectorXd();
  Eigen::MatrixXd xc = x;
  if (p > 0) xc.rowwise() -= center.transpose();
  auto order = time_order(time);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  bool converged = true;
  int iterations = 0;
  if (opt.fixed_coefficients) {
    if (opt.fixed_coefficients->size() != p) throw InvalidArgument("fixed coefficients have wrong length");
    beta = *opt.fixed_coefficients;
  } else if (p > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
    qr.setThreshold(1e-10);
    if (qr.rank() < p)
      throw RankError("Cox fit: covariates are constant or collinear within the cell (rank " +
                      std::to_string(qr.rank()) + " of " + std::to_string(p) + ")");
    converged = false;
    auto cur = partial_likelihood(beta, time, event, xc, order, true, false);
    for (int it = 0; it <= opt.max_iter; ++it) {
      iterations = it;
      double gmax = cur.score.lpNorm<Eigen::Infinity>();
      if (gmax <= opt.tol) {
        converged = true;
        break;
      }
      if (it == opt.max_iter) break;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.info);
      if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
        throw ConvergenceError("Cox fit: information matrix not positive definite (monotone likelihood)");
      Eigen::VectorXd step = ldlt.solve(cur.score);
      double t = 1.0;
      Eigen::VectorXd cand = beta + step;
      auto next = partial_likelihood(cand, time, event, xc, order, true, false);
      while (!(next.ll >= cur.ll - 1e-12 * std::abs(cur.ll)) && t > 1e-10) {
        t *= 0.5;
        cand = beta + t * step;
        next = partial_likelihood(cand, time, event, xc, order, true, false);
      }
      double move = (cand - beta).lpNorm<Eigen::Infinity>();
      beta = cand;
      cur = std::move(next);
      if ((xc * beta).cwiseAbs().maxCoeff() > 40.0)
        throw ConvergenceError("Cox fit: monotone likelihood, coefficients diverging");
      if (move <= 1e-14 * (1.0 + beta.lpNorm<Eigen::Infinity>())) {
        iterations = it + 1;
        converged = cur.score.lpNorm<Eigen::Infinity>() <= opt.tol * static_cast<double>(n);
        break;
      }
    }
    if (!converged)
      throw ConvergenceError("Cox fit did not converge in " + std::to_string(opt.max_iter) +
                             " iterations (score max-norm " +
                             std::to_string(cur.score.lpNorm<Eigen::Infinity>()) + ")");
  }
  auto fin = partial_likelihood(beta, time, event, xc, order, false, true);
  CoxFit fit(beta, center, std::move(fin.times), std::move(fin.increments));
  fit.converged = converged;
  fit.iterations = iterations;
  fit.log_partial_likelihood = fin.ll;
  fit.num_events = events;
  fit.num_records = time.size();
  return fit;
}

std::vector<int> flip_indicator(std::span<const int> event) {
  std::vector<int> out(event.size());
  for (std::size_t i = 0; i < event.size(); ++i) out[i] = 1 - event[i];
  return out;
}

CoxFit fit_censoring(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
                     const CoxOptions& opt) {
  auto flipped = flip_indicator(event);
  std::size_t censored = 0;
  for (int f : flipped) censored += static_cast<std::size_t>(f == 1);
  if (censored == 0) throw DataError("censoring model: cell has no censored records");
  return fit_cox(time, flipped, x, opt);
}

double survival_at(const ConditionalSurvival& fit, double t, std::span<const double> x) {
  if (t < 0.0) throw InvalidArgument("survival_at: t must be nonnegative");
  return fit.survival(t, x);
}

void write_baseline_csv(const CoxFit& fit, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot write '" + path + "'");
  out << "time,cumulative_hazard\n";
  for (const auto& [t, h] : fit.baseline_at_zero()) out << format_double(t) << ',' << format_double(h) << '\n';
}

std::vector<double> SubsetSurvival::select(std::span<const double> x) const {
  std::vector<double> out(columns_.size());
  for (std::size_t j = 0; j < columns_.size(); ++j) out[j] = x[columns_[j]];
  return out;
}

double SubsetSurvival::survival(double t, std::span<const double> x) const {
  auto s = select(x);
  return inner_->survival(t, s);
}

double SubsetSurvival::survival_left(double t, std::span<const double> x) const {
  auto s = select(x);
  return inner_->survival_left(t, s);
}

double SubsetSurvival::relative_risk(std::span<const double> x) const {
  auto s = select(x);
  return inner_->relative_risk(s);
}

Eigen::VectorXd WeibullParams::pack() const {
  Eigen::VectorXd th(gamma.size() + 2);
  th(0) = log_shape;
  th(1) = psi;
  th.tail(gamma.size()) = gamma;
  return th;
}

WeibullParams WeibullParams::unpack(const Eigen::VectorXd& theta) {
  if (theta.size() < 2) throw InvalidArgument("Weibull parameter vector too short");
  return WeibullParams{theta(0), theta(1), theta.tail(theta.size() - 2)};
}

double weibull_cumhaz(double t, double shape, double lin) {
  if (t <= 0.0) return 0.0;
  return std::exp(shape * std::log(t) + lin) / shape;
}

double weibull_hazard(double t, double shape, double lin) {
  return std::exp((shape - 1.0) * std::log(t) + lin);
}

double weibull_linear_predictor(const WeibullParams& p, std::span<const double> x) {
  if (static_cast<Eigen::Index>(x.size()) != p.gamma.size())
    throw InvalidArgument("covariate dimension does not match Weibull model");
  double lin = p.psi;
  for (std::size_t j = 0; j < x.size(); ++j) lin += p.gamma(static_cast<Eigen::Index>(j)) * x[j];
  return lin;
}

double weibull_survival(const WeibullParams& p, double t, std::span<const double> x) {
  return std::exp(-weibull_cumhaz(t, p.shape(), weibull_linear_predictor(p, x)));
}

double weibull_inverse(double v, double shape, double lin) {
  return std::pow(-shape * std::log(v) / std::exp(lin), 1.0 / shape);
}

double weibull_log_density(double t, int event, double shape, double lin) {
  double lt = std::log(t);
  double h = std::exp(shape * lt + lin) / shape;
  return (event ? (shape - 1.0) * lt + lin : 0.0) - h;
}

WeibullLoglik weibull_loglik(const WeibullParams& p, std::span<const double> time, std::span<const int> event,
                             const Eigen::MatrixXd& x, std::span<const double> weights, bool with_hessian) {
  const Eigen::Index q = x.cols();
  if (p.gamma.size() != q) throw InvalidArgument("Weibull slopes do not match design");
  if (static_cast<Eigen::Index>(time.size()) != x.rows() || event.size() != time.size())
    throw InvalidArgument("time, event and design lengths differ");
  if (!weights.empty() && weights.size() != time.size()) throw InvalidArgument("weights have wrong length");
  const double phi = p.shape();
  WeibullLoglik out;
  out.gradient = Eigen::VectorXd::Zero(q + 2);
  if (with_hessian) out.hessian = Eigen::MatrixXd::Zero(q + 2, q + 2);
  Eigen::VectorXd lin = (x * p.gamma).array() + p.psi;
  Eigen::VectorXd z(q + 2);
  for (std::size_t i = 0; i < time.size(); ++i) {
    double w = weights.empty() ? 1.0 : weights[i];
    if (w == 0.0) continue;
    double t = time[i];
    if (!(t > 0.0)) throw InvalidArgument("Weibull likelihood needs positive times");
    const auto ii = static_cast<Eigen::Index>(i);
    double lt = std::log(t);
    double a = phi * lt;
    double h = std::exp(a + lin(ii)) / phi;
    double d = event[i] ? 1.0 : 0.0;
    out.value += w * (d * ((phi - 1.0) * lt + lin(ii)) - h);
    double r = d - h;
    out.gradient(0) += w * (d * a - h * (a - 1.0));
    out.gradient(1) += w * r;
    if (q > 0) out.gradient.tail(q) += w * r * x.row(ii).transpose();
    if (with_hessian) {
      z(0) = 0.0;
      z(1) = 1.0;
      if (q > 0) z.tail(q) = x.row(ii).transpose();
      // (psi, gamma) block: -H z z'
      out.hessian.noalias() -= (w * h) * z * z.transpose();
      double am1 = a - 1.0;
      out.hessian(0, 0) += w * (d * a - h * (am1 * am1 + a));
      for (Eigen::Index j = 1; j < q + 2; ++j) {
        double c = -w * h * am1 * z(j);
        out.hessian(0, j) += c;
        out.hessian(j, 0) += c;
      }
    }
  }
  return out;
}

WeibullLoglik weibull_loglik_and_grad(const WeibullParams& p, std::span<const double> time,
                                      std::span<const int> event, const Eigen::MatrixXd& x) {
  return weibull_loglik(p, time, event, x, {}, false);
}

WeibullFit fit_weibull(std::span<const double> time, std::span<const int> event, const Eigen::MatrixXd& x,
                       std::span<const double> weights, const WeibullFitOptions& opt) {
  const Eigen::Index q = x.cols();
  double wsum = 0.0, wd = 0.0, wt = 0.0;
  for (std::size_t i = 0; i < time.size(); ++i) {
    double w = weights.empty() ? 1.0 : weights[i];
    wsum += w;
    wd += w * event[i];
    wt += w * time[i];
  }
  if (!(wd > 0.0)) throw DataError("Weibull fit: no (weighted) events");
  WeibullParams start;
  if (opt.start) {
    start = *opt.start;
  } else {
    start.log_shape = 0.0;
    start.psi = std::log(wd / wt);
    start.gamma = Eigen::VectorXd::Zero(q);
  }
  const double prec = opt.gamma_prior_sd > 0.0 ? 1.0 / (opt.gamma_prior_sd * opt.gamma_prior_sd) : 0.0;
  auto eval = [&](const Eigen::VectorXd& th, bool hess) {
    auto r = weibull_loglik(WeibullParams::unpack(th), time, event, x, weights, hess);
    if (prec > 0.0) {
      r.value -= 0.5 * prec * th.tail(q).squaredNorm();
      r.gradient.tail(q) -= prec * th.tail(q);
      if (hess) r.hessian.diagonal().tail(q).array() -= prec;
    }
    return r;
  };
  Eigen::VectorXd th = start.pack();
  auto cur = eval(th, true);
  WeibullFit fit;
  for (int it = 0; it <= opt.max_iter; ++it) {
    fit.iterations = it;
    if (cur.gradient.lpNorm<Eigen::Infinity>() <= opt.tol * std::max(1.0, wsum)) {
      fit.converged = true;
      break;
    }
    if (it == opt.max_iter) break;
    Eigen::MatrixXd negh = -cur.hessian;
    Eigen::VectorXd step;
    double mu = 0.0;
    for (int tries = 0; tries < 60; ++tries) {
      Eigen::MatrixXd m = negh;
      m.diagonal().array() += mu;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
      if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all()) {
        step = ldlt.solve(cur.gradient);
        break;
      }
      mu = mu == 0.0 ? 1e-6 * (1.0 + negh.diagonal().cwiseAbs().maxCoeff()) : mu * 10.0;
    }
    if (step.size() == 0) break;
    double t = 1.0;
    Eigen::VectorXd cand = th + step;
    auto next = eval(cand, true);
    while (!(std::isfinite(next.value) && next.value >= cur.value - 1e-12 * std::abs(cur.value)) && t > 1e-12) {
      t *= 0.5;
      cand = th + t * step;
      next = eval(cand, true);
    }
    double move = (cand - th).lpNorm<Eigen::Infinity>();
    th = cand;
    cur = std::move(next);
    if (move <= 1e-14 * (1.0 + th.lpNorm<Eigen::Infinity>())) {
      fit.converged = cur.gradient.lpNorm<Eigen::Infinity>() <= 1e-5 * std::max(1.0, wsum);
      break;
    }
  }
  fit.params = WeibullParams::unpack(th);
  fit.log_likelihood = cur.value;
  return fit;
}

}  // namespace spce
