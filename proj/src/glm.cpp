#include "spce/glm.hpp"

#include <cmath>
#include <sstream>

namespace spce {

namespace {

constexpr double kSeparationEta = 36.0;

double softplus(double eta) {
  return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

void check_rank(const Eigen::MatrixXd& design) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < design.cols()) {
    std::ostringstream msg;
    msg << "design matrix is rank deficient (rank " << qr.rank() << " of " << design.cols()
        << " columns including the intercept)";
    throw RankError(msg.str());
  }
}

double condition_number(const Eigen::MatrixXd& design) {
  if (design.rows() == 0) return 0.0;
  Eigen::MatrixXd g = design.transpose() * design / static_cast<double>(design.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g, Eigen::EigenvaluesOnly);
  double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  return lo > 0.0 ? std::sqrt(hi / lo) : std::numeric_limits<double>::infinity();
}

std::string describe_direction(const Eigen::VectorXd& beta) {
  Eigen::VectorXd dir = beta / beta.norm();
  std::ostringstream msg;
  msg << "(";
  for (Eigen::Index j = 0; j < dir.size(); ++j) {
    if (j) msg << ", ";
    msg << (j == 0 ? std::string("intercept") : "x" + std::to_string(j)) << ": " << dir(j);
  }
  msg << ")";
  return msg.str();
}

double penalized_loglik(const Eigen::VectorXd& beta, const Eigen::VectorXd& y,
                        const Eigen::MatrixXd& design, double ridge) {
  Eigen::VectorXd eta = design * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) ll += y(i) * eta(i) - softplus(eta(i));
  if (ridge > 0.0) ll -= 0.5 * ridge * beta.tail(beta.size() - 1).squaredNorm();
  return ll;
}

}  // namespace

double expit(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  double e = std::exp(eta);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

double LogisticFit::linear_predictor(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) + 1 != coefficients.size())
    throw InvalidArgument("covariate dimension " + std::to_string(x.size()) + " does not match fit (" +
                          std::to_string(coefficients.size() - 1) + ")");
  double eta = coefficients(0);
  for (std::size_t j = 0; j < x.size(); ++j) eta += coefficients(j + 1) * x[j];
  return eta;
}

double logistic_log_likelihood(const Eigen::VectorXd& coef, const Eigen::VectorXd& y,
                               const Eigen::MatrixXd& x) {
  return penalized_loglik(coef, y, with_intercept(x), 0.0);
}

LogisticFit fit_logistic(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const GlmOptions& opt) {
  const Eigen::Index n = y.size();
  if (x.rows() != n) throw InvalidArgument("response and design have different row counts");
  if (n == 0) throw DataError("logistic fit on zero records");
  double ones = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) throw InvalidArgument("logistic responses must be 0 or 1");
    ones += y(i);
  }
  if (ones == 0.0 || ones == static_cast<double>(n))
    throw SeparationError(std::string("perfect separation: all responses equal ") +
                          (ones == 0.0 ? "0" : "1") + "; diverging direction (intercept: " +
                          (ones == 0.0 ? "-1" : "+1") + ")");

  Eigen::MatrixXd design = with_intercept(x);
  const Eigen::Index k = design.cols();
  check_rank(design);

  LogisticFit fit;
  fit.condition_number = condition_number(design);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
  if (opt.start) {
    if (opt.start->size() != k) throw InvalidArgument("start vector has wrong length");
    beta = *opt.start;
  } else {
    beta(0) = logit(ones / static_cast<double>(n));
  }
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(k, opt.ridge);
  penalty(0) = 0.0;

  double ll = penalized_loglik(beta, y, design, opt.ridge);
  Eigen::VectorXd g(k);
  for (int it = 0; it <= opt.max_iter; ++it) {
    Eigen::VectorXd eta = design * beta;
    Eigen::VectorXd p(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = expit(eta(i));
      w(i) = p(i) * (1.0 - p(i));
    }
    g = design.transpose() * (y - p) - penalty.cwiseProduct(beta);
    fit.iterations = it;
    if (g.lpNorm<Eigen::Infinity>() <= opt.tol) {
      fit.converged = true;
      break;
    }
    if (it == opt.max_iter) break;
    Eigen::MatrixXd h = design.transpose() * w.asDiagonal() * design;
    h.diagonal() += penalty;
    Eigen::VectorXd step = h.ldlt().solve(g);
    double t = 1.0;
    Eigen::VectorXd cand = beta + step;
    double ll_new = penalized_loglik(cand, y, design, opt.ridge);
    while (!(ll_new >= ll - 1e-12 * std::abs(ll)) && t > 1e-10) {
      t *= 0.5;
      cand = beta + t * step;
      ll_new = penalized_loglik(cand, y, design, opt.ridge);
    }
    double move = (cand - beta).lpNorm<Eigen::Infinity>();
    beta = cand;
    ll = ll_new;
    if ((design * beta).cwiseAbs().maxCoeff() > kSeparationEta)
      throw SeparationError("perfect or quasi-complete separation: fitted probabilities reached 0 or 1; "
                            "diverging direction " + describe_direction(beta));
    if (move <= 1e-14 * (1.0 + beta.lpNorm<Eigen::Infinity>())) {
      Eigen::VectorXd pe = (design * beta).unaryExpr([](double e) { return expit(e); });
      g = design.transpose() * (y - pe) - penalty.cwiseProduct(beta);
      fit.iterations = it + 1;
      fit.converged = g.lpNorm<Eigen::Infinity>() <= opt.tol * static_cast<double>(n);
      break;
    }
  }
  if (!fit.converged)
    throw ConvergenceError("logistic fit did not converge in " + std::to_string(opt.max_iter) +
                           " iterations (gradient max-norm " + std::to_string(g.lpNorm<Eigen::Infinity>()) +
                           "); diverging direction " + describe_direction(beta));
  fit.coefficients = beta;
  fit.max_abs_gradient = g.lpNorm<Eigen::Infinity>();
  fit.log_likelihood = penalized_loglik(beta, y, design, 0.0);
  return fit;
}

double predict_prob(const LogisticFit& fit, std::span<const double> x) {
  return expit(fit.linear_predictor(x));
}

Eigen::VectorXd predict_prob(const LogisticFit& fit, const Eigen::MatrixXd& x) {
  if (x.cols() + 1 != fit.coefficients.size()) throw InvalidArgument("covariate dimension mismatch");
  Eigen::VectorXd eta = (x * fit.coefficients.tail(x.cols())).array() + fit.coefficients(0);
  return eta.unaryExpr([](double e) { return expit(e); });
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& eta) {
  Eigen::MatrixXd out(eta.rows(), eta.cols());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    double m = eta.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < eta.cols(); ++j) s += (out(i, j) = std::exp(eta(i, j) - m));
    out.row(i) /= s;
  }
  return out;
}

int MultinomialFit::position(Stratum u) const {
  for (std::size_t j = 0; j < strata.size(); ++j)
    if (strata[j] == u) return static_cast<int>(j);
  return -1;
}

Eigen::VectorXd MultinomialFit::probabilities(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) + 1 != coefficients.cols())
    throw InvalidArgument("covariate dimension mismatch");
  Eigen::MatrixXd eta(1, coefficients.rows());
  for (Eigen::Index j = 0; j < coefficients.rows(); ++j) {
    double e = coefficients(j, 0);
    for (std::size_t c = 0; c < x.size(); ++c) e += coefficients(j, c + 1) * x[c];
    eta(0, j) = e;
  }
  return softmax_rows(eta).row(0).transpose();
}

Eigen::MatrixXd MultinomialFit::probabilities(const Eigen::MatrixXd& x) const {
  if (x.cols() + 1 != coefficients.cols()) throw InvalidArgument("covariate dimension mismatch");
  Eigen::MatrixXd eta = with_intercept(x) * coefficients.transpose();
  return softmax_rows(eta);
}

MultinomialFit fit_multinomial(const Eigen::MatrixXd& weights, const Eigen::MatrixXd& x,
                               const std::vector<Stratum>& strata, Stratum reference,
                               const GlmOptions& opt) {
  const Eigen::Index n = x.rows();
  const auto kk = static_cast<Eigen::Index>(strata.size());
  if (weights.rows() != n || weights.cols() != kk)
    throw InvalidArgument("stratum weight matrix must be n x (number of strata)");
  if (kk < 2) throw InvalidArgument("multinomial fit needs at least two strata");
  int ref = -1;
  for (Eigen::Index j = 0; j < kk; ++j)
    if (strata[j] == reference) ref = static_cast<int>(j);
  if (ref < 0) throw InvalidArgument("reference stratum " + to_string(reference) + " is not among the strata");
  if ((weights.array() < 0.0).any()) throw InvalidArgument("stratum weights must be nonnegative");
  for (Eigen::Index j = 0; j < kk; ++j)
    if (weights.col(j).sum() <= 0.0)
      throw DataError("stratum " + to_string(strata[j]) +
                      " has no observations; drop it from the model via the monotonicity assumption");

  Eigen::MatrixXd design = with_intercept(x);
  const Eigen::Index k = design.cols();
  check_rank(design);
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < kk; ++j)
    if (j != ref) free.push_back(j);
  const Eigen::Index m = static_cast<Eigen::Index>(free.size());
  const Eigen::Index dim = m * k;
  Eigen::VectorXd rowsum = weights.rowwise().sum();

  auto unpack = [&](const Eigen::VectorXd& theta) {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(kk, k);
    for (Eigen::Index a = 0; a < m; ++a) b.row(free[a]) = theta.segment(a * k, k).transpose();
    return b;
  };
  auto objective = [&](const Eigen::VectorXd& theta) {
    Eigen::MatrixXd eta = design * unpack(theta).transpose();
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = eta.row(i).maxCoeff();
      double lse = mx + std::log((eta.row(i).array() - mx).exp().sum());
      for (Eigen::Index j = 0; j < kk; ++j)
        if (weights(i, j) > 0.0) ll += weights(i, j) * (eta(i, j) - lse);
    }
    if (opt.ridge > 0.0)
      for (Eigen::Index a = 0; a < m; ++a) ll -= 0.5 * opt.ridge * theta.segment(a * k + 1, k - 1).squaredNorm();
    return ll;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  if (opt.start) {
    if (opt.start->size() != dim) throw InvalidArgument("start vector has wrong length");
    theta = *opt.start;
  } else {
    Eigen::VectorXd tot = weights.colwise().sum().transpose();
    for (Eigen::Index a = 0; a < m; ++a) theta(a * k) = std::log(tot(free[a]) / tot(ref));
  }
  Eigen::VectorXd penalty = Eigen::VectorXd::Zero(dim);
  for (Eigen::Index a = 0; a < m; ++a) penalty.segment(a * k + 1, k - 1).setConstant(opt.ridge);

  MultinomialFit fit;
  fit.strata = strata;
  fit.reference = reference;
  double ll = objective(theta);
  Eigen::VectorXd g(dim);
  for (int it = 0; it <= opt.max_iter; ++it) {
    Eigen::MatrixXd pr = softmax_rows(design * unpack(theta).transpose());
    g.setZero();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto xi = design.row(i).transpose();
      Eigen::MatrixXd xx = xi * xi.transpose();
      for (Eigen::Index a = 0; a < m; ++a) {
        double pa = pr(i, free[a]);
        g.segment(a * k, k) += (weights(i, free[a]) - rowsum(i) * pa) * xi;
        for (Eigen::Index b = 0; b <= a; ++b) {
          double c = rowsum(i) * pa * ((a == b ? 1.0 : 0.0) - pr(i, free[b]));
          h.block(a * k, b * k, k, k) += c * xx;
        }
      }
    }
    for (Eigen::Index a = 0; a < m; ++a)
      for (Eigen::Index b = 0; b < a; ++b) h.block(b * k, a * k, k, k) = h.block(a * k, b * k, k, k).transpose();
    g -= penalty.cwiseProduct(theta);
    h.diagonal() += penalty;
    fit.iterations = it;
    if (g.lpNorm<Eigen::Infinity>() <= opt.tol) {
      fit.converged = true;
      break;
    }
    if (it == opt.max_iter) break;
    Eigen::VectorXd step = h.ldlt().solve(g);
    double t = 1.0;
    Eigen::VectorXd cand = theta + step;
    double ll_new = objective(cand);
    while (!(ll_new >= ll - 1e-12 * std::abs(ll)) && t > 1e-10) {
      t *= 0.5;
      cand = theta + t * step;
      ll_new = objective(cand);
    }
    double move = (cand - theta).lpNorm<Eigen::Infinity>();
    theta = cand;
    ll = ll_new;
    if ((design * unpack(theta).transpose()).cwiseAbs().maxCoeff() > 2.0 * kSeparationEta)
      throw SeparationError("multinomial fit diverging: fitted stratum probabilities reached 0 or 1; "
                            "direction " + describe_direction(theta));
    if (move <= 1e-14 * (1.0 + theta.lpNorm<Eigen::Infinity>())) {
      fit.iterations = it + 1;
      fit.converged = g.lpNorm<Eigen::Infinity>() <= opt.tol * static_cast<double>(n);
      break;
    }
  }
  if (!fit.converged)
    throw ConvergenceError("multinomial fit did not converge in " + std::to_string(opt.max_iter) +
                           " iterations");
  fit.coefficients = unpack(theta);
  fit.log_likelihood = ll;
  return fit;
}

MultinomialFit fit_multinomial(std::span<const Stratum> labels, const Eigen::MatrixXd& x,
                               const std::vector<Stratum>& strata, Stratum reference,
                               const GlmOptions& opt) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw InvalidArgument("labels and design have different row counts");
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(x.rows(), static_cast<Eigen::Index>(strata.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < strata.size(); ++j)
      if (strata[j] == labels[i]) {
        w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
        found = true;
      }
    if (!found) throw InvalidArgument("label " + to_string(labels[i]) + " is not among the model strata");
  }
  return fit_multinomial(w, x, strata, reference, opt);
}

PrincipalScores principal_scores(double p0, double p1) {
  return PrincipalScores{p0, 1.0 - p1, p1 - p0};
}

PrincipalScores principal_scores_from_ice_models(const LogisticFit& fit0, const LogisticFit& fit1,
                                                 std::span<const double> x) {
  return principal_scores(predict_prob(fit0, x), predict_prob(fit1, x));
}

PrincipalScoreSummary principal_scores_from_ice_models(const LogisticFit& fit0, const LogisticFit& fit1,
                                                       const Eigen::MatrixXd& x) {
  Eigen::VectorXd p0 = predict_prob(fit0, x), p1 = predict_prob(fit1, x);
  PrincipalScoreSummary out;
  out.scores.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.scores.push_back(principal_scores(p0(i), p1(i)));
    if (out.scores.back().pi01 < 0.0) ++out.negative_pi01;
  }
  return out;
}

}  // namespace spce
