// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_LIKELIHOOD_HPP_
#define S2VGP_LIKELIHOOD_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>

#include "s2vgp/errors.hpp"

namespace s2vgp {

/// Gauss-Hermite rule for a standard normal weight: E[g(X)] ~ sum w_i g(x_i).
struct GaussHermite {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

/// Golub-Welsch on the probabilists' Hermite recurrence. Cached per order.
inline const GaussHermite& gauss_hermite(int order) {
  if (order < 1) throw InvalidHyperparameter("quadrature order must be >= 1");
  static std::mutex mu;
  static std::map<int, GaussHermite> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(order);
  if (it != cache.end()) return it->second;
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(double(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussHermite rule;
  rule.nodes = es.eigenvalues();
  rule.weights = es.eigenvectors().row(0).transpose().array().square();
  rule.weights /= rule.weights.sum();
  // Symmetrize so odd moments vanish exactly.
  for (int i = 0; i < order / 2; ++i) {
    const int j = order - 1 - i;
    const double x = 0.5 * (rule.nodes(j) - rule.nodes(i));
    const double w = 0.5 * (rule.weights(i) + rule.weights(j));
    rule.nodes(i) = -x;
    rule.nodes(j) = x;
    rule.weights(i) = rule.weights(j) = w;
  }
  if (order % 2 == 1) rule.nodes(order / 2) = 0.0;
  return cache.emplace(order, std::move(rule)).first->second;
}

enum class LikelihoodKind { kGaussian, kBernoulliProbit, kBernoulliLogit, kStudentT };

/// Observation model p(y | f).
///
/// Learnable parameters (unconstrained): log variance for the Gaussian,
/// log scale for Student-t. Bernoulli variants have none; Student-t degrees
/// of freedom are fixed.
struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::kGaussian;
  double variance = 1.0;
  double df = 1.0;
  double scale = 1.0;
  int order = 20;

  static Likelihood gaussian(double variance) {
    Likelihood l;
    l.kind = LikelihoodKind::kGaussian;
    l.variance = variance;
    l.validate();
    return l;
  }
  static Likelihood bernoulli_probit(int order = 20) {
    Likelihood l;
    l.kind = LikelihoodKind::kBernoulliProbit;
    l.order = order;
    l.validate();
    return l;
  }
  static Likelihood bernoulli_logit(int order = 20) {
    Likelihood l;
    l.kind = LikelihoodKind::kBernoulliLogit;
    l.order = order;
    l.validate();
    return l;
  }
  static Likelihood student_t(double df, double scale, int order = 20) {
    Likelihood l;
    l.kind = LikelihoodKind::kStudentT;
    l.df = df;
    l.scale = scale;
    l.order = order;
    l.validate();
    return l;
  }

  void validate() const {
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (kind == LikelihoodKind::kGaussian && !positive(variance))
      throw InvalidHyperparameter("likelihood variance must be positive");
    if (kind == LikelihoodKind::kStudentT && (!positive(df) || !positive(scale)))
      throw InvalidHyperparameter("student-t df and scale must be positive");
    if (order < 1) throw InvalidHyperparameter("quadrature order must be >= 1");
  }

  bool is_gaussian() const { return kind == LikelihoodKind::kGaussian; }
  bool is_binary() const {
    return kind == LikelihoodKind::kBernoulliProbit || kind == LikelihoodKind::kBernoulliLogit;
  }

  Eigen::Index num_params() const {
    return (kind == LikelihoodKind::kGaussian || kind == LikelihoodKind::kStudentT) ? 1 : 0;
  }
  Eigen::VectorXd params() const {
    Eigen::VectorXd p(num_params());
    if (kind == LikelihoodKind::kGaussian) p(0) = std::log(variance);
    if (kind == LikelihoodKind::kStudentT) p(0) = std::log(scale);
    return p;
  }
  Likelihood with_params(const Eigen::VectorXd& p) const {
    if (p.size() != num_params()) throw ShapeMismatch("likelihood parameter count");
    Likelihood l = *this;
    if (kind == LikelihoodKind::kGaussian) l.variance = std::exp(p(0));
    if (kind == LikelihoodKind::kStudentT) l.scale = std::exp(p(0));
    l.validate();
    return l;
  }
};

inline std::string likelihood_name(LikelihoodKind k) {
  switch (k) {
    case LikelihoodKind::kGaussian: return "gaussian";
    case LikelihoodKind::kBernoulliProbit: return "bernoulli-probit";
    case LikelihoodKind::kBernoulliLogit: return "bernoulli-logit";
    case LikelihoodKind::kStudentT: return "student-t";
  }
  return "?";
}

inline LikelihoodKind parse_likelihood_kind(const std::string& s) {
  if (s == "gaussian") return LikelihoodKind::kGaussian;
  if (s == "bernoulli-probit" || s == "probit") return LikelihoodKind::kBernoulliProbit;
  if (s == "bernoulli-logit" || s == "logit") return LikelihoodKind::kBernoulliLogit;
  if (s == "student-t" || s == "studentt") return LikelihoodKind::kStudentT;
  throw ConfigError("unknown likelihood '" + s + "'");
}

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// log Phi(z), accurate in the far left tail.
inline double log_normal_cdf(double z) {
  if (z > -30.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - 0.5 * kLog2Pi + std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

/// phi(z) / Phi(z).
inline double inverse_mills(double z) {
  return std::exp(-0.5 * z * z - 0.5 * kLog2Pi - log_normal_cdf(z));
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Binary labels may be {0,1} or {-1,1}; returns the sign.
inline double binary_sign(double y) {
  if (y == 1.0) return 1.0;
  if (y == 0.0 || y == -1.0) return -1.0;
  throw InvalidObservation("binary likelihood needs labels in {0,1} or {-1,1}, got " + std::to_string(y));
}

/// log p(y|f) and its first two f-derivatives, plus d/d(param).
struct PointLogLik {
  double value, d1, d2, dparam;
};

inline PointLogLik point_log_lik(const Likelihood& lik, double y, double f) {
  switch (lik.kind) {
    case LikelihoodKind::kGaussian: {
      const double r = y - f, s2 = lik.variance;
      return {-0.5 * (kLog2Pi + std::log(s2)) - 0.5 * r * r / s2, r / s2, -1.0 / s2, -0.5 + 0.5 * r * r / s2};
    }
    case LikelihoodKind::kBernoulliProbit: {
      const double t = binary_sign(y), z = t * f;
      const double r = inverse_mills(z);
      return {log_normal_cdf(z), t * r, -r * (z + r), 0.0};
    }
    case LikelihoodKind::kBernoulliLogit: {
      const double t = binary_sign(y);
      const double s = sigmoid(f);
      return {-softplus(-t * f), t * sigmoid(-t * f), -s * (1.0 - s), 0.0};
    }
    case LikelihoodKind::kStudentT: {
      const double nu = lik.df, s2 = lik.scale * lik.scale, r = y - f;
      const double den = nu * s2 + r * r;
      const double value = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                           0.5 * std::log(nu * std::numbers::pi * s2) - 0.5 * (nu + 1.0) * std::log1p(r * r / (nu * s2));
      return {value, (nu + 1.0) * r / den, (nu + 1.0) * (r * r - nu * s2) / (den * den),
              -1.0 + (nu + 1.0) * r * r / den};
    }
  }
  return {0, 0, 0, 0};
}

}  // namespace detail

/// E_{N(f; m, v)}[log p(y|f)] with gradients.
struct ExpectedLogLik {
  double value = 0.0;
  double d_mean = 0.0;
  double d_var = 0.0;
  Eigen::VectorXd d_params;  // w.r.t. Likelihood::params()
};

/// Gaussian: closed form. Others: Gauss-Hermite of the configured order. The
/// variance derivative is the exact derivative of the quadrature sum; near
/// v = 0 it switches to E[f'']/2.
inline ExpectedLogLik expected_log_lik(const Likelihood& lik, double y, double m, double v) {
  if (!std::isfinite(y)) throw InvalidObservation("non-finite observation");
  ExpectedLogLik out;
  out.d_params = Eigen::VectorXd::Zero(lik.num_params());
  v = std::max(v, 0.0);
  if (lik.is_gaussian()) {
    const double s2 = lik.variance, r = y - m;
    out.value = -0.5 * (detail::kLog2Pi + std::log(s2)) - 0.5 * (r * r + v) / s2;
    out.d_mean = r / s2;
    out.d_var = -0.5 / s2;
    out.d_params(0) = -0.5 + 0.5 * (r * r + v) / s2;
    return out;
  }
  const GaussHermite& gh = gauss_hermite(lik.order);
  const double sd = std::sqrt(v);
  const bool small = v < 1e-12;
  for (Eigen::Index i = 0; i < gh.nodes.size(); ++i) {
    const double w = gh.weights(i), x = gh.nodes(i);
    const auto p = detail::point_log_lik(lik, y, m + sd * x);
    out.value += w * p.value;
    out.d_mean += w * p.d1;
    out.d_var += small ? 0.5 * w * p.d2 : w * p.d1 * x / (2.0 * sd);
    if (out.d_params.size() > 0) out.d_params(0) += w * p.dparam;
  }
  return out;
}

/// log of the predictive density log E_{N(f; m, v)}[p(y|f)].
inline double log_predictive_density(const Likelihood& lik, double y, double m, double v) {
  if (!std::isfinite(y)) throw InvalidObservation("non-finite observation");
  v = std::max(v, 0.0);
  if (lik.is_gaussian()) {
    const double s = v + lik.variance, r = y - m;
    return -0.5 * (detail::kLog2Pi + std::log(s)) - 0.5 * r * r / s;
  }
  const GaussHermite& gh = gauss_hermite(lik.order);
  const double sd = std::sqrt(v);
  Eigen::VectorXd terms(gh.nodes.size());
  for (Eigen::Index i = 0; i < gh.nodes.size(); ++i)
    terms(i) = std::log(gh.weights(i)) + detail::point_log_lik(lik, y, m + sd * gh.nodes(i)).value;
  const double mx = terms.maxCoeff();
  return mx + std::log((terms.array() - mx).exp().sum());
}

/// Predictive mean of y given f ~ N(m, v) (probability of the positive class
/// for binary likelihoods).
inline double predictive_mean(const Likelihood& lik, double m, double v) {
  switch (lik.kind) {
    case LikelihoodKind::kBernoulliProbit:
      return 0.5 * std::erfc(-m / std::sqrt(1.0 + std::max(v, 0.0)) / std::numbers::sqrt2);
    case LikelihoodKind::kBernoulliLogit: {
      const GaussHermite& gh = gauss_hermite(lik.order);
      double p = 0.0;
      for (Eigen::Index i = 0; i < gh.nodes.size(); ++i)
        p += gh.weights(i) * detail::sigmoid(m + std::sqrt(std::max(v, 0.0)) * gh.nodes(i));
      return p;
    }
    default:
      return m;
  }
}

}  // namespace s2vgp

#endif  // S2VGP_LIKELIHOOD_HPP_
