// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations for the test suite. Nothing here
// calls the banded routines: covariances come from closed-form kernels or
// from matrix exponentials of the SDE, and all algebra is dense.

#ifndef S2VGP_TESTS_DENSE_ORACLE_HPP_
#define S2VGP_TESTS_DENSE_ORACLE_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

#include "s2vgp/errors.hpp"
#include "s2vgp/kernels.hpp"
#include "s2vgp/likelihood.hpp"

namespace s2vgp::oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Closed-form k(tau) from the kernel expression.
inline double kernel_value(const KernelExpr& e, double tau) {
  const double a = std::abs(tau);
  auto hv = [&](std::size_t i) { return e.hypers.at(i).value; };
  switch (e.kind) {
    case KernelKind::kMatern12:
      return hv(0) * std::exp(-a / hv(1));
    case KernelKind::kMatern32: {
      const double s = std::sqrt(3.0) * a / hv(1);
      return hv(0) * (1.0 + s) * std::exp(-s);
    }
    case KernelKind::kMatern52: {
      const double s = std::sqrt(5.0) * a / hv(1);
      return hv(0) * (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
    case KernelKind::kCosine:
      return hv(0) * std::cos(2.0 * std::numbers::pi * hv(1) * tau);
    case KernelKind::kHarmonic: {
      double s = 0.0;
      for (std::size_t j = 1; j < e.hypers.size(); ++j)
        s += hv(j) * std::cos(2.0 * std::numbers::pi * double(j) * hv(0) * tau);
      return s;
    }
    case KernelKind::kSum:
      return kernel_value(e.children.at(0), tau) + kernel_value(e.children.at(1), tau);
    case KernelKind::kProduct:
      return kernel_value(e.children.at(0), tau) * kernel_value(e.children.at(1), tau);
  }
  return 0.0;
}

inline MatrixXd gram(const KernelExpr& e, const std::vector<double>& a, const std::vector<double>& b) {
  MatrixXd k(Index(a.size()), Index(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) k(Index(i), Index(j)) = kernel_value(e, a[i] - b[j]);
  return k;
}

/// Cholesky with one retry at jitter 1e-10.
inline Eigen::LLT<MatrixXd> robust_llt(const MatrixXd& a, const char* what) {
  Eigen::LLT<MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) return llt;
  llt.compute(a + 1e-10 * MatrixXd::Identity(a.rows(), a.cols()));
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite(std::string(what) + " is not positive definite");
  return llt;
}

inline double llt_logdet(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

struct DenseGaussian {
  VectorXd mean;
  MatrixXd cov;
};

/// KL[q || p] between dense Gaussians.
inline double kl_dense(const DenseGaussian& q, const DenseGaussian& p) {
  if (q.mean.size() != p.mean.size()) throw ShapeMismatch("kl_dense: dimension mismatch");
  const auto lp = robust_llt(p.cov, "p covariance");
  const auto lq = robust_llt(q.cov, "q covariance");
  const VectorXd dm = p.mean - q.mean;
  const double tr = lp.solve(q.cov).trace();
  const double quad = dm.dot(lp.solve(dm));
  return 0.5 * (tr + quad - double(q.mean.size()) + llt_logdet(lp) - llt_logdet(lq));
}

/// Exact conjugate GP regression.
class GprExact {
 public:
  GprExact(const KernelExpr& kernel, std::vector<double> x, VectorXd y, double noise)
      : kernel_(kernel), x_(std::move(x)), y_(std::move(y)), noise_(noise) {
    MatrixXd K = gram(kernel_, x_, x_);
    K.diagonal().array() += noise_;
    llt_ = robust_llt(K, "K + noise");
    alpha_ = llt_.solve(y_);
    const double n = double(y_.size());
    log_marginal_ = -0.5 * y_.dot(alpha_) - 0.5 * llt_logdet(llt_) - 0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  double log_marginal() const { return log_marginal_; }

  /// Posterior of f at xs (full covariance).
  DenseGaussian predict(const std::vector<double>& xs) const {
    const MatrixXd ks = gram(kernel_, xs, x_);
    DenseGaussian g;
    g.mean = ks * alpha_;
    g.cov = gram(kernel_, xs, xs) - ks * llt_.solve(ks.transpose());
    return g;
  }

  /// Posterior of the SDE states at xs (stacked, d per point).
  DenseGaussian predict_states(const SsmKernel& k, const std::vector<double>& xs) const {
    const Index d = k.state_dim(), m = Index(xs.size()), n = Index(x_.size());
    MatrixXd kss(m * d, m * d), ksf(m * d, n);
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < m; ++j) kss.block(i * d, j * d, d, d) = k.state_covariance(xs[std::size_t(i)] - xs[std::size_t(j)]);
      for (Index j = 0; j < n; ++j) ksf.block(i * d, j, d, 1) = k.state_covariance(xs[std::size_t(i)] - x_[std::size_t(j)]) * k.H.transpose();
    }
    DenseGaussian g;
    g.mean = ksf * alpha_;
    g.cov = kss - ksf * llt_.solve(ksf.transpose());
    g.cov = (0.5 * (g.cov + g.cov.transpose())).eval();
    return g;
  }

 private:
  KernelExpr kernel_;
  std::vector<double> x_;
  VectorXd y_;
  double noise_;
  Eigen::LLT<MatrixXd> llt_;
  VectorXd alpha_;
  double log_marginal_ = 0.0;
};

enum class Features { kPoint, kState };

/// Dense SVGP with either point evaluations f(z_m) or full SDE states s(z_m)
/// as inducing features.
class SvgpDense {
 public:
  SvgpDense(const SsmKernel& k, std::vector<double> z, Features f) : k_(k), z_(std::move(z)), features_(f) {
    if (z_.empty()) throw DegenerateInducingInputs("svgp_dense: no inducing inputs");
    const Index m = Index(z_.size()), d = block();
    Kuu_.resize(m * d, m * d);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) Kuu_.block(i * d, j * d, d, d) = cov_uu(z_[std::size_t(i)] - z_[std::size_t(j)]);
    Kuu_ = (0.5 * (Kuu_ + Kuu_.transpose())).eval();
    llt_ = robust_llt(Kuu_, "Kuu");
  }

  Index size() const { return Kuu_.rows(); }
  const MatrixXd& Kuu() const { return Kuu_; }

  /// Cov(f(x), u) as a row.
  Eigen::RowVectorXd kfu(double x) const {
    const Index m = Index(z_.size()), d = block();
    Eigen::RowVectorXd r(m * d);
    for (Index j = 0; j < m; ++j) r.segment(j * d, d) = cov_fu(x - z_[std::size_t(j)]);
    return r;
  }

  /// f-marginal at x under q(u) = N(mu, S).
  std::pair<double, double> marginal(const DenseGaussian& q, double x) const {
    const Eigen::RowVectorXd kx = kfu(x);
    const VectorXd a = llt_.solve(kx.transpose());
    return {a.dot(q.mean), kernel_value(k_.expr, 0.0) - kx.dot(a) + a.dot(q.cov * a)};
  }

  double elbo(const DenseGaussian& q, const std::vector<double>& x, const VectorXd& y, const Likelihood& lik) const {
    double s = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      const auto [m, v] = marginal(q, x[n]);
      s += expected_log_lik(lik, y(Index(n)), m, v).value;
    }
    return s - kl_dense(q, {VectorXd::Zero(size()), Kuu_});
  }

  /// Optimal q for a Gaussian likelihood.
  DenseGaussian optimal_q(const std::vector<double>& x, const VectorXd& y, double noise) const {
    MatrixXd Kux(size(), Index(x.size()));
    for (std::size_t n = 0; n < x.size(); ++n) Kux.col(Index(n)) = kfu(x[n]).transpose();
    const MatrixXd A = Kuu_ + Kux * Kux.transpose() / noise;
    const auto la = robust_llt(A, "Kuu + Kux Kxu / noise");
    DenseGaussian q;
    q.cov = Kuu_ * la.solve(Kuu_);
    q.cov = (0.5 * (q.cov + q.cov.transpose())).eval();
    q.mean = Kuu_ * la.solve(Kux * y) / noise;
    return q;
  }

  /// Joint q-process distribution of the states at xs (state features only).
  DenseGaussian process_states(const DenseGaussian& q, const std::vector<double>& xs) const {
    if (features_ != Features::kState) throw ShapeMismatch("process_states needs state features");
    const Index d = k_.state_dim(), n = Index(xs.size()), m = Index(z_.size());
    MatrixXd kss(n * d, n * d), ksu(n * d, m * d);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) kss.block(i * d, j * d, d, d) = k_.state_covariance(xs[std::size_t(i)] - xs[std::size_t(j)]);
      for (Index j = 0; j < m; ++j) ksu.block(i * d, j * d, d, d) = k_.state_covariance(xs[std::size_t(i)] - z_[std::size_t(j)]);
    }
    const MatrixXd a = llt_.solve(ksu.transpose()).transpose();  // ksu Kuu^{-1}
    DenseGaussian g;
    g.mean = a * q.mean;
    g.cov = kss - a * ksu.transpose() + a * q.cov * a.transpose();
    g.cov = (0.5 * (g.cov + g.cov.transpose())).eval();
    return g;
  }

 private:
  Index block() const { return features_ == Features::kState ? k_.state_dim() : 1; }
  MatrixXd cov_uu(double tau) const {
    if (features_ == Features::kState) return k_.state_covariance(tau);
    return MatrixXd::Constant(1, 1, kernel_value(k_.expr, tau));
  }
  Eigen::RowVectorXd cov_fu(double tau) const {
    if (features_ == Features::kState) return k_.H * k_.state_covariance(tau);
    return Eigen::RowVectorXd::Constant(1, kernel_value(k_.expr, tau));
  }

  SsmKernel k_;
  std::vector<double> z_;
  Features features_;
  MatrixXd Kuu_;
  Eigen::LLT<MatrixXd> llt_;
};

/// Finite-grid proxy KL[q(s(grid)) || p(s(grid) | y)].
inline double posterior_kl_process(const SvgpDense& svgp, const DenseGaussian& q, const GprExact& gpr,
                                   const SsmKernel& k, const std::vector<double>& grid) {
  if (grid.size() > 300) throw ShapeMismatch("posterior_kl_process: grid larger than 300 points");
  return kl_dense(svgp.process_states(q, grid), gpr.predict_states(k, grid));
}

}  // namespace s2vgp::oracle

#endif  // S2VGP_TESTS_DENSE_ORACLE_HPP_
