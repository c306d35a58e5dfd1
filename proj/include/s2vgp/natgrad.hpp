// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_NATGRAD_HPP_
#define S2VGP_NATGRAD_HPP_

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "s2vgp/banded.hpp"
#include "s2vgp/errors.hpp"
#include "s2vgp/variational.hpp"

namespace s2vgp {

/// Natural parameters of q(u): theta1 = Q mu, theta2 = -Q / 2 (lower band).
struct NaturalParams {
  VectorXd theta1;
  BandedMatrix theta2;
};

/// Expectation parameters: eta1 = mu, eta2 = band of E[u u^T].
struct ExpectationParams {
  VectorXd eta1;
  BandedMatrix eta2;
};

inline NaturalParams xi_to_theta(const InducingPosterior& q) {
  q.validate();
  const BandedMatrix prec = lower_gram(q.Lq);
  return {banded_matvec(prec, q.mu), -0.5 * prec};
}

/// Throws NotPositiveDefinite if -2 theta2 is not SPD.
inline InducingPosterior theta_to_xi(const NaturalParams& t, Index d) {
  if (t.theta1.size() != t.theta2.size()) throw ShapeMismatch("theta_to_xi: theta1/theta2 sizes differ");
  if (t.theta2.bandwidth() != state_bandwidth(d)) throw ShapeMismatch("theta_to_xi: bandwidth does not match d");
  const BandedMatrix l = banded_cholesky(-2.0 * t.theta2);
  return {banded_cholesky_solve(l, t.theta1), l, d};
}

inline ExpectationParams xi_to_eta(const InducingPosterior& q) {
  q.validate();
  return {q.mu, subset_inverse(q.Lq) + band_outer(q.mu, q.Lq.bandwidth())};
}

/// eta2 - band(eta1 eta1^T) is read as the band of a covariance; the factor
/// of its banded precision comes from reverse_subset_inverse. Infeasible
/// input surfaces as InconsistentBand.
inline InducingPosterior eta_to_xi(const ExpectationParams& e, Index d) {
  if (e.eta1.size() != e.eta2.size()) throw ShapeMismatch("eta_to_xi: eta1/eta2 sizes differ");
  if (e.eta2.bandwidth() != state_bandwidth(d)) throw ShapeMismatch("eta_to_xi: bandwidth does not match d");
  const BandedMatrix c = e.eta2 - band_outer(e.eta1, e.eta2.bandwidth());
  return {e.eta1, reverse_subset_inverse(c), d};
}

/// dL/deta from dL/dmu and dL/dLq. eta2_bar uses the stored-entry
/// convention; entries outside the block-tridiagonal pattern are zero in
/// exact arithmetic and are cleared.
inline ExpectationParams elbo_gradient_eta(const InducingPosterior& q, const VectorXd& mu_bar,
                                           const BandSensitivity& lq_bar) {
  q.validate();
  if (mu_bar.size() != q.size()) throw ShapeMismatch("elbo_gradient_eta: mu gradient length");
  q.Lq.require_same(lq_bar);
  const BandedMatrix c = subset_inverse(q.Lq);
  ExpectationParams g;
  g.eta2 = reverse_subset_inverse_vjp(lq_bar, c);
  mask_to_btd(g.eta2, q.d);
  // C = eta2 - band(eta1 eta1^T) also depends on eta1.
  BandedMatrix sym = g.eta2;
  sym.bands().bottomRows(sym.bands().rows() - 1) *= 0.5;
  g.eta1 = mu_bar - 2.0 * banded_matvec(sym, q.mu);
  return g;
}

namespace detail {

/// Natural gradient in theta coordinates: (eta1_bar, symmetric form of
/// eta2_bar). Stored off-diagonals of eta2_bar count both triangles.
inline NaturalParams theta_direction(const ExpectationParams& g) {
  BandedMatrix sym = g.eta2;
  sym.bands().bottomRows(sym.bands().rows() - 1) *= 0.5;
  return {g.eta1, sym};
}

inline bool all_zero(const VectorXd& mu_bar, const BandSensitivity& lq_bar) {
  return mu_bar.isZero(0.0) && lq_bar.bands().isZero(0.0);
}

}  // namespace detail

/// Natural gradient expressed in xi = (mu, Lq): (dxi/dtheta) (dL/deta).
inline InducingPosterior natural_gradient_direction(const InducingPosterior& q, const VectorXd& mu_bar,
                                                    const BandSensitivity& lq_bar) {
  const NaturalParams dt = detail::theta_direction(elbo_gradient_eta(q, mu_bar, lq_bar));
  const BandedMatrix dq = -2.0 * dt.theta2;
  const BandedMatrix dl = banded_cholesky_jvp(q.Lq, dq);
  const VectorXd dmu = banded_cholesky_solve(q.Lq, dt.theta1 - banded_matvec(dq, q.mu));
  return {dmu, dl, q.d};
}

/// One ascent step of size gamma. The step is taken in natural-parameter
/// coordinates, theta <- theta + gamma dL/deta, and mapped back to xi; to
/// first order this is xi + gamma * natural_gradient_direction.
/// Throws StepRejected when the new precision is not positive definite.
inline InducingPosterior natural_gradient_step(const InducingPosterior& q, const VectorXd& mu_bar,
                                               const BandSensitivity& lq_bar, double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw InvalidHyperparameter("natural_gradient_step: gamma must be > 0");
  if (detail::all_zero(mu_bar, lq_bar)) {
    q.validate();
    return q;
  }
  NaturalParams t = xi_to_theta(q);
  const NaturalParams dt = detail::theta_direction(elbo_gradient_eta(q, mu_bar, lq_bar));
  t.theta1 += gamma * dt.theta1;
  t.theta2 += gamma * dt.theta2;
  InducingPosterior out;
  try {
    out = theta_to_xi(t, q.d);
  } catch (const NotPositiveDefinite& e) {
    throw StepRejected(std::string("natural_gradient_step: ") + e.what());
  }
  if (!out.mu.allFinite() || !out.Lq.bands().allFinite()) throw StepRejected("natural_gradient_step: non-finite result");
  return out;
}

inline InducingPosterior natural_gradient_step(const InducingPosterior& q, const ComponentGradient& g, double gamma) {
  return natural_gradient_step(q, g.mu, g.Lq, gamma);
}

struct HalvedStep {
  InducingPosterior q;
  double gamma = 0.0;
  int halvings = 0;
};

/// Retries with gamma / 2 after each rejection, at most max_halvings times.
inline HalvedStep natural_gradient_step_halving(const InducingPosterior& q, const ComponentGradient& g, double gamma,
                                                int max_halvings = 10) {
  for (int h = 0;; ++h) {
    try {
      return {natural_gradient_step(q, g, gamma), gamma, h};
    } catch (const StepRejected&) {
      if (h >= max_halvings) throw;
      gamma *= 0.5;
    }
  }
}

// ---------------------------------------------------------------------------
// First-order baseline
// ---------------------------------------------------------------------------

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  VectorXd m, v;
  long step = 0;
};

/// Adam update minimizing a loss with gradient `grads`.
inline VectorXd gradient_descent_step(const VectorXd& params, const VectorXd& grads, AdamState& s,
                                      const AdamOptions& o = {}) {
  if (params.size() != grads.size()) throw ShapeMismatch("gradient_descent_step: gradient length");
  if (s.step == 0 || s.m.size() != params.size()) {
    s.m = VectorXd::Zero(params.size());
    s.v = VectorXd::Zero(params.size());
    s.step = 0;
  }
  ++s.step;
  s.m = o.beta1 * s.m + (1.0 - o.beta1) * grads;
  s.v = o.beta2 * s.v + (1.0 - o.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(o.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, double(s.step));
  const VectorXd mh = s.m / c1;
  const VectorXd vh = s.v / c2;
  return params - (o.lr * mh.array() / (vh.array().sqrt() + o.eps)).matrix();
}

/// Free coordinates of q for first-order optimizers: mu, log of the Lq
/// diagonal, then the block-bidiagonal off-diagonal entries of Lq.
inline VectorXd pack_posterior(const InducingPosterior& q) {
  q.validate();
  std::vector<double> v(q.mu.data(), q.mu.data() + q.mu.size());
  const Index n = q.size(), r = q.Lq.bandwidth();
  for (Index j = 0; j < n; ++j) v.push_back(std::log(q.Lq.at(j, j)));
  for (Index j = 0; j < n; ++j)
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i)
      if (in_btd(i, j, q.d)) v.push_back(q.Lq.at(i, j));
  return Eigen::Map<const VectorXd>(v.data(), Index(v.size()));
}

/// ELBO gradient in pack_posterior coordinates.
inline VectorXd pack_posterior_gradient(const InducingPosterior& q, const VectorXd& mu_bar,
                                        const BandSensitivity& lq_bar) {
  std::vector<double> v(mu_bar.data(), mu_bar.data() + mu_bar.size());
  const Index n = q.size(), r = q.Lq.bandwidth();
  for (Index j = 0; j < n; ++j) v.push_back(lq_bar.at(j, j) * q.Lq.at(j, j));
  for (Index j = 0; j < n; ++j)
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i)
      if (in_btd(i, j, q.d)) v.push_back(lq_bar.at(i, j));
  return Eigen::Map<const VectorXd>(v.data(), Index(v.size()));
}

inline Index packed_size(const InducingPosterior& q) {
  Index count = 2 * q.size();
  const Index n = q.size(), r = q.Lq.bandwidth();
  for (Index j = 0; j < n; ++j)
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i)
      if (in_btd(i, j, q.d)) ++count;
  return count;
}

/// Inverse of pack_posterior; `shape` supplies n and d.
inline InducingPosterior unpack_posterior(const InducingPosterior& shape, const VectorXd& v) {
  if (v.size() != packed_size(shape)) throw ShapeMismatch("unpack_posterior: vector length");
  const Index n = shape.size(), r = shape.Lq.bandwidth();
  InducingPosterior q{v.head(n), BandedMatrix(n, r), shape.d};
  Index k = n;
  for (Index j = 0; j < n; ++j) q.Lq.at(j, j) = std::exp(v(k++));
  for (Index j = 0; j < n; ++j)
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i)
      if (in_btd(i, j, q.d)) q.Lq.at(i, j) = v(k++);
  return q;
}

}  // namespace s2vgp

#endif  // S2VGP_NATGRAD_HPP_
