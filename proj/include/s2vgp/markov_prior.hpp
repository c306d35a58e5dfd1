// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_MARKOV_PRIOR_HPP_
#define S2VGP_MARKOV_PRIOR_HPP_

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "s2vgp/banded.hpp"
#include "s2vgp/errors.hpp"
#include "s2vgp/kernels.hpp"

namespace s2vgp {

/// Gauss-Markov prior over the inducing states u_m = s(z_m), m = 0..M-1:
///   p(u) = N(u_0; 0, P0) prod_m N(u_{m+1}; A_m u_m, Q_m).
/// Its precision is block-tridiagonal with d x d blocks and is stored as a
/// band of width 2d - 1.
struct MarkovPrior {
  std::vector<double> z;
  SsmKernel kernel;
  std::vector<StateTransition> transitions;  // M - 1 entries
  BandedMatrix precision;

  Index state_dim() const noexcept { return kernel.state_dim(); }
  Index num_inducing() const noexcept { return static_cast<Index>(z.size()); }
  Index size() const noexcept { return num_inducing() * state_dim(); }

  /// Natural parameters of the prior: theta1 = 0, theta2 = -1/2 Q_psi.
  VectorXd theta1() const { return VectorXd::Zero(size()); }
  BandedMatrix theta2() const { return -0.5 * precision; }
};

inline Index state_bandwidth(Index d) { return 2 * d - 1; }

namespace detail {

/// Adds a dense d x d block at block position (bi, bj), bi >= bj, to a band.
inline void add_block(BandedMatrix& band, Index bi, Index bj, const MatrixXd& block) {
  const Index d = block.rows();
  for (Index a = 0; a < d; ++a)
    for (Index b = 0; b < d; ++b) {
      const Index i = bi * d + a, j = bj * d + b;
      if (i >= j) band.at(i, j) += block(a, b);
    }
}

inline MatrixXd spd_inverse(const MatrixXd& m, const char* what) {
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite(std::string(what) + " is not positive definite");
  return llt.solve(MatrixXd::Identity(m.rows(), m.cols()));
}

}  // namespace detail

inline void check_inducing_inputs(const std::vector<double>& z) {
  if (z.empty()) throw DegenerateInducingInputs("no inducing inputs");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) throw DegenerateInducingInputs("non-finite inducing input");
    if (i > 0 && !(z[i] > z[i - 1]))
      throw DegenerateInducingInputs("inducing inputs must be strictly increasing (index " + std::to_string(i) + ")");
  }
}

inline MarkovPrior build_prior(const SsmKernel& kernel, const std::vector<double>& z) {
  check_inducing_inputs(z);
  MarkovPrior p;
  p.z = z;
  p.kernel = kernel;
  const Index d = kernel.state_dim(), M = static_cast<Index>(z.size());
  p.precision = BandedMatrix(M * d, state_bandwidth(d));
  detail::add_block(p.precision, 0, 0, detail::spd_inverse(kernel.P0, "P0"));
  p.transitions.reserve(z.size() - 1);
  for (Index m = 0; m + 1 < M; ++m) {
    StateTransition t = discretize(kernel, z[std::size_t(m + 1)] - z[std::size_t(m)]);
    const MatrixXd qinv = detail::spd_inverse(t.Q, "transition noise");
    const MatrixXd qa = qinv * t.A;
    detail::add_block(p.precision, m, m, t.A.transpose() * qa);
    detail::add_block(p.precision, m + 1, m, -qa);
    detail::add_block(p.precision, m + 1, m + 1, qinv);
    p.transitions.push_back(std::move(t));
  }
  return p;
}

/// Zero-mean joint covariance of (u_m, u_{m+1}) under the prior.
inline MatrixXd prior_marginal_pair(const MarkovPrior& prior, Index m) {
  if (m < 0 || m + 1 >= prior.num_inducing()) throw ShapeMismatch("prior_marginal_pair: index out of range");
  const Index d = prior.state_dim();
  const MatrixXd& P0 = prior.kernel.P0;
  const MatrixXd& A = prior.transitions[std::size_t(m)].A;
  MatrixXd s(2 * d, 2 * d);
  s << P0, P0 * A.transpose(), A * P0, P0;
  return s;
}

// ---------------------------------------------------------------------------
// Conditional p(s(x) | u_m, u_{m+1})
// ---------------------------------------------------------------------------

enum class Boundary { kInterior, kLeft, kRight };

/// p(s(x) | v) = N(P v, T) with v = [u_pair; u_{pair+1}].
struct ConditionalProjection {
  Index pair = 0;  // v stacks u_pair and u_{pair+1}
  Index n_minus = 0;
  Index n_plus = 0;  // -1 when there is no right neighbor (same for n_minus)
  MatrixXd P;        // d x 2d
  MatrixXd T;        // d x d
  Boundary boundary = Boundary::kInterior;
};

/// Index m with z_m <= x < z_{m+1}; -1 if x < z_0, M-1 if x >= z_{M-1}.
inline Index bracket(const std::vector<double>& z, double x) {
  const auto it = std::upper_bound(z.begin(), z.end(), x);
  return static_cast<Index>(it - z.begin()) - 1;
}

namespace detail {

/// Kalman-form conditional of s given u_- (through A1, Q1) and u_+ = A2 s + noise(Q2).
struct ConditionalCore {
  MatrixXd A1, Q1, A2, Q2;
  MatrixXd B, K, W;  // B = A2 Q1, K = (Q2 + B A2^T)^{-1}, W = B^T K
  MatrixXd P1, P2, T;
};

inline ConditionalCore conditional_core(MatrixXd A1, MatrixXd Q1, MatrixXd A2, MatrixXd Q2) {
  ConditionalCore c{std::move(A1), std::move(Q1), std::move(A2), std::move(Q2), {}, {}, {}, {}, {}, {}};
  const Index d = c.Q1.rows();
  c.B = c.A2 * c.Q1;
  MatrixXd q12 = c.Q2 + c.B * c.A2.transpose();
  q12 = (0.5 * (q12 + q12.transpose())).eval();
  c.K = q12.ldlt().solve(MatrixXd::Identity(d, d));
  c.W = c.B.transpose() * c.K;
  c.P1 = c.A1 - c.W * (c.A2 * c.A1);
  c.P2 = c.W;
  MatrixXd t = c.Q1 - c.W * c.B;
  c.T = 0.5 * (t + t.transpose());
  return c;
}

struct ConditionalCoreAdjoint {
  MatrixXd A1, Q1, A2, Q2;
};

inline ConditionalCoreAdjoint conditional_core_vjp(const ConditionalCore& c, const MatrixXd& P1b,
                                                   const MatrixXd& P2b, const MatrixXd& Tb_in) {
  const MatrixXd Tb = 0.5 * (Tb_in + Tb_in.transpose());
  ConditionalCoreAdjoint g;
  const MatrixXd A21 = c.A2 * c.A1;
  MatrixXd Wb = P2b - P1b * A21.transpose() - Tb * c.B.transpose();
  g.A1 = P1b - (c.W * c.A2).transpose() * P1b;
  g.A2 = -c.W.transpose() * P1b * c.A1.transpose();
  MatrixXd Bb = -c.W.transpose() * Tb;
  g.Q1 = Tb;
  Bb += c.K * Wb.transpose();
  const MatrixXd Kb = c.B * Wb;
  MatrixXd Q12b = -c.K * Kb * c.K;
  Q12b = (0.5 * (Q12b + Q12b.transpose())).eval();
  g.Q2 = Q12b;
  Bb += Q12b * c.A2;
  g.A2 += Q12b.transpose() * c.B;
  g.A2 += Bb * c.Q1.transpose();
  g.Q1 += c.A2.transpose() * Bb;
  return g;
}

}  // namespace detail

/// Conditional of the state at x given its bracketing inducing states.
///
/// Interior points use the product-of-Gaussians (precision) form
///   P2 = Q1 A2^T Q12^{-1},  P1 = A1 - P2 A2 A1,  T = Q1 - P2 A2 Q1,
/// with (A1, Q1) over [z_-, x], (A2, Q2) over [x, z_+] and
/// Q12 = Q2 + A2 Q1 A2^T. Points left of z_0 condition on u_0 only (the same
/// formula with A1 = 0, Q1 = P0); points at or right of z_{M-1} propagate
/// u_{M-1} forward. x equal to an inducing input selects that state with T = 0.
inline ConditionalProjection conditional(const MarkovPrior& prior, double x) {
  const Index M = prior.num_inducing(), d = prior.state_dim();
  if (M < 2) throw DegenerateInducingInputs("conditional needs at least two inducing inputs");
  const auto& z = prior.z;
  const Index m = bracket(z, x);
  ConditionalProjection out;
  out.P = MatrixXd::Zero(d, 2 * d);
  if (m >= M - 1) {
    const StateTransition t = discretize(prior.kernel, x - z.back());
    out.pair = M - 2;
    out.n_minus = M - 1;
    out.n_plus = -1;
    out.boundary = Boundary::kRight;
    out.P.rightCols(d) = t.A;
    out.T = t.Q;
    return out;
  }
  const StateTransition t2 = discretize(prior.kernel, z[std::size_t(m + 1)] - x);
  if (m < 0) {
    const auto c = detail::conditional_core(MatrixXd::Zero(d, d), prior.kernel.P0, t2.A, t2.Q);
    out.pair = 0;
    out.n_minus = -1;
    out.n_plus = 0;
    out.boundary = Boundary::kLeft;
    out.P.leftCols(d) = c.P2;
    out.T = c.T;
    return out;
  }
  const StateTransition t1 = discretize(prior.kernel, x - z[std::size_t(m)]);
  const auto c = detail::conditional_core(t1.A, t1.Q, t2.A, t2.Q);
  out.pair = m;
  out.n_minus = m;
  out.n_plus = m + 1;
  out.P << c.P1, c.P2;
  out.T = c.T;
  return out;
}

/// Accumulates the adjoint of conditional(prior, x) with respect to the
/// kernel matrices F and P0, given adjoints of P and T.
inline void conditional_vjp(const MarkovPrior& prior, double x, const ConditionalProjection& proj,
                            const MatrixXd& P_bar, const MatrixXd& T_bar, MatrixXd& F_bar, MatrixXd& P0_bar) {
  const Index d = prior.state_dim();
  const auto& z = prior.z;
  const SsmKernel& k = prior.kernel;
  if (proj.boundary == Boundary::kRight) {
    const StateTransition t = discretize(k, x - z.back());
    discretize_vjp(k, t, P_bar.rightCols(d), T_bar, F_bar, P0_bar);
    return;
  }
  if (proj.boundary == Boundary::kLeft) {
    const StateTransition t2 = discretize(k, z.front() - x);
    const auto c = detail::conditional_core(MatrixXd::Zero(d, d), k.P0, t2.A, t2.Q);
    const auto g = detail::conditional_core_vjp(c, MatrixXd::Zero(d, d), P_bar.leftCols(d), T_bar);
    P0_bar += 0.5 * (g.Q1 + g.Q1.transpose());
    discretize_vjp(k, t2, g.A2, g.Q2, F_bar, P0_bar);
    return;
  }
  const Index m = proj.pair;
  const StateTransition t1 = discretize(k, x - z[std::size_t(m)]);
  const StateTransition t2 = discretize(k, z[std::size_t(m + 1)] - x);
  const auto c = detail::conditional_core(t1.A, t1.Q, t2.A, t2.Q);
  const auto g = detail::conditional_core_vjp(c, P_bar.leftCols(d), P_bar.rightCols(d), T_bar);
  discretize_vjp(k, t1, g.A1, g.Q1, F_bar, P0_bar);
  discretize_vjp(k, t2, g.A2, g.Q2, F_bar, P0_bar);
}

/// Same conditional through the joint covariance of (s, u_-, u_+):
///   P = S_sv S_vv^{-1},  T = P0 - S_sv S_vv^{-1} S_vs.
/// Used as the independent second derivation.
inline ConditionalProjection conditional_covariance_route(const MarkovPrior& prior, double x) {
  const Index M = prior.num_inducing(), d = prior.state_dim();
  if (M < 2) throw DegenerateInducingInputs("conditional needs at least two inducing inputs");
  const auto& z = prior.z;
  const SsmKernel& k = prior.kernel;
  const MatrixXd& P0 = k.P0;
  const Index m = bracket(z, x);
  ConditionalProjection out;
  out.P = MatrixXd::Zero(d, 2 * d);
  auto one_sided = [&](const MatrixXd& s_su) {  // Cov(s, u), single neighbor
    const MatrixXd p = s_su * detail::spd_inverse(P0, "P0");
    MatrixXd t = P0 - p * s_su.transpose();
    return std::make_pair(p, MatrixXd(0.5 * (t + t.transpose())));
  };
  if (m >= M - 1) {
    auto [p, t] = one_sided(discretize(k, x - z.back()).A * P0);
    out.pair = M - 2;
    out.n_minus = M - 1;
    out.n_plus = -1;
    out.boundary = Boundary::kRight;
    out.P.rightCols(d) = p;
    out.T = t;
    return out;
  }
  if (m < 0) {
    auto [p, t] = one_sided(P0 * discretize(k, z.front() - x).A.transpose());
    out.pair = 0;
    out.n_minus = -1;
    out.n_plus = 0;
    out.boundary = Boundary::kLeft;
    out.P.leftCols(d) = p;
    out.T = t;
    return out;
  }
  const MatrixXd A1 = discretize(k, x - z[std::size_t(m)]).A;
  const MatrixXd A2 = discretize(k, z[std::size_t(m + 1)] - x).A;
  const MatrixXd A12 = discretize(k, z[std::size_t(m + 1)] - z[std::size_t(m)]).A;
  MatrixXd s_vv(2 * d, 2 * d);
  s_vv << P0, P0 * A12.transpose(), A12 * P0, P0;
  MatrixXd s_sv(d, 2 * d);
  s_sv << A1 * P0, P0 * A2.transpose();
  out.P = s_vv.ldlt().solve(s_sv.transpose()).transpose();
  MatrixXd t = P0 - out.P * s_sv.transpose();
  out.T = 0.5 * (t + t.transpose());
  out.pair = m;
  out.n_minus = m;
  out.n_plus = m + 1;
  return out;
}

}  // namespace s2vgp

#endif  // S2VGP_MARKOV_PRIOR_HPP_
