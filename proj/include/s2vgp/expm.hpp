// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_EXPM_HPP_
#define S2VGP_EXPM_HPP_

#include <Eigen/Core>
#include <unsupported/Eigen/MatrixFunctions>

namespace s2vgp {

/// Matrix exponential (scaling and squaring with a Pade approximant).
inline Eigen::MatrixXd expm(const Eigen::MatrixXd& x) {
  if (x.size() == 0) return x;
  if (x.rows() == 1) return Eigen::MatrixXd::Constant(1, 1, std::exp(x(0, 0)));
  return x.exp();
}

/// Frechet derivative of expm at x in direction e: the top-right block of
/// expm([[x, e], [0, x]]).
inline Eigen::MatrixXd expm_frechet(const Eigen::MatrixXd& x, const Eigen::MatrixXd& e) {
  const Eigen::Index d = x.rows();
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(2 * d, 2 * d);
  aug.topLeftCorner(d, d) = x;
  aug.bottomRightCorner(d, d) = x;
  aug.topRightCorner(d, d) = e;
  return expm(aug).topRightCorner(d, d);
}

/// Adjoint of expm: for a scalar with dF/d expm(x) = g, returns dF/dx.
/// Uses <g, L(x, e)> = <L(x^T, g), e>.
inline Eigen::MatrixXd expm_vjp(const Eigen::MatrixXd& x, const Eigen::MatrixXd& g) {
  return expm_frechet(x.transpose(), g);
}

}  // namespace s2vgp

#endif  // S2VGP_EXPM_HPP_
