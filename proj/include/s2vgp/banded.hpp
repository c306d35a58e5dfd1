// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_BANDED_HPP_
#define S2VGP_BANDED_HPP_

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "s2vgp/errors.hpp"

namespace s2vgp {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Lower band of a symmetric (or lower-triangular) matrix of order n with
/// lower bandwidth r.
///
/// Storage is a dense (r+1) x n array indexed by (diagonal offset, column):
/// entry (i, j) with 0 <= i - j <= r lives at bands()(i - j, j). Slots that
/// fall past the last row are kept at exactly zero.
///
/// The same container holds symmetric matrices (only the lower half is
/// stored), lower Cholesky factors, and sensitivities. For a symmetric
/// matrix, a sensitivity entry is the derivative with respect to the stored
/// value, so an off-diagonal slot accounts for both (i, j) and (j, i).
class BandedMatrix {
 public:
  BandedMatrix() = default;
  BandedMatrix(Index n, Index r) : n_(n), r_(r), bands_(MatrixXd::Zero(r + 1, n)) {
    if (n < 0 || r < 0) throw ShapeMismatch("BandedMatrix: negative dimension");
  }

  static BandedMatrix identity(Index n, Index r) {
    BandedMatrix out(n, r);
    out.bands_.row(0).setOnes();
    return out;
  }

  /// Copies the lower band of a dense matrix; entries outside the band are
  /// dropped.
  static BandedMatrix from_dense(const MatrixXd& dense, Index r) {
    if (dense.rows() != dense.cols()) throw ShapeMismatch("from_dense: matrix not square");
    const Index n = dense.rows();
    BandedMatrix out(n, r);
    for (Index j = 0; j < n; ++j)
      for (Index k = 0; k <= r && j + k < n; ++k) out.bands_(k, j) = dense(j + k, j);
    return out;
  }

  Index size() const noexcept { return n_; }
  Index bandwidth() const noexcept { return r_; }

  bool in_band(Index i, Index j) const noexcept {
    return i >= j && i - j <= r_ && i < n_ && j >= 0;
  }

  /// Stored entry (i, j), i >= j. Out-of-band entries read as zero.
  double lower(Index i, Index j) const noexcept {
    return in_band(i, j) ? bands_(i - j, j) : 0.0;
  }
  /// Symmetric view of the stored lower band.
  double sym(Index i, Index j) const noexcept { return i >= j ? lower(i, j) : lower(j, i); }

  double& at(Index i, Index j) { return bands_(i - j, j); }
  double at(Index i, Index j) const { return bands_(i - j, j); }

  MatrixXd& bands() noexcept { return bands_; }
  const MatrixXd& bands() const noexcept { return bands_; }

  bool same_shape(const BandedMatrix& other) const noexcept {
    return n_ == other.n_ && r_ == other.r_;
  }

  MatrixXd to_dense_lower() const {
    MatrixXd out = MatrixXd::Zero(n_, n_);
    for (Index j = 0; j < n_; ++j)
      for (Index k = 0; k <= r_ && j + k < n_; ++k) out(j + k, j) = bands_(k, j);
    return out;
  }

  MatrixXd to_dense_symmetric() const {
    MatrixXd out = to_dense_lower();
    out.triangularView<Eigen::StrictlyUpper>() = out.transpose().triangularView<Eigen::StrictlyUpper>();
    return out;
  }

  /// Symmetric d-block window [start, start + size) as a dense matrix.
  MatrixXd window(Index start, Index size) const {
    MatrixXd out(size, size);
    for (Index q = 0; q < size; ++q)
      for (Index p = q; p < size; ++p) out(p, q) = out(q, p) = lower(start + p, start + q);
    return out;
  }

  /// Accumulates the adjoint G of a symmetric dense window into stored-entry
  /// sensitivities. Window entries outside the band are ignored.
  void add_window_adjoint(Index start, const MatrixXd& g) {
    const Index size = g.rows();
    for (Index q = 0; q < size; ++q) {
      if (in_band(start + q, start + q)) at(start + q, start + q) += g(q, q);
      for (Index p = q + 1; p < size; ++p)
        if (in_band(start + p, start + q)) at(start + p, start + q) += g(p, q) + g(q, p);
    }
  }

  BandedMatrix& operator+=(const BandedMatrix& o) {
    require_same(o);
    bands_ += o.bands_;
    return *this;
  }
  BandedMatrix& operator-=(const BandedMatrix& o) {
    require_same(o);
    bands_ -= o.bands_;
    return *this;
  }
  BandedMatrix& operator*=(double s) {
    bands_ *= s;
    return *this;
  }
  friend BandedMatrix operator+(BandedMatrix a, const BandedMatrix& b) { return a += b; }
  friend BandedMatrix operator-(BandedMatrix a, const BandedMatrix& b) { return a -= b; }
  friend BandedMatrix operator*(double s, BandedMatrix a) { return a *= s; }

  void require_same(const BandedMatrix& o) const {
    if (!same_shape(o))
      throw ShapeMismatch("band shape (" + std::to_string(n_) + "," + std::to_string(r_) +
                          ") vs (" + std::to_string(o.n_) + "," + std::to_string(o.r_) + ")");
  }

  /// Debug dump: one "row,col,value" line per stored entry.
  void dump_csv(std::ostream& os) const {
    os << "row,col,value\n";
    os.precision(17);
    for (Index j = 0; j < n_; ++j)
      for (Index k = 0; k <= r_ && j + k < n_; ++k) os << j + k << ',' << j << ',' << bands_(k, j) << '\n';
  }

 private:
  Index n_ = 0;
  Index r_ = 0;
  MatrixXd bands_;
};

using BandSensitivity = BandedMatrix;

// ---------------------------------------------------------------------------
// Forward operators
// ---------------------------------------------------------------------------

/// Banded Cholesky: Q = L L^T with L lower and of the same bandwidth. O(n r^2).
inline BandedMatrix banded_cholesky(const BandedMatrix& q) {
  const Index n = q.size(), r = q.bandwidth();
  BandedMatrix l(n, r);
  for (Index j = 0; j < n; ++j) {
    double diag = q.at(j, j);
    for (Index k = std::max<Index>(0, j - r); k < j; ++k) diag -= l.at(j, k) * l.at(j, k);
    if (!(diag > 0.0))
      throw NotPositiveDefinite("banded_cholesky: non-positive pivot " + std::to_string(diag) +
                                " at index " + std::to_string(j));
    const double ljj = std::sqrt(diag);
    l.at(j, j) = ljj;
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i) {
      double s = q.at(i, j);
      for (Index k = std::max<Index>(0, i - r); k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = s / ljj;
    }
  }
  return l;
}

/// Tangent of banded_cholesky: given L = chol(Q) and a symmetric band
/// perturbation dQ, returns dL.
inline BandedMatrix banded_cholesky_jvp(const BandedMatrix& l, const BandedMatrix& dq) {
  l.require_same(dq);
  const Index n = l.size(), r = l.bandwidth();
  BandedMatrix dl(n, r);
  for (Index j = 0; j < n; ++j) {
    double s = dq.at(j, j);
    for (Index k = std::max<Index>(0, j - r); k < j; ++k) s -= 2.0 * l.at(j, k) * dl.at(j, k);
    const double ljj = l.at(j, j);
    dl.at(j, j) = s / (2.0 * ljj);
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i) {
      double t = dq.at(i, j);
      for (Index k = std::max<Index>(0, i - r); k < j; ++k)
        t -= dl.at(i, k) * l.at(j, k) + l.at(i, k) * dl.at(j, k);
      t -= l.at(i, j) * dl.at(j, j);
      dl.at(i, j) = t / ljj;
    }
  }
  return dl;
}

/// Band of L L^T.
inline BandedMatrix lower_gram(const BandedMatrix& l) {
  const Index n = l.size(), r = l.bandwidth();
  BandedMatrix q(n, r);
  for (Index j = 0; j < n; ++j)
    for (Index i = j; i <= std::min(j + r, n - 1); ++i) {
      double s = 0.0;
      for (Index k = std::max<Index>(0, i - r); k <= j; ++k) s += l.at(i, k) * l.at(j, k);
      q.at(i, j) = s;
    }
  return q;
}

/// Band of v v^T at bandwidth r.
inline BandedMatrix band_outer(const VectorXd& v, Index r) {
  const Index n = v.size();
  BandedMatrix out(n, r);
  for (Index j = 0; j < n; ++j)
    for (Index k = 0; k <= r && j + k < n; ++k) out.bands()(k, j) = v(j + k) * v(j);
  return out;
}

/// y = Q x with Q the symmetric matrix implied by the band.
inline VectorXd banded_matvec(const BandedMatrix& q, const VectorXd& x) {
  const Index n = q.size(), r = q.bandwidth();
  if (x.size() != n) throw ShapeMismatch("banded_matvec: vector length");
  VectorXd y = VectorXd::Zero(n);
  for (Index j = 0; j < n; ++j) {
    y(j) += q.at(j, j) * x(j);
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i) {
      y(i) += q.at(i, j) * x(j);
      y(j) += q.at(i, j) * x(i);
    }
  }
  return y;
}

/// y = L x with L lower-triangular banded.
inline VectorXd lower_matvec(const BandedMatrix& l, const VectorXd& x) {
  const Index n = l.size(), r = l.bandwidth();
  if (x.size() != n) throw ShapeMismatch("lower_matvec: vector length");
  VectorXd y = VectorXd::Zero(n);
  for (Index j = 0; j < n; ++j)
    for (Index i = j; i <= std::min(j + r, n - 1); ++i) y(i) += l.at(i, j) * x(j);
  return y;
}

/// y = L^T x.
inline VectorXd lower_transpose_matvec(const BandedMatrix& l, const VectorXd& x) {
  const Index n = l.size(), r = l.bandwidth();
  if (x.size() != n) throw ShapeMismatch("lower_transpose_matvec: vector length");
  VectorXd y = VectorXd::Zero(n);
  for (Index j = 0; j < n; ++j)
    for (Index i = j; i <= std::min(j + r, n - 1); ++i) y(j) += l.at(i, j) * x(i);
  return y;
}

inline void check_factor_diagonal(const BandedMatrix& l, const char* who) {
  for (Index j = 0; j < l.size(); ++j)
    if (l.at(j, j) == 0.0 || !std::isfinite(l.at(j, j)))
      throw SingularFactor(std::string(who) + ": zero diagonal at " + std::to_string(j));
}

/// Solves L x = b (forward substitution).
inline VectorXd banded_triangular_solve(const BandedMatrix& l, const VectorXd& b) {
  const Index n = l.size(), r = l.bandwidth();
  if (b.size() != n) throw ShapeMismatch("banded_triangular_solve: vector length");
  check_factor_diagonal(l, "banded_triangular_solve");
  VectorXd x = b;
  for (Index j = 0; j < n; ++j) {
    x(j) /= l.at(j, j);
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i) x(i) -= l.at(i, j) * x(j);
  }
  return x;
}

/// Solves L^T x = b (backward substitution).
inline VectorXd banded_transpose_solve(const BandedMatrix& l, const VectorXd& b) {
  const Index n = l.size(), r = l.bandwidth();
  if (b.size() != n) throw ShapeMismatch("banded_transpose_solve: vector length");
  check_factor_diagonal(l, "banded_transpose_solve");
  VectorXd x = b;
  for (Index j = n - 1; j >= 0; --j) {
    for (Index i = j + 1; i <= std::min(j + r, n - 1); ++i) x(j) -= l.at(i, j) * x(i);
    x(j) /= l.at(j, j);
  }
  return x;
}

/// Solves (L L^T) x = b.
inline VectorXd banded_cholesky_solve(const BandedMatrix& l, const VectorXd& b) {
  return banded_transpose_solve(l, banded_triangular_solve(l, b));
}

/// log det(L L^T) = 2 sum log L_ii.
inline double banded_logdet(const BandedMatrix& l) {
  double s = 0.0;
  for (Index j = 0; j < l.size(); ++j) {
    if (!(l.at(j, j) > 0.0)) throw SingularFactor("banded_logdet: non-positive diagonal");
    s += std::log(l.at(j, j));
  }
  return 2.0 * s;
}

// ---------------------------------------------------------------------------
// Subset inverse and its adjoint
// ---------------------------------------------------------------------------

/// Entries of (L L^T)^{-1} lying in the band of L (Takahashi recursion).
///
/// Uses C L = L^{-T}, whose lower triangle is diag(1 / L_ii). Columns are
/// filled from the last to the first; within column i only columns > i are
/// read.
inline BandedMatrix subset_inverse(const BandedMatrix& l) {
  const Index n = l.size(), r = l.bandwidth();
  check_factor_diagonal(l, "subset_inverse");
  BandedMatrix c(n, r);
  for (Index i = n - 1; i >= 0; --i) {
    const double lii = l.at(i, i);
    const Index last = std::min(i + r, n - 1);
    for (Index j = last; j >= i; --j) {
      double s = (j == i) ? 1.0 / lii : 0.0;
      for (Index k = i + 1; k <= last; ++k) s -= c.sym(j, k) * l.at(k, i);
      c.at(j, i) = s / lii;
    }
  }
  return c;
}

/// Reverse-mode sensitivity of subset_inverse: maps dF/dC to dF/dL.
inline BandSensitivity subset_inverse_vjp(const BandSensitivity& c_bar_in, const BandedMatrix& l,
                                          const BandedMatrix& c) {
  l.require_same(c);
  l.require_same(c_bar_in);
  const Index n = l.size(), r = l.bandwidth();
  BandSensitivity c_bar = c_bar_in;
  BandSensitivity l_bar(n, r);
  for (Index i = 0; i < n; ++i) {
    const double lii = l.at(i, i);
    const Index last = std::min(i + r, n - 1);
    for (Index j = i; j <= last; ++j) {
      const double g = c_bar.at(j, i);
      if (g == 0.0) continue;
      const double delta = (j == i) ? 1.0 : 0.0;
      l_bar.at(i, i) += g * (-delta / (lii * lii * lii) - c.at(j, i) / lii);
      for (Index k = i + 1; k <= last; ++k) {
        l_bar.at(k, i) -= g * c.sym(j, k) / lii;
        const double w = -g * l.at(k, i) / lii;
        if (j >= k)
          c_bar.at(j, k) += w;
        else
          c_bar.at(k, j) += w;
      }
    }
  }
  return l_bar;
}

// ---------------------------------------------------------------------------
// Sliding sub-block Cholesky factors and the reverse subset inverse
// ---------------------------------------------------------------------------

/// Rank-1 downdate in place: G G^T - x x^T = G' G'^T. Returns false if a
/// pivot would become non-positive, leaving G in an unspecified state.
inline bool try_cholesky_downdate(MatrixXd& g, VectorXd x) {
  const Index m = g.rows();
  for (Index k = 0; k < m; ++k) {
    const double gkk = g(k, k);
    const double rad = gkk * gkk - x(k) * x(k);
    if (!(rad > 0.0) || !(gkk > 0.0)) return false;
    const double rkk = std::sqrt(rad);
    const double cs = rkk / gkk;
    const double sn = x(k) / gkk;
    g(k, k) = rkk;
    for (Index i = k + 1; i < m; ++i) {
      g(i, k) = (g(i, k) - sn * x(i)) / cs;
      x(i) = cs * x(i) - sn * g(i, k);
    }
  }
  return true;
}

inline void cholesky_downdate(MatrixXd& g, const VectorXd& x) {
  if (!try_cholesky_downdate(g, x)) throw DowndateFailure("cholesky_downdate: lost positivity");
}

/// Direct Cholesky of a small dense SPD matrix (lower factor).
inline bool try_dense_cholesky(const MatrixXd& a, MatrixXd& l) {
  const Index m = a.rows();
  l = MatrixXd::Zero(m, m);
  for (Index j = 0; j < m; ++j) {
    double diag = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(diag > 0.0)) return false;
    l(j, j) = std::sqrt(diag);
    for (Index i = j + 1; i < m; ++i)
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
  }
  return true;
}

struct SubblockFactors {
  /// factors[i] = chol(C[i:i+w, i:i+w]) with w = min(r + 1, n - i).
  std::vector<MatrixXd> factors;
  /// Indices where the downdate failed and a direct factorization was used.
  std::vector<Index> fallbacks;
};

/// Cholesky factors of every sliding (r+1)-window of the band, computed from
/// the last index backwards with one rank-1 downdate per step. O(n r^2).
///
/// With s = chol(c_i) and a = C[i-1,i-1], b = C[i:, i-1]:
///   chol(c_{i-1}) = [[sqrt(a), 0], [b / sqrt(a), lead(downdate(s, b / sqrt(a)))]]
/// where only the leading rows needed by the smaller window are kept.
inline SubblockFactors recursive_subblock_cholesky(const BandedMatrix& c) {
  const Index n = c.size(), r = c.bandwidth();
  SubblockFactors out;
  out.factors.resize(static_cast<std::size_t>(n));
  if (n == 0) return out;
  auto width = [&](Index i) { return std::min(r + 1, n - i); };

  {
    const double a = c.at(n - 1, n - 1);
    if (!(a > 0.0)) throw InconsistentBand("recursive_subblock_cholesky: non-positive diagonal");
    out.factors.back() = MatrixXd::Constant(1, 1, std::sqrt(a));
  }
  for (Index i = n - 1; i >= 1; --i) {
    const Index w = width(i - 1);
    const Index tail = w - 1;
    const double a = c.at(i - 1, i - 1);
    MatrixXd s(w, w);
    bool ok = a > 0.0;
    if (ok) {
      const double sa = std::sqrt(a);
      VectorXd col(tail);
      for (Index p = 0; p < tail; ++p) col(p) = c.at(i + p, i - 1) / sa;
      MatrixXd g = out.factors[static_cast<std::size_t>(i)].topLeftCorner(tail, tail);
      ok = try_cholesky_downdate(g, col);
      if (ok) {
        s.setZero();
        s(0, 0) = sa;
        s.col(0).tail(tail) = col;
        s.bottomRightCorner(tail, tail) = g;
      }
    }
    if (!ok) {
      out.fallbacks.push_back(i - 1);
      if (!try_dense_cholesky(c.window(i - 1, w), s))
        throw InconsistentBand("recursive_subblock_cholesky: window at " + std::to_string(i - 1) +
                               " is not positive definite");
    }
    out.factors[static_cast<std::size_t>(i - 1)] = std::move(s);
  }
  return out;
}

namespace detail {

/// Solves (S S^T) x = b for a small dense lower factor S.
inline VectorXd small_chol_solve(const MatrixXd& s, const VectorXd& b) {
  VectorXd y = s.triangularView<Eigen::Lower>().solve(b);
  return s.transpose().triangularView<Eigen::Upper>().solve(y);
}

/// First column of (c^{(i)})^{-1} for each window.
inline std::vector<VectorXd> window_first_columns(const SubblockFactors& sf) {
  std::vector<VectorXd> v(sf.factors.size());
  for (std::size_t i = 0; i < sf.factors.size(); ++i) {
    const Index w = sf.factors[i].rows();
    VectorXd e = VectorXd::Zero(w);
    e(0) = 1.0;
    v[i] = small_chol_solve(sf.factors[i], e);
  }
  return v;
}

}  // namespace detail

/// Recovers the banded Cholesky factor L of Q from C = band_Q[Q^{-1}].
///
/// Column i only depends on the window c^{(i)} = C[i:i+r, i:i+r]: with
/// v = (c^{(i)})^{-1} e_1, L_ii = sqrt(v_1) and L[i:i+r, i] = v / sqrt(v_1).
inline BandedMatrix reverse_subset_inverse(const BandedMatrix& c) {
  const Index n = c.size(), r = c.bandwidth();
  const auto v = detail::window_first_columns(recursive_subblock_cholesky(c));
  BandedMatrix l(n, r);
  for (Index i = 0; i < n; ++i) {
    const VectorXd& vi = v[static_cast<std::size_t>(i)];
    if (!(vi(0) > 0.0)) throw InconsistentBand("reverse_subset_inverse: v_1 <= 0 at " + std::to_string(i));
    const double root = std::sqrt(vi(0));
    for (Index p = 0; p < vi.size(); ++p) l.at(i + p, i) = vi(p) / root;
  }
  return l;
}

/// Reverse-mode sensitivity of reverse_subset_inverse: maps dF/dL to dF/dC.
///
/// Per column, with l = v / sqrt(v_1), dl = H dv and dv = -c^{-1} dc c^{-1} e,
///   c_bar = -(c^{-1} H^T l_bar) v^T,
/// which is folded into stored-entry sensitivities of the symmetric window.
inline BandSensitivity reverse_subset_inverse_vjp(const BandSensitivity& l_bar, const BandedMatrix& c) {
  c.require_same(l_bar);
  const Index n = c.size(), r = c.bandwidth();
  const SubblockFactors sf = recursive_subblock_cholesky(c);
  const auto v = detail::window_first_columns(sf);
  BandSensitivity c_bar(n, r);
  for (Index i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const VectorXd& vi = v[iu];
    const Index w = vi.size();
    if (!(vi(0) > 0.0)) throw InconsistentBand("reverse_subset_inverse_vjp: v_1 <= 0");
    const double root = std::sqrt(vi(0));
    VectorXd lb(w);
    for (Index p = 0; p < w; ++p) lb(p) = l_bar.at(i + p, i);
    if (lb.isZero(0.0)) continue;
    const VectorXd li = vi / root;
    // H^T l_bar, H = (I - (l / (2 sqrt(v_1))) e_1^T) / sqrt(v_1).
    VectorXd ht = lb / root;
    ht(0) -= li.dot(lb) / (2.0 * root * root);
    const VectorXd a = detail::small_chol_solve(sf.factors[iu], ht);
    const MatrixXd cb = -a * vi.transpose();
    c_bar.add_window_adjoint(i, cb);
  }
  return c_bar;
}

}  // namespace s2vgp

#endif  // S2VGP_BANDED_HPP_
