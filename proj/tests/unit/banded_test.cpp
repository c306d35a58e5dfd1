// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <new>
#include <random>
#include <sstream>

#include "s2vgp/banded.hpp"
#include "support/test_util.hpp"

// Largest single heap allocation while tracking is on.
namespace {
std::atomic<bool> g_track{false};
std::atomic<std::size_t> g_max_alloc{0};
}  // namespace

void* operator new(std::size_t size) {
  if (g_track.load(std::memory_order_relaxed)) {
    std::size_t prev = g_max_alloc.load();
    while (size > prev && !g_max_alloc.compare_exchange_weak(prev, size)) {
    }
  }
  if (void* p = std::malloc(size == 0 ? 1 : size)) return p;
  throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }

namespace s2vgp {
namespace {

using testing::max_abs_diff;
using testing::random_spd_band;

BandedMatrix tridiag_2_m1(Index n) {
  BandedMatrix q(n, 1);
  for (Index j = 0; j < n; ++j) {
    q.at(j, j) = 2.0;
    if (j + 1 < n) q.at(j + 1, j) = -1.0;
  }
  return q;
}

TEST(BandedCholesky, TridiagonalExample) {
  const BandedMatrix l = banded_cholesky(tridiag_2_m1(3));
  // Dense oracle.
  Eigen::MatrixXd dense = tridiag_2_m1(3).to_dense_symmetric();
  Eigen::MatrixXd ld = dense.llt().matrixL();
  EXPECT_NEAR(l.at(0, 0), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(l.at(1, 1), std::sqrt(1.5), 1e-15);
  EXPECT_NEAR(l.at(2, 2), std::sqrt(4.0 / 3.0), 1e-15);
  EXPECT_NEAR(l.at(1, 0), -1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(l.at(2, 1), -std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_LT((l.to_dense_lower() - ld).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(BandedCholesky, IdentityAndDiagonal) {
  EXPECT_EQ(max_abs_diff(banded_cholesky(BandedMatrix::identity(5, 2)), BandedMatrix::identity(5, 2)), 0.0);
  BandedMatrix d(2, 0);
  d.at(0, 0) = 4.0;
  d.at(1, 1) = 9.0;
  const BandedMatrix l = banded_cholesky(d);
  EXPECT_DOUBLE_EQ(l.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(l.at(1, 1), 3.0);
}

TEST(BandedCholesky, NotPositiveDefinite) {
  BandedMatrix q = tridiag_2_m1(3);
  q.at(1, 1) = -1.0;
  EXPECT_THROW(banded_cholesky(q), NotPositiveDefinite);
}

TEST(BandedCholesky, JvpMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const BandedMatrix q = random_spd_band(rng, 9, 3);
  const BandedMatrix dq = testing::random_band(rng, 9, 3);
  const BandedMatrix dl = banded_cholesky_jvp(banded_cholesky(q), dq);
  const double h = 1e-6;
  const BandedMatrix fd =
      (1.0 / (2.0 * h)) * (banded_cholesky(q + h * dq) - banded_cholesky(q - h * dq));
  EXPECT_LT(max_abs_diff(dl, fd), 1e-8);
}

TEST(SubsetInverse, TridiagonalExample) {
  const BandedMatrix c = subset_inverse(banded_cholesky(tridiag_2_m1(3)));
  // C_ij = min(i,j) (4 - max(i,j)) / 4, one-based.
  EXPECT_NEAR(c.at(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(c.at(1, 1), 1.0, 1e-15);
  EXPECT_NEAR(c.at(2, 2), 0.75, 1e-15);
  EXPECT_NEAR(c.at(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(c.at(2, 1), 0.5, 1e-15);
}

TEST(SubsetInverse, IdentityAndDiagonal) {
  EXPECT_EQ(max_abs_diff(subset_inverse(BandedMatrix::identity(4, 1)), BandedMatrix::identity(4, 1)), 0.0);
  BandedMatrix l(2, 0);
  l.at(0, 0) = 2.0;
  l.at(1, 1) = 3.0;
  const BandedMatrix c = subset_inverse(l);
  EXPECT_DOUBLE_EQ(c.at(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(c.at(1, 1), 1.0 / 9.0);
}

TEST(SubsetInverse, SingularFactor) {
  BandedMatrix l = BandedMatrix::identity(3, 1);
  l.at(1, 1) = 0.0;
  EXPECT_THROW(subset_inverse(l), SingularFactor);
}

TEST(SubsetInverse, MatchesDenseInverseBand) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 5 + trial * 3, r = 1 + trial % 7;
    const BandedMatrix q = random_spd_band(rng, n, r);
    const Eigen::MatrixXd inv = q.to_dense_symmetric().inverse();
    EXPECT_LT(max_abs_diff(subset_inverse(banded_cholesky(q)), BandedMatrix::from_dense(inv, r)), 1e-10);
  }
}

TEST(SubsetInverse, VjpMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const BandedMatrix l = banded_cholesky(random_spd_band(rng, 8, 2));
  const BandedMatrix w = testing::random_band(rng, 8, 2);
  auto f = [&](const BandedMatrix& x) { return (subset_inverse(x).bands().array() * w.bands().array()).sum(); };
  const BandedMatrix g = subset_inverse_vjp(w, l, subset_inverse(l));
  const BandedMatrix fd = testing::fd_band_gradient(f, l);
  EXPECT_LT(max_abs_diff(g, fd), 1e-7);
}

TEST(ReverseSubsetInverse, TridiagonalExample) {
  BandedMatrix c(3, 1);
  c.at(0, 0) = 0.75;
  c.at(1, 1) = 1.0;
  c.at(2, 2) = 0.75;
  c.at(1, 0) = 0.5;
  c.at(2, 1) = 0.5;
  EXPECT_LT(max_abs_diff(reverse_subset_inverse(c), banded_cholesky(tridiag_2_m1(3))), 1e-14);
  EXPECT_LT(max_abs_diff(reverse_subset_inverse(BandedMatrix::identity(4, 2)), BandedMatrix::identity(4, 2)), 1e-15);
}

TEST(ReverseSubsetInverse, RoundTripRandom) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = 1 + trial * 5, r = trial % 8;
    const BandedMatrix l = banded_cholesky(random_spd_band(rng, n, r));
    EXPECT_LT(max_abs_diff(reverse_subset_inverse(subset_inverse(l)), l), 1e-9) << "n=" << n << " r=" << r;
  }
}

TEST(ReverseSubsetInverse, InconsistentBand) {
  BandedMatrix c(3, 1);
  c.at(0, 0) = 1.0;
  c.at(1, 1) = 1.0;
  c.at(2, 2) = 1.0;
  c.at(1, 0) = 2.0;  // |corr| > 1
  EXPECT_THROW(reverse_subset_inverse(c), InconsistentBand);
}

TEST(ReverseSubsetInverseVjp, ZeroSensitivity) {
  std::mt19937_64 rng(5);
  const BandedMatrix c = subset_inverse(banded_cholesky(random_spd_band(rng, 6, 2)));
  const BandedMatrix cb = reverse_subset_inverse_vjp(BandedMatrix(6, 2), c);
  EXPECT_EQ(cb.bands().cwiseAbs().maxCoeff(), 0.0);
}

TEST(ReverseSubsetInverseVjp, ScalarClosedForm) {
  BandedMatrix c(1, 0), lb(1, 0);
  const double cv = 2.5, g = 0.7;
  c.at(0, 0) = cv;
  lb.at(0, 0) = g;
  EXPECT_NEAR(reverse_subset_inverse_vjp(lb, c).at(0, 0), -g / (2.0 * std::pow(cv, 1.5)), 1e-15);
}

TEST(ReverseSubsetInverseVjp, MatchesFiniteDifferencesTridiagonal) {
  std::mt19937_64 rng(23);
  const BandedMatrix c = subset_inverse(banded_cholesky(random_spd_band(rng, 6, 1)));
  const BandedMatrix w = testing::random_band(rng, 6, 1);
  auto f = [&](const BandedMatrix& x) {
    return (reverse_subset_inverse(x).bands().array() * w.bands().array()).sum();
  };
  const BandedMatrix g = reverse_subset_inverse_vjp(w, c);
  const BandedMatrix fd = testing::fd_band_gradient(f, c);
  for (Index j = 0; j < 6; ++j)
    for (Index i = j; i <= std::min<Index>(j + 1, 5); ++i)
      EXPECT_TRUE(testing::close(g.at(i, j), fd.at(i, j), 1e-5, 1e-8)) << g.at(i, j) << " vs " << fd.at(i, j);
}

TEST(ReverseSubsetInverseVjp, ShapeMismatch) {
  EXPECT_THROW(reverse_subset_inverse_vjp(BandedMatrix(4, 1), BandedMatrix::identity(4, 2)), ShapeMismatch);
}

TEST(ReverseSubsetInverseVjp, ComposedWithSubsetInverseVjpIsIdentity) {
  // reverse_subset_inverse o subset_inverse = id, so the adjoints compose to id.
  std::mt19937_64 rng(31);
  const BandedMatrix l = banded_cholesky(random_spd_band(rng, 12, 3));
  const BandedMatrix c = subset_inverse(l);
  const BandedMatrix cb = testing::random_band(rng, 12, 3);
  const BandedMatrix back = reverse_subset_inverse_vjp(subset_inverse_vjp(cb, l, c), c);
  EXPECT_LT(max_abs_diff(back, cb), 1e-9);
}

TEST(RecursiveSubblockCholesky, SmallExampleAndIdentity) {
  const BandedMatrix c = subset_inverse(banded_cholesky(tridiag_2_m1(3)));
  const SubblockFactors sf = recursive_subblock_cholesky(c);
  ASSERT_EQ(sf.factors.size(), 3u);
  for (Index i = 0; i < 3; ++i) {
    const Index w = std::min<Index>(2, 3 - i);
    Eigen::MatrixXd direct = c.window(i, w).llt().matrixL();
    EXPECT_LT((sf.factors[std::size_t(i)] - direct).cwiseAbs().maxCoeff(), 1e-14);
  }
  for (const auto& s : recursive_subblock_cholesky(BandedMatrix::identity(5, 2)).factors)
    EXPECT_TRUE(s.isIdentity(1e-15));
}

TEST(RecursiveSubblockCholesky, MatchesDirectFactorization) {
  std::mt19937_64 rng(41);
  const Index n = 64, r = 5;
  const BandedMatrix c = subset_inverse(banded_cholesky(random_spd_band(rng, n, r)));
  const SubblockFactors sf = recursive_subblock_cholesky(c);
  double worst = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Index w = std::min(r + 1, n - i);
    Eigen::MatrixXd direct = c.window(i, w).llt().matrixL();
    worst = std::max(worst, (sf.factors[std::size_t(i)] - direct).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(RecursiveSubblockCholesky, SingularWindowIsTypedError) {
  // Near-singular leading 2x2 window.
  BandedMatrix c(3, 1);
  c.at(0, 0) = 1.0;
  c.at(1, 0) = 1.0 - 1e-17;
  c.at(1, 1) = 1.0;
  c.at(2, 1) = 0.0;
  c.at(2, 2) = 1.0;
  // The downdate fails, the direct fallback fails too.
  EXPECT_THROW(recursive_subblock_cholesky(c), InconsistentBand);
  MatrixXd g = MatrixXd::Identity(2, 2);
  VectorXd x(2);
  x << 1.5, 0.0;
  EXPECT_THROW(cholesky_downdate(g, x), DowndateFailure);
}

TEST(BandOps, LogdetAndMatvec) {
  EXPECT_DOUBLE_EQ(banded_logdet(BandedMatrix::identity(6, 2)), 0.0);
  EXPECT_NEAR(banded_logdet(banded_cholesky(tridiag_2_m1(3))), std::log(4.0), 1e-14);
  const VectorXd y = banded_matvec(tridiag_2_m1(3), VectorXd::Ones(3));
  EXPECT_DOUBLE_EQ(y(0), 1.0);
  EXPECT_DOUBLE_EQ(y(1), 0.0);
  EXPECT_DOUBLE_EQ(y(2), 1.0);
}

TEST(BandOps, TriangularSolves) {
  std::mt19937_64 rng(2);
  const BandedMatrix q = random_spd_band(rng, 10, 3);
  const BandedMatrix l = banded_cholesky(q);
  const VectorXd b = testing::random_vector(rng, 10);
  EXPECT_LT((lower_matvec(l, banded_triangular_solve(l, b)) - b).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT((lower_transpose_matvec(l, banded_transpose_solve(l, b)) - b).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT((banded_matvec(q, banded_cholesky_solve(l, b)) - b).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(banded_triangular_solve(l, VectorXd::Ones(3)), ShapeMismatch);
}

TEST(BandOps, WindowAdjointFoldsSymmetricEntries) {
  BandedMatrix s(3, 2);
  Eigen::MatrixXd g(2, 2);
  g << 1.0, 2.0, 3.0, 4.0;
  s.add_window_adjoint(1, g);
  EXPECT_DOUBLE_EQ(s.at(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.at(2, 1), 5.0);
  EXPECT_DOUBLE_EQ(s.at(2, 2), 4.0);
}

TEST(BandOps, PaddingStaysZero) {
  std::mt19937_64 rng(9);
  const BandedMatrix l = banded_cholesky(random_spd_band(rng, 7, 3));
  for (const BandedMatrix& m : {l, subset_inverse(l), reverse_subset_inverse(subset_inverse(l))})
    for (Index j = 0; j < 7; ++j)
      for (Index k = 0; k <= 3; ++k)
        if (j + k >= 7) EXPECT_EQ(m.bands()(k, j), 0.0);
}

TEST(BandOps, DumpCsv) {
  std::ostringstream os;
  BandedMatrix::identity(2, 1).dump_csv(os);
  EXPECT_EQ(os.str(), "row,col,value\n0,0,1\n1,0,0\n1,1,1\n");
}

TEST(BandOps, NoDenseMaterialization) {
  std::mt19937_64 rng(13);
  const Index n = 4000, r = 3;
  const BandedMatrix q = random_spd_band(rng, n, r);
  const BandedMatrix w = testing::random_band(rng, n, r);
  g_max_alloc = 0;
  g_track = true;
  const BandedMatrix l = banded_cholesky(q);
  const BandedMatrix c = subset_inverse(l);
  const BandedMatrix l2 = reverse_subset_inverse(c);
  const BandedMatrix cb = reverse_subset_inverse_vjp(w, c);
  const BandedMatrix lb = subset_inverse_vjp(w, l, c);
  g_track = false;
  // Largest buffer is one band (or the vector of per-window factors).
  EXPECT_LE(g_max_alloc.load(), std::size_t(n) * std::size_t(r + 1) * sizeof(double) * 2);
  EXPECT_LT(max_abs_diff(l2, l), 1e-9);
  (void)cb;
  (void)lb;
}

}  // namespace
}  // namespace s2vgp
