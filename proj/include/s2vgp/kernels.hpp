// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_KERNELS_HPP_
#define S2VGP_KERNELS_HPP_

#include <Eigen/Core>
#include <unsupported/Eigen/KroneckerProduct>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "s2vgp/errors.hpp"
#include "s2vgp/expm.hpp"

namespace s2vgp {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

enum class KernelKind { kMatern12, kMatern32, kMatern52, kCosine, kHarmonic, kSum, kProduct };

enum class Transform { kLog, kIdentity };

struct Hyperparameter {
  std::string name;
  double value = 0.0;  // constrained value
  Transform transform = Transform::kLog;
  bool fixed = false;

  double unconstrained() const { return transform == Transform::kLog ? std::log(value) : value; }
  static double constrain(double u, Transform t) { return t == Transform::kLog ? std::exp(u) : u; }
};

/// Kernel expression tree. Leaves carry their hyperparameters; sum and
/// product nodes carry children.
struct KernelExpr {
  KernelKind kind = KernelKind::kMatern12;
  std::vector<Hyperparameter> hypers;
  std::vector<KernelExpr> children;
};

/// Stationary kernel as a linear time-invariant SDE
///   ds = F s dt + L dw,  E[dw dw^T] = Qc dt,  f = H s,
/// with stationary covariance P0. Also carries the tangents of F and P0 with
/// respect to every hyperparameter in its unconstrained coordinates, in
/// depth-first order of the expression tree.
class SsmKernel {
 public:
  SsmKernel() = default;

  Index state_dim() const noexcept { return F.rows(); }

  double variance() const { return (H * P0 * H.transpose())(0, 0); }

  /// L Qc L^T.
  MatrixXd noise_cov() const { return L * Qc * L.transpose(); }

  /// Cov(s(t + tau), s(t)) = expm(F tau) P0 for tau >= 0.
  MatrixXd state_covariance(double tau) const {
    const double a = std::abs(tau);
    MatrixXd c = expm(F * a) * P0;
    return tau >= 0.0 ? c : MatrixXd(c.transpose());
  }

  double covariance(double tau) const {
    return (H * state_covariance(std::abs(tau)) * H.transpose())(0, 0);
  }

  std::size_t num_params() const noexcept { return dF.size(); }

  MatrixXd F, L, Qc, P0;
  RowVectorXd H;
  std::vector<MatrixXd> dF, dP0;
  KernelExpr expr;
};

namespace detail {

inline void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw InvalidHyperparameter(std::string(what) + " must be positive and finite, got " + std::to_string(v));
}

inline MatrixXd block_diag(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out = MatrixXd::Zero(a.rows() + b.rows(), a.cols() + b.cols());
  out.topLeftCorner(a.rows(), a.cols()) = a;
  out.bottomRightCorner(b.rows(), b.cols()) = b;
  return out;
}

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) { return Eigen::kroneckerProduct(a, b).eval(); }

inline SsmKernel build_leaf(const KernelExpr& e) {
  SsmKernel k;
  k.expr = e;
  auto hv = [&](std::size_t i) { return e.hypers.at(i).value; };
  switch (e.kind) {
    case KernelKind::kMatern12: {
      const double var = hv(0), len = hv(1);
      require_positive(var, "variance");
      require_positive(len, "lengthscale");
      const double lam = 1.0 / len;
      k.F = MatrixXd::Constant(1, 1, -lam);
      k.L = MatrixXd::Ones(1, 1);
      k.Qc = MatrixXd::Constant(1, 1, 2.0 * var * lam);
      k.P0 = MatrixXd::Constant(1, 1, var);
      k.H = RowVectorXd::Ones(1);
      k.dF = {MatrixXd::Zero(1, 1), MatrixXd::Constant(1, 1, lam)};
      k.dP0 = {k.P0, MatrixXd::Zero(1, 1)};
      return k;
    }
    case KernelKind::kMatern32: {
      const double var = hv(0), len = hv(1);
      require_positive(var, "variance");
      require_positive(len, "lengthscale");
      const double lam = std::sqrt(3.0) / len;
      k.F.resize(2, 2);
      k.F << 0.0, 1.0, -lam * lam, -2.0 * lam;
      k.L = (MatrixXd(2, 1) << 0.0, 1.0).finished();
      k.Qc = MatrixXd::Constant(1, 1, 4.0 * lam * lam * lam * var);
      k.P0 = MatrixXd::Zero(2, 2);
      k.P0(0, 0) = var;
      k.P0(1, 1) = lam * lam * var;
      k.H = (RowVectorXd(2) << 1.0, 0.0).finished();
      MatrixXd dF_dlam(2, 2);
      dF_dlam << 0.0, 0.0, -2.0 * lam, -2.0;
      MatrixXd dP_dlam = MatrixXd::Zero(2, 2);
      dP_dlam(1, 1) = 2.0 * lam * var;
      k.dF = {MatrixXd::Zero(2, 2), -lam * dF_dlam};
      k.dP0 = {k.P0, -lam * dP_dlam};
      return k;
    }
    case KernelKind::kMatern52: {
      const double var = hv(0), len = hv(1);
      require_positive(var, "variance");
      require_positive(len, "lengthscale");
      const double lam = std::sqrt(5.0) / len;
      const double l2 = lam * lam, l3 = l2 * lam;
      k.F.resize(3, 3);
      k.F << 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -l3, -3.0 * l2, -3.0 * lam;
      k.L = (MatrixXd(3, 1) << 0.0, 0.0, 1.0).finished();
      k.Qc = MatrixXd::Constant(1, 1, 16.0 / 3.0 * var * l2 * l3);
      const double kap = l2 * var / 3.0;
      k.P0.resize(3, 3);
      k.P0 << var, 0.0, -kap, 0.0, kap, 0.0, -kap, 0.0, l2 * l2 * var;
      k.H = (RowVectorXd(3) << 1.0, 0.0, 0.0).finished();
      MatrixXd dF_dlam = MatrixXd::Zero(3, 3);
      dF_dlam.row(2) << -3.0 * l2, -6.0 * lam, -3.0;
      const double dkap = 2.0 * lam * var / 3.0;
      MatrixXd dP_dlam(3, 3);
      dP_dlam << 0.0, 0.0, -dkap, 0.0, dkap, 0.0, -dkap, 0.0, 4.0 * l3 * var;
      k.dF = {MatrixXd::Zero(3, 3), -lam * dF_dlam};
      k.dP0 = {k.P0, -lam * dP_dlam};
      return k;
    }
    case KernelKind::kCosine:
    case KernelKind::kHarmonic: {
      // Harmonic: hypers = [freq, var_1, ..., var_J], component j rotates at j * freq.
      // Cosine: hypers = [var, freq], a single component.
      const bool cosine = e.kind == KernelKind::kCosine;
      const double freq = cosine ? hv(1) : hv(0);
      if (!(freq >= 0.0) || !std::isfinite(freq))
        throw InvalidHyperparameter("frequency must be non-negative and finite");
      const std::size_t J = cosine ? 1 : e.hypers.size() - 1;
      if (J == 0) throw InvalidHyperparameter("harmonic kernel needs at least one component");
      const Index d = static_cast<Index>(2 * J);
      k.F = MatrixXd::Zero(d, d);
      k.P0 = MatrixXd::Zero(d, d);
      k.L = MatrixXd::Identity(d, d);
      k.Qc = MatrixXd::Zero(d, d);
      k.H = RowVectorXd::Zero(d);
      MatrixXd dF_dfreq = MatrixXd::Zero(d, d);
      std::vector<MatrixXd> dP_dvar(J, MatrixXd::Zero(d, d));
      for (std::size_t j = 0; j < J; ++j) {
        const double var = cosine ? hv(0) : hv(j + 1);
        require_positive(var, "variance");
        const Index o = static_cast<Index>(2 * j);
        const double mult = 2.0 * std::numbers::pi * double(j + 1);
        const double omega = mult * freq;
        k.F(o, o + 1) = -omega;
        k.F(o + 1, o) = omega;
        dF_dfreq(o, o + 1) = -mult;
        dF_dfreq(o + 1, o) = mult;
        k.P0(o, o) = k.P0(o + 1, o + 1) = var;
        k.H(o) = 1.0;
        dP_dvar[j](o, o) = dP_dvar[j](o + 1, o + 1) = var;
      }
      if (cosine) {
        k.dF = {MatrixXd::Zero(d, d), dF_dfreq};
        k.dP0 = {dP_dvar[0], MatrixXd::Zero(d, d)};
      } else {
        k.dF = {dF_dfreq};
        k.dP0 = {MatrixXd::Zero(d, d)};
        for (std::size_t j = 0; j < J; ++j) {
          k.dF.push_back(MatrixXd::Zero(d, d));
          k.dP0.push_back(dP_dvar[j]);
        }
      }
      return k;
    }
    default:
      throw InvalidHyperparameter("not a leaf kernel");
  }
}

inline SsmKernel combine_sum(const SsmKernel& a, const SsmKernel& b) {
  SsmKernel k;
  k.F = block_diag(a.F, b.F);
  k.L = block_diag(a.L, b.L);
  k.Qc = block_diag(a.Qc, b.Qc);
  k.P0 = block_diag(a.P0, b.P0);
  k.H.resize(a.H.size() + b.H.size());
  k.H << a.H, b.H;
  const Index da = a.state_dim(), db = b.state_dim();
  for (std::size_t i = 0; i < a.num_params(); ++i) {
    k.dF.push_back(block_diag(a.dF[i], MatrixXd::Zero(db, db)));
    k.dP0.push_back(block_diag(a.dP0[i], MatrixXd::Zero(db, db)));
  }
  for (std::size_t i = 0; i < b.num_params(); ++i) {
    k.dF.push_back(block_diag(MatrixXd::Zero(da, da), b.dF[i]));
    k.dP0.push_back(block_diag(MatrixXd::Zero(da, da), b.dP0[i]));
  }
  return k;
}

// State ordering is Kronecker-lexicographic: index = i_a * d_b + i_b.
inline SsmKernel combine_product(const SsmKernel& a, const SsmKernel& b) {
  SsmKernel k;
  const Index da = a.state_dim(), db = b.state_dim();
  const MatrixXd ia = MatrixXd::Identity(da, da), ib = MatrixXd::Identity(db, db);
  k.F = kron(a.F, ib) + kron(ia, b.F);
  k.P0 = kron(a.P0, b.P0);
  const Index d = da * db;
  k.L = MatrixXd::Identity(d, d);
  k.Qc = kron(a.noise_cov(), b.P0) + kron(a.P0, b.noise_cov());
  k.H = kron(a.H, b.H);
  for (std::size_t i = 0; i < a.num_params(); ++i) {
    k.dF.push_back(kron(a.dF[i], ib));
    k.dP0.push_back(kron(a.dP0[i], b.P0));
  }
  for (std::size_t i = 0; i < b.num_params(); ++i) {
    k.dF.push_back(kron(ia, b.dF[i]));
    k.dP0.push_back(kron(a.P0, b.dP0[i]));
  }
  return k;
}

}  // namespace detail

/// Materializes the state-space matrices of an expression tree.
inline SsmKernel build_kernel(const KernelExpr& e) {
  if (e.kind == KernelKind::kSum || e.kind == KernelKind::kProduct) {
    if (e.children.empty()) throw InvalidHyperparameter("composite kernel without operands");
    SsmKernel k = build_kernel(e.children[0]);
    for (std::size_t i = 1; i < e.children.size(); ++i) {
      const SsmKernel c = build_kernel(e.children[i]);
      k = e.kind == KernelKind::kSum ? detail::combine_sum(k, c) : detail::combine_product(k, c);
    }
    k.expr = e;
    return k;
  }
  return detail::build_leaf(e);
}

inline SsmKernel matern12(double variance, double lengthscale) {
  return build_kernel({KernelKind::kMatern12, {{"var", variance}, {"len", lengthscale}}, {}});
}
inline SsmKernel matern32(double variance, double lengthscale) {
  return build_kernel({KernelKind::kMatern32, {{"var", variance}, {"len", lengthscale}}, {}});
}
inline SsmKernel matern52(double variance, double lengthscale) {
  return build_kernel({KernelKind::kMatern52, {{"var", variance}, {"len", lengthscale}}, {}});
}
inline SsmKernel cosine(double variance, double frequency) {
  return build_kernel(
      {KernelKind::kCosine, {{"var", variance}, {"freq", frequency, Transform::kIdentity}}, {}});
}
/// Sum of cosine kernels at frequencies f0, 2 f0, ..., J f0 with one variance each.
inline SsmKernel harmonic(double frequency, const std::vector<double>& variances) {
  KernelExpr e{KernelKind::kHarmonic, {{"freq", frequency, Transform::kIdentity}}, {}};
  for (double v : variances) e.hypers.push_back({"var", v});
  return build_kernel(e);
}

inline SsmKernel kernel_sum(const SsmKernel& a, const SsmKernel& b) {
  return build_kernel({KernelKind::kSum, {}, {a.expr, b.expr}});
}
inline SsmKernel kernel_product(const SsmKernel& a, const SsmKernel& b) {
  return build_kernel({KernelKind::kProduct, {}, {a.expr, b.expr}});
}

/// Quasi-periodic kernel: unit-variance Matern-1/2 envelope times J harmonics.
/// State dimension is 2J.
inline SsmKernel quasi_periodic(double lengthscale, double frequency, const std::vector<double>& variances) {
  KernelExpr env{KernelKind::kMatern12, {{"var", 1.0, Transform::kLog, true}, {"len", lengthscale}}, {}};
  return build_kernel({KernelKind::kProduct, {}, {env, harmonic(frequency, variances).expr}});
}

// ---------------------------------------------------------------------------
// Hyperparameter access
// ---------------------------------------------------------------------------

namespace detail {
template <typename Fn>
void visit_hypers(KernelExpr& e, const std::string& prefix, Fn&& fn) {
  if (e.children.empty()) {
    for (auto& h : e.hypers) fn(h, prefix + h.name);
  } else {
    for (std::size_t i = 0; i < e.children.size(); ++i)
      visit_hypers(e.children[i], prefix + std::to_string(i) + ".", fn);
  }
}
}  // namespace detail

/// Hyperparameters in depth-first order; names are dotted paths such as
/// "0.len" (first operand's lengthscale).
inline std::vector<Hyperparameter> kernel_hyperparameters(const SsmKernel& k) {
  std::vector<Hyperparameter> out;
  KernelExpr e = k.expr;
  detail::visit_hypers(e, "", [&](Hyperparameter& h, const std::string& path) {
    Hyperparameter c = h;
    c.name = path;
    out.push_back(c);
  });
  return out;
}

inline VectorXd kernel_params(const SsmKernel& k) {
  const auto hs = kernel_hyperparameters(k);
  VectorXd v(static_cast<Index>(hs.size()));
  for (std::size_t i = 0; i < hs.size(); ++i) v(Index(i)) = hs[i].unconstrained();
  return v;
}

/// Rebuilds the kernel from unconstrained parameters (fixed entries are
/// overwritten too; callers mask them).
inline SsmKernel with_kernel_params(const SsmKernel& k, const VectorXd& u) {
  KernelExpr e = k.expr;
  Index i = 0;
  detail::visit_hypers(e, "", [&](Hyperparameter& h, const std::string&) {
    if (i >= u.size()) throw ShapeMismatch("with_kernel_params: too few parameters");
    h.value = Hyperparameter::constrain(u(i++), h.transform);
  });
  if (i != u.size()) throw ShapeMismatch("with_kernel_params: too many parameters");
  return build_kernel(e);
}

/// d/du of a scalar through (F, P0), given their adjoints.
inline VectorXd kernel_param_gradient(const SsmKernel& k, const MatrixXd& F_bar, const MatrixXd& P0_bar) {
  VectorXd g(static_cast<Index>(k.num_params()));
  for (std::size_t i = 0; i < k.num_params(); ++i)
    g(Index(i)) = (F_bar.array() * k.dF[i].array()).sum() + (P0_bar.array() * k.dP0[i].array()).sum();
  return g;
}

// ---------------------------------------------------------------------------
// Discretization and dense covariance
// ---------------------------------------------------------------------------

struct StateTransition {
  MatrixXd A;
  MatrixXd Q;
  double gap = 0.0;
};

/// A = expm(F gap), Q = P0 - A P0 A^T.
inline StateTransition discretize(const SsmKernel& k, double gap) {
  if (gap < 0.0) throw NegativeGap("discretize: negative gap " + std::to_string(gap));
  const Index d = k.state_dim();
  StateTransition t;
  t.gap = gap;
  if (gap == 0.0) {
    t.A = MatrixXd::Identity(d, d);
    t.Q = MatrixXd::Zero(d, d);
    return t;
  }
  t.A = expm(k.F * gap);
  MatrixXd q = k.P0 - t.A * k.P0 * t.A.transpose();
  t.Q = 0.5 * (q + q.transpose());
  return t;
}

/// Adjoint of discretize: accumulates dF/d(F, P0) given adjoints of A and Q.
inline void discretize_vjp(const SsmKernel& k, const StateTransition& t, const MatrixXd& A_bar,
                           const MatrixXd& Q_bar, MatrixXd& F_bar, MatrixXd& P0_bar) {
  if (t.gap == 0.0) return;
  const MatrixXd qs = 0.5 * (Q_bar + Q_bar.transpose());
  // Q = P0 - A P0 A^T
  P0_bar += qs - t.A.transpose() * qs * t.A;
  const MatrixXd a_total = A_bar - 2.0 * qs * t.A * k.P0;
  F_bar += t.gap * expm_vjp(k.F * t.gap, a_total);
}

/// K_ij = k(x_i - x_j).
inline MatrixXd dense_covariance(const SsmKernel& k, const std::vector<double>& x) {
  const Index n = static_cast<Index>(x.size());
  MatrixXd K(n, n);
  for (Index i = 0; i < n; ++i) {
    K(i, i) = k.variance();
    for (Index j = 0; j < i; ++j) K(i, j) = K(j, i) = k.covariance(x[std::size_t(i)] - x[std::size_t(j)]);
  }
  return K;
}

/// Residual F P0 + P0 F^T + L Qc L^T (zero for a valid stationary model).
inline MatrixXd lyapunov_residual(const SsmKernel& k) {
  return k.F * k.P0 + k.P0 * k.F.transpose() + k.noise_cov();
}

// ---------------------------------------------------------------------------
// Text form:  product(matern12(var=1!, len=0.1), cosine(var=1, freq=10))
// A trailing '!' marks a hyperparameter as fixed.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::kMatern12: return "matern12";
    case KernelKind::kMatern32: return "matern32";
    case KernelKind::kMatern52: return "matern52";
    case KernelKind::kCosine: return "cosine";
    case KernelKind::kHarmonic: return "harmonic";
    case KernelKind::kSum: return "sum";
    case KernelKind::kProduct: return "product";
  }
  return "?";
}

inline std::string expr_to_string(const KernelExpr& e) {
  std::string s = kind_name(e.kind);
  s += '(';
  if (!e.children.empty()) {
    for (std::size_t i = 0; i < e.children.size(); ++i) s += (i ? ", " : "") + expr_to_string(e.children[i]);
  } else if (e.kind == KernelKind::kHarmonic) {
    s += "freq=" + format_double(e.hypers[0].value) + (e.hypers[0].fixed ? "!" : "") + ", vars=[";
    for (std::size_t i = 1; i < e.hypers.size(); ++i)
      s += (i > 1 ? ", " : "") + format_double(e.hypers[i].value) + (e.hypers[i].fixed ? "!" : "");
    s += ']';
  } else {
    for (std::size_t i = 0; i < e.hypers.size(); ++i)
      s += (i ? ", " : "") + e.hypers[i].name + "=" + format_double(e.hypers[i].value) + (e.hypers[i].fixed ? "!" : "");
  }
  s += ')';
  return s;
}

class KernelParser {
 public:
  explicit KernelParser(std::string text) : s_(std::move(text)) {}

  KernelExpr parse() {
    KernelExpr e = expr();
    skip();
    if (pos_ != s_.size()) fail("trailing characters");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("kernel spec '" + s_ + "': " + what + " at offset " + std::to_string(pos_));
  }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool eat(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!eat(c)) fail(std::string("expected '") + c + "'");
  }
  std::string ident() {
    skip();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
    if (start == pos_) fail("expected identifier");
    return s_.substr(start, pos_ - start);
  }
  std::pair<double, bool> number() {
    skip();
    const char* begin = s_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) fail("expected number");
    pos_ += static_cast<std::size_t>(end - begin);
    const bool fixed = eat('!');
    return {v, fixed};
  }

  KernelExpr expr() {
    const std::string name = ident();
    expect('(');
    KernelExpr e;
    if (name == "sum" || name == "product") {
      e.kind = name == "sum" ? KernelKind::kSum : KernelKind::kProduct;
      do e.children.push_back(expr());
      while (eat(','));
      expect(')');
      if (e.children.size() < 2) fail(name + " needs at least two operands");
      return e;
    }
    std::vector<std::pair<std::string, std::vector<std::pair<double, bool>>>> args;
    if (!eat(')')) {
      do {
        const std::string key = ident();
        expect('=');
        std::vector<std::pair<double, bool>> vals;
        if (eat('[')) {
          do vals.push_back(number());
          while (eat(','));
          expect(']');
        } else {
          vals.push_back(number());
        }
        args.emplace_back(key, vals);
      } while (eat(','));
      expect(')');
    }
    auto take = [&](const std::string& key, Transform t) {
      for (auto& [k, v] : args)
        if (k == key) {
          if (v.size() != 1) fail("'" + key + "' must be a scalar");
          return Hyperparameter{key, v[0].first, t, v[0].second};
        }
      fail("missing argument '" + key + "'");
    };
    if (name == "matern12" || name == "matern32" || name == "matern52") {
      e.kind = name == "matern12" ? KernelKind::kMatern12
               : name == "matern32" ? KernelKind::kMatern32
                                    : KernelKind::kMatern52;
      e.hypers = {take("var", Transform::kLog), take("len", Transform::kLog)};
      if (args.size() != 2) fail("unexpected argument");
    } else if (name == "cosine") {
      e.kind = KernelKind::kCosine;
      e.hypers = {take("var", Transform::kLog), take("freq", Transform::kIdentity)};
      if (args.size() != 2) fail("unexpected argument");
    } else if (name == "harmonic") {
      e.kind = KernelKind::kHarmonic;
      e.hypers = {take("freq", Transform::kIdentity)};
      bool found = false;
      for (auto& [k, v] : args)
        if (k == "vars") {
          found = true;
          for (auto& [val, fixed] : v) e.hypers.push_back({"var", val, Transform::kLog, fixed});
        }
      if (!found) fail("missing argument 'vars'");
      if (args.size() != 2) fail("unexpected argument");
    } else {
      fail("unknown kernel '" + name + "'");
    }
    return e;
  }

  std::string s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string kernel_to_string(const SsmKernel& k) { return detail::expr_to_string(k.expr); }

inline SsmKernel parse_kernel(const std::string& text) {
  return build_kernel(detail::KernelParser(text).parse());
}

}  // namespace s2vgp

#endif  // S2VGP_KERNELS_HPP_
