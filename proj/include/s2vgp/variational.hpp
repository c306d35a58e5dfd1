// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_VARIATIONAL_HPP_
#define S2VGP_VARIATIONAL_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "s2vgp/banded.hpp"
#include "s2vgp/errors.hpp"
#include "s2vgp/likelihood.hpp"
#include "s2vgp/markov_prior.hpp"
#include "s2vgp/parallel.hpp"

namespace s2vgp {

/// q(u) = N(mu, (Lq Lq^T)^{-1}) with Lq lower banded (bandwidth 2d - 1) and a
/// block-tridiagonal precision.
struct InducingPosterior {
  VectorXd mu;
  BandedMatrix Lq;
  Index d = 1;

  Index size() const noexcept { return mu.size(); }
  Index num_inducing() const noexcept { return d == 0 ? 0 : mu.size() / d; }

  /// q = prior.
  static InducingPosterior from_prior(const MarkovPrior& prior) {
    return {VectorXd::Zero(prior.size()), banded_cholesky(prior.precision), prior.state_dim()};
  }

  void validate() const {
    if (Lq.size() != mu.size() || Lq.bandwidth() != state_bandwidth(d))
      throw ShapeMismatch("InducingPosterior: Lq shape does not match mu and d");
    for (Index j = 0; j < Lq.size(); ++j)
      if (!(Lq.at(j, j) > 0.0) || !std::isfinite(Lq.at(j, j)))
        throw NotPositiveDefinite("InducingPosterior: Lq diagonal must be positive");
  }
};

/// True when (i, j) lies in the block-tridiagonal pattern for block size d.
inline bool in_btd(Index i, Index j, Index d) {
  const Index bi = i / d, bj = j / d;
  return bi - bj <= 1 && bj - bi <= 1;
}

/// Zeros every stored entry outside the block-tridiagonal pattern.
inline void mask_to_btd(BandedMatrix& b, Index d) {
  const Index n = b.size(), r = b.bandwidth();
  for (Index j = 0; j < n; ++j)
    for (Index i = j; i <= std::min(j + r, n - 1); ++i)
      if (!in_btd(i, j, d)) b.at(i, j) = 0.0;
}

/// Sum over stored entries of a .* b for two symmetric bands, i.e. tr(A B)
/// restricted to the band.
inline double band_trace_product(const BandedMatrix& a, const BandedMatrix& b) {
  a.require_same(b);
  const MatrixXd prod = a.bands().cwiseProduct(b.bands());
  return prod.row(0).sum() + 2.0 * prod.bottomRows(prod.rows() - 1).sum();
}

/// Stored-entry sensitivity of tr(A X) with respect to a symmetric X.
inline BandSensitivity trace_sensitivity(const BandedMatrix& a) {
  BandSensitivity g = a;
  g.bands().bottomRows(g.bands().rows() - 1) *= 2.0;
  return g;
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

inline void require_matching(const InducingPosterior& q, const MarkovPrior& prior) {
  if (q.size() != prior.size() || q.d != prior.state_dim())
    throw ShapeMismatch("posterior of size " + std::to_string(q.size()) + " vs prior of size " +
                        std::to_string(prior.size()));
}

/// KL[q(u) || p(u)] using banded operations only.
inline double kl_to_prior(const InducingPosterior& q, const MarkovPrior& prior, const BandedMatrix& c) {
  require_matching(q, prior);
  const double tr = band_trace_product(prior.precision, c);
  const double quad = q.mu.dot(banded_matvec(prior.precision, q.mu));
  const double logdet_p = banded_logdet(banded_cholesky(prior.precision));
  const double logdet_q = banded_logdet(q.Lq);
  return 0.5 * (tr + quad - double(q.size()) - logdet_p + logdet_q);
}

inline double kl_to_prior(const InducingPosterior& q, const MarkovPrior& prior) {
  require_matching(q, prior);
  return kl_to_prior(q, prior, subset_inverse(q.Lq));
}

namespace detail {

/// Second-moment block E[u_a u_b^T] from the covariance band and the mean.
inline MatrixXd second_moment(const BandedMatrix& c, const VectorXd& mu, Index d, Index a, Index b) {
  MatrixXd s(d, d);
  for (Index p = 0; p < d; ++p)
    for (Index k = 0; k < d; ++k) s(p, k) = c.sym(a * d + p, b * d + k) + mu(a * d + p) * mu(b * d + k);
  return s;
}

/// Adds -dKL/d(F, P0) into (F_bar, P0_bar) through the per-transition form
///   KL = 1/2 [tr(P0^{-1} S00) + sum tr(Q_m^{-1} R_m) - n + log|P0| + sum log|Q_m| + log|Q_q|].
inline void kl_hyper_adjoint(const MarkovPrior& prior, const BandedMatrix& c, const VectorXd& mu, double weight,
                             MatrixXd& F_bar, MatrixXd& P0_bar) {
  const Index d = prior.state_dim(), M = prior.num_inducing();
  const SsmKernel& k = prior.kernel;
  const MatrixXd p0inv = spd_inverse(k.P0, "P0");
  const MatrixXd s00 = second_moment(c, mu, d, 0, 0);
  P0_bar -= weight * 0.5 * (p0inv - p0inv * s00 * p0inv);
  for (Index m = 0; m + 1 < M; ++m) {
    const StateTransition& t = prior.transitions[std::size_t(m)];
    const MatrixXd qinv = spd_inverse(t.Q, "transition noise");
    const MatrixXd smm = second_moment(c, mu, d, m, m);
    const MatrixXd snm = second_moment(c, mu, d, m + 1, m);
    const MatrixXd snn = second_moment(c, mu, d, m + 1, m + 1);
    const MatrixXd as = t.A * smm;
    MatrixXd r = snn - t.A * snm.transpose() - snm * t.A.transpose() + as * t.A.transpose();
    r = (0.5 * (r + r.transpose())).eval();
    const MatrixXd q_bar = 0.5 * (qinv - qinv * r * qinv);
    const MatrixXd a_bar = -qinv * (snm - as);
    discretize_vjp(k, t, -weight * a_bar, -weight * q_bar, F_bar, P0_bar);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Marginals
// ---------------------------------------------------------------------------

struct PairMarginal {
  VectorXd mean;  // 2d
  MatrixXd cov;   // 2d x 2d
};

/// Joint q-marginals of consecutive inducing states, read off the subset
/// inverse.
inline std::vector<PairMarginal> posterior_pair_marginals(const InducingPosterior& q, const BandedMatrix& c) {
  const Index d = q.d, M = q.num_inducing();
  std::vector<PairMarginal> out;
  out.reserve(std::size_t(std::max<Index>(M - 1, 0)));
  for (Index m = 0; m + 1 < M; ++m) out.push_back({q.mu.segment(m * d, 2 * d), c.window(m * d, 2 * d)});
  return out;
}

inline std::vector<PairMarginal> posterior_pair_marginals(const InducingPosterior& q) {
  return posterior_pair_marginals(q, subset_inverse(q.Lq));
}

struct StateMarginal {
  double x = 0.0;
  VectorXd mean;
  MatrixXd cov;
};

struct FMarginal {
  double mean = 0.0;
  double var = 0.0;
};

inline FMarginal f_marginal(const StateMarginal& s, const RowVectorXd& H) {
  return {H.dot(s.mean), (H * s.cov * H.transpose())(0, 0)};
}

/// q(s(x)) = N(P mu_v, T + P Sigma_vv P^T) given the covariance band c.
inline StateMarginal predict_state(const InducingPosterior& q, const MarkovPrior& prior, const BandedMatrix& c,
                                   double x) {
  require_matching(q, prior);
  const Index d = prior.state_dim();
  const ConditionalProjection proj = conditional(prior, x);
  const Index s = proj.pair * d;
  StateMarginal out;
  out.x = x;
  out.mean = proj.P * q.mu.segment(s, 2 * d);
  MatrixXd cov = proj.T + proj.P * c.window(s, 2 * d) * proj.P.transpose();
  out.cov = 0.5 * (cov + cov.transpose());
  return out;
}

inline StateMarginal predict_state(const InducingPosterior& q, const MarkovPrior& prior, double x) {
  return predict_state(q, prior, subset_inverse(q.Lq), x);
}

inline std::vector<StateMarginal> predict_states(const InducingPosterior& q, const MarkovPrior& prior,
                                                 const std::vector<double>& xs) {
  const BandedMatrix c = subset_inverse(q.Lq);
  std::vector<StateMarginal> out(xs.size());
  parallel_chunks(long(xs.size()), 512, [&](long, long b, long e) {
    for (long i = b; i < e; ++i) out[std::size_t(i)] = predict_state(q, prior, c, xs[std::size_t(i)]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Model and data
// ---------------------------------------------------------------------------

/// Inputs X (N x c, one column per additive component) and targets y.
struct Dataset {
  MatrixXd X;
  VectorXd y;

  Index size() const noexcept { return y.size(); }
  Index num_covariates() const noexcept { return X.cols(); }

  static Dataset univariate(const std::vector<double>& x, const VectorXd& y) {
    if (Index(x.size()) != y.size()) throw ShapeMismatch("Dataset: x and y lengths differ");
    Dataset d;
    d.X = Eigen::Map<const VectorXd>(x.data(), Index(x.size()));
    d.y = y;
    return d;
  }
  std::vector<double> column(Index j) const {
    std::vector<double> v(std::size_t(X.rows()));
    for (Index i = 0; i < X.rows(); ++i) v[std::size_t(i)] = X(i, j);
    return v;
  }
};

struct ComponentModel {
  MarkovPrior prior;
  InducingPosterior q;
};

/// Sum of independent processes f(x) = sum_i f_i(x^(i)), each with its own
/// Markov prior and banded posterior, sharing one likelihood. A single
/// component is the ordinary one-dimensional model.
struct MeanFieldModel {
  std::vector<ComponentModel> components;
  Likelihood lik;

  std::size_t num_components() const noexcept { return components.size(); }
};

/// One-component model with q initialized at the prior.
inline MeanFieldModel make_model(const SsmKernel& kernel, const std::vector<double>& z, const Likelihood& lik) {
  MeanFieldModel m;
  MarkovPrior p = build_prior(kernel, z);
  InducingPosterior q = InducingPosterior::from_prior(p);
  m.components.push_back({std::move(p), std::move(q)});
  m.lik = lik;
  return m;
}

/// Rebuilds a component's prior after a hyperparameter change; q is kept.
inline void set_kernel(ComponentModel& c, const SsmKernel& k) { c.prior = build_prior(k, c.prior.z); }

/// Sum of the component f-marginals at one input row.
inline FMarginal additive_predict(const MeanFieldModel& model, const std::vector<BandedMatrix>& covs,
                                  const Eigen::Ref<const VectorXd>& x) {
  if (x.size() != Index(model.num_components()))
    throw InvalidObservation("expected " + std::to_string(model.num_components()) + " covariates, got " +
                             std::to_string(x.size()));
  FMarginal f;
  for (std::size_t i = 0; i < model.num_components(); ++i) {
    if (!std::isfinite(x(Index(i)))) throw InvalidObservation("missing covariate " + std::to_string(i));
    const auto& c = model.components[i];
    const FMarginal fi = f_marginal(predict_state(c.q, c.prior, covs[i], x(Index(i))), c.prior.kernel.H);
    f.mean += fi.mean;
    f.var += fi.var;
  }
  return f;
}

inline std::vector<BandedMatrix> posterior_covariances(const MeanFieldModel& model) {
  std::vector<BandedMatrix> out;
  for (const auto& c : model.components) out.push_back(subset_inverse(c.q.Lq));
  return out;
}

inline FMarginal additive_predict(const MeanFieldModel& model, const Eigen::Ref<const VectorXd>& x) {
  return additive_predict(model, posterior_covariances(model), x);
}

inline std::vector<FMarginal> predict_f(const MeanFieldModel& model, const MatrixXd& X) {
  const auto covs = posterior_covariances(model);
  std::vector<FMarginal> out(std::size_t(X.rows()));
  parallel_chunks(X.rows(), 512, [&](long, long b, long e) {
    for (long i = b; i < e; ++i) out[std::size_t(i)] = additive_predict(model, covs, X.row(i).transpose());
  });
  return out;
}

struct PredictiveScores {
  double mse = 0.0;
  double nlpd = 0.0;
};

/// MSE of the predictive mean and negative mean log predictive density.
inline PredictiveScores score_predictions(const MeanFieldModel& model, const Dataset& test) {
  if (test.size() == 0) throw EmptyDataset("no test points");
  const auto f = predict_f(model, test.X);
  PredictiveScores s;
  for (Index i = 0; i < test.size(); ++i) {
    const FMarginal& fi = f[std::size_t(i)];
    const double r = test.y(i) - predictive_mean(model.lik, fi.mean, fi.var);
    s.mse += r * r;
    s.nlpd -= log_predictive_density(model.lik, test.y(i), fi.mean, fi.var);
  }
  s.mse /= double(test.size());
  s.nlpd /= double(test.size());
  return s;
}

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

struct ElboOptions {
  bool q_gradients = true;
  bool hyper_gradients = true;
  /// Mini-batch of data indices; empty means all data.
  std::vector<Index> batch;
};

struct ComponentGradient {
  VectorXd mu;         // dL/dmu
  BandSensitivity Lq;  // dL/dLq, stored entries
  BandSensitivity C;   // dL/dC with C the covariance band, stored entries
  VectorXd kernel;     // dL/d kernel_params (unconstrained, fixed ones included)
};

struct ElboResult {
  double value = 0.0;
  double expected_log_lik = 0.0;  // scaled to the full data set
  double kl = 0.0;
  std::vector<ComponentGradient> components;
  VectorXd lik;  // dL/d Likelihood::params()
};

namespace detail {

constexpr long kElboChunk = 256;

struct PointTerm {
  double value = 0.0, d_mean = 0.0, d_var = 0.0;
  VectorXd d_lik;
};

}  // namespace detail

/// Evidence lower bound E_q[log p(y | f)] - sum_i KL[q_i || p_i] with
/// gradients for every component's (mu, Lq) and kernel parameters and for
/// the likelihood parameters. With a mini-batch the data term is rescaled by
/// N / N_b. Per-point work is chunked and reduced in a fixed order.
inline ElboResult elbo(const MeanFieldModel& model, const Dataset& data, const ElboOptions& opt = {}) {
  const std::size_t nc = model.num_components();
  if (nc == 0) throw ShapeMismatch("elbo: model has no components");
  if (data.num_covariates() != Index(nc))
    throw InvalidObservation("elbo: data has " + std::to_string(data.num_covariates()) + " covariate columns, model " +
                             std::to_string(nc) + " components");
  if (data.size() == 0) throw EmptyDataset("elbo: no data");
  for (const auto& c : model.components) {
    require_matching(c.q, c.prior);
    c.q.validate();
  }

  std::vector<Index> idx = opt.batch;
  if (idx.empty()) {
    idx.resize(std::size_t(data.size()));
    for (Index i = 0; i < data.size(); ++i) idx[std::size_t(i)] = i;
  }
  for (Index i : idx)
    if (i < 0 || i >= data.size()) throw ShapeMismatch("elbo: batch index out of range");
  const Index nb = Index(idx.size());
  const double scale = double(data.size()) / double(nb);
  const bool want_grad = opt.q_gradients || opt.hyper_gradients;

  std::vector<BandedMatrix> covs;
  covs.reserve(nc);
  for (const auto& c : model.components) covs.push_back(subset_inverse(c.q.Lq));

  // Per-point projections and likelihood terms.
  std::vector<std::vector<ConditionalProjection>> proj(nc, std::vector<ConditionalProjection>(std::size_t(nb)));
  std::vector<detail::PointTerm> terms(static_cast<std::size_t>(nb));
  const long chunks = num_chunks(nb, detail::kElboChunk);
  std::vector<double> chunk_value(std::size_t(chunks), 0.0);
  parallel_chunks(nb, detail::kElboChunk, [&](long ch, long b, long e) {
    double acc = 0.0;
    for (long t = b; t < e; ++t) {
      const Index n = idx[std::size_t(t)];
      double mf = 0.0, vf = 0.0;
      for (std::size_t i = 0; i < nc; ++i) {
        const auto& comp = model.components[i];
        const Index d = comp.prior.state_dim();
        ConditionalProjection& p = proj[i][std::size_t(t)];
        p = conditional(comp.prior, data.X(n, Index(i)));
        const RowVectorXd hp = comp.prior.kernel.H * p.P;
        mf += hp.dot(comp.q.mu.segment(p.pair * d, 2 * d));
        vf += (comp.prior.kernel.H * p.T * comp.prior.kernel.H.transpose())(0, 0) +
              (hp * covs[i].window(p.pair * d, 2 * d) * hp.transpose())(0, 0);
      }
      const ExpectedLogLik ell = expected_log_lik(model.lik, data.y(n), mf, vf);
      terms[std::size_t(t)] = {ell.value, ell.d_mean, ell.d_var, ell.d_params};
      acc += ell.value;
    }
    chunk_value[std::size_t(ch)] = acc;
  });
  double data_term = 0.0;
  for (double v : chunk_value) data_term += v;
  data_term *= scale;

  ElboResult out;
  out.expected_log_lik = data_term;
  out.lik = VectorXd::Zero(model.lik.num_params());
  for (std::size_t i = 0; i < nc; ++i) out.kl += kl_to_prior(model.components[i].q, model.components[i].prior, covs[i]);
  out.value = data_term - out.kl;
  if (!want_grad) return out;

  for (const auto& t : terms)
    if (t.d_lik.size() > 0) out.lik += scale * t.d_lik;

  out.components.resize(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    const auto& comp = model.components[i];
    const Index d = comp.prior.state_dim(), n = comp.q.size();
    const RowVectorXd& H = comp.prior.kernel.H;
    ComponentGradient& g = out.components[i];

    // KL with respect to q.
    g.mu = -banded_matvec(comp.prior.precision, comp.q.mu);
    g.C = -0.5 * trace_sensitivity(comp.prior.precision);

    // Data term with respect to the pair windows of (mu, C). Sequential in
    // point order for a reproducible sum.
    for (Index t = 0; t < nb; ++t) {
      const ConditionalProjection& p = proj[i][std::size_t(t)];
      const detail::PointTerm& pt = terms[std::size_t(t)];
      const VectorXd a = (H * p.P).transpose();
      g.mu.segment(p.pair * d, 2 * d) += scale * pt.d_mean * a;
      g.C.add_window_adjoint(p.pair * d, scale * pt.d_var * a * a.transpose());
    }

    if (opt.q_gradients) {
      g.Lq = subset_inverse_vjp(g.C, comp.q.Lq, covs[i]);
      for (Index j = 0; j < n; ++j) g.Lq.at(j, j) -= 1.0 / comp.q.Lq.at(j, j);
    }

    if (opt.hyper_gradients) {
      std::vector<MatrixXd> fb(std::size_t(chunks), MatrixXd::Zero(d, d)), pb(std::size_t(chunks), MatrixXd::Zero(d, d));
      const MatrixXd hth = H.transpose() * H;
      parallel_chunks(nb, detail::kElboChunk, [&](long ch, long b, long e) {
        MatrixXd& F_bar = fb[std::size_t(ch)];
        MatrixXd& P0_bar = pb[std::size_t(ch)];
        for (long t = b; t < e; ++t) {
          const Index nidx = idx[std::size_t(t)];
          const ConditionalProjection& p = proj[i][std::size_t(t)];
          const detail::PointTerm& pt = terms[std::size_t(t)];
          const VectorXd mv = comp.q.mu.segment(p.pair * d, 2 * d);
          const MatrixXd sv = covs[i].window(p.pair * d, 2 * d);
          const MatrixXd P_bar = scale * (pt.d_mean * H.transpose() * mv.transpose() + 2.0 * pt.d_var * hth * p.P * sv);
          const MatrixXd T_bar = scale * pt.d_var * hth;
          conditional_vjp(comp.prior, data.X(nidx, Index(i)), p, P_bar, T_bar, F_bar, P0_bar);
        }
      });
      MatrixXd F_bar = MatrixXd::Zero(d, d), P0_bar = MatrixXd::Zero(d, d);
      for (long ch = 0; ch < chunks; ++ch) {
        F_bar += fb[std::size_t(ch)];
        P0_bar += pb[std::size_t(ch)];
      }
      detail::kl_hyper_adjoint(comp.prior, covs[i], comp.q.mu, 1.0, F_bar, P0_bar);
      g.kernel = kernel_param_gradient(comp.prior.kernel, F_bar, P0_bar);
    }
  }
  return out;
}

}  // namespace s2vgp

#endif  // S2VGP_VARIATIONAL_HPP_
