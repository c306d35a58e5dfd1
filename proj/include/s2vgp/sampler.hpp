// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_SAMPLER_HPP_
#define S2VGP_SAMPLER_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <random>
#include <vector>

#include "s2vgp/banded.hpp"
#include "s2vgp/errors.hpp"
#include "s2vgp/kernels.hpp"
#include "s2vgp/markov_prior.hpp"
#include "s2vgp/parallel.hpp"
#include "s2vgp/variational.hpp"

namespace s2vgp {

/// One joint draw of the state process at sorted inputs.
struct PathSample {
  std::vector<double> x;
  MatrixXd states;  // x.size() x d
  std::uint64_t seed = 0;

  VectorXd f(const RowVectorXd& H) const { return states * H.transpose(); }
};

/// Seed of the stream for sample `index`: splitmix64 of (seed, index).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace detail {

constexpr long kSampleChunk = 64;

/// Symmetric PSD square root factor R with R R^T = S; negative eigenvalues
/// from round-off are clipped.
inline MatrixXd psd_factor(const MatrixXd& s) {
  Eigen::LLT<MatrixXd> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (s + s.transpose()));
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

inline void require_sorted(const std::vector<double>& x, const char* who) {
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] < x[i - 1]) throw ShapeMismatch(std::string(who) + ": inputs must be sorted");
  for (double v : x)
    if (!std::isfinite(v)) throw InvalidObservation(std::string(who) + ": non-finite input");
}

/// Transition factors along sorted t: first entry draws from P0.
struct ForwardPlan {
  std::vector<MatrixXd> A, R;
};

inline ForwardPlan forward_plan(const SsmKernel& k, const std::vector<double>& t) {
  ForwardPlan p;
  p.A.reserve(t.size());
  p.R.reserve(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i == 0) {
      p.A.push_back(MatrixXd::Zero(k.state_dim(), k.state_dim()));
      p.R.push_back(psd_factor(k.P0));
    } else {
      const StateTransition tr = discretize(k, t[i] - t[i - 1]);
      p.A.push_back(tr.A);
      p.R.push_back(psd_factor(tr.Q));
    }
  }
  return p;
}

inline MatrixXd run_forward(const ForwardPlan& p, std::mt19937_64& rng) {
  const Index n = Index(p.A.size());
  const Index d = n ? p.R[0].rows() : 0;
  std::normal_distribution<double> nd;
  MatrixXd s(n, d);
  VectorXd e(d), prev = VectorXd::Zero(d);
  for (Index i = 0; i < n; ++i) {
    for (Index a = 0; a < d; ++a) e(a) = nd(rng);
    const VectorXd cur = p.A[std::size_t(i)] * prev + p.R[std::size_t(i)] * e;
    s.row(i) = cur.transpose();
    prev = cur;
  }
  return s;
}

}  // namespace detail

/// Joint prior draws of the state process at sorted inputs.
inline std::vector<PathSample> sample_prior_joint(const SsmKernel& k, const std::vector<double>& x, long count,
                                                  std::uint64_t seed) {
  detail::require_sorted(x, "sample_prior_joint");
  const detail::ForwardPlan plan = detail::forward_plan(k, x);
  std::vector<PathSample> out(static_cast<std::size_t>(std::max(0L, count)));
  parallel_chunks(count, detail::kSampleChunk, [&](long, long b, long e) {
    for (long s = b; s < e; ++s) {
      PathSample& ps = out[std::size_t(s)];
      ps.seed = stream_seed(seed, std::uint64_t(s));
      std::mt19937_64 rng(ps.seed);
      ps.x = x;
      ps.states = detail::run_forward(plan, rng);
    }
  });
  return out;
}

/// Draws u = mu + Lq^{-T} eps; column s is draw s.
inline MatrixXd sample_q_u(const InducingPosterior& q, long count, std::uint64_t seed) {
  q.validate();
  MatrixXd out(q.size(), std::max(0L, count));
  parallel_chunks(count, detail::kSampleChunk, [&](long, long b, long e) {
    std::normal_distribution<double> nd;
    for (long s = b; s < e; ++s) {
      std::mt19937_64 rng(stream_seed(seed, std::uint64_t(s)));
      VectorXd eps(q.size());
      for (Index i = 0; i < q.size(); ++i) eps(i) = nd(rng);
      out.col(s) = q.mu + banded_transpose_solve(q.Lq, eps);
    }
  });
  return out;
}

/// Posterior draws at sorted x: a joint prior draw over x and z, a draw
/// u_q ~ q, then s = s_p(x) + P (u_q - u_p) on each point's neighbor pair.
inline std::vector<PathSample> sample_posterior(const InducingPosterior& q, const MarkovPrior& prior,
                                                const std::vector<double>& x, long count, std::uint64_t seed) {
  require_matching(q, prior);
  q.validate();
  detail::require_sorted(x, "sample_posterior");
  const Index d = prior.state_dim(), M = prior.num_inducing();

  // Merged ordering of x and z; tag >= 0 is an x index, tag < 0 is z index -tag-1.
  std::vector<std::pair<double, Index>> merged;
  merged.reserve(x.size() + prior.z.size());
  for (std::size_t i = 0; i < x.size(); ++i) merged.emplace_back(x[i], Index(i));
  for (Index m = 0; m < M; ++m) merged.emplace_back(prior.z[std::size_t(m)], -m - 1);
  std::stable_sort(merged.begin(), merged.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<double> t(merged.size());
  for (std::size_t i = 0; i < merged.size(); ++i) t[i] = merged[i].first;
  const detail::ForwardPlan plan = detail::forward_plan(prior.kernel, t);

  std::vector<ConditionalProjection> proj;
  proj.reserve(x.size());
  for (double xi : x) proj.push_back(conditional(prior, xi));

  std::vector<PathSample> out(static_cast<std::size_t>(std::max(0L, count)));
  parallel_chunks(count, detail::kSampleChunk, [&](long, long b, long e) {
    std::normal_distribution<double> nd;
    for (long s = b; s < e; ++s) {
      PathSample& ps = out[std::size_t(s)];
      ps.seed = stream_seed(seed, std::uint64_t(s));
      std::mt19937_64 rng(ps.seed);
      const MatrixXd joint = detail::run_forward(plan, rng);
      VectorXd eps(q.size());
      for (Index i = 0; i < q.size(); ++i) eps(i) = nd(rng);
      const VectorXd uq = q.mu + banded_transpose_solve(q.Lq, eps);

      VectorXd diff(M * d);
      MatrixXd sx(Index(x.size()), d);
      for (std::size_t i = 0; i < merged.size(); ++i) {
        const Index tag = merged[i].second;
        if (tag >= 0)
          sx.row(tag) = joint.row(Index(i));
        else
          diff.segment((-tag - 1) * d, d) = uq.segment((-tag - 1) * d, d) - joint.row(Index(i)).transpose();
      }
      for (std::size_t i = 0; i < x.size(); ++i) {
        const ConditionalProjection& p = proj[i];
        sx.row(Index(i)) += (p.P * diff.segment(p.pair * d, 2 * d)).transpose();
      }
      ps.x = x;
      ps.states = std::move(sx);
    }
  });
  return out;
}

/// CSV rows "input,sample_index,f_value".
inline void write_samples_csv(std::ostream& os, const std::vector<PathSample>& samples, const RowVectorXd& H) {
  os << "input,sample_index,f_value\n";
  os.precision(17);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const VectorXd f = samples[s].f(H);
    for (std::size_t i = 0; i < samples[s].x.size(); ++i) os << samples[s].x[i] << ',' << s << ',' << f(Index(i)) << '\n';
  }
}

}  // namespace s2vgp

#endif  // S2VGP_SAMPLER_HPP_
