// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_TRAIN_HPP_
#define S2VGP_TRAIN_HPP_

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "s2vgp/errors.hpp"
#include "s2vgp/natgrad.hpp"
#include "s2vgp/variational.hpp"

namespace s2vgp {

/// kNatgrad: natural gradients for q only. kAdam: Adam for everything.
/// kMixed: natural gradients for q, Adam for kernel and likelihood params.
enum class Scheme { kNatgrad, kAdam, kMixed };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kNatgrad: return "natgrad";
    case Scheme::kAdam: return "adam";
    case Scheme::kMixed: return "mixed";
  }
  return "?";
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "natgrad") return Scheme::kNatgrad;
  if (s == "adam" || s == "descent-only") return Scheme::kAdam;
  if (s == "mixed" || s == "natgrad+descent") return Scheme::kMixed;
  throw ConfigError("unknown optimizer scheme '" + s + "' (natgrad, natgrad+descent, descent-only)");
}

struct TrainOptions {
  Scheme scheme = Scheme::kMixed;
  int iterations = 100;
  /// Natural-gradient step; <= 0 picks 1 for a Gaussian likelihood and 0.01
  /// otherwise.
  double gamma = 0.0;
  int max_halvings = 10;
  AdamOptions adam;
  bool learn_kernel = true;
  bool learn_likelihood = true;
  /// 0 means full batch.
  Index batch_size = 0;
  std::uint64_t seed = 0;
};

struct TrainTrace {
  /// ELBO before each iteration, plus the final value (full data).
  std::vector<double> elbo;
  int halvings = 0;
};

inline double default_gamma(const Likelihood& lik) { return lik.is_gaussian() ? 1.0 : 0.01; }

namespace detail {

/// batch_size distinct indices by partial Fisher-Yates.
inline std::vector<Index> draw_batch(Index n, Index batch_size, std::mt19937_64& rng) {
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index(0));
  for (Index i = 0; i < batch_size; ++i) {
    const Index j = i + Index(rng() % std::uint64_t(n - i));
    std::swap(all[std::size_t(i)], all[std::size_t(j)]);
  }
  all.resize(std::size_t(batch_size));
  return all;
}

inline VectorXd free_mask(const SsmKernel& k) {
  const auto hs = kernel_hyperparameters(k);
  VectorXd m(Index(hs.size()));
  for (std::size_t i = 0; i < hs.size(); ++i) m(Index(i)) = hs[i].fixed ? 0.0 : 1.0;
  return m;
}

}  // namespace detail

/// Step-wise optimizer over a model held by reference.
class Trainer {
 public:
  Trainer(MeanFieldModel& model, const Dataset& data, TrainOptions opt)
      : model_(model), data_(data), opt_(std::move(opt)), rng_(opt_.seed) {
    if (opt_.iterations < 0) throw ConfigError("train: iterations must be >= 0");
    if (opt_.batch_size < 0) throw ConfigError("train: batch_size must be >= 0");
    if (opt_.batch_size > data_.size()) throw ConfigError("train: batch_size exceeds the number of data points");
    gamma_ = opt_.gamma > 0.0 ? opt_.gamma : default_gamma(model_.lik);
    q_state_.resize(model_.num_components());
    k_state_.resize(model_.num_components());
  }

  /// One update; returns the ELBO (mini-batch estimate when batching) at
  /// the parameters before the update.
  double step() {
    const bool learn_hypers = opt_.scheme != Scheme::kNatgrad;
    ElboOptions eo;
    eo.hyper_gradients = learn_hypers && (opt_.learn_kernel || opt_.learn_likelihood);
    if (opt_.batch_size > 0 && opt_.batch_size < data_.size())
      eo.batch = detail::draw_batch(data_.size(), opt_.batch_size, rng_);
    const ElboResult r = elbo(model_, data_, eo);
    if (!std::isfinite(r.value)) throw StepRejected("train: non-finite ELBO");

    for (std::size_t i = 0; i < model_.num_components(); ++i) {
      ComponentModel& c = model_.components[i];
      const ComponentGradient& g = r.components[i];
      if (opt_.scheme == Scheme::kAdam) {
        const VectorXd p = pack_posterior(c.q);
        const VectorXd gp = pack_posterior_gradient(c.q, g.mu, g.Lq);
        c.q = unpack_posterior(c.q, gradient_descent_step(p, -gp, q_state_[i], opt_.adam));
      } else {
        const HalvedStep s = natural_gradient_step_halving(c.q, g, gamma_, opt_.max_halvings);
        c.q = s.q;
        halvings_ += s.halvings;
      }
      if (learn_hypers && opt_.learn_kernel) {
        const VectorXd u = kernel_params(c.prior.kernel);
        const VectorXd gk = g.kernel.cwiseProduct(detail::free_mask(c.prior.kernel));
        set_kernel(c, with_kernel_params(c.prior.kernel, gradient_descent_step(u, -gk, k_state_[i], opt_.adam)));
      }
    }
    if (learn_hypers && opt_.learn_likelihood && model_.lik.num_params() > 0)
      model_.lik = model_.lik.with_params(gradient_descent_step(model_.lik.params(), -r.lik, lik_state_, opt_.adam));
    return r.value;
  }

  int halvings() const noexcept { return halvings_; }
  double gamma() const noexcept { return gamma_; }

 private:
  MeanFieldModel& model_;
  const Dataset& data_;
  TrainOptions opt_;
  std::mt19937_64 rng_;
  double gamma_ = 1.0;
  std::vector<AdamState> q_state_, k_state_;
  AdamState lik_state_;
  int halvings_ = 0;
};

inline double full_elbo(const MeanFieldModel& model, const Dataset& data) {
  ElboOptions o;
  o.q_gradients = o.hyper_gradients = false;
  return elbo(model, data, o).value;
}

/// Maximizes the ELBO in place for opt.iterations steps.
inline TrainTrace train(MeanFieldModel& model, const Dataset& data, const TrainOptions& opt = {}) {
  Trainer t(model, data, opt);
  TrainTrace trace;
  for (int it = 0; it < opt.iterations; ++it) trace.elbo.push_back(t.step());
  trace.elbo.push_back(full_elbo(model, data));
  trace.halvings = t.halvings();
  return trace;
}

}  // namespace s2vgp

#endif  // S2VGP_TRAIN_HPP_
