// SPDX-License-Identifier: Apache-2.0
//
// Training runs, benchmark sweeps and sampling driven by an ExperimentConfig.

#ifndef S2VGP_TOOLS_EXPERIMENT_HPP_
#define S2VGP_TOOLS_EXPERIMENT_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cli/config.hpp"
#include "cli/data.hpp"
#include "cli/snapshot.hpp"
#include "s2vgp/sampler.hpp"
#include "s2vgp/train.hpp"
#include "s2vgp/variational.hpp"
#include "support/dense_oracle.hpp"

namespace s2vgp::cli {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline Dataset load_data(const ExperimentConfig& c) {
  return c.data.csv.empty() ? synth(c.data.synth) : ingest_csv(c.data.csv);
}

inline std::vector<double> uniform_grid(double lo, double hi, Index m) {
  if (!(hi > lo)) throw ConfigError("inducing range is empty (all inputs equal)");
  std::vector<double> z(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) z[std::size_t(i)] = lo + (hi - lo) * double(i) / double(m - 1);
  return z;
}

/// One component per covariate column with q at the prior.
inline MeanFieldModel build_model(const ExperimentConfig& c, const Dataset& train) {
  const Index cols = train.num_covariates();
  if (c.task != "additive" && cols != 1)
    throw ConfigError("task '" + c.task + "' needs one covariate, data has " + std::to_string(cols));
  if (c.kernels.size() != 1 && Index(c.kernels.size()) != cols)
    throw ConfigError("give one kernel or one per covariate (" + std::to_string(cols) + ")");
  MeanFieldModel m;
  m.lik = c.lik;
  for (Index j = 0; j < cols; ++j) {
    const SsmKernel k = parse_kernel(c.kernels[c.kernels.size() == 1 ? 0 : std::size_t(j)]);
    std::vector<double> z = c.inducing.points;
    if (c.inducing.policy == "uniform")
      z = uniform_grid(train.X.col(j).minCoeff(), train.X.col(j).maxCoeff(), c.inducing.num);
    MarkovPrior p = build_prior(k, z);
    InducingPosterior q = InducingPosterior::from_prior(p);
    m.components.push_back({std::move(p), std::move(q)});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Process-KL proxy
// ---------------------------------------------------------------------------

/// At most g training inputs, evenly strided through the sorted data and
/// always including both ends.
inline std::vector<double> strided_inputs(const Dataset& d, Index g) {
  const Index n = d.size();
  if (n <= g) return d.column(0);
  std::vector<double> out;
  for (Index i = 0; i < g; ++i) out.push_back(d.X(i * (n - 1) / (g - 1), 0));
  return out;
}

/// KL[q(s(grid)) || p(s(grid) | y)] with the grid taken from the training
/// inputs (at most 200 of them), against exact GP regression with the
/// model's current kernel and noise. The exact posterior is cached until
/// those change.
class KlProxy {
 public:
  static constexpr Index kGridSize = 200;
  static constexpr Index kMaxData = 5000;

  explicit KlProxy(const Dataset& train) : train_(train) {
    if (train.num_covariates() != 1) throw ConfigError("kl_proxy needs a single covariate");
    if (train.size() > kMaxData) throw ConfigError("kl_proxy needs N <= " + std::to_string(kMaxData));
    grid_ = strided_inputs(train, kGridSize);
  }

  double operator()(const MeanFieldModel& m) {
    if (m.num_components() != 1 || !m.lik.is_gaussian()) throw ConfigError("kl_proxy needs one component and a Gaussian likelihood");
    const ComponentModel& c = m.components[0];
    const std::string key = kernel_to_string(c.prior.kernel) + "|" + format_noise(m.lik.variance);
    if (key != key_) {
      const oracle::GprExact gpr(c.prior.kernel.expr, train_.column(0), train_.y, m.lik.variance);
      exact_ = gpr.predict_states(c.prior.kernel, grid_);
      key_ = key;
    }
    const oracle::SvgpDense svgp(c.prior.kernel, c.prior.z, oracle::Features::kState);
    const MatrixXd L = c.q.Lq.to_dense_lower();
    const MatrixXd S = (L * L.transpose()).llt().solve(MatrixXd::Identity(L.rows(), L.cols()));
    return oracle::kl_dense(svgp.process_states({c.q.mu, S}, grid_), exact_);
  }

 private:
  static std::string format_noise(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
  const Dataset& train_;
  std::vector<double> grid_;
  std::string key_;
  oracle::DenseGaussian exact_;
};

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

struct MetricsRow {
  long step = 0;
  double elapsed = 0.0;
  double elbo = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> mse, nlpd, kl_proxy;
};

inline const char* kMetricsHeader = "step,elapsed_s,elbo,mse,nlpd,kl_proxy";

/// Unconfigured metrics are left empty; elapsed_s only with "wall_time".
inline void write_metrics_row(std::ostream& os, const MetricsRow& r, bool wall_time) {
  auto opt = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << r.step << ',';
  if (wall_time) os << r.elapsed;
  os << ',' << r.elbo << ',';
  opt(r.mse);
  os << ',';
  opt(r.nlpd);
  os << ',';
  opt(r.kl_proxy);
  os << '\n';
}

struct RunResult {
  std::vector<MetricsRow> rows;
  MeanFieldModel model;
  long steps = 0;          // updates performed
  bool plateau = false;    // stopped by the tolerance
  double train_seconds = 0.0;
  double final_elbo = 0.0;
  std::optional<double> mse, nlpd, kl_proxy;
  Index n_train = 0, n_test = 0;
  int halvings = 0;
};

class Diverged : public Error {
 public:
  using Error::Error;
};

/// Trains the configured model. Writes nothing; see run_and_write.
inline RunResult run(const ExperimentConfig& c, const std::string& diagnostic_path = "") {
  if (c.task == "benchmark") throw ConfigError("use the benchmark command for task 'benchmark'");
  const Dataset all = load_data(c);
  if (c.task == "classification")
    for (Index i = 0; i < all.size(); ++i)
      if (all.y(i) != 0.0 && all.y(i) != 1.0 && all.y(i) != -1.0)
        throw ConfigError("classification labels must be 0/1 or -1/1");
  const Split sp = holdout(all, c.split);
  if (c.train.batch_size > sp.train.size())
    throw ConfigError("batch_size " + std::to_string(c.train.batch_size) + " exceeds N = " + std::to_string(sp.train.size()));

  RunResult res;
  res.model = build_model(c, sp.train);
  res.n_train = sp.train.size();
  res.n_test = sp.test.size();
  std::optional<KlProxy> kl;
  if (c.wants("kl_proxy")) kl.emplace(sp.train);
  const bool scores = (c.wants("mse") || c.wants("nlpd")) && sp.test.size() > 0;

  auto evaluate = [&](MetricsRow& row) {
    if (scores) {
      const PredictiveScores s = score_predictions(res.model, sp.test);
      if (c.wants("mse")) row.mse = s.mse;
      if (c.wants("nlpd")) row.nlpd = s.nlpd;
    }
    if (kl) row.kl_proxy = (*kl)(res.model);
  };

  Trainer trainer(res.model, sp.train, c.train);
  const auto t0 = Clock::now();
  double eval_time = 0.0;
  for (long t = 0; t < c.train.iterations; ++t) {
    MetricsRow row;
    row.step = t;
    if (t % c.eval_every == 0) {
      const auto te = Clock::now();
      evaluate(row);
      eval_time += seconds_since(te);
    }
    const MeanFieldModel before = res.model;
    try {
      row.elbo = trainer.step();
    } catch (const Error& e) {
      if (!diagnostic_path.empty()) save_snapshot(diagnostic_path, before);
      throw Diverged("optimizer diverged at step " + std::to_string(t) + ": " + e.what());
    }
    row.elapsed = seconds_since(t0) - eval_time;
    res.rows.push_back(row);
    res.steps = t + 1;
    if (c.tol > 0.0 && res.rows.size() >= 2) {
      const double prev = res.rows[res.rows.size() - 2].elbo;
      if (std::abs(row.elbo - prev) <= c.tol * std::max(1.0, std::abs(row.elbo))) {
        res.plateau = true;
        break;
      }
    }
  }
  res.train_seconds = seconds_since(t0) - eval_time;
  res.halvings = trainer.halvings();

  MetricsRow last;
  last.step = res.steps;
  last.elapsed = res.train_seconds;
  last.elbo = full_elbo(res.model, sp.train);
  if (!std::isfinite(last.elbo)) {
    if (!diagnostic_path.empty()) save_snapshot(diagnostic_path, res.model);
    throw Diverged("final ELBO is not finite");
  }
  evaluate(last);
  res.rows.push_back(last);
  res.final_elbo = last.elbo;
  res.mse = last.mse;
  res.nlpd = last.nlpd;
  res.kl_proxy = last.kl_proxy;
  return res;
}

inline std::string report(const ExperimentConfig& c, const RunResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << "task: " << c.task << '\n';
  os << "kernels:";
  for (const auto& comp : r.model.components) os << ' ' << kernel_to_string(comp.prior.kernel);
  os << '\n';
  os << "likelihood: " << likelihood_to_json(r.model.lik).dump() << '\n';
  os << "scheme: " << scheme_name(c.train.scheme) << '\n';
  os << "n_train: " << r.n_train << "\nn_test: " << r.n_test << '\n';
  os << "inducing per component: " << r.model.components.front().prior.num_inducing() << '\n';
  os << "steps: " << r.steps << (r.plateau ? " (plateau)" : "") << '\n';
  os << "step halvings: " << r.halvings << '\n';
  os << "final elbo: " << r.final_elbo << '\n';
  if (r.mse) os << "mse: " << *r.mse << '\n';
  if (r.nlpd) os << "nlpd: " << *r.nlpd << '\n';
  if (r.kl_proxy) os << "kl_proxy: " << *r.kl_proxy << '\n';
  os << "train seconds: " << r.train_seconds << '\n';
  os << "seconds per step: " << (r.steps ? r.train_seconds / double(r.steps) : 0.0) << '\n';
  return os.str();
}

inline void write_samples(const std::string& path, const MeanFieldModel& m, const std::vector<double>& x, long count,
                          std::uint64_t seed) {
  if (m.num_components() != 1) throw ConfigError("sampling needs a single-component model");
  const ComponentModel& c = m.components[0];
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_samples_csv(out, sample_posterior(c.q, c.prior, x, count, seed), c.prior.kernel.H);
}

/// run() plus metrics.csv, snapshot.json, report.txt (and samples.csv for
/// task "sample") in c.output.
inline RunResult run_and_write(const ExperimentConfig& c) {
  std::filesystem::create_directories(c.output);
  const std::filesystem::path dir(c.output);
  RunResult r = run(c, (dir / "snapshot_diagnostic.json").string());
  {
    std::ofstream m(dir / "metrics.csv");
    m.precision(17);
    m << kMetricsHeader << '\n';
    for (const auto& row : r.rows) write_metrics_row(m, row, c.wants("wall_time"));
  }
  save_snapshot((dir / "snapshot.json").string(), r.model);
  std::ofstream(dir / "report.txt") << report(c, r);
  if (c.task == "sample") {
    const auto& z = r.model.components[0].prior.z;
    write_samples((dir / "samples.csv").string(), r.model, uniform_grid(z.front(), z.back(), 200), c.sample_count,
                  c.seed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct TimingRow {
  std::string sweep;
  Index N = 0, M = 0, d = 0;
  double median_seconds = 0.0;
};

/// Median wall time of one full-gradient ELBO evaluation after warmups.
inline double time_gradient(const MeanFieldModel& m, const Dataset& data, const BenchmarkSpec& b) {
  ElboOptions o;
  for (int i = 0; i < b.warmup; ++i) elbo(m, data, o);
  std::vector<double> t;
  for (int i = 0; i < b.repeats; ++i) {
    const auto t0 = Clock::now();
    const ElboResult r = elbo(m, data, o);
    t.push_back(seconds_since(t0));
    if (!std::isfinite(r.value)) throw Diverged("benchmark: non-finite ELBO");
  }
  std::sort(t.begin(), t.end());
  const std::size_t h = t.size() / 2;
  return t.size() % 2 ? t[h] : 0.5 * (t[h - 1] + t[h]);
}

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw ConfigError("loglog_slope needs two or more points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

struct BenchmarkResult {
  std::vector<TimingRow> rows;
  std::optional<double> exponent_M, exponent_N;
};

/// Sweeps M at the data set's N, then (if configured) N at inducing.num.
inline BenchmarkResult benchmark(const ExperimentConfig& c) {
  BenchmarkResult out;
  const Dataset data = load_data(c);
  std::vector<double> xs, ts;
  for (Index M : c.benchmark.M) {
    ExperimentConfig cm = c;
    cm.inducing.policy = "uniform";
    cm.inducing.num = M;
    const MeanFieldModel m = build_model(cm, data);
    const double t = time_gradient(m, data, c.benchmark);
    out.rows.push_back({"M", data.size(), M, m.components[0].prior.state_dim(), t});
    xs.push_back(double(M));
    ts.push_back(t);
  }
  if (xs.size() >= 2) out.exponent_M = loglog_slope(xs, ts);
  xs.clear();
  ts.clear();
  for (Index N : c.benchmark.N) {
    if (!c.data.csv.empty()) throw ConfigError("an N sweep needs synthetic data");
    ExperimentConfig cn = c;
    cn.data.synth.n = N;
    const Dataset dn = load_data(cn);
    const MeanFieldModel m = build_model(cn, dn);
    const double t = time_gradient(m, dn, c.benchmark);
    out.rows.push_back({"N", N, c.inducing.num, m.components[0].prior.state_dim(), t});
    xs.push_back(double(N));
    ts.push_back(t);
  }
  if (xs.size() >= 2) out.exponent_N = loglog_slope(xs, ts);
  return out;
}

inline void write_benchmark(const ExperimentConfig& c, const BenchmarkResult& b) {
  std::filesystem::create_directories(c.output);
  const std::filesystem::path dir(c.output);
  std::ofstream csv(dir / "benchmark.csv");
  csv.precision(10);
  csv << "sweep,N,M,state_dim,median_seconds\n";
  for (const auto& r : b.rows) csv << r.sweep << ',' << r.N << ',' << r.M << ',' << r.d << ',' << r.median_seconds << '\n';
  std::ofstream rep(dir / "report.txt");
  rep << "task: benchmark\nrepeats: " << c.benchmark.repeats << " (median, after " << c.benchmark.warmup
      << " warmups)\nthreads: " << thread_count() << '\n';
  if (b.exponent_M) rep << "exponent in M: " << *b.exponent_M << '\n';
  if (b.exponent_N) rep << "exponent in N: " << *b.exponent_N << '\n';
}

// ---------------------------------------------------------------------------
// Snapshot checks
// ---------------------------------------------------------------------------

/// Loads a snapshot and checks it can be used; returns a short summary.
inline std::string validate_snapshot(const std::string& path) {
  const MeanFieldModel m = load_snapshot(path);
  std::ostringstream os;
  os << "components: " << m.num_components() << '\n';
  for (const auto& c : m.components) {
    const double kl = kl_to_prior(c.q, c.prior);
    if (!std::isfinite(kl)) throw NotPositiveDefinite("snapshot posterior has non-finite KL");
    os << "  " << kernel_to_string(c.prior.kernel) << ", M = " << c.prior.num_inducing()
       << ", d = " << c.prior.state_dim() << ", KL = " << kl << '\n';
  }
  os << "likelihood: " << likelihood_to_json(m.lik).dump() << '\n';
  return os.str();
}

}  // namespace s2vgp::cli

#endif  // S2VGP_TOOLS_EXPERIMENT_HPP_
