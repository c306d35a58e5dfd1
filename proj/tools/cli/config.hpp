// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration (JSON). See configs/README.md for the schema.

#ifndef S2VGP_TOOLS_CONFIG_HPP_
#define S2VGP_TOOLS_CONFIG_HPP_

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "cli/data.hpp"
#include "cli/snapshot.hpp"
#include "s2vgp/errors.hpp"
#include "s2vgp/train.hpp"

namespace s2vgp::cli {

struct InducingSpec {
  Index num = 50;
  std::string policy = "uniform";  // uniform over the data range, or explicit
  std::vector<double> points;
};

struct DataSpec {
  std::string csv;  // resolved path; empty means synthetic
  SynthSpec synth;
};

struct BenchmarkSpec {
  std::vector<Index> M{16, 32, 64, 128, 256, 512};
  std::vector<Index> N;  // optional sweep over N at fixed inducing.num
  int repeats = 10;
  int warmup = 3;
};

struct ExperimentConfig {
  std::string task = "regression";  // regression, classification, additive, benchmark, sample
  std::vector<std::string> kernels{"matern32(var=1, len=0.1)"};
  InducingSpec inducing;
  Likelihood lik = Likelihood::gaussian(0.01);
  TrainOptions train;
  /// Stop once |elbo_t - elbo_{t-1}| <= tol * max(1, |elbo_t|); 0 disables.
  double tol = 0.0;
  DataSpec data;
  SplitSpec split;
  std::string output = "out";
  std::vector<std::string> metrics{"elbo", "mse", "nlpd"};
  int eval_every = 1;
  BenchmarkSpec benchmark;
  long sample_count = 100;
  std::uint64_t seed = 0;

  bool wants(const std::string& m) const { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); }
};

namespace detail {

inline void only_keys(const json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      throw ConfigError(std::string("unknown field '") + k + "' in " + where);
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j, const std::filesystem::path& base_dir = ".") {
  using detail::only_keys;
  only_keys(j, "config", {"task", "kernel", "kernels", "inducing", "likelihood", "optimizer", "data", "split", "output",
                          "metrics", "eval_every", "benchmark", "sample_count", "seed"});
  ExperimentConfig c;
  try {
    c.task = j.value("task", c.task);
    if (c.task != "regression" && c.task != "classification" && c.task != "additive" && c.task != "benchmark" &&
        c.task != "sample")
      throw ConfigError("unknown task '" + c.task + "'");
    c.seed = j.value("seed", std::uint64_t(0));
    if (j.contains("kernel") && j.contains("kernels")) throw ConfigError("give either 'kernel' or 'kernels'");
    if (j.contains("kernel")) c.kernels = {j.at("kernel").get<std::string>()};
    if (j.contains("kernels")) c.kernels = j.at("kernels").get<std::vector<std::string>>();
    if (c.kernels.empty()) throw ConfigError("no kernel given");
    for (const auto& k : c.kernels) parse_kernel(k);

    if (j.contains("inducing")) {
      const json& i = j.at("inducing");
      only_keys(i, "inducing", {"num", "policy", "points"});
      c.inducing.num = i.value("num", c.inducing.num);
      c.inducing.policy = i.value("policy", i.contains("points") ? std::string("explicit") : c.inducing.policy);
      if (i.contains("points")) c.inducing.points = i.at("points").get<std::vector<double>>();
      if (c.inducing.policy != "uniform" && c.inducing.policy != "explicit")
        throw ConfigError("inducing.policy must be 'uniform' or 'explicit'");
      if (c.inducing.policy == "explicit" && c.inducing.points.size() < 2)
        throw ConfigError("explicit inducing policy needs at least two points");
      if (c.inducing.policy == "uniform" && c.inducing.num < 2) throw ConfigError("inducing.num must be >= 2");
    }
    if (j.contains("likelihood")) c.lik = likelihood_from_json(j.at("likelihood"));
    if (c.task == "classification" && !c.lik.is_binary())
      throw ConfigError("classification needs a bernoulli likelihood");

    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      only_keys(o, "optimizer", {"scheme", "iterations", "gamma", "lr", "beta1", "beta2", "batch_size", "max_halvings",
                                 "learn_kernel", "learn_likelihood", "tol", "seed"});
      c.train.scheme = parse_scheme(o.value("scheme", std::string("natgrad+descent")));
      c.train.iterations = o.value("iterations", c.train.iterations);
      c.train.gamma = o.value("gamma", c.train.gamma);
      c.train.adam.lr = o.value("lr", c.train.adam.lr);
      c.train.adam.beta1 = o.value("beta1", c.train.adam.beta1);
      c.train.adam.beta2 = o.value("beta2", c.train.adam.beta2);
      c.train.batch_size = o.value("batch_size", c.train.batch_size);
      c.train.max_halvings = o.value("max_halvings", c.train.max_halvings);
      c.train.learn_kernel = o.value("learn_kernel", c.train.learn_kernel);
      c.train.learn_likelihood = o.value("learn_likelihood", c.train.learn_likelihood);
      c.tol = o.value("tol", c.tol);
      c.train.seed = o.value("seed", c.seed);
    } else {
      c.train.seed = c.seed;
    }
    if (c.train.iterations < 0 || c.train.batch_size < 0 || c.train.max_halvings < 0 || c.tol < 0.0 ||
        !(c.train.adam.lr > 0.0))
      throw ConfigError("optimizer settings out of range");

    if (j.contains("data")) {
      const json& d = j.at("data");
      only_keys(d, "data", {"csv", "synthetic"});
      if (d.contains("csv") == d.contains("synthetic")) throw ConfigError("data needs exactly one of 'csv' or 'synthetic'");
      if (d.contains("csv")) {
        c.data.csv = detail::resolve(base_dir, d.at("csv").get<std::string>());
        if (!std::filesystem::exists(c.data.csv)) throw ConfigError("data file '" + c.data.csv + "' does not exist");
      } else {
        const json& s = d.at("synthetic");
        only_keys(s, "data.synthetic", {"kind", "n", "lo", "hi", "kernel", "noise", "df", "scale", "components", "seed"});
        SynthSpec& sp = c.data.synth;
        sp.kind = s.value("kind", sp.kind);
        sp.n = s.value("n", sp.n);
        sp.lo = s.value("lo", sp.lo);
        sp.hi = s.value("hi", sp.hi);
        sp.kernel = s.value("kernel", sp.kernel);
        sp.noise = s.value("noise", sp.noise);
        sp.df = s.value("df", sp.df);
        sp.scale = s.value("scale", sp.scale);
        sp.components = s.value("components", sp.components);
        sp.seed = s.value("seed", c.seed);
      }
    } else {
      c.data.synth.seed = c.seed;
    }

    if (j.contains("split")) {
      const json& s = j.at("split");
      only_keys(s, "split", {"style", "test_fraction", "seed"});
      c.split.style = s.value("style", c.split.style);
      c.split.test_fraction = s.value("test_fraction", c.split.test_fraction);
      c.split.seed = s.value("seed", c.seed);
    } else {
      c.split.seed = c.seed;
    }
    c.output = detail::resolve(base_dir, j.value("output", c.output));
    if (j.contains("metrics")) c.metrics = j.at("metrics").get<std::vector<std::string>>();
    for (const auto& m : c.metrics)
      if (m != "elbo" && m != "mse" && m != "nlpd" && m != "kl_proxy" && m != "wall_time")
        throw ConfigError("unknown metric '" + m + "'");
    c.eval_every = j.value("eval_every", c.eval_every);
    if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");

    if (j.contains("benchmark")) {
      const json& b = j.at("benchmark");
      only_keys(b, "benchmark", {"M", "N", "repeats", "warmup"});
      if (b.contains("M")) c.benchmark.M = b.at("M").get<std::vector<Index>>();
      if (b.contains("N")) c.benchmark.N = b.at("N").get<std::vector<Index>>();
      c.benchmark.repeats = b.value("repeats", c.benchmark.repeats);
      c.benchmark.warmup = b.value("warmup", c.benchmark.warmup);
      if (c.benchmark.repeats < 1 || c.benchmark.warmup < 0) throw ConfigError("benchmark repeats/warmup out of range");
    }
    c.sample_count = j.value("sample_count", c.sample_count);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return config_from_json(j, std::filesystem::path(path).parent_path());
}

}  // namespace s2vgp::cli

#endif  // S2VGP_TOOLS_CONFIG_HPP_
