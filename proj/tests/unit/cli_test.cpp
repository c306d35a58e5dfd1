// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "cli/experiment.hpp"

namespace s2vgp::cli {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("s2vgp_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(IngestCsv, SmallFileRoundTripsSorted) {
  const fs::path dir = scratch("small");
  write_text(dir / "d.csv", "x,y\n0.5,2\n0.25,1\n0.75,3\n");
  const Dataset d = ingest_csv((dir / "d.csv").string());
  ASSERT_EQ(d.size(), 3);
  EXPECT_EQ(d.X(0, 0), 0.25);
  EXPECT_EQ(d.X(1, 0), 0.5);
  EXPECT_EQ(d.X(2, 0), 0.75);
  EXPECT_EQ(d.y(0), 1.0);
  EXPECT_EQ(d.y(2), 3.0);

  write_csv((dir / "e.csv").string(), d);
  const Dataset e = ingest_csv((dir / "e.csv").string());
  EXPECT_EQ(e.X, d.X);
  EXPECT_EQ(e.y, d.y);
}

TEST(IngestCsv, NanReportsLocation) {
  const fs::path dir = scratch("nan");
  write_text(dir / "d.csv", "x,y\n0.1,1\n0.2,nan\n");
  try {
    ingest_csv((dir / "d.csv").string());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 3u);
    EXPECT_EQ(e.col(), 2u);
  }
  write_text(dir / "empty.csv", "");
  EXPECT_THROW(ingest_csv((dir / "empty.csv").string()), EmptyDataset);
  write_text(dir / "word.csv", "x,y\n0.1,abc\n");
  EXPECT_THROW(ingest_csv((dir / "word.csv").string()), ParseError);
}

TEST(IngestCsv, HundredThousandRowsUnderTwoSeconds) {
  const fs::path dir = scratch("big");
  SynthSpec s;
  s.n = 100000;
  s.seed = 4;
  write_csv((dir / "d.csv").string(), synth(s));
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset d = ingest_csv((dir / "d.csv").string());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(d.size(), 100000);
  EXPECT_LT(secs, 2.0);
}

TEST(Synth, SeedReproducesExactly) {
  for (const char* kind : {"conjugate", "student-t", "quasi-periodic", "classification", "additive"}) {
    SynthSpec s;
    s.kind = kind;
    s.n = 300;
    s.seed = 11;
    const Dataset a = synth(s), b = synth(s);
    EXPECT_EQ(a.X, b.X) << kind;
    EXPECT_EQ(a.y, b.y) << kind;
    s.seed = 12;
    EXPECT_NE(synth(s).y, a.y) << kind;
  }
  SynthSpec bad;
  bad.kind = "nope";
  EXPECT_THROW(synth(bad), ConfigError);
}

TEST(Synth, ConjugateNoiseVariance) {
  SynthSpec s;
  s.seed = 21;
  const Dataset d = synth(s);
  ASSERT_EQ(d.size(), 1000);
  EXPECT_DOUBLE_EQ(d.X(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(d.X(999, 0), 1.0);
  // Recover the latent draw from its stream and look at the residuals.
  const SsmKernel k = parse_kernel(default_synth_kernel("conjugate"));
  const VectorXd f = detail::draw_latent(k, d.column(0), stream_seed(s.seed, 0x1A7E47ULL));
  const VectorXd e = d.y - f;
  const double n = double(e.size());
  const double var = (e.array() - e.mean()).square().sum() / (n - 1.0);
  const double se = 0.01 * std::sqrt(2.0 / (n - 1.0));
  EXPECT_LT(std::abs(var - 0.01), 3.0 * se) << var;
}

TEST(Synth, AdditiveStructureBeatsSingleComponent) {
  const json base = {
      {"task", "additive"},
      {"kernel", "matern32(var=0.5, len=0.2)"},
      {"data", {{"synthetic", {{"kind", "additive"}, {"n", 600}, {"components", 3}}}}},
      {"split", {{"style", "random"}}},
      {"inducing", {{"num", 30}}},
      {"optimizer", {{"scheme", "natgrad"}, {"iterations", 20}, {"gamma", 0.5}}},
      {"metrics", {"elbo", "mse", "nlpd"}},
      {"seed", 8}};
  const RunResult full = run(config_from_json(base));

  // One component on the first covariate only.
  const ExperimentConfig c = config_from_json(base);
  const Split sp = holdout(load_data(c), c.split);
  const Dataset tr{sp.train.X.leftCols(1), sp.train.y}, te{sp.test.X.leftCols(1), sp.test.y};
  ExperimentConfig c1 = c;
  c1.task = "regression";
  MeanFieldModel single = build_model(c1, tr);
  TrainOptions o = c.train;
  train(single, tr, o);
  const PredictiveScores s1 = score_predictions(single, te);

  ASSERT_TRUE(full.nlpd.has_value());
  EXPECT_LT(*full.nlpd, s1.nlpd);
}

TEST(Snapshot, ExactRoundTrip) {
  const fs::path dir = scratch("snap");
  const json cfg = {{"data", {{"synthetic", {{"kind", "student-t"}, {"n", 200}}}}},
                    {"likelihood", {{"kind", "student-t"}, {"df", 1.0}, {"scale", 0.1}}},
                    {"kernel", "sum(matern12(var=1, len=0.3), matern52(var=0.5, len=0.1))"},
                    {"inducing", {{"num", 17}}},
                    {"optimizer", {{"iterations", 3}}},
                    {"seed", 2}};
  const RunResult r = run(config_from_json(cfg));
  save_snapshot((dir / "s.json").string(), r.model);
  const MeanFieldModel m = load_snapshot((dir / "s.json").string());
  ASSERT_EQ(m.num_components(), 1u);
  const auto& a = r.model.components[0];
  const auto& b = m.components[0];
  EXPECT_EQ(kernel_params(a.prior.kernel), kernel_params(b.prior.kernel));
  EXPECT_EQ(a.prior.z, b.prior.z);
  EXPECT_EQ(a.q.mu, b.q.mu);
  EXPECT_EQ(a.q.Lq.bands(), b.q.Lq.bands());
  EXPECT_EQ(m.lik.params(), r.model.lik.params());
  EXPECT_NO_THROW(validate_snapshot((dir / "s.json").string()));

  write_text(dir / "bad.json", "{\"format\": \"other\"}");
  EXPECT_THROW(load_snapshot((dir / "bad.json").string()), ConfigError);
}

TEST(Run, SameConfigTwiceGivesIdenticalMetrics) {
  const fs::path dir = scratch("repeat");
  const json cfg = {{"data", {{"synthetic", {{"kind", "student-t"}, {"n", 400}}}}},
                    {"likelihood", {{"kind", "student-t"}, {"df", 1.0}, {"scale", 0.1}}},
                    {"inducing", {{"num", 40}}},
                    {"optimizer", {{"iterations", 8}, {"batch_size", 100}}},
                    {"metrics", {"elbo", "mse", "nlpd"}},
                    {"seed", 5}};
  json a = cfg, b = cfg;
  a["output"] = (dir / "a").string();
  b["output"] = (dir / "b").string();
  run_and_write(config_from_json(a));
  run_and_write(config_from_json(b));
  const std::string ma = read_text(dir / "a" / "metrics.csv");
  EXPECT_EQ(ma, read_text(dir / "b" / "metrics.csv"));
  EXPECT_EQ(ma.substr(0, ma.find('\n')), kMetricsHeader);
  EXPECT_EQ(read_text(dir / "a" / "snapshot.json"), read_text(dir / "b" / "snapshot.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "report.txt"));
}

TEST(Run, ConjugateNatgradPlateausWithinThreeSteps) {
  const json cfg = {{"kernel", "matern32(var=1, len=0.1)"},
                    {"data", {{"synthetic", {{"kind", "conjugate"}}}}},
                    {"split", {{"style", "none"}}},
                    {"likelihood", {{"kind", "gaussian"}, {"variance", 0.01}}},
                    {"inducing", {{"num", 100}}},
                    {"optimizer", {{"scheme", "natgrad"}, {"gamma", 1.0}, {"iterations", 20}, {"tol", 1e-9}}},
                    {"metrics", {"elbo"}},
                    {"seed", 1}};
  const RunResult r = run(config_from_json(cfg));
  EXPECT_TRUE(r.plateau);
  EXPECT_LE(r.steps, 3);
}

TEST(Run, DivergenceWritesDiagnosticSnapshot) {
  const fs::path dir = scratch("diverge");
  write_text(dir / "d.csv", "x,y\n0,0\n0.5,1e300\n1,-1e300\n");
  const json cfg = {{"data", {{"csv", (dir / "d.csv").string()}}},
                    {"split", {{"style", "none"}}},
                    {"inducing", {{"num", 5}}},
                    {"optimizer", {{"scheme", "descent-only"}, {"iterations", 3}}}};
  const std::string diag = (dir / "diag.json").string();
  EXPECT_THROW(run(config_from_json(cfg), diag), Diverged);
  EXPECT_TRUE(fs::exists(diag));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(config_from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"task", "dance"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kernel", "matern99(var=1)"}}), Error);
  EXPECT_THROW(config_from_json({{"data", {{"csv", "/no/such/file.csv"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"optimizer", {{"scheme", "sgd"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"metrics", {"accuracy"}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"task", "classification"}}), ConfigError);
  const ExperimentConfig big = config_from_json(
      {{"data", {{"synthetic", {{"kind", "conjugate"}, {"n", 50}}}}}, {"optimizer", {{"batch_size", 1000}}}});
  EXPECT_THROW(run(big), ConfigError);
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  const fs::path dir = scratch("rel");
  write_text(dir / "d.csv", "x,y\n0,0\n1,1\n");
  write_text(dir / "c.json", "{ // comment\n \"data\": {\"csv\": \"d.csv\"}, \"output\": \"o\" }");
  const ExperimentConfig c = load_config((dir / "c.json").string());
  EXPECT_EQ(fs::path(c.data.csv), (dir / "d.csv").lexically_normal());
  EXPECT_EQ(fs::path(c.output), (dir / "o").lexically_normal());
}

TEST(Benchmark, SlopeOfExactPowerLaw) {
  EXPECT_NEAR(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
}

TEST(Benchmark, SweepWritesOneRowPerSize) {
  const fs::path dir = scratch("bench");
  const json cfg = {{"task", "benchmark"},
                    {"data", {{"synthetic", {{"kind", "conjugate"}, {"n", 300}}}}},
                    {"benchmark", {{"M", {8, 16}}, {"N", {100, 200}}, {"repeats", 2}, {"warmup", 0}}},
                    {"output", (dir / "o").string()}};
  const ExperimentConfig c = config_from_json(cfg);
  const BenchmarkResult b = benchmark(c);
  EXPECT_EQ(b.rows.size(), 4u);
  EXPECT_TRUE(b.exponent_M.has_value());
  EXPECT_TRUE(b.exponent_N.has_value());
  write_benchmark(c, b);
  EXPECT_TRUE(fs::exists(dir / "o" / "benchmark.csv"));
}

TEST(Sample, WritesFixedHeaderAndAllRows) {
  const fs::path dir = scratch("sample");
  const RunResult r = run(config_from_json({{"data", {{"synthetic", {{"kind", "conjugate"}, {"n", 100}}}}},
                                            {"inducing", {{"num", 10}}},
                                            {"optimizer", {{"iterations", 1}}}}));
  write_samples((dir / "s.csv").string(), r.model, {0.1, 0.2, 0.3}, 4, 9);
  std::ifstream in(dir / "s.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "input,sample_index,f_value");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 12);
}

}  // namespace
}  // namespace s2vgp::cli
