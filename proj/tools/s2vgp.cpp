// SPDX-License-Identifier: Apache-2.0
//
// s2vgp command-line tool.
//
//   s2vgp run <config.json>
//   s2vgp benchmark <config.json>
//   s2vgp sample <snapshot.json> --inputs <csv> [--count N] [--seed S] [--output F]
//   s2vgp validate <snapshot.json>

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cli/experiment.hpp"

namespace {

int fail(const std::string& msg, int code) {
  std::cerr << "s2vgp: " << msg << '\n';
  return code;
}

void run_benchmark(const s2vgp::cli::ExperimentConfig& c) {
  const s2vgp::cli::BenchmarkResult b = s2vgp::cli::benchmark(c);
  s2vgp::cli::write_benchmark(c, b);
  for (const auto& r : b.rows)
    std::cout << r.sweep << " N=" << r.N << " M=" << r.M << ": " << r.median_seconds << " s\n";
  if (b.exponent_M) std::cout << "exponent in M: " << *b.exponent_M << '\n';
  if (b.exponent_N) std::cout << "exponent in N: " << *b.exponent_N << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  using namespace s2vgp;
  CLI::App app{"Sparse state-space variational GP tool"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (overrides S2VGP_THREADS; 0 keeps it)");

  std::string config_path;
  auto* run = app.add_subcommand("run", "train a model from a config");
  run->add_option("config", config_path, "config JSON")->required();

  auto* bench = app.add_subcommand("benchmark", "time ELBO gradients over M (and N)");
  bench->add_option("config", config_path, "config JSON")->required();

  std::string snapshot, inputs, output = "samples.csv";
  long count = 100;
  std::uint64_t seed = 0;
  auto* sample = app.add_subcommand("sample", "draw posterior paths from a snapshot");
  sample->add_option("snapshot", snapshot, "snapshot JSON")->required();
  sample->add_option("--inputs", inputs, "CSV with an x column")->required();
  sample->add_option("--count", count, "number of paths")->check(CLI::PositiveNumber);
  sample->add_option("--seed", seed, "random seed");
  sample->add_option("--output", output, "output CSV");

  auto* validate = app.add_subcommand("validate", "check a snapshot loads");
  validate->add_option("snapshot", snapshot, "snapshot JSON")->required();

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) setenv("S2VGP_THREADS", std::to_string(threads).c_str(), 1);

  try {
    if (run->parsed()) {
      const cli::ExperimentConfig c = cli::load_config(config_path);
      if (c.task == "benchmark") {
        run_benchmark(c);
      } else {
        const cli::RunResult r = cli::run_and_write(c);
        std::cout << cli::report(c, r);
      }
    } else if (bench->parsed()) {
      run_benchmark(cli::load_config(config_path));
    } else if (sample->parsed()) {
      const MeanFieldModel m = cli::load_snapshot(snapshot);
      const Dataset d = cli::ingest_csv(inputs, false);
      cli::write_samples(output, m, d.column(0), count, seed);
    } else if (validate->parsed()) {
      std::cout << cli::validate_snapshot(snapshot);
    }
  } catch (const cli::Diverged& e) {
    return fail(e.what(), 3);
  } catch (const ConfigError& e) {
    return fail(e.what(), 2);
  } catch (const std::exception& e) {
    return fail(e.what(), 1);
  }
  return 0;
}
