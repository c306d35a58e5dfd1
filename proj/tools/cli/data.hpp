// SPDX-License-Identifier: Apache-2.0
//
// CSV ingestion, synthetic generators and holdout splits.

#ifndef S2VGP_TOOLS_DATA_HPP_
#define S2VGP_TOOLS_DATA_HPP_

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "s2vgp/errors.hpp"
#include "s2vgp/kernels.hpp"
#include "s2vgp/sampler.hpp"
#include "s2vgp/train.hpp"
#include "s2vgp/variational.hpp"

namespace s2vgp::cli {

namespace detail {

inline std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

/// Parses a finite double; row and col are 1-based for error messages.
inline double parse_cell(const std::string& raw, std::size_t row, std::size_t col) {
  const std::string s = trim(raw);
  double v = 0.0;
  const char* first = s.data();
  if (!s.empty() && s[0] == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(row, col, "not a number: '" + s + "'");
  if (!std::isfinite(v)) throw ParseError(row, col, "non-finite value '" + s + "'");
  return v;
}

/// Stable permutation sorting rows by column 0.
inline Dataset sorted_by_first_column(const Dataset& d) {
  std::vector<Index> order(static_cast<std::size_t>(d.size()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return d.X(a, 0) < d.X(b, 0); });
  Dataset out;
  out.X.resize(d.X.rows(), d.X.cols());
  out.y.resize(d.y.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.X.row(Index(i)) = d.X.row(order[i]);
    out.y(Index(i)) = d.y(order[i]);
  }
  return out;
}

}  // namespace detail

/// Reads a CSV with a header naming x (or x1..xc) and optionally y. Rows are
/// sorted by the first covariate. Without a y column, y is left empty.
inline Dataset ingest_csv(const std::string& path, bool require_y = true) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string line;
  std::size_t row = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    if (!detail::trim(line).empty()) {
      header = detail::split_row(line);
      break;
    }
  }
  if (header.empty()) throw EmptyDataset("'" + path + "' is empty");

  int ycol = -1;
  std::vector<std::pair<int, int>> xcols;  // (covariate index, column)
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string h = detail::trim(header[c]);
    if (h == "y") {
      ycol = int(c);
    } else if (h == "x") {
      xcols.emplace_back(1, int(c));
    } else if (h.size() > 1 && h[0] == 'x' && std::all_of(h.begin() + 1, h.end(), ::isdigit)) {
      xcols.emplace_back(std::stoi(h.substr(1)), int(c));
    } else {
      throw ParseError(row, c + 1, "unexpected column '" + h + "' (expected x, x1..xc, y)");
    }
  }
  if (xcols.empty()) throw ParseError(row, 1, "no x column");
  if (require_y && ycol < 0) throw ParseError(row, 1, "no y column");
  std::sort(xcols.begin(), xcols.end());
  for (std::size_t i = 0; i < xcols.size(); ++i)
    if (xcols[i].first != int(i) + 1 && !(xcols.size() == 1 && xcols[0].first == 1))
      throw ParseError(row, std::size_t(xcols[i].second) + 1, "covariate columns must be x1..xc");

  std::vector<double> xs, ys;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_row(line);
    if (cells.size() != header.size())
      throw ParseError(row, std::min(cells.size(), header.size()) + 1,
                       "expected " + std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    for (const auto& [k, c] : xcols) xs.push_back(detail::parse_cell(cells[std::size_t(c)], row, std::size_t(c) + 1));
    if (ycol >= 0) ys.push_back(detail::parse_cell(cells[std::size_t(ycol)], row, std::size_t(ycol) + 1));
    ++n;
  }
  if (n == 0) throw EmptyDataset("'" + path + "' has no data rows");
  Dataset d;
  d.X = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      xs.data(), Index(n), Index(xcols.size()));
  d.y = ycol >= 0 ? VectorXd(Eigen::Map<const VectorXd>(ys.data(), Index(n))) : VectorXd::Zero(Index(n));
  d = detail::sorted_by_first_column(d);
  if (ycol < 0) d.y.resize(0);
  return d;
}

inline void write_csv(std::ostream& os, const Dataset& d) {
  const Index c = d.num_covariates();
  for (Index j = 0; j < c; ++j) os << (j ? "," : "") << (c == 1 ? std::string("x") : "x" + std::to_string(j + 1));
  os << (d.y.size() ? ",y\n" : "\n");
  os.precision(17);
  for (Index i = 0; i < d.X.rows(); ++i) {
    for (Index j = 0; j < c; ++j) os << (j ? "," : "") << d.X(i, j);
    if (d.y.size()) os << ',' << d.y(i);
    os << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_csv(out, d);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Generator settings. Unset numbers fall back to per-kind defaults.
struct SynthSpec {
  std::string kind = "conjugate";  // conjugate, student-t, quasi-periodic, classification, additive
  Index n = 0;
  double lo = 0.0, hi = 1.0;
  std::string kernel;       // latent process; empty means the kind's default
  double noise = -1.0;      // Gaussian noise variance
  double df = 1.0;          // student-t
  double scale = 1.0;       // student-t
  Index components = 3;     // additive
  std::uint64_t seed = 0;
};

inline std::string default_synth_kernel(const std::string& kind) {
  if (kind == "quasi-periodic") return "product(matern12(var=1!, len=0.5), cosine(var=1, freq=8))";
  if (kind == "classification") return "matern32(var=4, len=0.2)";
  if (kind == "additive") return "matern32(var=0.5, len=0.2)";
  return "matern32(var=1, len=0.1)";
}

namespace detail {

/// One prior draw of f at sorted x (exact SDE recursion).
inline VectorXd draw_latent(const SsmKernel& k, const std::vector<double>& x, std::uint64_t seed) {
  const auto s = sample_prior_joint(k, x, 1, seed);
  return s.front().f(k.H);
}

inline std::vector<double> linspace(Index n, double lo, double hi) {
  std::vector<double> x(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) x[std::size_t(i)] = n == 1 ? lo : lo + (hi - lo) * double(i) / double(n - 1);
  return x;
}

}  // namespace detail

/// Deterministic in spec.seed. Latent draws and noise use separate streams.
inline Dataset synth(const SynthSpec& spec) {
  const std::string& kind = spec.kind;
  if (kind != "conjugate" && kind != "student-t" && kind != "quasi-periodic" && kind != "classification" &&
      kind != "additive")
    throw ConfigError("unknown synthetic generator '" + kind + "'");
  if (!(spec.hi > spec.lo)) throw ConfigError("synthetic range must have hi > lo");
  const SsmKernel k = parse_kernel(spec.kernel.empty() ? default_synth_kernel(kind) : spec.kernel);
  std::mt19937_64 noise_rng(stream_seed(spec.seed, 0xD1CEULL));
  const std::uint64_t latent_seed = stream_seed(spec.seed, 0x1A7E47ULL);

  if (kind == "additive") {
    const Index n = spec.n > 0 ? spec.n : 1000, c = spec.components;
    if (c < 1) throw ConfigError("additive generator needs components >= 1");
    const double noise = spec.noise >= 0.0 ? spec.noise : 0.01;
    std::uniform_real_distribution<double> u(spec.lo, spec.hi);
    Dataset d;
    d.X.resize(n, c);
    d.y = VectorXd::Zero(n);
    for (Index j = 0; j < c; ++j) {
      std::vector<std::pair<double, Index>> col(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) col[std::size_t(i)] = {u(noise_rng), i};
      std::sort(col.begin(), col.end());
      std::vector<double> xs(col.size());
      for (std::size_t i = 0; i < col.size(); ++i) xs[i] = col[i].first;
      const VectorXd f = detail::draw_latent(k, xs, stream_seed(latent_seed, std::uint64_t(j)));
      for (std::size_t i = 0; i < col.size(); ++i) {
        d.X(col[i].second, j) = col[i].first;
        d.y(col[i].second) += f(Index(i));
      }
    }
    std::normal_distribution<double> e(0.0, std::sqrt(noise));
    for (Index i = 0; i < n; ++i) d.y(i) += e(noise_rng);
    return detail::sorted_by_first_column(d);
  }

  std::vector<double> x;
  if (kind == "classification") {
    const Index n = spec.n > 0 ? spec.n : 500;
    std::uniform_real_distribution<double> u(spec.lo, spec.hi);
    x.resize(std::size_t(n));
    for (auto& v : x) v = u(noise_rng);
    std::sort(x.begin(), x.end());
  } else {
    x = detail::linspace(spec.n > 0 ? spec.n : (kind == "quasi-periodic" ? 2000 : 1000), spec.lo, spec.hi);
  }
  const VectorXd f = detail::draw_latent(k, x, latent_seed);
  VectorXd y(f.size());
  if (kind == "classification") {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Index i = 0; i < f.size(); ++i) y(i) = u(noise_rng) < 0.5 * std::erfc(-f(i) / std::sqrt(2.0)) ? 1.0 : 0.0;
  } else if (kind == "student-t") {
    if (!(spec.df > 0.0) || !(spec.scale > 0.0)) throw ConfigError("student-t generator needs df > 0 and scale > 0");
    std::student_t_distribution<double> t(spec.df);
    for (Index i = 0; i < f.size(); ++i) y(i) = f(i) + spec.scale * t(noise_rng);
  } else {
    std::normal_distribution<double> e(0.0, std::sqrt(spec.noise >= 0.0 ? spec.noise : 0.01));
    for (Index i = 0; i < f.size(); ++i) y(i) = f(i) + e(noise_rng);
  }
  return Dataset::univariate(x, y);
}

// ---------------------------------------------------------------------------
// Holdout
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::string style = "block";  // block, random, none
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct Split {
  Dataset train, test;
};

inline Dataset take_rows(const Dataset& d, const std::vector<Index>& rows) {
  Dataset out;
  out.X.resize(Index(rows.size()), d.X.cols());
  out.y.resize(Index(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.X.row(Index(i)) = d.X.row(rows[i]);
    out.y(Index(i)) = d.y(rows[i]);
  }
  return out;
}

/// "block" holds out one contiguous run of the (sorted) rows at a seeded
/// position; "random" holds out a seeded random subset.
inline Split holdout(const Dataset& d, const SplitSpec& s) {
  if (s.style == "none") return {d, Dataset{MatrixXd(0, d.X.cols()), VectorXd(0)}};
  if (s.style != "block" && s.style != "random") throw ConfigError("unknown split style '" + s.style + "'");
  if (!(s.test_fraction > 0.0 && s.test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
  const Index n = d.size();
  const Index nt = std::max<Index>(1, Index(std::llround(s.test_fraction * double(n))));
  if (nt >= n) throw ConfigError("holdout leaves no training data");
  std::mt19937_64 rng(s.seed);
  std::vector<char> is_test(static_cast<std::size_t>(n), 0);
  if (s.style == "block") {
    const Index start = Index(rng() % std::uint64_t(n - nt + 1));
    for (Index i = start; i < start + nt; ++i) is_test[std::size_t(i)] = 1;
  } else {
    for (Index i : s2vgp::detail::draw_batch(n, nt, rng)) is_test[std::size_t(i)] = 1;
  }
  std::vector<Index> tr, te;
  for (Index i = 0; i < n; ++i) (is_test[std::size_t(i)] ? te : tr).push_back(i);
  return {take_rows(d, tr), take_rows(d, te)};
}

}  // namespace s2vgp::cli

#endif  // S2VGP_TOOLS_DATA_HPP_
