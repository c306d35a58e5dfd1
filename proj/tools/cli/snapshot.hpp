// SPDX-License-Identifier: Apache-2.0
//
// Model snapshots as JSON. Doubles are written in shortest round-trip form,
// so save followed by load reproduces every parameter bit for bit.

#ifndef S2VGP_TOOLS_SNAPSHOT_HPP_
#define S2VGP_TOOLS_SNAPSHOT_HPP_

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2vgp/errors.hpp"
#include "s2vgp/kernels.hpp"
#include "s2vgp/likelihood.hpp"
#include "s2vgp/markov_prior.hpp"
#include "s2vgp/variational.hpp"

namespace s2vgp::cli {

using nlohmann::json;

inline constexpr const char* kSnapshotFormat = "s2vgp-snapshot";
inline constexpr int kSnapshotVersion = 1;

inline json likelihood_to_json(const Likelihood& l) {
  json j{{"kind", likelihood_name(l.kind)}};
  if (l.kind == LikelihoodKind::kGaussian) j["variance"] = l.variance;
  if (l.kind == LikelihoodKind::kStudentT) {
    j["df"] = l.df;
    j["scale"] = l.scale;
  }
  if (!l.is_gaussian()) j["order"] = l.order;
  return j;
}

/// Reads {"kind": ..., "variance"|"df"|"scale"|"order": ...}; unknown keys
/// are rejected.
inline Likelihood likelihood_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("likelihood must be an object");
  for (const auto& [key, v] : j.items())
    if (key != "kind" && key != "variance" && key != "df" && key != "scale" && key != "order")
      throw ConfigError("unknown likelihood field '" + key + "'");
  Likelihood l;
  switch (parse_likelihood_kind(j.at("kind").get<std::string>())) {
    case LikelihoodKind::kGaussian: l = Likelihood::gaussian(j.value("variance", 1.0)); break;
    case LikelihoodKind::kBernoulliProbit: l = Likelihood::bernoulli_probit(); break;
    case LikelihoodKind::kBernoulliLogit: l = Likelihood::bernoulli_logit(); break;
    case LikelihoodKind::kStudentT: l = Likelihood::student_t(j.value("df", 1.0), j.value("scale", 1.0)); break;
  }
  if (j.contains("order")) l.order = j.at("order").get<int>();
  l.validate();
  return l;
}

inline json model_to_json(const MeanFieldModel& m) {
  json comps = json::array();
  for (const auto& c : m.components) {
    json bands = json::array();
    for (Index k = 0; k <= c.q.Lq.bandwidth(); ++k) {
      std::vector<double> row(static_cast<std::size_t>(c.q.size()));
      for (Index j = 0; j < c.q.size(); ++j) row[std::size_t(j)] = c.q.Lq.bands()(k, j);
      bands.push_back(row);
    }
    comps.push_back({{"kernel", kernel_to_string(c.prior.kernel)},
                     {"z", c.prior.z},
                     {"mu", std::vector<double>(c.q.mu.data(), c.q.mu.data() + c.q.size())},
                     {"Lq", {{"n", c.q.size()}, {"r", c.q.Lq.bandwidth()}, {"bands", bands}}}});
  }
  return {{"format", kSnapshotFormat}, {"version", kSnapshotVersion}, {"likelihood", likelihood_to_json(m.lik)},
          {"components", comps}};
}

inline MeanFieldModel model_from_json(const json& j) {
  if (!j.is_object() || j.value("format", std::string()) != kSnapshotFormat)
    throw ConfigError("not an s2vgp snapshot");
  if (j.value("version", 0) != kSnapshotVersion)
    throw ConfigError("unsupported snapshot version " + std::to_string(j.value("version", 0)));
  MeanFieldModel m;
  m.lik = likelihood_from_json(j.at("likelihood"));
  const json& comps = j.at("components");
  if (!comps.is_array() || comps.empty()) throw ConfigError("snapshot has no components");
  for (const auto& c : comps) {
    const SsmKernel k = parse_kernel(c.at("kernel").get<std::string>());
    MarkovPrior prior = build_prior(k, c.at("z").get<std::vector<double>>());
    const auto mu = c.at("mu").get<std::vector<double>>();
    const json& lq = c.at("Lq");
    const Index n = lq.at("n").get<Index>(), r = lq.at("r").get<Index>();
    if (n != prior.size() || Index(mu.size()) != n || r != state_bandwidth(k.state_dim()))
      throw ShapeMismatch("snapshot posterior does not match its kernel and inducing inputs");
    InducingPosterior q{Eigen::Map<const VectorXd>(mu.data(), n), BandedMatrix(n, r), k.state_dim()};
    const json& bands = lq.at("bands");
    if (!bands.is_array() || Index(bands.size()) != r + 1) throw ShapeMismatch("snapshot Lq has wrong band count");
    for (Index b = 0; b <= r; ++b) {
      const auto row = bands.at(std::size_t(b)).get<std::vector<double>>();
      if (Index(row.size()) != n) throw ShapeMismatch("snapshot Lq band has wrong length");
      for (Index col = 0; col < n; ++col) q.Lq.bands()(b, col) = row[std::size_t(col)];
    }
    q.validate();
    m.components.push_back({std::move(prior), std::move(q)});
  }
  return m;
}

inline void save_snapshot(const std::string& path, const MeanFieldModel& m) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << model_to_json(m).dump(1) << '\n';
}

inline MeanFieldModel load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  try {
    return model_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

}  // namespace s2vgp::cli

#endif  // S2VGP_TOOLS_SNAPSHOT_HPP_
