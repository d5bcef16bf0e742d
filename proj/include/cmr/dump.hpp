// SPDX-License-Identifier: Apache-2.0
//
// CSV exports of one example's affinity matrices and relation rankings.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "cmr/model.hpp"

namespace cmr {

/// No header; row i is entity i of the first source, column j entity j of
/// the second.
template <typename T>
void write_affinity_csv(const std::string& path, const AffinityMatrix<T>& A) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  const std::size_t rows = A.A.rows(), cols = A.A.cols();
  char buf[32];
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(A.A.at(i, j)));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

/// Header i,j,u,V,w,selected; one row per candidate in (i, j) order.
inline void write_ranking_csv(const std::string& path,
                              const std::vector<RelationCandidate>& candidates) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out << "i,j,u,V,w,selected\n";
  char buf[160];
  for (const auto& c : candidates) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g,%.9g,%d\n", c.i, c.j, c.u, c.v_importance,
                  c.w, c.rank ? 1 : 0);
    out << buf;
  }
}

/// Writes affinity_<pair>.csv for every entity pair and
/// ranking_<pair>_<source>.csv for both sides of every relational pair.
/// Returns the file names written.
template <typename T>
std::vector<std::string> dump_example(const CmrModel<T>& model, const SyntheticExample& ex,
                                      const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir + ": " + ec.message());
  ForwardTrace<T> trace;
  model.forward(ex, &trace);
  std::vector<std::string> written;
  for (const auto& A : trace.affinities) {
    const auto name = "affinity_" + A.pair.label() + ".csv";
    write_affinity_csv((fs::path(dir) / name).string(), A);
    written.push_back(name);
  }
  for (const auto& rk : trace.rankings) {
    for (bool mu : {true, false}) {
      const int source = mu ? rk.pair.mu : rk.pair.nu;
      const auto& top = mu ? rk.top_mu : rk.top_nu;
      const auto& imp = mu ? rk.importance_mu : rk.importance_nu;
      const auto rows = ranked_candidates(trace.candidates.at(source), top, imp);
      const auto name = "ranking_" + rk.pair.label() + "_" + source_name(source) + ".csv";
      write_ranking_csv((fs::path(dir) / name).string(), rows);
      written.push_back(name);
    }
  }
  return written;
}

}  // namespace cmr
