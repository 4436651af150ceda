#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "isonas/concentration.hpp"
#include "isonas/errors.hpp"
#include "isonas/isometry.hpp"
#include "isonas/scoring.hpp"
#include "isonas/search.hpp"

namespace isonas {

using Json = nlohmann::ordered_json;

inline Json to_json(const ScoreTable& t) {
  std::vector<int> reduction;
  for (bool r : t.is_reduction) reduction.push_back(r ? 1 : 0);
  return {{"scores", t.scores}, {"layer_weight", t.layer_weight}, {"is_reduction", reduction}};
}

inline ScoreTable score_table_from_json(const Json& j) {
  try {
    ScoreTable t;
    t.scores = j.at("scores").get<std::vector<std::vector<double>>>();
    t.layer_weight = j.at("layer_weight").get<std::vector<double>>();
    for (int r : j.at("is_reduction").get<std::vector<int>>()) t.is_reduction.push_back(r != 0);
    if (t.layer_weight.size() != t.depth() || t.is_reduction.size() != t.depth()) {
      throw DimensionError("score table fields differ in depth");
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed score table: ") + e.what());
  }
}

inline Json to_json(const RankedSubnet& r, std::size_t rank) {
  return {{"rank", rank}, {"choices", r.path.choices}, {"score", r.score}, {"flops", r.flops}, {"params", r.params}};
}

/// One JSON object per line, best first.
inline void write_ranked_jsonl(std::ostream& os, const std::vector<RankedSubnet>& ranked) {
  for (std::size_t i = 0; i < ranked.size(); ++i) os << to_json(ranked[i], i + 1).dump() << '\n';
}

inline std::vector<RankedSubnet> read_ranked_jsonl(std::istream& is) {
  std::vector<RankedSubnet> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      RankedSubnet r;
      r.path.choices = j.at("choices").get<std::vector<int>>();
      r.score = j.at("score").get<double>();
      r.flops = j.at("flops").get<std::uint64_t>();
      r.params = j.at("params").get<std::uint64_t>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("ranked subnet line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline Json to_json(const ConcentrationReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"N", row.filters},
                    {"p_hat", row.p_hat},
                    {"delta", row.delta},
                    {"isotonic", row.isotonic},
                    {"held_out", row.held_out}});
  Json gamma = Json::array();
  for (const auto& g : r.gamma_curve) gamma.push_back({{"gamma", g.gamma}, {"p_hat", g.p_hat}, {"mean_dev", g.mean_dev}});
  return {{"rows", rows},
          {"eps", r.eps},
          {"expectation", r.expectation},
          {"expectation_stderr", r.expectation_stderr},
          {"v_h", r.v_h},
          {"v_h2", r.v_h2},
          {"slope", r.slope},
          {"intercept", r.intercept},
          {"r_squared", r.r_squared},
          {"fitted_c", r.fitted_c},
          {"fitted_D", r.fitted_D},
          {"R", r.R},
          {"K", r.K},
          {"isotonic_residual", r.isotonic_residual},
          {"bound_dominates", r.bound_dominates},
          {"gamma_curve", gamma}};
}

/// CSV: N,p_hat,delta,R,K (one row per filter count).
inline void write_concentration_csv(std::ostream& os, const Json& report) {
  os << "N,p_hat,delta,R,K\n";
  for (const auto& row : report.at("rows"))
    os << row.at("N").get<std::size_t>() << ',' << row.at("p_hat").get<double>() << ','
       << row.at("delta").get<double>() << ',' << report.at("R").get<double>() << ',' << report.at("K").get<double>()
       << '\n';
}

inline Json to_json(const BlockIsometryResult& r) {
  return {{"module", r.module},
          {"scheme", std::string(to_string(r.scheme))},
          {"phi", r.stats.phi},
          {"phi2", r.stats.phi2},
          {"trace_var", r.stats.trace_var},
          {"width", r.stats.width},
          {"pass", r.verdict.pass},
          {"estimated", r.estimated},
          {"phi_stderr", r.phi_stderr},
          {"phi2_stderr", r.phi2_stderr}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace isonas
