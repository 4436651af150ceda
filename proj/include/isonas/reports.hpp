#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "isonas/serialize.hpp"

namespace isonas {

struct ReportManifest {
  std::vector<std::string> files;     // relative to the run directory
  std::vector<std::string> warnings;  // one notice per skipped report
};

namespace detail {

inline std::string path_string(const Json& choices) {
  std::string s;
  for (const auto& c : choices) {
    if (!s.empty()) s += '-';
    s += std::to_string(c.get<int>());
  }
  return s;
}

}  // namespace detail

/// Plot-ready CSVs from whatever stage outputs exist in `run_dir`; writes
/// reports/manifest.json. Missing inputs skip their report with a warning.
inline ReportManifest emit_reports(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  ReportManifest m;
  const fs::path out = run_dir / "reports";
  fs::create_directories(out);
  auto emit = [&](const char* input, const char* name, auto&& body) {
    const fs::path in = run_dir / input;
    if (!fs::exists(in)) {
      m.warnings.push_back(std::string(name) + " skipped: " + input + " not found");
      return;
    }
    std::ostringstream os;
    try {
      body(os, in);
    } catch (const std::exception& e) {
      m.warnings.push_back(std::string(name) + " skipped: " + e.what());
      return;
    }
    write_text(out / name, os.str());
    m.files.push_back((fs::path("reports") / name).generic_string());
  };

  emit("isometry.json", "isometry.csv", [](std::ostream& os, const fs::path& in) {
    os << "module,scheme,phi,phi2,trace_var,width,pass\n";
    for (const auto& r : read_json(in).at("results"))
      os << r.at("module").get<std::string>() << ',' << r.at("scheme").get<std::string>() << ','
         << r.at("phi").get<double>() << ',' << r.at("phi2").get<double>() << ',' << r.at("trace_var").get<double>()
         << ',' << r.at("width").get<std::size_t>() << ',' << (r.at("pass").get<bool>() ? 1 : 0) << '\n';
  });
  emit("scores.json", "score_heatmap.csv", [](std::ostream& os, const fs::path& in) {
    const ScoreTable t = score_table_from_json(read_json(in));
    os << "layer,candidate,score,layer_weight,is_reduction\n";
    for (std::size_t l = 0; l < t.depth(); ++l)
      for (std::size_t c = 0; c < t.scores[l].size(); ++c)
        os << l << ',' << c << ',' << t.scores[l][c] << ',' << t.layer_weight[l] << ','
           << (t.is_reduction[l] ? 1 : 0) << '\n';
  });
  emit("theorem.json", "concentration.csv",
       [](std::ostream& os, const fs::path& in) { write_concentration_csv(os, read_json(in)); });
  emit("retrain.json", "rank_vs_accuracy.csv", [](std::ostream& os, const fs::path& in) {
    os << "rank,path,score,val_accuracy,kind\n";
    const Json j = read_json(in);
    for (const char* kind : {"ranked", "baselines"}) {
      if (!j.contains(kind)) continue;
      for (const auto& r : j.at(kind))
        os << r.at("rank").get<long long>() << ',' << detail::path_string(r.at("choices")) << ','
           << r.at("score").get<double>() << ',' << r.at("val_accuracy").get<double>() << ','
           << (std::string(kind) == "ranked" ? "ranked" : "random") << '\n';
    }
  });

  if (m.files.empty()) m.warnings.push_back("no stage outputs found in " + run_dir.string());
  write_json(out / "manifest.json", Json{{"files", m.files}, {"warnings", m.warnings}});
  return m;
}

}  // namespace isonas
