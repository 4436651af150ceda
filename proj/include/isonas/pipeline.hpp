#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "isonas/checkpoint.hpp"
#include "isonas/concentration.hpp"
#include "isonas/config.hpp"
#include "isonas/isometry.hpp"
#include "isonas/meanfield.hpp"
#include "isonas/reports.hpp"
#include "isonas/scoring.hpp"
#include "isonas/search.hpp"
#include "isonas/serialize.hpp"
#include "isonas/supernet.hpp"
#include "isonas/trainer.hpp"

namespace isonas {

/// A stage failed; `config_error` marks failures caused by the configuration.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, bool config_error)
      : Error("stage '" + stage + "' failed: " + what), stage(std::move(stage)), config_error(config_error) {}
  std::string stage;
  bool config_error;
};

using LogSink = std::function<void(std::string_view)>;

/// Per-stage RNG streams derived from the master seed.
enum class SeedStream : std::uint64_t { init = 1, data = 2, stream = 3, train = 4, search = 5, baselines = 6, retrain = 7 };

inline std::uint64_t stage_seed(const ExperimentConfig& c, SeedStream s) {
  return derive_seed(c.seed, static_cast<std::uint64_t>(s));
}

namespace detail {

struct StageContext {
  const ExperimentConfig& cfg;
  std::filesystem::path dir;
  const LogSink& log;
  std::vector<std::string> artifacts;

  void note(const std::string& msg) const {
    if (log) log(msg);
  }
  std::filesystem::path artifact(const std::string& rel) {
    artifacts.push_back(rel);
    const auto p = dir / rel;
    std::filesystem::create_directories(p.parent_path());
    return p;
  }
  std::filesystem::path input(const std::string& rel) const {
    const auto p = dir / rel;
    if (!std::filesystem::exists(p)) {
      throw Error("missing input " + p.string() + "; run the stage that produces it first");
    }
    return p;
  }
};

inline SearchSpace space_from_run(const StageContext& ctx) {
  const Json g = read_json(ctx.input("space.json"));
  return make_search_space(ctx.cfg.space, g.at("input_channels").get<std::size_t>(),
                           g.at("input_size").get<std::size_t>(), g.at("num_classes").get<std::size_t>());
}

inline SupernetInit supernet_init(const ExperimentConfig& c) {
  SupernetInit init;
  init.block.scheme = c.init.scheme;
  init.block.v_star = c.init.v_star;
  init.block.gaussian_weight_variance = c.init.gaussian_weight_variance;
  init.block.seed = stage_seed(c, SeedStream::init);
  init.padding = c.init.padding;
  init.head_gain = c.init.head_gain;
  return init;
}

inline Supernet load_trained_supernet(const StageContext& ctx) {
  Supernet net = build_supernet(space_from_run(ctx), supernet_init(ctx.cfg));
  restore_tensors(net, read_checkpoint(ctx.input("supernet.ckpt")));
  return net;
}

inline DatasetStream make_stream(const Dataset& data, std::size_t batch, std::uint64_t seed, const DatasetConfig& d) {
  return DatasetStream(data, batch, seed, Augment{d.random_crop, d.crop_padding, d.horizontal_flip});
}

inline void stage_isometry(StageContext& ctx) {
  const auto& c = ctx.cfg;
  // Candidates come from the configured space at the isometry width and input side.
  SpaceConfig sc = c.space;
  sc.channels = c.isometry.width;
  std::vector<BlockTemplate> templates;
  const auto space = make_search_space(sc, c.isometry.width, c.isometry.spatial, 2);
  for (const auto& slot : space.layers)
    for (const auto& t : slot.candidates)
      if (std::find(templates.begin(), templates.end(), t) == templates.end()) templates.push_back(t);
  Json results = Json::array();
  std::vector<SpectrumRow> rows;
  for (const auto& r : analyze_templates(templates, c.isometry)) {
    ctx.note(std::string(to_string(r.scheme)) + " " + r.module + ": phi " + std::to_string(r.stats.phi) +
             " trace_var " + std::to_string(r.stats.trace_var) + (r.verdict.pass ? " pass" : " fail"));
    results.push_back(to_json(r));
    rows.push_back({std::string(to_string(r.scheme)) + ":" + r.module, r.stats, r.verdict.pass});
  }
  const CriticalPoint cp = critical_point(Activation::tanh, c.isometry.v_star);
  write_json(ctx.artifact("isometry.json"),
             Json{{"width", c.isometry.width},
                  {"spatial", c.isometry.spatial},
                  {"critical_point",
                   {{"v_star", cp.v_star}, {"gain", cp.gain}, {"bias_variance", cp.bias_variance},
                    {"p_linear", estimate_p_linear(Activation::tanh, cp.v_star)}}},
                  {"results", results}});
  std::ostringstream spectrum, phase;
  write_spectrum_csv(spectrum, rows);
  write_text(ctx.artifact("spectrum.csv"), spectrum.str());
  std::vector<double> vw, vb;
  for (int i = 1; i <= 20; ++i) vw.push_back(0.2 * i);
  for (int i = 0; i <= 10; ++i) vb.push_back(0.01 * i);
  write_phase_diagram_csv(phase, Activation::tanh, vw, vb);
  write_text(ctx.artifact("phase_diagram.csv"), phase.str());
}

inline void stage_train(StageContext& ctx) {
  const auto& c = ctx.cfg;
  auto [train, val] = load_dataset(c.dataset, stage_seed(c, SeedStream::data));
  const auto& s = train.images.shape();
  if (s.height != s.width) throw ConfigError("images must be square");
  const SearchSpace space = make_search_space(c.space, s.channels, s.height, train.num_classes);
  write_json(ctx.artifact("space.json"), Json{{"input_channels", s.channels},
                                              {"input_size", s.height},
                                              {"num_classes", train.num_classes},
                                              {"space_size", space.size()}});
  Supernet net = build_supernet(space, supernet_init(c));
  const std::uint64_t hash_before = frozen_weight_hash(net);
  const DatasetStream stream = make_stream(train, c.train.batch, stage_seed(c, SeedStream::stream), c.dataset);
  TrainConfig tc;
  tc.epochs = c.train.epochs;
  tc.sgd = c.train.sgd;
  tc.seed = stage_seed(c, SeedStream::train);
  tc.layer_indicators = c.train.layer_indicators;
  std::ostringstream log;
  log << "step,path,loss,lr\n";
  const TrainMetrics metrics = train_indicators(net, stream, tc, [&](const StepRecord& r) {
    log << r.step << ',' << r.path << ',' << r.loss << ',' << r.lr << '\n';
  });
  const std::uint64_t hash_after = frozen_weight_hash(net);
  ctx.note("trained " + std::to_string(metrics.rounds) + " rounds over " + std::to_string(space.size()) + " subnets");
  write_checkpoint(ctx.artifact("supernet.ckpt"), collect_tensors(net));
  write_text(ctx.artifact("train_log.csv"), log.str());
  write_json(ctx.artifact("train_metrics.json"), Json{{"rounds", metrics.rounds},
                                                      {"layer_path_steps", metrics.layer_path_steps},
                                                      {"selection_counts", metrics.selection_counts},
                                                      {"frozen_hash_before", hash_before},
                                                      {"frozen_hash_after", hash_after}});
}

inline void stage_score(StageContext& ctx) {
  const Supernet net = load_trained_supernet(ctx);
  write_json(ctx.artifact("scores.json"), to_json(compute_scores(net)));
}

inline void stage_search(StageContext& ctx) {
  const auto& c = ctx.cfg;
  const ScoreTable table = score_table_from_json(read_json(ctx.input("scores.json")));
  const SearchSpace space = space_from_run(ctx);
  Rng rng(stage_seed(c, SeedStream::search));
  const auto ranked = search_topk(table, space, c.search.constraint, c.search.top_k, c.search.strategy, rng,
                                  c.search.evolution);
  std::ostringstream os;
  write_ranked_jsonl(os, ranked);
  write_text(ctx.artifact("ranked.jsonl"), os.str());
  ctx.note("best subnet " + to_string(ranked.front().path) + " score " + std::to_string(ranked.front().score));
}

inline void stage_retrain(StageContext& ctx) {
  const auto& c = ctx.cfg;
  std::istringstream ranked_text(read_text(ctx.input("ranked.jsonl")));
  const auto ranked = read_ranked_jsonl(ranked_text);
  if (ranked.empty()) throw Error("ranked.jsonl lists no subnets");
  const Supernet net = load_trained_supernet(ctx);
  const ScoreTable table = compute_scores(net);
  auto [train, val] = load_dataset(c.dataset, stage_seed(c, SeedStream::data));
  const DatasetStream stream = make_stream(train, c.retrain.batch, stage_seed(c, SeedStream::retrain), c.dataset);
  RetrainConfig rc;
  rc.epochs = c.retrain.epochs;
  rc.sgd = c.retrain.sgd;
  rc.seed = stage_seed(c, SeedStream::retrain);

  auto run = [&](const PathSample& path, double score, long long rank, const std::string& ckpt) {
    const RetrainResult r = retrain_subnet(net, path, stream, val, rc);
    write_checkpoint(ctx.artifact(ckpt), collect_tensors(r.subnet));
    ctx.note("retrained " + to_string(path) + ": val accuracy " + std::to_string(r.val_accuracy));
    return Json{{"rank", rank},
                {"choices", path.choices},
                {"score", score},
                {"val_accuracy", r.val_accuracy},
                {"train_loss", r.train_loss},
                {"checkpoint", ckpt}};
  };
  Json out{{"ranked", Json::array()}, {"baselines", Json::array()}};
  for (std::size_t i = 0; i < ranked.size(); ++i)
    out["ranked"].push_back(run(ranked[i].path, ranked[i].score, static_cast<long long>(i + 1),
                                "subnets/rank_" + std::to_string(i + 1) + ".ckpt"));
  Rng rng(stage_seed(c, SeedStream::baselines));
  for (std::size_t b = 0; b < c.retrain.random_baselines; ++b) {
    PathSample p;
    for (const auto& slot : net.space.layers) p.choices.push_back(static_cast<int>(rng.below(slot.candidates.size())));
    out["baselines"].push_back(run(p, path_score(table, p), 0, "subnets/random_" + std::to_string(b + 1) + ".ckpt"));
  }
  write_json(ctx.artifact("retrain.json"), out);
}

inline void stage_theorem(StageContext& ctx) {
  const ConcentrationReport rep = deviation_experiment(ctx.cfg.theorem);
  const Json j = to_json(rep);
  write_json(ctx.artifact("theorem.json"), j);
  std::ostringstream os;
  write_concentration_csv(os, j);
  write_text(ctx.artifact("concentration.csv"), os.str());
  ctx.note("concentration slope " + std::to_string(rep.slope) + " R^2 " + std::to_string(rep.r_squared) +
           (rep.bound_dominates ? ", bound dominates" : ", bound does not dominate on held-out N"));
}

inline void stage_report(StageContext& ctx) {
  const ReportManifest m = emit_reports(ctx.dir);
  for (const auto& w : m.warnings) ctx.note("warning: " + w);
  ctx.artifacts.insert(ctx.artifacts.end(), m.files.begin(), m.files.end());
  ctx.artifacts.push_back("reports/manifest.json");
}

inline void record_stage(const std::filesystem::path& dir, const std::string& stage, const Json& entry) {
  const auto path = dir / "manifest.json";
  Json m = std::filesystem::exists(path) ? read_json(path) : Json{{"stages", Json::object()}};
  m["stages"][stage] = entry;
  if (std::filesystem::exists(dir / "space.json")) m["space_size"] = read_json(dir / "space.json").at("space_size");
  write_json(path, m);
}

}  // namespace detail

/// Runs one stage in cfg.output_dir, writing the resolved config and updating manifest.json.
inline void run_stage(const ExperimentConfig& cfg, std::string_view stage, const LogSink& log = {}) {
  namespace fs = std::filesystem;
  const std::string name(stage);
  if (std::find(stage_names().begin(), stage_names().end(), name) == stage_names().end()) {
    throw ConfigError("unknown stage '" + name + "'");
  }
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_json(dir / "config.resolved.json", config_to_json(cfg));
  detail::StageContext ctx{cfg, dir, log, {}};
  ctx.note("stage " + name);
  try {
    if (name == "analyze-isometry") detail::stage_isometry(ctx);
    else if (name == "train-supernet") detail::stage_train(ctx);
    else if (name == "score") detail::stage_score(ctx);
    else if (name == "search") detail::stage_search(ctx);
    else if (name == "retrain") detail::stage_retrain(ctx);
    else if (name == "verify-theorem") detail::stage_theorem(ctx);
    else detail::stage_report(ctx);
  } catch (const std::exception& e) {
    const bool config = dynamic_cast<const ConfigError*>(&e) != nullptr;
    detail::record_stage(dir, name, Json{{"status", "failed"}, {"error", e.what()}, {"artifacts", ctx.artifacts}});
    throw StageError(name, e.what(), config);
  }
  detail::record_stage(dir, name, Json{{"status", "ok"}, {"artifacts", ctx.artifacts}});
}

/// Runs cfg.stages in order, optionally starting at `from` (earlier outputs are reused).
inline void run_pipeline(const ExperimentConfig& cfg, std::optional<std::string> from = {}, const LogSink& log = {}) {
  auto begin = cfg.stages.begin();
  if (from) {
    begin = std::find(cfg.stages.begin(), cfg.stages.end(), *from);
    if (begin == cfg.stages.end()) throw ConfigError("stage '" + *from + "' is not in the configured stage list");
  }
  for (auto it = begin; it != cfg.stages.end(); ++it) run_stage(cfg, *it, log);
}

}  // namespace isonas
