#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "isonas/isonas.hpp"

using namespace isonas;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("isonas_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ISONAS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig tiny_config(const fs::path& out, std::size_t depth = 1, std::size_t candidates = 1) {
  ExperimentConfig c = parse_config(R"({
    "seed": 5,
    "dataset": {"source": "blobs", "train_count": 48, "val_count": 16, "classes": 2, "size": 6, "noise": 0.5},
    "train": {"epochs": 1, "batch": 16},
    "search": {"top_k": 1},
    "retrain": {"epochs": 1, "batch": 16}
  })");
  c.output_dir = out.string();
  c.space.depth = depth;
  c.space.candidates = candidates;
  c.space.channels = 4;
  return c;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  try {
    parse_config(R"({"space": {"depht": 3}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("depht"), std::string::npos);
  }
  EXPECT_THROW(parse_config(R"({"stages": ["train-supernet", "fly"]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"space": {"depth": "four"}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_THROW(parse_config(R"({"search": {"strategy": "greedy"}})"), ConfigError);
}

TEST(Config, DefaultsAndRoundTrip) {
  const ExperimentConfig d = parse_config("{}");
  EXPECT_EQ(d.space.depth, 4u);
  EXPECT_EQ(d.space.candidates, 3u);
  EXPECT_DOUBLE_EQ(d.init.v_star, 0.025);
  EXPECT_EQ(d.init.padding, Padding::circular);
  ExperimentConfig c = parse_config(R"({"seed": 9, "search": {"strategy": "evolutionary", "max_flops": 1000},
                                        "space": {"templates": [{"kind": "shuffle", "kernel": 5}]}})");
  EXPECT_EQ(c.search.constraint.max_flops, 1000u);
  const ExperimentConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(back, c);
  set_seed(c, 10);
  EXPECT_NE(c.theorem.seed, back.theorem.seed);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(ISONAS_CONFIG_DIR)) {
    if (entry.path().extension() == ".json") {
      EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
    }
  }
}

TEST(Checkpoint, FileRoundTripPreservesBits) {
  const fs::path dir = fresh_dir("ckpt");
  const TensorMap t{{"a.weight", {1.0, -0.0, 1e-300, 3.5}}, {"b.bias", {}}};
  write_checkpoint(dir / "x.ckpt", t);
  const TensorMap back = read_checkpoint(dir / "x.ckpt");
  EXPECT_EQ(back, t);
  EXPECT_TRUE(std::signbit(back.at("a.weight")[1]));
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), ConfigError);
}

TEST(Dataset, IdxFilesLoadAsNormalizedImages) {
  const fs::path dir = fresh_dir("idx");
  std::vector<unsigned char> pixels(3 * 4 * 4);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<unsigned char>(i * 5);
  write_text(dir / "img.idx", std::string(reinterpret_cast<const char*>(encode_idx_images(3, 4, 4, pixels).data()), 16 + pixels.size()));
  const auto labels = encode_idx_labels({0, 2, 1});
  write_text(dir / "lbl.idx", std::string(labels.begin(), labels.end()));
  const Dataset d = load_idx(dir / "img.idx", dir / "lbl.idx");
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.num_classes, 3u);
  double mean = 0.0;
  for (double x : d.images.data()) mean += x;
  EXPECT_NEAR(mean / static_cast<double>(d.images.data().size()), 0.0, 1e-12);
  const auto short_labels = encode_idx_labels({0, 2});
  write_text(dir / "short.idx", std::string(short_labels.begin(), short_labels.end()));
  EXPECT_THROW(load_idx(dir / "img.idx", dir / "short.idx"), ParseError);
}

TEST(Reports, EmptyRunDirectoryYieldsWarningsOnly) {
  const fs::path dir = fresh_dir("empty_reports");
  const ReportManifest m = emit_reports(dir);
  EXPECT_TRUE(m.files.empty());
  EXPECT_FALSE(m.warnings.empty());
  EXPECT_TRUE(fs::exists(dir / "reports" / "manifest.json"));
}

TEST(Pipeline, SingleSubnetSpaceRunsEndToEnd) {
  const fs::path dir = fresh_dir("single");
  const ExperimentConfig c = tiny_config(dir);
  run_pipeline(c);
  for (const char* f : {"config.resolved.json", "space.json", "supernet.ckpt", "train_log.csv", "scores.json",
                        "ranked.jsonl", "retrain.json", "subnets/rank_1.ckpt", "reports/score_heatmap.csv",
                        "reports/rank_vs_accuracy.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const Json m = read_json(dir / "manifest.json");
  EXPECT_EQ(m.at("space_size").get<int>(), 1);
  EXPECT_EQ(m.at("stages").at("retrain").at("status").get<std::string>(), "ok");
  const Json metrics = read_json(dir / "train_metrics.json");
  EXPECT_EQ(metrics.at("frozen_hash_before"), metrics.at("frozen_hash_after"));
  EXPECT_EQ(first_line(dir / "train_log.csv"), "step,path,loss,lr");
  EXPECT_EQ(first_line(dir / "reports/score_heatmap.csv"), "layer,candidate,score,layer_weight,is_reduction");
  EXPECT_EQ(first_line(dir / "reports/rank_vs_accuracy.csv"), "rank,path,score,val_accuracy,kind");
}

TEST(Pipeline, SameSeedGivesByteIdenticalScores) {
  const fs::path a = fresh_dir("seed_a"), b = fresh_dir("seed_b");
  for (const auto& dir : {a, b}) {
    ExperimentConfig c = tiny_config(dir, 2, 2);
    c.stages = {"train-supernet", "score", "search"};
    run_pipeline(c);
  }
  EXPECT_EQ(read_text(a / "scores.json"), read_text(b / "scores.json"));
  EXPECT_EQ(read_text(a / "ranked.jsonl"), read_text(b / "ranked.jsonl"));
  EXPECT_EQ(read_text(a / "supernet.ckpt"), read_text(b / "supernet.ckpt"));
}

TEST(Pipeline, MissingInputsFailTheStage) {
  const fs::path dir = fresh_dir("missing");
  const ExperimentConfig c = tiny_config(dir);
  try {
    run_stage(c, "search");
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage, "search");
    EXPECT_FALSE(e.config_error);
  }
  EXPECT_EQ(read_json(dir / "manifest.json").at("stages").at("search").at("status").get<std::string>(), "failed");
  EXPECT_THROW(run_pipeline(c, std::string("retrain-all")), ConfigError);
}

TEST(Pipeline, TheoremAndIsometryStagesWriteTheirTables) {
  const fs::path dir = fresh_dir("theory");
  ExperimentConfig c = tiny_config(dir);
  c.stages = {"analyze-isometry", "verify-theorem", "report"};
  c.space.candidates = 2;
  c.isometry.width = 4;
  c.isometry.spatial = 6;
  c.theorem.n = 5;
  c.theorem.d = 1;
  c.theorem.filter_counts = {4, 8, 16};
  c.theorem.trials = 100;
  c.theorem.calibration_trials = 100;
  c.theorem.expectation_samples = 20000;
  c.theorem.gamma_grid = {1.0};
  run_pipeline(c);
  EXPECT_EQ(first_line(dir / "concentration.csv"), "N,p_hat,delta,R,K");
  EXPECT_EQ(first_line(dir / "reports/concentration.csv"), "N,p_hat,delta,R,K");
  EXPECT_EQ(first_line(dir / "reports/isometry.csv"), "module,scheme,phi,phi2,trace_var,width,pass");
  EXPECT_TRUE(fs::exists(dir / "phase_diagram.csv"));
  EXPECT_TRUE(fs::exists(dir / "spectrum.csv"));
}

TEST(Cli, ExitCodesDistinguishSuccessConfigAndStageFailures) {
  const fs::path dir = fresh_dir("cli");
  write_text(dir / "good.json", R"({"space": {"depth": 1, "candidates": 1, "channels": 4},
    "dataset": {"train_count": 32, "val_count": 8, "classes": 2, "size": 6},
    "train": {"epochs": 1, "batch": 16}, "search": {"top_k": 1}})");
  write_text(dir / "bad.json", R"({"space": {"depth": 1, "colour": "red"}})");
  const std::string out = " --out " + (dir / "run").string();
  EXPECT_EQ(run_cli("train-supernet --config " + (dir / "good.json").string() + out), 0);
  EXPECT_EQ(run_cli("score --config " + (dir / "good.json").string() + out), 0);
  EXPECT_EQ(run_cli("score --config " + (dir / "bad.json").string() + out), 2);
  EXPECT_EQ(run_cli("score --config " + (dir / "nope.json").string() + out), 2);
  EXPECT_EQ(run_cli("retrain --config " + (dir / "good.json").string() + " --out " + (dir / "empty").string()), 3);
  EXPECT_EQ(run_cli("run --stage search --config " + (dir / "good.json").string() + out), 0);
}
