// Command-line front end: one subcommand per pipeline stage plus `run`.
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "isonas/isonas.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

void configure_logging() {
  const char* level = std::getenv("ISONAS_LOG");
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> stage;
};

isonas::ExperimentConfig resolve(const Options& o) {
  isonas::ExperimentConfig cfg = isonas::load_config(o.config);
  if (o.seed) isonas::set_seed(cfg, *o.seed);
  if (o.out) cfg.output_dir = *o.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Orthogonal-init supernet search with BN-indicator scoring"};
  app.require_subcommand(1);
  Options opt;
  std::string command;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "master seed (overrides the config)");
    sub->add_option("--out", opt.out, "output directory (overrides the config)");
    sub->callback([&command, sub] { command = sub->get_name(); });
    return sub;
  };
  for (const auto& name : isonas::stage_names()) add_common(app.add_subcommand(name, "run the " + name + " stage"));
  auto* run = add_common(app.add_subcommand("run", "run the configured stages in order"));
  run->add_option("--stage", opt.stage, "restart the pipeline at this stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const isonas::LogSink log = [](std::string_view msg) { spdlog::info("{}", msg); };
  try {
    const isonas::ExperimentConfig cfg = resolve(opt);
    if (command == "run") {
      isonas::run_pipeline(cfg, opt.stage, log);
    } else {
      isonas::run_stage(cfg, command, log);
    }
    spdlog::info("outputs in {}", cfg.output_dir);
    return 0;
  } catch (const isonas::StageError& e) {
    spdlog::error("{}", e.what());
    return e.config_error ? kExitConfig : kExitStage;
  } catch (const isonas::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitStage;
  }
}
