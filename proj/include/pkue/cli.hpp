#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pkue/pipeline.hpp"

namespace pkue::cli {

// Runs the command-line front end on already-split arguments (program name
// excluded). Returns the process exit code: 0 success, 1 stage failure, 2
// configuration error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
  CLI::App app{"Factual QA self-alignment pipeline", "pkue"};
  std::string config_path;
  std::string stage;
  std::string replay;
  std::string record;
  std::string out_dir;
  std::uint64_t seed = 0;

  app.add_option("--config", config_path,
                 "Pipeline configuration file (JSON)");
  auto* seed_option =
      app.add_option("--seed", seed, "Global seed override (u64)");
  app.add_option("--stage", stage,
                 "Stage to run: build-dataset | sample | judge | "
                 "build-pairs | train | evaluate | align-metric | demo")
      ->required();
  app.add_option("--replay", replay,
                 "Replay provider traffic from this cassette");
  app.add_option("--record", record,
                 "Record provider traffic to this cassette");
  app.add_option("--out", out_dir, "Output directory override");
  app.footer("Secrets come from the environment (default PKUE_API_KEY); "
             "config files never hold tokens.");

  // CLI11 consumes the vector back to front.
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    pipeline::PipelineConfig config;
    if (!config_path.empty()) config = pipeline::load_config(config_path);
    if (seed_option->count() > 0) config.seed = seed;
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (!replay.empty() && !record.empty()) {
      throw ConfigError("--replay and --record are mutually exclusive");
    }

    pipeline::StageContext ctx;
    ctx.config = config;
    if (!replay.empty()) ctx.replay = replay;
    if (!record.empty()) ctx.record = record;
    ctx.log = &out;

    try {
      return pipeline::run_stage(stage, ctx);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw StageFailureError(stage, e.what());
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "unexpected failure: " << e.what() << "\n";
    return 1;
  }
}

// The documented flag surface, kept next to the parser so the help/parity
// test can compare against a single source of truth.
inline const std::vector<std::string>& documented_flags() {
  static const std::vector<std::string> flags{"--config", "--seed", "--stage",
                                              "--replay", "--record", "--out"};
  return flags;
}

}  // namespace pkue::cli
