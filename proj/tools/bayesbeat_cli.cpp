#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace bayesbeat::cli;

namespace {

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration file (key=value)");
  cmd->add_option("--seed", o.seed, "Seed for all randomness");
  cmd->add_option("--threads", o.threads, "Worker threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--mc-draws", o.mc_draws, "Monte-Carlo draws at inference")->check(CLI::PositiveNumber);
  cmd->add_option("--threshold", o.threshold, "Uncertainty threshold or 'none'");
  cmd->add_option("--mode", o.mode, "weight-sample or local-reparam");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational 1-D CNN for AF detection in PPG with uncertainty-based abstention"};
  app.require_subcommand(1);
  Overrides o;
  std::string out, train_path, val_path, checkpoint, data, thresholds = "none,0.05,0.01", out_csv;
  std::optional<std::string> run_log;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and its subject split");
  add_common(gen, o);
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a network and save the best checkpoint");
  add_common(tr, o);
  tr->add_option("--train", train_path, "Training segment file")->required();
  tr->add_option("--val", val_path, "Validation segment file")->required();
  tr->add_option("--out", out, "Checkpoint to write")->required();
  tr->add_option("--log", run_log, "JSON-lines run log");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint across uncertainty thresholds");
  add_common(ev, o);
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--thresholds", thresholds, "Comma list, descending, e.g. none,0.05,0.01");
  ev->add_option("--out", out, "JSON-lines report file")->required();
  ev->add_option("--csv", out_csv, "Sweep table (CSV)")->required();

  auto* pr = app.add_subcommand("predict", "Write one JSON line per segment");
  add_common(pr, o);
  pr->add_option("--checkpoint", checkpoint)->required();
  pr->add_option("--data", data)->required();
  pr->add_option("--out", out)->required();

  auto* ex = app.add_subcommand("export-features", "Write penultimate-layer features as CSV");
  add_common(ex, o);
  ex->add_option("--checkpoint", checkpoint)->required();
  ex->add_option("--data", data)->required();
  ex->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  return run_guarded(std::cerr, [&]() -> int {
    const RunConfig cfg = resolve_config(o);
    if (gen->parsed()) return cmd_gen_data(cfg, out, std::cerr);
    if (tr->parsed()) {
      std::optional<std::filesystem::path> log_path;
      if (run_log) log_path = *run_log;
      return cmd_train(cfg, train_path, val_path, out, log_path, std::cerr);
    }
    if (ev->parsed()) return cmd_eval(cfg, checkpoint, data, parse_threshold_list(thresholds), out, out_csv, std::cerr);
    if (pr->parsed()) return cmd_predict(cfg, checkpoint, data, out, std::cerr);
    return cmd_export_features(cfg, checkpoint, data, out, std::cerr);
  });
}
