#pragma once

// Subcommands of the bayesbeat tool. Each returns a process exit code.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bayesbeat/inference.hpp"
#include "bayesbeat/network.hpp"
#include "bayesbeat/synth.hpp"
#include "bayesbeat/trainer.hpp"

namespace bayesbeat::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Raised for invalid flags or configuration values (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command may need, read from one flat key=value file whose
/// keys are grouped by prefix (synth., split., net., train., infer.) plus a
/// single top-level `seed` that drives all randomness.
struct RunConfig {
  std::uint64_t seed = 1;
  SynthSpec synth;
  std::array<double, 3> split{0.70, 0.15, 0.15};
  NetworkConfig net = NetworkConfig::bayesbeat();
  TrainConfig train;
  std::size_t infer_draws = 64;
  SamplingMode infer_mode = SamplingMode::weight_sample;
  ThresholdPolicy policy;
  int threads = 0;  // 0: OpenMP default

  /// Applies file keys; throws UsageError on unknown keys or bad values.
  void apply(std::map<std::string, std::string> kv);
  /// Propagates the seed and validates every section.
  void finalize();
  std::string to_text() const;
};

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::size_t> mc_draws;
  std::optional<std::string> threshold;
  std::optional<std::string> mode;
};

/// File (if any) then flag overrides, then finalize().
RunConfig resolve_config(const Overrides& o);

int cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
int cmd_train(const RunConfig& cfg, const std::filesystem::path& train_path, const std::filesystem::path& val_path,
              const std::filesystem::path& out_checkpoint, const std::optional<std::filesystem::path>& run_log,
              std::ostream& log);
int cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
             const std::vector<std::optional<double>>& thresholds, const std::filesystem::path& out_json,
             const std::filesystem::path& out_csv, std::ostream& log);
int cmd_predict(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                const std::filesystem::path& out, std::ostream& log);
int cmd_export_features(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& data, const std::filesystem::path& out, std::ostream& log);

/// "none,0.05,0.01" -> {nullopt, 0.05, 0.01}.
std::vector<std::optional<double>> parse_threshold_list(const std::string& text);

/// `<subject>:<record index>`.
std::string segment_id(const Segment& s, std::size_t index);

/// Writes `content` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Runs `body`, mapping exceptions to exit codes and messages on `log`.
int run_guarded(std::ostream& log, const std::function<int()>& body);

}  // namespace bayesbeat::cli
