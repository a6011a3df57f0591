#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "cdvgm/data.hpp"
#include "cdvgm/gradcheck_suite.hpp"
#include "cdvgm/run_config.hpp"
#include "cdvgm/training.hpp"

namespace cdvgm::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3 };

// Maps library exceptions onto process exit codes.
int exit_code_for(const std::exception& e);

// Runs fn, printing any failure to err, and returns the exit code.
int guarded(const std::function<void()>& fn, std::ostream& err);

// Output files written by cmd_train inside output_dir.
inline constexpr const char* kResolvedConfig = "resolved_config.txt";
inline constexpr const char* kMetricsLog = "metrics.jsonl";
inline constexpr const char* kLossHistory = "loss_history.txt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";

struct TrainOutcome {
  run::RunConfig config;
  training::TrainResult result;
  std::vector<double> loss_history;
  std::size_t param_count = 0;
};

// Number of worker threads from CDVGM_THREADS (default 1).
std::size_t threads_from_env();

TrainOutcome cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& log);
TrainOutcome cmd_train(run::RunConfig config, std::ostream& log);

// Scores the test split with the checkpoint's stored batching; writes the
// record as JSON to output_path when non-empty.
data::Metrics cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& output_path,
                       std::ostream& log);

// Prints one line per component; returns whether all passed. A non-empty
// corrupt_op scales that op's backward rule to exercise the failure path.
bool cmd_gradcheck(suite::Scale scale, std::ostream& log, const std::string& corrupt_op = "");

// N x N Laplacian seen by `block` for the first test window (B = 1, eval mode).
void cmd_export_laplacian(const std::string& checkpoint, const std::string& dataset, std::size_t block,
                          const std::string& output_path);

void cmd_synth(std::size_t nodes, std::size_t days, std::uint64_t seed, const std::string& output_path);

// JSON line for one metrics record.
std::string record_json(const training::EpochRecord& r);

}  // namespace cdvgm::cli
