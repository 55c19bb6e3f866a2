#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "fsadapt/adaptation.hpp"
#include "fsadapt/encoder.hpp"
#include "fsadapt/json_io.hpp"

namespace fsadapt::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kConfigFailure = 2, kIoFailure = 3 };

/// Everything a train or sweep run depends on. The master seed drives the
/// encoder initialization, the head initialization and the training streams.
struct ExperimentConfig {
  std::string task;
  /// Exactly one of embeddings / contexts is needed for the semantic head.
  std::string embeddings;
  std::string contexts;
  std::size_t text_dim = 32;
  std::string output;
  EncoderConfig encoder;
  FreezePolicy freeze{2, true};
  HeadConfig head;
  TrainConfig train;
  std::size_t eval_batch_size = 32;
  std::uint64_t seed = 0;

  bool operator==(const ExperimentConfig&) const = default;
};

Json to_json(const ExperimentConfig& cfg);
/// Strict parse; every problem is appended to errors.
ExperimentConfig experiment_from_json(const Json& j, std::vector<std::string>& errors);
/// Cross-field checks (head vs. embeddings, freeze depth, sizes).
void check_experiment(const ExperimentConfig& cfg, std::vector<std::string>& errors);

/// Runs one command line (args excludes the program name) and returns the
/// process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fsadapt::cli
