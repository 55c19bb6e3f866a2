#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fsadapt/adaptation.hpp"
#include "fsadapt/encoder.hpp"
#include "fsadapt/metrics.hpp"
#include "fsadapt/semantic.hpp"
#include "fsadapt/taskgen.hpp"

namespace fsadapt {

/// One freeze depth of a sweep. "linear" freezes every stage and the patch
/// embedding, leaving only the head trainable.
struct SweepPoint {
  std::string label;
  FreezePolicy policy;
};

/// Parses "0,1,2,linear". Throws ConfigError for malformed entries or N above
/// the number of stages.
std::vector<SweepPoint> parse_sweep_points(std::string_view list, std::size_t stages);

struct SweepRow {
  std::string label;
  std::size_t frozen_params = 0;
  std::size_t trainable_params = 0;
  double mauc = 0.0;
  double wall_time_s = 0.0;
  EvalReport report;
};

struct SweepSetup {
  EncoderConfig encoder;
  HeadConfig head;
  std::vector<SemanticEmbeddingSet> embeddings;
  TrainConfig train;
  std::uint64_t model_seed = 0;
};

/// One adapt + evaluate run per point, all from the same initial weights and
/// seeds. Parameter counts cover encoder and head.
std::vector<SweepRow> sweep_freeze(const FewShotTask& task, const SweepSetup& setup,
                                   const std::vector<SweepPoint>& points);

inline constexpr const char* kSweepCsvHeader = "N,frozen_params,trainable_params,mAUC,wall_time_s";

/// Timing values vary between runs, so they are written only on request;
/// otherwise the column is left empty and the file is reproducible.
std::string sweep_csv(const std::vector<SweepRow>& rows, bool include_timing);

}  // namespace fsadapt
