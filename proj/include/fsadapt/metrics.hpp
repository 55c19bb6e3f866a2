#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsadapt/json_io.hpp"

namespace fsadapt {

/// ROC AUC by the rank-sum statistic with midranks for ties. Returns nullopt
/// when the labels contain no positive or no negative.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct ClassAuc {
  std::size_t class_index = 0;
  std::string name;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::optional<double> auc;
};

struct EvalReport {
  std::vector<ClassAuc> classes;
  /// Mean over classes with both positives and negatives.
  double mean_auc = 0.0;
  std::size_t scored_classes = 0;
  std::vector<std::string> skipped;

  Json to_json() const;
  std::string table() const;
};

/// scores[i][c] and labels[i][c] for items i and classes c. Throws
/// EvaluationError when no class can be scored.
EvalReport evaluate_scores(const std::vector<std::vector<double>>& scores,
                           const std::vector<std::vector<std::uint8_t>>& labels,
                           const std::vector<std::string>& class_names);

}  // namespace fsadapt
