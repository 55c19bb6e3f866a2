#include "fsadapt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fsadapt/errors.hpp"

namespace fsadapt {

std::optional<double> roc_auc(std::span<const double> scores,
                              std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("roc_auc: non-finite score");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the midrank sum of positives, kept in integers so ties are exact.
  std::uint64_t twice_rank_sum = 0;
  std::uint64_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_mid = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        twice_rank_sum += twice_mid;
        ++positives;
      }
    }
    i = j;
  }
  const std::uint64_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  const std::uint64_t twice_u = twice_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) *
                                         static_cast<double>(negatives));
}

EvalReport evaluate_scores(const std::vector<std::vector<double>>& scores,
                           const std::vector<std::vector<std::uint8_t>>& labels,
                           const std::vector<std::string>& class_names) {
  if (scores.size() != labels.size()) {
    throw DimensionError("evaluate_scores: score and label row counts differ");
  }
  const std::size_t classes = class_names.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != classes || labels[i].size() != classes) {
      throw DimensionError("evaluate_scores: row " + std::to_string(i) + " does not have " +
                           std::to_string(classes) + " columns");
    }
  }
  EvalReport report;
  double total = 0.0;
  std::vector<double> column(scores.size());
  std::vector<std::uint8_t> truth(scores.size());
  for (std::size_t c = 0; c < classes; ++c) {
    ClassAuc entry;
    entry.class_index = c;
    entry.name = class_names[c];
    for (std::size_t i = 0; i < scores.size(); ++i) {
      column[i] = scores[i][c];
      truth[i] = labels[i][c] ? 1 : 0;
      (truth[i] ? entry.positives : entry.negatives)++;
    }
    entry.auc = roc_auc(column, truth);
    if (entry.auc) {
      total += *entry.auc;
      ++report.scored_classes;
    } else {
      report.skipped.push_back(entry.name);
    }
    report.classes.push_back(std::move(entry));
  }
  if (report.scored_classes == 0) {
    throw EvaluationError("no class has both positive and negative query items");
  }
  report.mean_auc = total / static_cast<double>(report.scored_classes);
  return report;
}

Json EvalReport::to_json() const {
  Json per_class = Json::array();
  for (const auto& c : classes) {
    Json e = {{"class", c.name}, {"index", c.class_index}, {"positives", c.positives},
              {"negatives", c.negatives}};
    e["auc"] = c.auc ? Json(*c.auc) : Json(nullptr);
    per_class.push_back(std::move(e));
  }
  return {{"mean_auc", mean_auc},
          {"scored_classes", scored_classes},
          {"skipped_classes", skipped},
          {"classes", std::move(per_class)}};
}

std::string EvalReport::table() const {
  std::size_t width = 5;
  for (const auto& c : classes) width = std::max(width, c.name.size());
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %9s %9s %8s\n", static_cast<int>(width), "class",
                "positive", "negative", "AUC");
  out += line;
  for (const auto& c : classes) {
    if (c.auc) {
      std::snprintf(line, sizeof line, "%-*s %9zu %9zu %8.4f\n", static_cast<int>(width),
                    c.name.c_str(), c.positives, c.negatives, *c.auc);
    } else {
      std::snprintf(line, sizeof line, "%-*s %9zu %9zu %8s\n", static_cast<int>(width),
                    c.name.c_str(), c.positives, c.negatives, "skipped");
    }
    out += line;
  }
  std::snprintf(line, sizeof line, "mAUC %.4f over %zu class(es)\n", mean_auc, scored_classes);
  out += line;
  return out;
}

}  // namespace fsadapt
