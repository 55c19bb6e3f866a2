#include "fsadapt/evaluation.hpp"

#include <chrono>
#include <cstdio>

#include "fsadapt/errors.hpp"

namespace fsadapt {

std::vector<SweepPoint> parse_sweep_points(std::string_view list, std::size_t stages) {
  std::vector<SweepPoint> points;
  std::size_t start = 0;
  while (start <= list.size()) {
    std::size_t end = list.find(',', start);
    if (end == std::string_view::npos) end = list.size();
    std::string item(list.substr(start, end - start));
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (item.empty()) throw ConfigError("sweep list has an empty entry: '" + std::string(list) + "'");
    if (item == "linear") {
      points.push_back({item, FreezePolicy::linear_probe(stages)});
    } else {
      std::size_t n = 0;
      for (char ch : item) {
        if (ch < '0' || ch > '9' || n > stages) {
          throw ConfigError("sweep entry '" + item + "' is not a stage count or 'linear'");
        }
        n = n * 10 + static_cast<std::size_t>(ch - '0');
      }
      if (n > stages) {
        throw ConfigError("sweep entry " + item + " exceeds the encoder's " + std::to_string(stages) +
                          " stages");
      }
      points.push_back({item, FreezePolicy{n, std::nullopt}});
    }
    start = end + 1;
  }
  return points;
}

std::vector<SweepRow> sweep_freeze(const FewShotTask& task, const SweepSetup& setup,
                                   const std::vector<SweepPoint>& points) {
  if (points.empty()) throw ConfigError("sweep needs at least one freeze depth");
  const Encoder base(setup.encoder);
  for (const auto& point : points) {
    if (point.policy.frozen_stages > setup.encoder.stages.size()) {
      throw ConfigError("sweep entry " + point.label + " exceeds the encoder's " +
                        std::to_string(setup.encoder.stages.size()) + " stages");
    }
  }
  std::vector<SweepRow> rows;
  for (const auto& point : points) {
    Encoder encoder = base;
    encoder.apply_freeze(point.policy);
    const Model model(std::move(encoder), setup.train.head, setup.head, task.n_classes,
                      setup.embeddings, setup.model_seed);
    const FreezeReport counts = model.partition();

    const auto t0 = std::chrono::steady_clock::now();
    const AdaptResult result = adapt(task, model, setup.train);
    EvalReport report = evaluate_model(result.model, task, setup.train.augmentation);
    const auto t1 = std::chrono::steady_clock::now();

    SweepRow row;
    row.label = point.label;
    row.frozen_params = counts.frozen_params;
    row.trainable_params = counts.trainable_params;
    row.mauc = report.mean_auc;
    row.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
    row.report = std::move(report);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, bool include_timing) {
  std::string out = std::string(kSweepCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += r.label + "," + std::to_string(r.frozen_params) + "," +
           std::to_string(r.trainable_params) + "," + format_double(r.mauc) + ",";
    if (include_timing) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", r.wall_time_s);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace fsadapt
