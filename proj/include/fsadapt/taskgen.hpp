#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsadapt/json_io.hpp"
#include "fsadapt/semantic.hpp"
#include "fsadapt/tensor.hpp"

namespace fsadapt {

inline constexpr const char* kTaskVersion = "fsadapt-task/1";

/// Knobs of a synthetic multi-label few-shot task.
struct TaskSpec {
  std::size_t n_classes = 5;
  std::size_t k_shot = 5;
  std::size_t query_size = 200;
  std::size_t image_size = 32;
  double noise_std = 0.1;
  /// 0: class patterns live on disjoint pixel regions; 1: all share one pattern.
  double pattern_overlap = 0.0;
  /// Chance that each non-primary class is also active in an image.
  double multilabel_prob = 0.1;
  std::uint64_t seed = 0;

  /// Throws ConfigError listing every violated field.
  void validate() const;
  /// "easy" or "hard". Throws ConfigError for unknown names.
  static TaskSpec preset(std::string_view name, std::uint64_t seed);

  bool operator==(const TaskSpec&) const = default;
};

Json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const Json& j, const std::string& path, std::vector<std::string>& errors);

struct LabeledImage {
  std::uint64_t id = 0;
  Tensor image;  // [1, H, W]
  std::vector<std::uint8_t> labels;
};

/// N-way K-shot task: fixed support set S and query set Q.
struct FewShotTask {
  std::size_t n_classes = 0;
  std::size_t k_shot = 0;
  std::vector<LabeledImage> support;
  std::vector<LabeledImage> query;
  std::vector<std::string> class_names;
  TaskSpec spec;

  std::size_t image_size() const;
  /// Checks the K-shot, disjointness and >=1-positive invariants.
  void validate() const;
};

bool operator==(const FewShotTask& a, const FewShotTask& b);

/// Per-class spatial patterns P_c, each flattened to H*W values.
std::vector<std::vector<double>> class_patterns(const TaskSpec& spec);

FewShotTask generate_task(const TaskSpec& spec);

/// Pattern-matching oracle: score of class c is <x, P_c> / |P_c|.
std::vector<std::vector<double>> nearest_pattern_scores(const TaskSpec& spec,
                                                        std::span<const LabeledImage> items);

struct PairedSemanticsOptions {
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 8;
  /// Per-coordinate noise on context tokens, relative to a unit vector.
  double jitter = 0.1;
  /// Spread of class-name vectors around their shared base vector.
  double delta = 0.25;
};

struct PairedSemantics {
  std::vector<SemanticEmbeddingSet> context;
  std::vector<SemanticEmbeddingSet> class_name;
};

/// Context-style sets follow each class's own band, without the shared
/// texture (low inter-class correlation); class-name sets share one base
/// vector (high correlation).
PairedSemantics paired_semantics(const TaskSpec& spec, std::size_t d_text, std::uint64_t seed,
                                 const PairedSemanticsOptions& options = {});

std::string encode_task(const FewShotTask& task);
FewShotTask decode_task(std::span<const unsigned char> bytes);
void save_task(const FewShotTask& task, const std::filesystem::path& path);
FewShotTask load_task(const std::filesystem::path& path);

}  // namespace fsadapt
