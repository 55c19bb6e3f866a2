#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsadapt/checkpoint.hpp"
#include "fsadapt/encoder.hpp"
#include "fsadapt/json_io.hpp"
#include "fsadapt/metrics.hpp"
#include "fsadapt/rng.hpp"
#include "fsadapt/semantic.hpp"
#include "fsadapt/taskgen.hpp"
#include "fsadapt/tensor.hpp"

namespace fsadapt {

/// Image transforms applied to support images, in order: center crop,
/// random crop (zero padding), horizontal flip. A crop size of 0 keeps the
/// size it receives.
struct AugmentConfig {
  bool center_crop = false;
  std::size_t center_crop_size = 0;
  bool random_crop = true;
  std::size_t random_crop_size = 0;
  std::size_t padding = 2;
  bool hflip = true;
  double hflip_prob = 0.5;

  /// Throws ConfigError if a crop does not fit the given input size.
  void validate(std::size_t image_size) const;
  std::size_t output_size(std::size_t image_size) const;

  bool operator==(const AugmentConfig&) const = default;
};

Json to_json(const AugmentConfig& cfg);
AugmentConfig augment_config_from_json(const Json& j, const std::string& path,
                                       std::vector<std::string>& errors);

/// [c, h, w] -> [c, h', w']. Consumes rng draws in a fixed order.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
/// Un-augmented view used for evaluation: center crop to the training size.
Tensor eval_view(const Tensor& image, const AugmentConfig& cfg);

Tensor center_crop(const Tensor& image, std::size_t size);
/// Zero-pads by `padding` on every side, then crops size x size at (top, left).
Tensor padded_crop(const Tensor& image, std::size_t size, std::size_t padding, std::size_t top,
                   std::size_t left);
Tensor hflip(const Tensor& image);

enum class HeadKind { kSemantic, kOneHot };

std::string to_string(HeadKind kind);
/// Throws ConfigError for unknown names.
HeadKind parse_head_kind(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  double weight_decay = 0.05;
  std::array<double, 2> betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::kSemantic;
  AugmentConfig augmentation;
  /// Score the query set after every epoch (recorded in the history).
  bool eval_each_epoch = false;

  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, const std::string& path,
                                   std::vector<std::string>& errors);

/// Mean over batch and classes of binary cross entropy, with probabilities
/// clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& probs, const Tensor& targets);

inline constexpr double kBceClamp = 1e-7;

struct OptimizerState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::size_t step = 0;
  std::map<std::string, Moments> moments;
};

/// One AdamW step over the non-frozen parameters, using their grads. Weight
/// decay is applied to the parameter after the adaptive update.
void adamw_step(std::span<Parameter* const> params, OptimizerState& state, const TrainConfig& cfg);

/// Cosine classifier used as the one-hot baseline:
/// logits = tau * normalize(v) W, with W [visual_dim, classes] initialized to
/// one-hot columns (or small uniform values when classes > visual_dim).
class OneHotHead {
 public:
  OneHotHead(std::size_t visual_dim, std::size_t classes, double tau, bool trainable,
             std::uint64_t seed);

  OneHotHead(const OneHotHead& other);
  OneHotHead& operator=(const OneHotHead& other);
  OneHotHead(OneHotHead&&) noexcept = default;
  OneHotHead& operator=(OneHotHead&&) noexcept = default;

  Tensor logits(const Tensor& visual) const;
  double tau() const { return tau_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  double tau_;
  std::vector<Parameter> params_;
};

struct HeadConfig {
  AlignmentHeadConfig alignment;
  bool one_hot_trainable = true;

  bool operator==(const HeadConfig&) const = default;
};

Json to_json(const HeadConfig& cfg);
HeadConfig head_config_from_json(const Json& j, const std::string& path,
                                 std::vector<std::string>& errors);

/// Encoder plus classification head (and, for the semantic head, the text
/// embeddings it aligns to).
class Model {
 public:
  /// embeddings must be given (one set per class, in class order) iff the head
  /// is semantic. Throws ConfigError otherwise.
  Model(Encoder encoder, HeadKind kind, HeadConfig head, std::size_t classes,
        std::vector<SemanticEmbeddingSet> embeddings, std::uint64_t seed);

  const Encoder& encoder() const { return encoder_; }
  Encoder& encoder() { return encoder_; }
  HeadKind head_kind() const { return kind_; }
  const HeadConfig& head_config() const { return head_; }
  std::size_t classes() const { return classes_; }
  const std::vector<SemanticEmbeddingSet>& embeddings() const { return embeddings_; }

  /// [b, c, h, w] -> [b, classes]. The semantic head uses `bank`, or every
  /// token of every class when bank is null.
  Tensor logits(const Tensor& images, const TokenBank* bank = nullptr) const;

  /// Encoder parameters followed by head parameters.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  /// Counts over encoder and head.
  FreezeReport partition() const;

  std::vector<NamedTensor> export_parameters() const;
  void import_parameters(std::span<const NamedTensor> tensors);

 private:
  Encoder encoder_;
  HeadKind kind_;
  HeadConfig head_;
  std::size_t classes_;
  std::vector<SemanticEmbeddingSet> embeddings_;
  std::optional<SemanticHead> semantic_;
  std::optional<OneHotHead> one_hot_;
  TokenBank all_tokens_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> query_mauc;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;

  Json to_json(const Json& config_snapshot) const;
};

struct AdaptResult {
  Model model;
  TrainHistory history;
};

/// Fine-tunes the model's trainable parameters on the task's support set.
/// The freeze policy must already be applied to the encoder.
AdaptResult adapt(const FewShotTask& task, Model model, const TrainConfig& cfg);

/// Per-class AUC over the query set from the model's logits on un-augmented
/// inputs (all tokens for the semantic head).
EvalReport evaluate_model(const Model& model, const FewShotTask& task,
                          const AugmentConfig& augmentation, std::size_t batch_size = 32);

}  // namespace fsadapt
