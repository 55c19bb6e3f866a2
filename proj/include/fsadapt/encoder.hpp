#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fsadapt/checkpoint.hpp"
#include "fsadapt/json_io.hpp"
#include "fsadapt/rng.hpp"
#include "fsadapt/tensor.hpp"

namespace fsadapt {

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t width = 32;

  bool operator==(const StageSpec&) const = default;
};

/// Shape of the patch transformer. Stages are groups of pre-norm blocks; a
/// width change between stages re-projects the tokens (no patch merging).
struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::vector<StageSpec> stages{{1, 32}, {1, 32}, {1, 32}, {1, 32}};
  std::size_t heads = 2;
  std::size_t output_dim = 32;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;

  /// Throws ConfigError listing every violated field.
  void validate() const;
  std::size_t tokens() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Freeze the patch embedding and the first frozen_stages stages.
/// freeze_patch_embed defaults to (frozen_stages >= 1) when unset.
struct FreezePolicy {
  std::size_t frozen_stages = 0;
  std::optional<bool> freeze_patch_embed;

  bool patch_embed_frozen() const { return freeze_patch_embed.value_or(frozen_stages >= 1); }
  /// Whole encoder frozen; only an external head trains.
  static FreezePolicy linear_probe(std::size_t num_stages) { return {num_stages, true}; }

  bool operator==(const FreezePolicy&) const = default;
};

/// Group index used for patch-embedding parameters.
inline constexpr int kPatchEmbedStage = -1;
/// Group index used for classifier-head parameters outside the encoder.
inline constexpr int kHeadGroup = -2;
/// Block index used for parameters that do not belong to a block.
inline constexpr int kNoBlock = -1;

struct Parameter {
  std::string key;
  int stage = kPatchEmbedStage;
  int block = kNoBlock;
  std::string role;
  Tensor value;
  bool frozen = false;
};

struct FreezeReport {
  std::size_t frozen_params = 0;
  std::size_t trainable_params = 0;
};

class Encoder {
 public:
  /// Deterministic build from config.seed. Throws ConfigError on an invalid
  /// config.
  explicit Encoder(EncoderConfig config);

  /// Copies own their parameter storage.
  Encoder(const Encoder& other);
  Encoder& operator=(const Encoder& other);
  Encoder(Encoder&&) noexcept = default;
  Encoder& operator=(Encoder&&) noexcept = default;

  const EncoderConfig& config() const { return config_; }
  const FreezePolicy& freeze_policy() const { return policy_; }

  /// [b, channels, image, image] -> [b, output_dim]. Rows are independent.
  Tensor forward(const Tensor& images) const;

  /// Marks parameters frozen (requires_grad = false) per policy; everything
  /// else becomes trainable. Counts are scalar parameter counts.
  FreezeReport apply_freeze(const FreezePolicy& policy);
  FreezeReport partition() const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter* find(std::string_view key) const;
  Parameter* find(std::string_view key);
  std::size_t parameter_count() const;

  std::vector<NamedTensor> export_parameters() const;
  /// Overwrites values from a snapshot; keys and shapes must match exactly.
  void import_parameters(std::span<const NamedTensor> tensors);

 private:
  struct LinearRef {
    std::size_t weight;
    std::size_t bias;
  };
  struct NormRef {
    std::size_t gain;
    std::size_t bias;
  };
  struct BlockRefs {
    NormRef norm1, norm2;
    LinearRef q, k, v, attn_out, mlp_in, mlp_out;
    std::size_t width;
  };
  struct StageRefs {
    std::optional<LinearRef> proj_in;
    std::vector<BlockRefs> blocks;
  };

  std::size_t add_param(std::string key, int stage, int block, std::string role, Shape shape,
                        std::vector<double> values);
  /// std_dev > 0: truncated normal weights; otherwise uniform +-1/sqrt(in).
  LinearRef add_linear(const std::string& prefix, int stage, int block, std::size_t in,
                       std::size_t out, Rng& rng, double std_dev = 0.0);
  NormRef add_norm(const std::string& prefix, int stage, int block, std::size_t width);

  Tensor linear(const Tensor& x, const LinearRef& ref) const;
  Tensor norm(const Tensor& x, const NormRef& ref) const;
  Tensor block_forward(const Tensor& x, const BlockRefs& block) const;

  EncoderConfig config_;
  FreezePolicy policy_;
  std::vector<Parameter> params_;
  LinearRef patch_embed_{};
  std::size_t pos_embed_ = 0;
  std::vector<StageRefs> stages_;
  NormRef neck_norm_{};
  LinearRef neck_proj_{};
};

Json to_json(const EncoderConfig& config);
/// Reads fields present in j over `defaults`; problems go to errors.
EncoderConfig encoder_config_from_json(const Json& j, const std::string& path,
                                       std::vector<std::string>& errors,
                                       EncoderConfig defaults = {});

Json to_json(const FreezePolicy& policy);
FreezePolicy freeze_policy_from_json(const Json& j, const std::string& path,
                                     std::vector<std::string>& errors);

}  // namespace fsadapt
