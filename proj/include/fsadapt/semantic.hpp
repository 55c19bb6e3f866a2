#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsadapt/encoder.hpp"
#include "fsadapt/json_io.hpp"
#include "fsadapt/rng.hpp"
#include "fsadapt/tensor.hpp"

namespace fsadapt {

inline constexpr std::string_view kMaskToken = "[MASK]";

/// Where a class's text supervision came from.
enum class SupervisionSource { kContext, kTemplate, kClassName };

std::string to_string(SupervisionSource source);
/// Throws FormatError for unknown names.
SupervisionSource parse_source(std::string_view name);

struct ClassContext {
  int class_id = 0;
  std::string class_name;
  std::string context_text;
  SupervisionSource source = SupervisionSource::kContext;

  /// context/template texts need at least one [MASK]; class_name texts must
  /// be the bare name. Throws FormatError.
  void validate() const;
};

std::size_t count_masks(std::string_view text);

struct MaskingResult {
  ClassContext context;
  std::size_t replacements = 0;
  /// True when the class never occurred and a fallback sentence was added.
  bool fallback_appended = false;
};

inline constexpr std::string_view kFallbackSentence = "This image shows [MASK].";

/// Replaces every case-insensitive whole-word mention of class_name with
/// [MASK]. Existing [MASK] markers are left alone.
MaskingResult mask_class_mentions(std::string_view raw_text, std::string_view class_name,
                                  int class_id = 0,
                                  SupervisionSource source = SupervisionSource::kContext);

/// "The symptom of <name> in chest x-ray image is [MASK]."
ClassContext template_context(int class_id, std::string_view class_name);
ClassContext class_name_context(int class_id, std::string_view class_name);

/// Mask-token embeddings T_c of one class.
struct SemanticEmbeddingSet {
  int class_id = 0;
  std::vector<std::vector<double>> tokens;
  SupervisionSource source = SupervisionSource::kContext;

  std::size_t size() const { return tokens.size(); }
  std::size_t dim() const { return tokens.empty() ? 0 : tokens.front().size(); }
  /// m >= 1, consistent dims, no zero vectors. Throws FormatError.
  void validate() const;

  bool operator==(const SemanticEmbeddingSet&) const = default;
};

struct ToyEmbedderOptions {
  std::size_t window = 6;
  std::size_t ngram = 3;
  std::size_t buckets = 4096;
};

/// Deterministic stand-in for a masked language model: for each [MASK], the
/// character n-grams of the words within +-window are hashed into buckets,
/// projected by a seeded random matrix and unit-normalized.
SemanticEmbeddingSet toy_embed(const ClassContext& ctx, std::size_t dim, std::uint64_t seed,
                               const ToyEmbedderOptions& options = {});

struct ContextFile {
  std::string task;
  std::vector<ClassContext> classes;
};

ContextFile parse_contexts(const std::string& text);
ContextFile load_contexts(const std::filesystem::path& path);
std::string serialize_contexts(const ContextFile& file);

/// Canonical embedding file text (17 significant digits per float).
std::string serialize_embeddings(std::span<const SemanticEmbeddingSet> sets);
std::vector<SemanticEmbeddingSet> parse_embeddings(const std::string& text);
std::vector<SemanticEmbeddingSet> load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, std::span<const SemanticEmbeddingSet> sets);

enum class Aggregate { kSum, kMean };

std::string to_string(Aggregate aggregate);

struct AlignmentHeadConfig {
  double tau = 10.0;
  std::size_t m0 = 4;
  Aggregate aggregate = Aggregate::kSum;
  /// Trainable visual -> text projection. Without it the visual and text
  /// dimensions must agree and the identity is used.
  bool projection = true;

  void validate() const;

  bool operator==(const AlignmentHeadConfig&) const = default;
};

/// min(m0, m) distinct token indices, uniform without replacement, sorted.
std::vector<std::size_t> bootstrap_tokens(const SemanticEmbeddingSet& set, std::size_t m0, Rng& rng);

/// Unit-normalized tokens of every class side by side, plus the matrix that
/// aggregates per-token similarities into per-class scores.
struct TokenBank {
  Tensor tokens;    // [d_text, M], unit columns
  Tensor selector;  // [M, C]
  std::size_t classes = 0;

  /// chosen[c] lists token indices of sets[c]; classes follow `sets` order.
  static TokenBank build(std::span<const SemanticEmbeddingSet> sets,
                         const std::vector<std::vector<std::size_t>>& chosen, Aggregate aggregate);
  static TokenBank all_tokens(std::span<const SemanticEmbeddingSet> sets, Aggregate aggregate);
};

/// Semantic alignment head: logit_c = tau * Agg_i cos(proj(v), t_i^c), P = sigmoid(logit).
class SemanticHead {
 public:
  SemanticHead(AlignmentHeadConfig config, std::size_t visual_dim, std::size_t text_dim,
               std::uint64_t seed);

  SemanticHead(const SemanticHead& other);
  SemanticHead& operator=(const SemanticHead& other);
  SemanticHead(SemanticHead&&) noexcept = default;
  SemanticHead& operator=(SemanticHead&&) noexcept = default;

  const AlignmentHeadConfig& config() const { return config_; }
  std::size_t visual_dim() const { return visual_dim_; }
  std::size_t text_dim() const { return text_dim_; }

  /// [B, visual_dim] -> [B, text_dim]
  Tensor project(const Tensor& visual) const;
  /// [B, visual_dim] -> [B, C] pre-sigmoid scores.
  Tensor logits(const Tensor& visual, const TokenBank& bank) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  AlignmentHeadConfig config_;
  std::size_t visual_dim_;
  std::size_t text_dim_;
  std::vector<Parameter> params_;
};

/// P(y = c | x) for one visual embedding and a chosen subset of T_c. With no
/// head the projection is the identity.
double class_likelihood(std::span<const double> visual, const SemanticEmbeddingSet& set,
                        std::span<const std::size_t> chosen, const AlignmentHeadConfig& config,
                        const SemanticHead* head = nullptr);

using Matrix = std::vector<std::vector<double>>;

/// Cosine similarity between renormalized per-class mean token vectors.
Matrix correlation_matrix(std::span<const SemanticEmbeddingSet> sets);
double mean_offdiag(const Matrix& m);

}  // namespace fsadapt
