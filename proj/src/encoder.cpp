#include "fsadapt/encoder.hpp"

#include <cmath>
#include <numeric>

#include "fsadapt/errors.hpp"

namespace fsadapt {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kPosInitStd = 0.1;

}  // namespace

void EncoderConfig::validate() const {
  std::vector<std::string> problems;
  if (image_size == 0) problems.push_back("image_size must be positive");
  if (patch_size == 0) problems.push_back("patch_size must be positive");
  if (image_size && patch_size && image_size % patch_size != 0) {
    problems.push_back("image_size " + std::to_string(image_size) +
                       " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (channels == 0) problems.push_back("channels must be positive");
  if (stages.empty()) problems.push_back("stages must not be empty");
  if (heads == 0) problems.push_back("heads must be positive");
  if (output_dim == 0) problems.push_back("output_dim must be positive");
  if (!(layer_norm_eps >= 0.0)) problems.push_back("layer_norm_eps must be non-negative");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const std::string where = "stages[" + std::to_string(s) + "]";
    if (st.blocks == 0) problems.push_back(where + ".blocks must be positive");
    if (st.width == 0) {
      problems.push_back(where + ".width must be positive");
    } else if (heads && st.width % heads != 0) {
      problems.push_back("heads " + std::to_string(heads) + " does not divide " + where +
                         ".width " + std::to_string(st.width));
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid encoder config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

std::size_t EncoderConfig::tokens() const {
  const std::size_t g = image_size / patch_size;
  return g * g;
}

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t patch_features = config_.channels * config_.patch_size * config_.patch_size;
  std::size_t width = config_.stages.front().width;

  patch_embed_ = add_linear("patch_embed", kPatchEmbedStage, kNoBlock, patch_features, width, rng);
  {
    std::vector<double> pos(config_.tokens() * width);
    for (auto& v : pos) v = kPosInitStd * rng.normal();
    pos_embed_ = add_param("patch_embed.pos", kPatchEmbedStage, kNoBlock, "pos",
                           {config_.tokens(), width}, std::move(pos));
  }

  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const auto& spec = config_.stages[s];
    const int stage = static_cast<int>(s);
    const std::string prefix = "stage" + std::to_string(s);
    StageRefs refs;
    if (spec.width != width) {
      refs.proj_in = add_linear(prefix + ".proj_in", stage, kNoBlock, width, spec.width, rng);
      width = spec.width;
    }
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      const int block = static_cast<int>(b);
      const std::string bp = prefix + ".block" + std::to_string(b);
      BlockRefs br;
      br.width = width;
      br.norm1 = add_norm(bp + ".norm1", stage, block, width);
      br.q = add_linear(bp + ".attn.q", stage, block, width, width, rng, kInitStd);
      br.k = add_linear(bp + ".attn.k", stage, block, width, width, rng, kInitStd);
      br.v = add_linear(bp + ".attn.v", stage, block, width, width, rng, kInitStd);
      br.attn_out = add_linear(bp + ".attn.out", stage, block, width, width, rng, kInitStd);
      br.norm2 = add_norm(bp + ".norm2", stage, block, width);
      br.mlp_in = add_linear(bp + ".mlp.in", stage, block, width, 4 * width, rng, kInitStd);
      br.mlp_out = add_linear(bp + ".mlp.out", stage, block, 4 * width, width, rng, kInitStd);
      refs.blocks.push_back(br);
    }
    stages_.push_back(std::move(refs));
  }

  // The pooling neck belongs to the last stage, so freezing every stage
  // leaves no trainable encoder parameter.
  const int last = static_cast<int>(config_.stages.size() - 1);
  const std::string neck = "stage" + std::to_string(last) + ".neck";
  neck_norm_ = add_norm(neck + ".norm", last, kNoBlock, width);
  neck_proj_ = add_linear(neck + ".proj", last, kNoBlock, width, config_.output_dim, rng, kInitStd);

  apply_freeze(FreezePolicy{});
}

Encoder::Encoder(const Encoder& other)
    : config_(other.config_),
      policy_(other.policy_),
      params_(other.params_),
      patch_embed_(other.patch_embed_),
      pos_embed_(other.pos_embed_),
      stages_(other.stages_),
      neck_norm_(other.neck_norm_),
      neck_proj_(other.neck_proj_) {
  for (auto& p : params_) {
    Tensor copy = p.value.detach();
    copy.set_requires_grad(!p.frozen);
    p.value = std::move(copy);
  }
}

Encoder& Encoder::operator=(const Encoder& other) {
  if (this != &other) *this = Encoder(other);
  return *this;
}

std::size_t Encoder::add_param(std::string key, int stage, int block, std::string role,
                               Shape shape, std::vector<double> values) {
  Parameter p;
  p.key = std::move(key);
  p.stage = stage;
  p.block = block;
  p.role = std::move(role);
  p.value = Tensor(std::move(shape), std::move(values), true);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

Encoder::LinearRef Encoder::add_linear(const std::string& prefix, int stage, int block,
                                       std::size_t in, std::size_t out, Rng& rng,
                                       double std_dev) {
  std::vector<double> w(in * out);
  if (std_dev > 0.0) {
    // Normal truncated at two standard deviations.
    for (auto& v : w) {
      double z = rng.normal();
      while (std::abs(z) > 2.0) z = rng.normal();
      v = std_dev * z;
    }
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w) v = rng.uniform(-bound, bound);
  }
  LinearRef ref{};
  ref.weight = add_param(prefix + ".weight", stage, block, "weight", {in, out}, std::move(w));
  ref.bias = add_param(prefix + ".bias", stage, block, "bias", {out}, std::vector<double>(out, 0.0));
  return ref;
}

Encoder::NormRef Encoder::add_norm(const std::string& prefix, int stage, int block,
                                   std::size_t width) {
  NormRef ref{};
  ref.gain = add_param(prefix + ".gain", stage, block, "gain", {width}, std::vector<double>(width, 1.0));
  ref.bias = add_param(prefix + ".bias", stage, block, "bias", {width}, std::vector<double>(width, 0.0));
  return ref;
}

Tensor Encoder::linear(const Tensor& x, const LinearRef& ref) const {
  const Tensor& w = params_[ref.weight].value;
  const Tensor& b = params_[ref.bias].value;
  if (x.rank() == 2) return add_trailing(matmul(x, w), b);
  Shape out_shape = x.shape();
  const std::size_t in = out_shape.back();
  out_shape.back() = w.dim(1);
  const Tensor flat = reshape(x, {x.numel() / in, in});
  return reshape(add_trailing(matmul(flat, w), b), out_shape);
}

Tensor Encoder::norm(const Tensor& x, const NormRef& ref) const {
  return add_trailing(mul_trailing(layer_norm_lastdim(x, config_.layer_norm_eps),
                                   params_[ref.gain].value),
                      params_[ref.bias].value);
}

Tensor Encoder::block_forward(const Tensor& x, const BlockRefs& block) const {
  const std::size_t batch = x.dim(0);
  const std::size_t tokens = x.dim(1);
  const std::size_t width = block.width;
  const std::size_t heads = config_.heads;
  const std::size_t head_dim = width / heads;

  // [B,T,W] -> [B*H, T, W/H]
  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {batch, tokens, heads, head_dim}), {0, 2, 1, 3}),
                   {batch * heads, tokens, head_dim});
  };

  const Tensor h = norm(x, block.norm1);
  const Tensor q = split_heads(linear(h, block.q));
  const Tensor k = split_heads(linear(h, block.k));
  const Tensor v = split_heads(linear(h, block.v));
  const Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Tensor attended = bmm(softmax_lastdim(scores), v);
  const Tensor merged = reshape(
      permute(reshape(attended, {batch, heads, tokens, head_dim}), {0, 2, 1, 3}),
      {batch, tokens, width});
  const Tensor after_attn = add(x, linear(merged, block.attn_out));

  const Tensor h2 = norm(after_attn, block.norm2);
  const Tensor mlp = linear(gelu(linear(h2, block.mlp_in)), block.mlp_out);
  return add(after_attn, mlp);
}

Tensor Encoder::forward(const Tensor& images) const {
  const Shape expected{images.rank() == 4 ? images.dim(0) : 0, config_.channels,
                       config_.image_size, config_.image_size};
  if (images.rank() != 4 || images.shape() != expected) {
    throw DimensionError("encoder expects images [b x " + std::to_string(config_.channels) + " x " +
                         std::to_string(config_.image_size) + " x " +
                         std::to_string(config_.image_size) + "], got " +
                         shape_str(images.shape()));
  }
  Tensor x = linear(patchify(images, config_.patch_size), patch_embed_);
  x = add_trailing(x, params_[pos_embed_].value);
  for (const auto& stage : stages_) {
    if (stage.proj_in) x = linear(x, *stage.proj_in);
    for (const auto& block : stage.blocks) x = block_forward(x, block);
  }
  const Tensor pooled = mean_axis(norm(x, neck_norm_), 1);
  return linear(pooled, neck_proj_);
}

FreezeReport Encoder::apply_freeze(const FreezePolicy& policy) {
  if (policy.frozen_stages > config_.stages.size()) {
    throw ConfigError("frozen_stages " + std::to_string(policy.frozen_stages) +
                      " exceeds the encoder's " + std::to_string(config_.stages.size()) +
                      " stages");
  }
  policy_ = policy;
  for (auto& p : params_) {
    const bool frozen = p.stage == kPatchEmbedStage
                            ? policy.patch_embed_frozen()
                            : static_cast<std::size_t>(p.stage) < policy.frozen_stages;
    p.frozen = frozen;
    p.value.set_requires_grad(!frozen);
  }
  return partition();
}

FreezeReport Encoder::partition() const {
  FreezeReport report;
  for (const auto& p : params_) {
    (p.frozen ? report.frozen_params : report.trainable_params) += p.value.numel();
  }
  return report;
}

const Parameter* Encoder::find(std::string_view key) const {
  for (const auto& p : params_) {
    if (p.key == key) return &p;
  }
  return nullptr;
}

Parameter* Encoder::find(std::string_view key) {
  for (auto& p : params_) {
    if (p.key == key) return &p;
  }
  return nullptr;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

}  // namespace fsadapt

namespace fsadapt {

std::vector<NamedTensor> Encoder::export_parameters() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    out.push_back({p.key, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  }
  return out;
}

void Encoder::import_parameters(std::span<const NamedTensor> tensors) {
  for (auto& p : params_) {
    const NamedTensor* match = nullptr;
    for (const auto& t : tensors) {
      if (t.key == p.key) match = &t;
    }
    if (!match) throw FormatError("missing encoder parameter " + p.key);
    if (match->shape != p.value.shape()) {
      throw FormatError("parameter " + p.key + " has shape " + shape_str(match->shape) +
                        ", encoder expects " + shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(match->values.begin(), match->values.end(), dst.begin());
  }
}

Json to_json(const EncoderConfig& config) {
  Json stages = Json::array();
  for (const auto& s : config.stages) stages.push_back({s.blocks, s.width});
  return {{"image_size", config.image_size}, {"patch_size", config.patch_size},
          {"channels", config.channels},     {"stages", stages},
          {"heads", config.heads},           {"output_dim", config.output_dim},
          {"layer_norm_eps", config.layer_norm_eps}, {"seed", config.seed}};
}

EncoderConfig encoder_config_from_json(const Json& j, const std::string& path,
                                       std::vector<std::string>& errors, EncoderConfig defaults) {
  EncoderConfig c = std::move(defaults);
  StrictObject obj(j, path, errors);
  obj.read("image_size", c.image_size);
  obj.read("patch_size", c.patch_size);
  obj.read("channels", c.channels);
  obj.read("heads", c.heads);
  obj.read("output_dim", c.output_dim);
  obj.read("layer_norm_eps", c.layer_norm_eps);
  obj.read("seed", c.seed);
  if (obj.has("stages")) {
    std::vector<std::vector<std::size_t>> raw;
    obj.read("stages", raw);
    std::vector<StageSpec> stages;
    bool ok = true;
    for (const auto& pair : raw) {
      if (pair.size() != 2) {
        ok = false;
        break;
      }
      stages.push_back({pair[0], pair[1]});
    }
    if (!ok) {
      obj.error("stages", "each stage must be [num_blocks, width]");
    } else if (!raw.empty() || j.at("stages").is_array()) {
      c.stages = std::move(stages);
    }
  }
  obj.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    // Re-emit each problem line under this config path.
    std::size_t pos = msg.find('\n');
    while (pos != std::string::npos) {
      const std::size_t next = msg.find('\n', pos + 1);
      std::string line = msg.substr(pos + 3, next == std::string::npos ? std::string::npos
                                                                        : next - pos - 3);
      errors.push_back(path + ": " + line);
      pos = next;
    }
  }
  return c;
}

Json to_json(const FreezePolicy& policy) {
  return {{"frozen_stages", policy.frozen_stages},
          {"freeze_patch_embed", policy.patch_embed_frozen()}};
}

FreezePolicy freeze_policy_from_json(const Json& j, const std::string& path,
                                     std::vector<std::string>& errors) {
  FreezePolicy p;
  StrictObject obj(j, path, errors);
  obj.read("frozen_stages", p.frozen_stages);
  if (obj.has("freeze_patch_embed")) {
    bool flag = false;
    obj.read("freeze_patch_embed", flag);
    p.freeze_patch_embed = flag;
  }
  obj.finish();
  return p;
}

}  // namespace fsadapt
