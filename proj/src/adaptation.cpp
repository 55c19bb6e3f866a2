#include "fsadapt/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsadapt/errors.hpp"

namespace fsadapt {

namespace {

enum Stream : std::uint64_t { kDataStream = 1, kTokenStream = 2, kHeadStream = 3 };

void require_image(const Tensor& image) {
  if (image.rank() != 3) {
    throw DimensionError("expected an image [c, h, w], got " + shape_str(image.shape()));
  }
}

void throw_problems(const char* what, const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg = std::string("invalid ") + what + ":";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

void forward_problems(const ConfigError& e, const std::string& path,
                      std::vector<std::string>& errors) {
  const std::string msg = e.what();
  std::size_t pos = msg.find('\n');
  while (pos != std::string::npos) {
    const std::size_t next = msg.find('\n', pos + 1);
    errors.push_back(path + ": " +
                     msg.substr(pos + 3, next == std::string::npos ? std::string::npos
                                                                   : next - pos - 3));
    pos = next;
  }
}

Parameter make_head_param(std::string key, Shape shape, std::vector<double> values, bool trainable) {
  Parameter p;
  p.key = std::move(key);
  p.stage = kHeadGroup;
  p.role = "weight";
  p.frozen = !trainable;
  p.value = Tensor(std::move(shape), std::move(values), trainable);
  return p;
}

std::vector<Parameter> deep_copy(const std::vector<Parameter>& params) {
  std::vector<Parameter> out = params;
  for (auto& p : out) {
    Tensor copy = p.value.detach();
    copy.set_requires_grad(!p.frozen);
    p.value = std::move(copy);
  }
  return out;
}

Tensor stack_batch(const std::vector<Tensor>& images) { return stack(std::span(images)); }

}  // namespace

void AugmentConfig::validate(std::size_t image_size) const {
  std::vector<std::string> problems;
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) problems.push_back("hflip_prob must be in [0, 1]");
  std::size_t size = image_size;
  if (center_crop) {
    if (center_crop_size > size) {
      problems.push_back("center_crop_size " + std::to_string(center_crop_size) +
                         " exceeds the image size " + std::to_string(size));
    } else if (center_crop_size > 0) {
      size = center_crop_size;
    }
  }
  if (random_crop && random_crop_size > size + 2 * padding) {
    problems.push_back("random_crop_size " + std::to_string(random_crop_size) +
                       " exceeds the padded input size " + std::to_string(size + 2 * padding));
  }
  throw_problems("augmentation config", problems);
}

std::size_t AugmentConfig::output_size(std::size_t image_size) const {
  std::size_t size = image_size;
  if (center_crop && center_crop_size > 0) size = center_crop_size;
  if (random_crop && random_crop_size > 0) size = random_crop_size;
  return size;
}

Json to_json(const AugmentConfig& cfg) {
  return {{"center_crop", cfg.center_crop}, {"center_crop_size", cfg.center_crop_size},
          {"random_crop", cfg.random_crop}, {"random_crop_size", cfg.random_crop_size},
          {"padding", cfg.padding},         {"hflip", cfg.hflip},
          {"hflip_prob", cfg.hflip_prob}};
}

AugmentConfig augment_config_from_json(const Json& j, const std::string& path,
                                       std::vector<std::string>& errors) {
  AugmentConfig c;
  StrictObject obj(j, path, errors);
  obj.read("center_crop", c.center_crop);
  obj.read("center_crop_size", c.center_crop_size);
  obj.read("random_crop", c.random_crop);
  obj.read("random_crop_size", c.random_crop_size);
  obj.read("padding", c.padding);
  obj.read("hflip", c.hflip);
  obj.read("hflip_prob", c.hflip_prob);
  obj.finish();
  if (!(c.hflip_prob >= 0.0 && c.hflip_prob <= 1.0)) {
    errors.push_back(obj.qualify("hflip_prob") + ": must be in [0, 1]");
  }
  return c;
}

Tensor center_crop(const Tensor& image, std::size_t size) {
  require_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (size > h || size > w) {
    throw ConfigError("center crop " + std::to_string(size) + " is larger than the image " +
                      shape_str(image.shape()));
  }
  return padded_crop(image, size, 0, (h - size) / 2, (w - size) / 2);
}

Tensor padded_crop(const Tensor& image, std::size_t size, std::size_t padding, std::size_t top,
                   std::size_t left) {
  require_image(image);
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (top + size > h + 2 * padding || left + size > w + 2 * padding) {
    throw ConfigError("crop " + std::to_string(size) + " at (" + std::to_string(top) + ", " +
                      std::to_string(left) + ") does not fit the padded image");
  }
  const auto src = image.data();
  std::vector<double> out(c * size * size, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < size; ++y) {
      const std::size_t py = top + y;
      if (py < padding || py >= h + padding) continue;
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t px = left + x;
        if (px < padding || px >= w + padding) continue;
        out[(ch * size + y) * size + x] = src[(ch * h + (py - padding)) * w + (px - padding)];
      }
    }
  }
  return Tensor({c, size, size}, std::move(out));
}

Tensor hflip(const Tensor& image) {
  require_image(image);
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto src = image.data();
  std::vector<double> out(src.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  require_image(image);
  if (image.dim(1) != image.dim(2)) throw DimensionError("augment expects square images");
  cfg.validate(image.dim(1));
  Tensor out = image.detach();
  if (cfg.center_crop && cfg.center_crop_size > 0) out = center_crop(out, cfg.center_crop_size);
  if (cfg.random_crop) {
    const std::size_t in = out.dim(1);
    const std::size_t size = cfg.random_crop_size > 0 ? cfg.random_crop_size : in;
    const std::size_t range = in + 2 * cfg.padding - size + 1;
    const auto top = static_cast<std::size_t>(rng.below(range));
    const auto left = static_cast<std::size_t>(rng.below(range));
    out = padded_crop(out, size, cfg.padding, top, left);
  }
  if (cfg.hflip && rng.bernoulli(cfg.hflip_prob)) out = hflip(out);
  return out;
}

Tensor eval_view(const Tensor& image, const AugmentConfig& cfg) {
  require_image(image);
  const std::size_t in = image.dim(1);
  const std::size_t target = cfg.output_size(in);
  if (target == in) return image.detach();
  if (target < in) return center_crop(image, target);
  const std::size_t pad = (target - in + 1) / 2;
  const std::size_t offset = (in + 2 * pad - target) / 2;
  return padded_crop(image, target, pad, offset, offset);
}

std::string to_string(HeadKind kind) { return kind == HeadKind::kSemantic ? "semantic" : "one_hot"; }

HeadKind parse_head_kind(std::string_view name) {
  if (name == "semantic") return HeadKind::kSemantic;
  if (name == "one_hot") return HeadKind::kOneHot;
  throw ConfigError("unknown head '" + std::string(name) + "' (expected semantic or one_hot)");
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs == 0) problems.push_back("epochs must be at least 1");
  if (batch_size == 0) problems.push_back("batch_size must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    problems.push_back("learning_rate must be a non-negative number");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    problems.push_back("weight_decay must be a non-negative number");
  }
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) problems.push_back("betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) problems.push_back("adam_eps must be positive");
  if (!(augmentation.hflip_prob >= 0.0 && augmentation.hflip_prob <= 1.0)) {
    problems.push_back("augmentation.hflip_prob must be in [0, 1]");
  }
  throw_problems("train config", problems);
}

Json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"weight_decay", cfg.weight_decay},
          {"betas", cfg.betas},
          {"adam_eps", cfg.adam_eps},
          {"seed", cfg.seed},
          {"head", to_string(cfg.head)},
          {"augmentation", to_json(cfg.augmentation)},
          {"eval_each_epoch", cfg.eval_each_epoch}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& path,
                                   std::vector<std::string>& errors) {
  TrainConfig c;
  StrictObject obj(j, path, errors);
  obj.read("epochs", c.epochs);
  obj.read("batch_size", c.batch_size);
  obj.read("learning_rate", c.learning_rate);
  obj.read("weight_decay", c.weight_decay);
  if (obj.has("betas")) {
    Json b;
    obj.read("betas", b);
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      obj.error("betas", "expected [beta1, beta2]");
    } else {
      c.betas = {b[0].get<double>(), b[1].get<double>()};
    }
  }
  obj.read("adam_eps", c.adam_eps);
  obj.read("seed", c.seed);
  if (obj.has("head")) {
    std::string name;
    obj.read("head", name);
    try {
      c.head = parse_head_kind(name);
    } catch (const ConfigError& e) {
      obj.error("head", e.what());
    }
  }
  if (const Json* aug = obj.child("augmentation")) {
    c.augmentation = augment_config_from_json(*aug, obj.qualify("augmentation"), errors);
  }
  obj.read("eval_each_epoch", c.eval_each_epoch);
  obj.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    forward_problems(e, path, errors);
  }
  return c;
}

Tensor bce_loss(const Tensor& probs, const Tensor& targets) {
  if (probs.shape() != targets.shape() || probs.rank() != 2) {
    throw DimensionError("bce_loss: probs " + shape_str(probs.shape()) + " and targets " +
                         shape_str(targets.shape()) + " must be matching [b, C]");
  }
  for (double y : targets.data()) {
    if (y != 0.0 && y != 1.0) throw DomainError("bce_loss: targets must be 0 or 1");
  }
  const Tensor one = Tensor::scalar(1.0);
  const Tensor p = clamp(probs, kBceClamp, 1.0 - kBceClamp);
  const Tensor positive = mul(targets, log(p));
  const Tensor negative = mul(sub(one, targets), log(sub(one, p)));
  return scale(mean(add(positive, negative)), -1.0);
}

void adamw_step(std::span<Parameter* const> params, OptimizerState& state, const TrainConfig& cfg) {
  for (const Parameter* p : params) {
    if (p->frozen) {
      if (state.moments.count(p->key)) {
        throw ContractError("adamw_step: frozen parameter " + p->key + " has optimizer state");
      }
      continue;
    }
    if (!p->value.has_grad()) {
      throw ContractError("adamw_step: trainable parameter " + p->key + " has no gradient");
    }
    for (double g : p->value.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adamw_step: non-finite gradient in " + p->key + "; step aborted");
      }
    }
  }

  ++state.step;
  const double b1 = cfg.betas[0], b2 = cfg.betas[1];
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);
  const double lr = cfg.learning_rate;
  for (Parameter* p : params) {
    if (p->frozen) continue;
    auto& mom = state.moments[p->key];
    const std::size_t n = p->value.numel();
    if (mom.m.empty()) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    } else if (mom.m.size() != n) {
      throw ContractError("adamw_step: optimizer state for " + p->key + " has the wrong size");
    }
    const auto g = p->value.grad();
    auto w = p->value.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = mom.m[i] / correction1;
      const double v_hat = mom.v[i] / correction2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
      w[i] -= lr * cfg.weight_decay * w[i];
    }
  }
}

OneHotHead::OneHotHead(std::size_t visual_dim, std::size_t classes, double tau, bool trainable,
                       std::uint64_t seed)
    : tau_(tau) {
  if (visual_dim == 0 || classes == 0) throw ConfigError("one-hot head needs positive dimensions");
  if (!(tau > 0.0)) throw ConfigError("one-hot head tau must be positive");
  std::vector<double> w(visual_dim * classes, 0.0);
  if (classes <= visual_dim) {
    for (std::size_t c = 0; c < classes; ++c) w[c * classes + c] = 1.0;
  } else {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(visual_dim));
    for (auto& v : w) v = rng.uniform(-bound, bound);
  }
  params_.push_back(make_head_param("head.one_hot.weight", {visual_dim, classes}, std::move(w), trainable));
}

OneHotHead::OneHotHead(const OneHotHead& other) : tau_(other.tau_), params_(deep_copy(other.params_)) {}

OneHotHead& OneHotHead::operator=(const OneHotHead& other) {
  if (this != &other) *this = OneHotHead(other);
  return *this;
}

Tensor OneHotHead::logits(const Tensor& visual) const {
  const Tensor& w = params_.front().value;
  if (visual.rank() != 2 || visual.dim(1) != w.dim(0)) {
    throw DimensionError("one-hot head expects [b x " + std::to_string(w.dim(0)) + "], got " +
                         shape_str(visual.shape()));
  }
  Tensor unit;
  try {
    unit = normalize_lastdim(visual);
  } catch (const NumericError&) {
    throw NumericError("one-hot head: visual embedding has zero norm");
  }
  return scale(matmul(unit, w), tau_);
}

Json to_json(const HeadConfig& cfg) {
  return {{"tau", cfg.alignment.tau},
          {"m0", cfg.alignment.m0},
          {"aggregate", to_string(cfg.alignment.aggregate)},
          {"projection", cfg.alignment.projection},
          {"one_hot_trainable", cfg.one_hot_trainable}};
}

HeadConfig head_config_from_json(const Json& j, const std::string& path,
                                 std::vector<std::string>& errors) {
  HeadConfig c;
  StrictObject obj(j, path, errors);
  obj.read("tau", c.alignment.tau);
  obj.read("m0", c.alignment.m0);
  if (obj.has("aggregate")) {
    std::string name;
    obj.read("aggregate", name);
    if (name == "sum") {
      c.alignment.aggregate = Aggregate::kSum;
    } else if (name == "mean") {
      c.alignment.aggregate = Aggregate::kMean;
    } else {
      obj.error("aggregate", "expected sum or mean");
    }
  }
  obj.read("projection", c.alignment.projection);
  obj.read("one_hot_trainable", c.one_hot_trainable);
  obj.finish();
  try {
    c.alignment.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.find('\n') == std::string::npos) {
      errors.push_back(path + ": " + msg);
    } else {
      forward_problems(e, path, errors);
    }
  }
  return c;
}

Model::Model(Encoder encoder, HeadKind kind, HeadConfig head, std::size_t classes,
             std::vector<SemanticEmbeddingSet> embeddings, std::uint64_t seed)
    : encoder_(std::move(encoder)),
      kind_(kind),
      head_(head),
      classes_(classes),
      embeddings_(std::move(embeddings)) {
  if (classes_ == 0) throw ConfigError("model needs at least one class");
  const std::size_t visual_dim = encoder_.config().output_dim;
  const std::uint64_t head_seed = derive_seed(seed, kHeadStream);
  if (kind_ == HeadKind::kOneHot) {
    if (!embeddings_.empty()) throw ConfigError("the one_hot head does not use text embeddings");
    one_hot_.emplace(visual_dim, classes_, head_.alignment.tau, head_.one_hot_trainable, head_seed);
    return;
  }
  if (embeddings_.empty()) throw ConfigError("the semantic head needs text embeddings");
  if (embeddings_.size() != classes_) {
    throw ConfigError("embeddings cover " + std::to_string(embeddings_.size()) +
                      " classes, the task has " + std::to_string(classes_));
  }
  for (std::size_t c = 0; c < classes_; ++c) {
    embeddings_[c].validate();
    if (embeddings_[c].class_id != static_cast<int>(c)) {
      throw ConfigError("embeddings must list classes 0.." + std::to_string(classes_ - 1) +
                        " in order; position " + std::to_string(c) + " holds class " +
                        std::to_string(embeddings_[c].class_id));
    }
    if (embeddings_[c].dim() != embeddings_.front().dim()) {
      throw ConfigError("embedding dimension differs for class " + std::to_string(c));
    }
  }
  semantic_.emplace(head_.alignment, visual_dim, embeddings_.front().dim(), head_seed);
  all_tokens_ = TokenBank::all_tokens(embeddings_, head_.alignment.aggregate);
}

Tensor Model::logits(const Tensor& images, const TokenBank* bank) const {
  const Tensor features = encoder_.forward(images);
  if (one_hot_) return one_hot_->logits(features);
  return semantic_->logits(features, bank ? *bank : all_tokens_);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : encoder_.parameters()) out.push_back(&p);
  auto& head = one_hot_ ? one_hot_->parameters() : semantic_->parameters();
  for (auto& p : head) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : encoder_.parameters()) out.push_back(&p);
  const auto& head = one_hot_ ? one_hot_->parameters() : semantic_->parameters();
  for (const auto& p : head) out.push_back(&p);
  return out;
}

FreezeReport Model::partition() const {
  FreezeReport report;
  for (const Parameter* p : parameters()) {
    (p->frozen ? report.frozen_params : report.trainable_params) += p->value.numel();
  }
  return report;
}

std::vector<NamedTensor> Model::export_parameters() const {
  std::vector<NamedTensor> out;
  for (const Parameter* p : parameters()) {
    const auto d = p->value.data();
    out.push_back({p->key, p->value.shape(), {d.begin(), d.end()}});
  }
  return out;
}

void Model::import_parameters(std::span<const NamedTensor> tensors) {
  std::vector<NamedTensor> encoder_part;
  std::vector<const NamedTensor*> head_part;
  for (const auto& t : tensors) {
    if (t.key.rfind("head.", 0) == 0) {
      head_part.push_back(&t);
    } else {
      encoder_part.push_back(t);
    }
  }
  auto& head = one_hot_ ? one_hot_->parameters() : semantic_->parameters();
  if (head_part.size() != head.size()) {
    throw FormatError("snapshot holds " + std::to_string(head_part.size()) +
                      " head tensors, the model has " + std::to_string(head.size()));
  }
  for (auto& p : head) {
    const auto it = std::find_if(head_part.begin(), head_part.end(),
                                 [&](const NamedTensor* t) { return t->key == p.key; });
    if (it == head_part.end()) throw FormatError("snapshot is missing " + p.key);
    if ((*it)->shape != p.value.shape()) throw FormatError("snapshot shape mismatch for " + p.key);
  }
  encoder_.import_parameters(encoder_part);
  for (auto& p : head) {
    const auto it = std::find_if(head_part.begin(), head_part.end(),
                                 [&](const NamedTensor* t) { return t->key == p.key; });
    std::copy((*it)->values.begin(), (*it)->values.end(), p.value.mutable_data().begin());
  }
}

Json TrainHistory::to_json(const Json& config_snapshot) const {
  Json rows = Json::array();
  for (const auto& e : epochs) {
    Json row = {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    if (e.query_mauc) row["mAUC_on_query"] = *e.query_mauc;
    rows.push_back(std::move(row));
  }
  return {{"config", config_snapshot}, {"epochs", std::move(rows)}, {"step_losses", step_losses}};
}

AdaptResult adapt(const FewShotTask& task, Model model, const TrainConfig& cfg) {
  if (task.support.empty()) throw TaskError("cannot adapt on an empty support set");
  cfg.validate();
  if (cfg.head != model.head_kind()) {
    throw ConfigError("train config head '" + to_string(cfg.head) + "' does not match the model's '" +
                      to_string(model.head_kind()) + "' head");
  }
  if (model.classes() != task.n_classes) {
    throw ConfigError("model has " + std::to_string(model.classes()) + " classes, the task has " +
                      std::to_string(task.n_classes));
  }
  const std::size_t in_size = task.image_size();
  cfg.augmentation.validate(in_size);
  const std::size_t out_size = cfg.augmentation.output_size(in_size);
  if (out_size != model.encoder().config().image_size) {
    throw ConfigError("augmented image size " + std::to_string(out_size) +
                      " differs from the encoder image size " +
                      std::to_string(model.encoder().config().image_size));
  }

  Rng data_rng(derive_seed(cfg.seed, kDataStream));
  Rng token_rng(derive_seed(cfg.seed, kTokenStream));
  const bool semantic = model.head_kind() == HeadKind::kSemantic;
  const std::size_t classes = task.n_classes;
  const std::vector<Parameter*> params = model.parameters();
  OptimizerState state;
  TrainHistory history;

  std::vector<std::size_t> order(task.support.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    TokenBank bank;
    if (semantic) {
      std::vector<std::vector<std::size_t>> chosen;
      for (const auto& set : model.embeddings()) {
        chosen.push_back(bootstrap_tokens(set, model.head_config().alignment.m0, token_rng));
      }
      bank = TokenBank::build(model.embeddings(), chosen, model.head_config().alignment.aggregate);
    }
    std::iota(order.begin(), order.end(), 0);
    data_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> images;
      std::vector<double> targets;
      for (std::size_t i = start; i < end; ++i) {
        const auto& item = task.support[order[i]];
        images.push_back(augment(item.image, cfg.augmentation, data_rng));
        for (std::size_t c = 0; c < classes; ++c) targets.push_back(item.labels[c] ? 1.0 : 0.0);
      }
      const Tensor x = stack_batch(images);
      const Tensor y({end - start, classes}, std::move(targets));

      for (Parameter* p : params) {
        if (!p->frozen) p->value.zero_grad();
      }
      const Tensor loss = bce_loss(sigmoid(model.logits(x, semantic ? &bank : nullptr)), y);
      loss.backward();
      adamw_step(params, state, cfg);

      history.step_losses.push_back(loss.item());
      epoch_loss += loss.item();
      ++steps;
    }
    EpochRecord record{epoch, epoch_loss / static_cast<double>(steps), std::nullopt};
    if (cfg.eval_each_epoch) record.query_mauc = evaluate_model(model, task, cfg.augmentation).mean_auc;
    history.epochs.push_back(record);
  }
  for (Parameter* p : params) p->value.clear_grad();
  return {std::move(model), std::move(history)};
}

EvalReport evaluate_model(const Model& model, const FewShotTask& task,
                          const AugmentConfig& augmentation, std::size_t batch_size) {
  if (task.query.empty()) throw TaskError("cannot evaluate on an empty query set");
  if (batch_size == 0) throw ContractError("evaluate_model: batch_size must be positive");
  NoGradGuard no_grad;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> labels;
  for (std::size_t start = 0; start < task.query.size(); start += batch_size) {
    const std::size_t end = std::min(task.query.size(), start + batch_size);
    std::vector<Tensor> images;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(eval_view(task.query[i].image, augmentation));
      labels.push_back(task.query[i].labels);
    }
    const Tensor logits = model.logits(stack_batch(images));
    const auto d = logits.data();
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < end - start; ++r) {
      scores.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(r * c),
                          d.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
  }
  return evaluate_scores(scores, labels, task.class_names);
}

}  // namespace fsadapt
