#include "fsadapt/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fsadapt/checkpoint.hpp"
#include "fsadapt/errors.hpp"
#include "fsadapt/rng.hpp"

namespace fsadapt {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'A', 'D', 'T', 'A', 'S', 'K'};

enum Stream : std::uint64_t { kPatternStream = 1, kLabelStream = 2, kNoiseStream = 3 };

const char* const kClassNames[] = {
    "effusion",     "nodule",      "cardiomegaly", "atelectasis", "pneumothorax",
    "consolidation", "mass",       "emphysema",    "fibrosis",    "edema",
    "fracture",     "calcification", "infiltration", "hernia",    "thickening",
    "opacity",      "scar",        "lesion",       "tuberculosis"};

std::string class_name(std::size_t c) {
  constexpr std::size_t n = sizeof kClassNames / sizeof kClassNames[0];
  if (c < n) return kClassNames[c];
  return "class_" + std::to_string(c);
}

/// Texture in [0.5, 1.5) over the given rows, mirrored left-right so that a
/// horizontal flip leaves it unchanged.
void fill_texture(std::vector<double>& out, std::size_t size, std::size_t row_begin,
                  std::size_t row_end, double weight, Rng& rng) {
  for (std::size_t y = row_begin; y < row_end; ++y) {
    for (std::size_t x = 0; x < (size + 1) / 2; ++x) {
      const double v = weight * (0.5 + rng.uniform());
      out[y * size + x] += v;
      out[y * size + (size - 1 - x)] = out[y * size + x];
    }
  }
}

std::vector<std::uint8_t> draw_labels(std::size_t n_classes, std::size_t primary, double p,
                                      Rng& rng) {
  std::vector<std::uint8_t> labels(n_classes, 0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    // Always draw so the label stream does not depend on the primary class.
    const bool extra = rng.bernoulli(p);
    labels[c] = (c == primary || extra) ? 1 : 0;
  }
  return labels;
}

Tensor render(const std::vector<std::vector<double>>& patterns,
              const std::vector<std::uint8_t>& labels, std::size_t size, double noise_std,
              Rng& noise) {
  std::vector<double> img(size * size, 0.0);
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (!labels[c]) continue;
    for (std::size_t i = 0; i < img.size(); ++i) img[i] += patterns[c][i];
  }
  for (double& v : img) v += noise_std * noise.normal();
  return Tensor({1, size, size}, std::move(img));
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw NumericError("cannot normalize a zero vector");
  for (double& x : v) x /= n;
  return v;
}

std::string where(std::size_t offset) { return " at byte " + std::to_string(offset); }

}  // namespace

void TaskSpec::validate() const {
  std::vector<std::string> problems;
  if (n_classes < 2) problems.push_back("n_classes must be at least 2");
  if (k_shot == 0) problems.push_back("k_shot must be positive");
  if (query_size == 0) problems.push_back("query_size must be positive");
  if (image_size < 2) problems.push_back("image_size must be at least 2");
  if (n_classes > image_size) {
    problems.push_back("n_classes " + std::to_string(n_classes) + " exceeds image_size " +
                       std::to_string(image_size) + " (one pattern band per class)");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    problems.push_back("noise_std must be a non-negative number");
  }
  if (!(pattern_overlap >= 0.0 && pattern_overlap <= 1.0)) {
    problems.push_back("pattern_overlap must be in [0, 1]");
  }
  if (!(multilabel_prob >= 0.0 && multilabel_prob <= 1.0)) {
    problems.push_back("multilabel_prob must be in [0, 1]");
  }
  if (!problems.empty()) {
    std::string msg = "invalid task spec:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

TaskSpec TaskSpec::preset(std::string_view name, std::uint64_t seed) {
  TaskSpec s;
  s.seed = seed;
  if (name == "easy") return s;
  if (name == "hard") {
    s.n_classes = 8;
    s.k_shot = 2;
    s.noise_std = 1.0;
    s.pattern_overlap = 0.6;
    s.multilabel_prob = 0.2;
    return s;
  }
  throw ConfigError("unknown task preset '" + std::string(name) + "' (expected easy or hard)");
}

Json to_json(const TaskSpec& spec) {
  return {{"n_classes", spec.n_classes},
          {"k_shot", spec.k_shot},
          {"query_size", spec.query_size},
          {"image_size", spec.image_size},
          {"noise_std", spec.noise_std},
          {"pattern_overlap", spec.pattern_overlap},
          {"multilabel_prob", spec.multilabel_prob},
          {"seed", spec.seed}};
}

TaskSpec task_spec_from_json(const Json& j, const std::string& path,
                             std::vector<std::string>& errors) {
  TaskSpec s;
  StrictObject obj(j, path, errors);
  obj.read("n_classes", s.n_classes);
  obj.read("k_shot", s.k_shot);
  obj.read("query_size", s.query_size);
  obj.read("image_size", s.image_size);
  obj.read("noise_std", s.noise_std);
  obj.read("pattern_overlap", s.pattern_overlap);
  obj.read("multilabel_prob", s.multilabel_prob);
  obj.read("seed", s.seed);
  obj.finish();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    std::size_t pos = msg.find('\n');
    while (pos != std::string::npos) {
      const std::size_t next = msg.find('\n', pos + 1);
      errors.push_back(path + ": " +
                       msg.substr(pos + 3, next == std::string::npos ? std::string::npos
                                                                     : next - pos - 3));
      pos = next;
    }
  }
  return s;
}

std::size_t FewShotTask::image_size() const {
  const auto& any = !support.empty() ? support.front() : query.front();
  return any.image.dim(1);
}

void FewShotTask::validate() const {
  if (support.empty()) throw TaskError("task has an empty support set");
  if (query.empty()) throw TaskError("task has an empty query set");
  if (class_names.size() != n_classes) {
    throw TaskError("task lists " + std::to_string(class_names.size()) + " class names for " +
                    std::to_string(n_classes) + " classes");
  }
  std::vector<std::size_t> positives(n_classes, 0);
  std::vector<std::uint64_t> ids;
  const Shape shape = support.front().image.shape();
  auto check = [&](const LabeledImage& item, const char* set) {
    if (item.labels.size() != n_classes) {
      throw TaskError(std::string(set) + " item " + std::to_string(item.id) + " has " +
                      std::to_string(item.labels.size()) + " labels, expected " +
                      std::to_string(n_classes));
    }
    if (std::none_of(item.labels.begin(), item.labels.end(), [](auto v) { return v != 0; })) {
      throw TaskError(std::string(set) + " item " + std::to_string(item.id) +
                      " has no positive label");
    }
    if (item.image.shape() != shape) {
      throw TaskError(std::string(set) + " item " + std::to_string(item.id) +
                      " has an inconsistent image shape");
    }
    ids.push_back(item.id);
  };
  for (const auto& item : support) {
    check(item, "support");
    for (std::size_t c = 0; c < n_classes; ++c) positives[c] += item.labels[c];
  }
  for (const auto& item : query) check(item, "query");
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (positives[c] < k_shot) {
      throw TaskError("class " + std::to_string(c) + " (" + class_names[c] + ") has " +
                      std::to_string(positives[c]) + " support positives, fewer than k_shot " +
                      std::to_string(k_shot));
    }
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw TaskError("support and query sets share an image id");
  }
}

bool operator==(const FewShotTask& a, const FewShotTask& b) {
  auto same = [](const std::vector<LabeledImage>& x, const std::vector<LabeledImage>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].id != y[i].id || x[i].labels != y[i].labels ||
          x[i].image.shape() != y[i].image.shape() ||
          !std::equal(x[i].image.data().begin(), x[i].image.data().end(),
                      y[i].image.data().begin())) {
        return false;
      }
    }
    return true;
  };
  return a.n_classes == b.n_classes && a.k_shot == b.k_shot && a.class_names == b.class_names &&
         a.spec == b.spec && same(a.support, b.support) && same(a.query, b.query);
}

namespace {

struct PatternParts {
  std::vector<double> shared;
  /// Unit-weight class bands B_c.
  std::vector<std::vector<double>> bands;
};

PatternParts pattern_parts(const TaskSpec& spec) {
  spec.validate();
  const std::size_t size = spec.image_size;
  Rng rng(derive_seed(spec.seed, kPatternStream));
  PatternParts parts;
  parts.shared.assign(size * size, 0.0);
  fill_texture(parts.shared, size, 0, size, 1.0, rng);
  parts.bands.resize(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    parts.bands[c].assign(size * size, 0.0);
    fill_texture(parts.bands[c], size, c * size / spec.n_classes, (c + 1) * size / spec.n_classes, 1.0,
                 rng);
  }
  return parts;
}

}  // namespace

std::vector<std::vector<double>> class_patterns(const TaskSpec& spec) {
  const PatternParts parts = pattern_parts(spec);
  const double rho = spec.pattern_overlap;
  std::vector<std::vector<double>> patterns = parts.bands;
  for (auto& p : patterns) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - rho;
      if (rho > 0.0) p[i] += rho * parts.shared[i];
    }
  }
  return patterns;
}

FewShotTask generate_task(const TaskSpec& spec) {
  const auto patterns = class_patterns(spec);
  Rng labels_rng(derive_seed(spec.seed, kLabelStream));
  Rng noise_rng(derive_seed(spec.seed, kNoiseStream));

  FewShotTask task;
  task.spec = spec;
  task.n_classes = spec.n_classes;
  task.k_shot = spec.k_shot;
  for (std::size_t c = 0; c < spec.n_classes; ++c) task.class_names.push_back(class_name(c));

  // K items per class with that class as primary label guarantees the
  // K-shot requirement; extra labels make the task multi-label.
  std::uint64_t next_id = 0;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.k_shot; ++k) {
      LabeledImage item;
      item.id = next_id++;
      item.labels = draw_labels(spec.n_classes, c, spec.multilabel_prob, labels_rng);
      task.support.push_back(std::move(item));
    }
  }
  for (std::size_t q = 0; q < spec.query_size; ++q) {
    LabeledImage item;
    item.id = next_id++;
    const auto primary = static_cast<std::size_t>(labels_rng.below(spec.n_classes));
    item.labels = draw_labels(spec.n_classes, primary, spec.multilabel_prob, labels_rng);
    task.query.push_back(std::move(item));
  }
  for (auto* set : {&task.support, &task.query}) {
    for (auto& item : *set) {
      item.image = render(patterns, item.labels, spec.image_size, spec.noise_std, noise_rng);
    }
  }
  return task;
}

std::vector<std::vector<double>> nearest_pattern_scores(const TaskSpec& spec,
                                                        std::span<const LabeledImage> items) {
  const auto patterns = class_patterns(spec);
  std::vector<std::vector<double>> scores;
  scores.reserve(items.size());
  for (const auto& item : items) {
    const auto x = item.image.data();
    if (x.size() != spec.image_size * spec.image_size) {
      throw DimensionError("image does not match the task spec's image size");
    }
    std::vector<double> row(patterns.size());
    for (std::size_t c = 0; c < patterns.size(); ++c) {
      double dot = 0.0, norm = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * patterns[c][i];
        norm += patterns[c][i] * patterns[c][i];
      }
      row[c] = dot / std::sqrt(norm);
    }
    scores.push_back(std::move(row));
  }
  return scores;
}

PairedSemantics paired_semantics(const TaskSpec& spec, std::size_t d_text, std::uint64_t seed,
                                 const PairedSemanticsOptions& options) {
  if (d_text == 0) throw ContractError("paired_semantics needs a positive text dimension");
  if (options.min_tokens == 0 || options.max_tokens < options.min_tokens) {
    throw ContractError("paired_semantics needs 1 <= min_tokens <= max_tokens");
  }
  if (!(options.jitter >= 0.0) || !(options.delta >= 0.0)) {
    throw ContractError("paired_semantics needs non-negative jitter and delta");
  }
  const auto bands = pattern_parts(spec).bands;
  const std::size_t pixels = spec.image_size * spec.image_size;
  Rng rng(seed);

  std::vector<double> projection(d_text * pixels);
  for (double& v : projection) v = rng.normal();

  PairedSemantics out;
  for (std::size_t c = 0; c < bands.size(); ++c) {
    std::vector<double> center(d_text, 0.0);
    for (std::size_t r = 0; r < d_text; ++r) {
      for (std::size_t i = 0; i < pixels; ++i) center[r] += projection[r * pixels + i] * bands[c][i];
    }
    center = unit(std::move(center));
    const std::size_t m =
        options.min_tokens + rng.below(options.max_tokens - options.min_tokens + 1);
    SemanticEmbeddingSet set{static_cast<int>(c), {}, SupervisionSource::kContext};
    const double scale = options.jitter / std::sqrt(static_cast<double>(d_text));
    for (std::size_t t = 0; t < m; ++t) {
      std::vector<double> token = center;
      for (double& v : token) v += scale * rng.normal();
      set.tokens.push_back(std::move(token));
    }
    out.context.push_back(std::move(set));
  }

  std::vector<double> base(d_text);
  for (double& v : base) v = rng.normal();
  base = unit(std::move(base));
  for (std::size_t c = 0; c < bands.size(); ++c) {
    std::vector<double> offset(d_text);
    for (double& v : offset) v = rng.normal();
    offset = unit(std::move(offset));
    std::vector<double> token(d_text);
    for (std::size_t r = 0; r < d_text; ++r) token[r] = base[r] + options.delta * offset[r];
    out.class_name.push_back({static_cast<int>(c), {std::move(token)}, SupervisionSource::kClassName});
  }
  return out;
}

std::string encode_task(const FewShotTask& task) {
  task.validate();
  const std::size_t size = task.image_size();
  Json manifest;
  manifest["version"] = kTaskVersion;
  manifest["spec"] = to_json(task.spec);
  manifest["n_classes"] = task.n_classes;
  manifest["k_shot"] = task.k_shot;
  manifest["class_names"] = task.class_names;
  manifest["image_shape"] = Shape{1, size, size};
  Json support = Json::array(), query = Json::array();
  for (const auto& item : task.support) support.push_back(item.id);
  for (const auto& item : task.query) query.push_back(item.id);
  manifest["support_ids"] = std::move(support);
  manifest["query_ids"] = std::move(query);
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  append_u64_le(out, text.size());
  out += text;
  for (const auto* set : {&task.support, &task.query}) {
    for (const auto& item : *set) {
      for (double v : item.image.data()) append_f64_le(out, v);
    }
  }
  for (const auto* set : {&task.support, &task.query}) {
    for (const auto& item : *set) {
      for (auto v : item.labels) out.push_back(static_cast<char>(v));
    }
  }
  return out;
}

FewShotTask decode_task(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16) {
    throw FormatError("task file truncated" + where(bytes.size()) + " (header needs 16 bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("task file: bad magic" + where(0));
  }
  const std::uint64_t len = read_u64_le(bytes.data() + 8);
  if (len > bytes.size() - 16) {
    throw FormatError("task file truncated" + where(bytes.size()) + " (manifest needs " +
                      std::to_string(len) + " bytes from byte 16)");
  }
  Json m;
  try {
    m = Json::parse(std::string(reinterpret_cast<const char*>(bytes.data() + 16), len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("task file: invalid manifest JSON" + where(16 + e.byte - 1));
  }
  if (!m.is_object() || !m.contains("version") || !m["version"].is_string()) {
    throw FormatError("task file: manifest has no version" + where(16));
  }
  if (m["version"] != kTaskVersion) {
    throw UnsupportedVersionError("task file: unsupported version '" +
                                  m["version"].get<std::string>() + "' (expected " +
                                  kTaskVersion + ")");
  }

  FewShotTask task;
  std::vector<std::uint64_t> support_ids, query_ids;
  Shape shape;
  try {
    std::vector<std::string> errors;
    task.spec = task_spec_from_json(m.at("spec"), "spec", errors);
    if (!errors.empty()) throw FormatError("task file: invalid spec: " + errors.front());
    task.n_classes = m.at("n_classes").get<std::size_t>();
    task.k_shot = m.at("k_shot").get<std::size_t>();
    task.class_names = m.at("class_names").get<std::vector<std::string>>();
    shape = m.at("image_shape").get<Shape>();
    support_ids = m.at("support_ids").get<std::vector<std::uint64_t>>();
    query_ids = m.at("query_ids").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task file: malformed manifest") + where(16) + ": " + e.what());
  }
  if (shape.size() != 3 || shape[0] != 1 || shape[1] != shape[2] || shape[1] == 0) {
    throw FormatError("task file: image_shape must be [1, H, H]" + where(16));
  }

  const std::size_t pixels = shape[1] * shape[2];
  const std::size_t items = support_ids.size() + query_ids.size();
  std::size_t offset = 16 + len;
  const std::size_t need = items * (pixels * 8 + task.n_classes);
  if (bytes.size() - offset < need) {
    throw FormatError("task file truncated" + where(bytes.size()) + " (payload needs " +
                      std::to_string(need) + " bytes from byte " + std::to_string(offset) + ")");
  }
  if (bytes.size() - offset > need) {
    throw FormatError("task file: trailing bytes" + where(offset + need));
  }
  auto read_images = [&](const std::vector<std::uint64_t>& ids, std::vector<LabeledImage>& out) {
    for (auto id : ids) {
      std::vector<double> values(pixels);
      for (std::size_t i = 0; i < pixels; ++i) {
        values[i] = read_f64_le(bytes.data() + offset);
        if (!std::isfinite(values[i])) throw FormatError("task file: non-finite pixel" + where(offset));
        offset += 8;
      }
      out.push_back({id, Tensor(shape, std::move(values)), {}});
    }
  };
  read_images(support_ids, task.support);
  read_images(query_ids, task.query);
  for (auto* set : {&task.support, &task.query}) {
    for (auto& item : *set) {
      item.labels.resize(task.n_classes);
      for (std::size_t c = 0; c < task.n_classes; ++c) {
        const unsigned char v = bytes[offset];
        if (v > 1) throw FormatError("task file: label byte is not 0 or 1" + where(offset));
        item.labels[c] = v;
        ++offset;
      }
    }
  }
  try {
    task.validate();
  } catch (const TaskError& e) {
    throw FormatError(std::string("task file: ") + e.what());
  }
  return task;
}

void save_task(const FewShotTask& task, const std::filesystem::path& path) {
  write_file(path, encode_task(task));
}

FewShotTask load_task(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  try {
    return decode_task(bytes);
  } catch (const FormatError& e) {
    if (dynamic_cast<const UnsupportedVersionError*>(&e)) {
      throw UnsupportedVersionError(path.string() + ": " + e.what());
    }
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fsadapt
