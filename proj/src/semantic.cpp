#include "fsadapt/semantic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "fsadapt/errors.hpp"

namespace fsadapt {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

bool starts_with_ci(std::string_view text, std::size_t pos, std::string_view needle) {
  if (pos + needle.size() > text.size()) return false;
  for (std::size_t i = 0; i < needle.size(); ++i) {
    if (lower(text[pos + i]) != lower(needle[i])) return false;
  }
  return true;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Words of a context; the [MASK] marker is its own token.
struct Word {
  std::string text;
  bool is_mask = false;
};

std::vector<Word> tokenize(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kMaskToken.size(), kMaskToken) == 0) {
      words.push_back({"<mask>", true});
      i += kMaskToken.size();
    } else if (is_word_char(text[i])) {
      std::string w;
      while (i < text.size() && is_word_char(text[i])) w.push_back(lower(text[i++]));
      words.push_back({std::move(w), false});
    } else {
      ++i;
    }
  }
  return words;
}

void add_ngrams(const std::string& word, std::size_t n, std::map<std::size_t, double>& bag,
                std::size_t buckets) {
  const std::string padded = "<" + word + ">";
  if (padded.size() <= n) {
    bag[fnv1a(padded) % buckets] += 1.0;
    return;
  }
  for (std::size_t i = 0; i + n <= padded.size(); ++i) {
    bag[fnv1a(std::string_view(padded).substr(i, n)) % buckets] += 1.0;
  }
}

[[noreturn]] void format_error(const std::string& msg) { throw FormatError(msg); }

std::vector<double> unit(std::span<const double> v) {
  double sq = 0.0;
  for (const double x : v) sq += x * x;
  const double n = std::sqrt(sq);
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

}  // namespace

std::string to_string(SupervisionSource source) {
  switch (source) {
    case SupervisionSource::kContext: return "context";
    case SupervisionSource::kTemplate: return "template";
    case SupervisionSource::kClassName: return "class_name";
  }
  return "context";
}

SupervisionSource parse_source(std::string_view name) {
  if (name == "context") return SupervisionSource::kContext;
  if (name == "template") return SupervisionSource::kTemplate;
  if (name == "class_name") return SupervisionSource::kClassName;
  format_error("unknown supervision source \"" + std::string(name) + "\"");
}

std::size_t count_masks(std::string_view text) {
  std::size_t n = 0;
  for (auto pos = text.find(kMaskToken); pos != std::string_view::npos;
       pos = text.find(kMaskToken, pos + kMaskToken.size())) {
    ++n;
  }
  return n;
}

void ClassContext::validate() const {
  const std::string who = "class " + std::to_string(class_id);
  if (source == SupervisionSource::kClassName) {
    if (context_text != class_name) format_error(who + ": class_name text must equal the class name");
    if (count_masks(context_text) != 0) format_error(who + ": class_name text must not contain [MASK]");
  } else if (count_masks(context_text) == 0) {
    format_error(who + ": " + to_string(source) + " text contains no [MASK]");
  }
}

MaskingResult mask_class_mentions(std::string_view raw_text, std::string_view class_name,
                                  int class_id, SupervisionSource source) {
  if (class_name.empty()) throw ContractError("mask_class_mentions: empty class name");
  if (raw_text.empty()) throw ContractError("mask_class_mentions: empty text");
  MaskingResult result;
  std::string out;
  out.reserve(raw_text.size());
  std::size_t i = 0;
  while (i < raw_text.size()) {
    if (raw_text.compare(i, kMaskToken.size(), kMaskToken) == 0) {
      out.append(kMaskToken);
      i += kMaskToken.size();
      continue;
    }
    const bool left_ok = i == 0 || !is_word_char(raw_text[i - 1]);
    const std::size_t end = i + class_name.size();
    if (left_ok && starts_with_ci(raw_text, i, class_name) &&
        (end == raw_text.size() || !is_word_char(raw_text[end]))) {
      out.append(kMaskToken);
      ++result.replacements;
      i = end;
      continue;
    }
    out.push_back(raw_text[i++]);
  }
  if (result.replacements == 0) {
    if (!out.empty() && out.back() != ' ') out.push_back(' ');
    out.append(kFallbackSentence);
    result.fallback_appended = true;
  }
  result.context = {class_id, std::string(class_name), std::move(out), source};
  return result;
}

ClassContext template_context(int class_id, std::string_view class_name) {
  return {class_id, std::string(class_name),
          "The symptom of " + std::string(class_name) + " in chest x-ray image is [MASK].",
          SupervisionSource::kTemplate};
}

ClassContext class_name_context(int class_id, std::string_view class_name) {
  return {class_id, std::string(class_name), std::string(class_name), SupervisionSource::kClassName};
}

void SemanticEmbeddingSet::validate() const {
  const std::string who = "class " + std::to_string(class_id);
  if (tokens.empty()) format_error(who + ": embedding set has no tokens");
  const std::size_t d = tokens.front().size();
  if (d == 0) format_error(who + ": zero-dimensional token");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].size() != d) {
      format_error(who + ": token " + std::to_string(i) + " has dim " +
                   std::to_string(tokens[i].size()) + ", expected " + std::to_string(d));
    }
    double sq = 0.0;
    for (const double v : tokens[i]) {
      if (!std::isfinite(v)) format_error(who + ": non-finite value in token " + std::to_string(i));
      sq += v * v;
    }
    if (sq == 0.0) format_error(who + ": token " + std::to_string(i) + " is a zero vector");
  }
}

SemanticEmbeddingSet toy_embed(const ClassContext& ctx, std::size_t dim, std::uint64_t seed,
                               const ToyEmbedderOptions& options) {
  ctx.validate();
  if (dim == 0 || options.ngram == 0 || options.buckets == 0) {
    throw ContractError("toy_embed: dim, ngram and buckets must be positive");
  }
  const auto words = tokenize(ctx.context_text);
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].is_mask) anchors.push_back(i);
  }
  // class_name sources have no marker: the whole name is the one "position".
  if (anchors.empty()) anchors.push_back(words.size());

  SemanticEmbeddingSet set;
  set.class_id = ctx.class_id;
  set.source = ctx.source;
  std::map<std::size_t, std::vector<double>> rows;
  auto row = [&](std::size_t bucket) -> const std::vector<double>& {
    auto it = rows.find(bucket);
    if (it != rows.end()) return it->second;
    Rng rng(derive_seed(seed, bucket));
    std::vector<double> r(dim);
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    return rows.emplace(bucket, std::move(r)).first->second;
  };

  for (const std::size_t anchor : anchors) {
    std::map<std::size_t, double> bag;
    add_ngrams("mask", options.ngram, bag, options.buckets);
    const std::size_t lo = anchor >= options.window ? anchor - options.window : 0;
    const std::size_t hi = std::min(words.size(), anchor + options.window + 1);
    for (std::size_t i = lo; i < hi; ++i) {
      if (i == anchor) continue;
      add_ngrams(words[i].text, options.ngram, bag, options.buckets);
    }
    std::vector<double> v(dim, 0.0);
    for (const auto& [bucket, count] : bag) {
      const auto& r = row(bucket);
      for (std::size_t j = 0; j < dim; ++j) v[j] += count * r[j];
    }
    double sq = 0.0;
    for (const double x : v) sq += x * x;
    if (!(sq > 0.0)) throw NumericError("toy_embed: degenerate embedding for class " + std::to_string(ctx.class_id));
    set.tokens.push_back(unit(v));
  }
  return set;
}

ContextFile parse_contexts(const std::string& text) {
  const Json j = parse_json(text, "context file");
  ContextFile file;
  try {
    if (!j.is_object()) format_error("context file: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key != "task" && key != "classes") format_error("context file: unknown key \"" + key + "\"");
    }
    file.task = j.at("task").get<std::string>();
    std::set<int> ids;
    for (const auto& c : j.at("classes")) {
      for (const auto& [key, value] : c.items()) {
        if (key != "id" && key != "name" && key != "source" && key != "text") {
          format_error("context file: unknown class key \"" + key + "\"");
        }
      }
      ClassContext ctx;
      ctx.class_id = c.at("id").get<int>();
      ctx.class_name = c.at("name").get<std::string>();
      ctx.source = parse_source(c.at("source").get<std::string>());
      ctx.context_text = c.at("text").get<std::string>();
      if (!ids.insert(ctx.class_id).second) {
        format_error("context file: duplicate class id " + std::to_string(ctx.class_id));
      }
      ctx.validate();
      file.classes.push_back(std::move(ctx));
    }
  } catch (const nlohmann::json::exception& e) {
    format_error(std::string("context file: ") + e.what());
  }
  if (file.classes.empty()) format_error("context file: no classes");
  return file;
}

ContextFile load_contexts(const std::filesystem::path& path) {
  return parse_contexts(read_text_file(path));
}

std::string serialize_contexts(const ContextFile& file) {
  Json classes = Json::array();
  for (const auto& c : file.classes) {
    classes.push_back({{"id", c.class_id}, {"name", c.class_name}, {"source", to_string(c.source)},
                       {"text", c.context_text}});
  }
  return Json{{"task", file.task}, {"classes", classes}}.dump(2) + "\n";
}

std::string serialize_embeddings(std::span<const SemanticEmbeddingSet> sets) {
  std::size_t dim = sets.empty() ? 0 : sets.front().dim();
  std::string out = "{\"dim\": " + std::to_string(dim) + ", \"classes\": [\n";
  for (std::size_t c = 0; c < sets.size(); ++c) {
    const auto& s = sets[c];
    out += "  {\"id\": " + std::to_string(s.class_id) + ", \"source\": \"" + to_string(s.source) +
           "\", \"tokens\": [";
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      out += t ? ",\n    [" : "\n    [";
      for (std::size_t j = 0; j < s.tokens[t].size(); ++j) {
        if (j) out += ", ";
        out += format_double(s.tokens[t][j]);
      }
      out += "]";
    }
    out += "]}";
    out += c + 1 < sets.size() ? ",\n" : "\n";
  }
  out += "]}\n";
  return out;
}

std::vector<SemanticEmbeddingSet> parse_embeddings(const std::string& text) {
  const Json j = parse_json(text, "embedding file");
  std::vector<SemanticEmbeddingSet> sets;
  std::size_t dim = 0;
  try {
    if (!j.is_object()) format_error("embedding file: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key != "dim" && key != "classes") format_error("embedding file: unknown key \"" + key + "\"");
    }
    dim = j.at("dim").get<std::size_t>();
    std::set<int> ids;
    for (const auto& c : j.at("classes")) {
      for (const auto& [key, value] : c.items()) {
        if (key != "id" && key != "source" && key != "tokens") {
          format_error("embedding file: unknown class key \"" + key + "\"");
        }
      }
      SemanticEmbeddingSet s;
      s.class_id = c.at("id").get<int>();
      s.source = parse_source(c.at("source").get<std::string>());
      s.tokens = c.at("tokens").get<std::vector<std::vector<double>>>();
      if (!ids.insert(s.class_id).second) {
        format_error("embedding file: duplicate class id " + std::to_string(s.class_id));
      }
      s.validate();
      if (s.dim() != dim) {
        format_error("embedding file: class " + std::to_string(s.class_id) + " has dim " +
                     std::to_string(s.dim()) + ", file declares " + std::to_string(dim));
      }
      sets.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    format_error(std::string("embedding file: ") + e.what());
  }
  if (sets.empty()) format_error("embedding file: empty class list");
  return sets;
}

std::vector<SemanticEmbeddingSet> load_embeddings(const std::filesystem::path& path) {
  return parse_embeddings(read_text_file(path));
}

void save_embeddings(const std::filesystem::path& path, std::span<const SemanticEmbeddingSet> sets) {
  for (const auto& s : sets) {
    s.validate();
    if (s.dim() != sets.front().dim()) throw FormatError("save_embeddings: mixed dimensions");
  }
  write_file(path, serialize_embeddings(sets));
}

std::string to_string(Aggregate aggregate) { return aggregate == Aggregate::kSum ? "sum" : "mean"; }

void AlignmentHeadConfig::validate() const {
  std::vector<std::string> problems;
  if (!(tau > 0.0) || !std::isfinite(tau)) problems.push_back("tau must be positive");
  if (m0 == 0) problems.push_back("m0 must be at least 1");
  if (!problems.empty()) {
    std::string msg = "invalid alignment head config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

std::vector<std::size_t> bootstrap_tokens(const SemanticEmbeddingSet& set, std::size_t m0, Rng& rng) {
  if (set.tokens.empty()) throw ContractError("bootstrap_tokens: empty embedding set");
  if (m0 == 0) throw ContractError("bootstrap_tokens: m0 must be at least 1");
  const std::size_t m = set.tokens.size();
  const std::size_t k = std::min(m0, m);
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(m - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TokenBank TokenBank::build(std::span<const SemanticEmbeddingSet> sets,
                           const std::vector<std::vector<std::size_t>>& chosen, Aggregate aggregate) {
  if (sets.empty()) throw ContractError("TokenBank: no classes");
  if (chosen.size() != sets.size()) throw ContractError("TokenBank: one token subset per class required");
  const std::size_t d = sets.front().dim();
  std::size_t total = 0;
  for (std::size_t c = 0; c < sets.size(); ++c) {
    if (sets[c].dim() != d) throw DimensionError("TokenBank: classes have different token dims");
    if (chosen[c].empty()) throw ContractError("TokenBank: empty token subset for class " + std::to_string(sets[c].class_id));
    for (const auto i : chosen[c]) {
      if (i >= sets[c].size()) throw ContractError("TokenBank: token index out of range");
    }
    total += chosen[c].size();
  }
  std::vector<double> tok(d * total);
  std::vector<double> sel(total * sets.size(), 0.0);
  std::size_t col = 0;
  for (std::size_t c = 0; c < sets.size(); ++c) {
    const double w = aggregate == Aggregate::kSum ? 1.0 : 1.0 / static_cast<double>(chosen[c].size());
    for (const auto i : chosen[c]) {
      const auto u = unit(sets[c].tokens[i]);
      for (std::size_t r = 0; r < d; ++r) tok[r * total + col] = u[r];
      sel[col * sets.size() + c] = w;
      ++col;
    }
  }
  TokenBank bank;
  bank.tokens = Tensor({d, total}, std::move(tok));
  bank.selector = Tensor({total, sets.size()}, std::move(sel));
  bank.classes = sets.size();
  return bank;
}

TokenBank TokenBank::all_tokens(std::span<const SemanticEmbeddingSet> sets, Aggregate aggregate) {
  std::vector<std::vector<std::size_t>> chosen;
  for (const auto& s : sets) {
    std::vector<std::size_t> all(s.size());
    std::iota(all.begin(), all.end(), 0);
    chosen.push_back(std::move(all));
  }
  return build(sets, chosen, aggregate);
}

SemanticHead::SemanticHead(AlignmentHeadConfig config, std::size_t visual_dim, std::size_t text_dim,
                           std::uint64_t seed)
    : config_(config), visual_dim_(visual_dim), text_dim_(text_dim) {
  config_.validate();
  if (!config_.projection && visual_dim != text_dim) {
    throw ConfigError("alignment head: visual dim " + std::to_string(visual_dim) +
                      " differs from text dim " + std::to_string(text_dim) +
                      " and the projection is disabled");
  }
  if (config_.projection) {
    Rng rng(seed);
    std::vector<double> w(visual_dim * text_dim);
    for (auto& v : w) {
      double z = rng.normal();
      while (std::abs(z) > 2.0) z = rng.normal();
      v = 0.02 * z;
    }
    Parameter p;
    p.key = "head.projection.weight";
    p.stage = kHeadGroup;
    p.role = "weight";
    p.value = Tensor({visual_dim, text_dim}, std::move(w), true);
    params_.push_back(std::move(p));
  }
}

SemanticHead::SemanticHead(const SemanticHead& other)
    : config_(other.config_),
      visual_dim_(other.visual_dim_),
      text_dim_(other.text_dim_),
      params_(other.params_) {
  for (auto& p : params_) {
    Tensor copy = p.value.detach();
    copy.set_requires_grad(!p.frozen);
    p.value = std::move(copy);
  }
}

SemanticHead& SemanticHead::operator=(const SemanticHead& other) {
  if (this != &other) *this = SemanticHead(other);
  return *this;
}

Tensor SemanticHead::project(const Tensor& visual) const {
  if (visual.rank() != 2 || visual.dim(1) != visual_dim_) {
    throw DimensionError("alignment head expects [b x " + std::to_string(visual_dim_) + "], got " +
                         shape_str(visual.shape()));
  }
  return config_.projection ? matmul(visual, params_.front().value) : visual;
}

Tensor SemanticHead::logits(const Tensor& visual, const TokenBank& bank) const {
  if (bank.tokens.dim(0) != text_dim_) {
    throw DimensionError("alignment head text dim " + std::to_string(text_dim_) +
                         " does not match token dim " + std::to_string(bank.tokens.dim(0)));
  }
  Tensor unit_visual;
  try {
    unit_visual = normalize_lastdim(project(visual));
  } catch (const NumericError&) {
    throw NumericError("alignment head: projected visual embedding has zero norm");
  }
  return scale(matmul(matmul(unit_visual, bank.tokens), bank.selector), config_.tau);
}

double class_likelihood(std::span<const double> visual, const SemanticEmbeddingSet& set,
                        std::span<const std::size_t> chosen, const AlignmentHeadConfig& config,
                        const SemanticHead* head) {
  if (chosen.empty()) throw ContractError("class_likelihood: empty token subset");
  set.validate();
  const SemanticEmbeddingSet* one = &set;
  const TokenBank bank = TokenBank::build(std::span(one, 1), {{chosen.begin(), chosen.end()}}, config.aggregate);
  const Tensor v({1, visual.size()}, {visual.begin(), visual.end()});
  NoGradGuard no_grad;
  if (head) {
    if (!(head->config() == config)) throw ContractError("class_likelihood: config differs from head config");
    return sigmoid(head->logits(v, bank)).item();
  }
  AlignmentHeadConfig identity = config;
  identity.projection = false;
  const SemanticHead plain(identity, visual.size(), visual.size(), 0);
  return sigmoid(plain.logits(v, bank)).item();
}

Matrix correlation_matrix(std::span<const SemanticEmbeddingSet> sets) {
  if (sets.size() < 2) throw ContractError("correlation_matrix: needs at least 2 classes");
  const std::size_t d = sets.front().dim();
  std::vector<std::vector<double>> means;
  for (const auto& s : sets) {
    s.validate();
    if (s.dim() != d) throw DimensionError("correlation_matrix: classes have different token dims");
    std::vector<double> m(d, 0.0);
    for (const auto& t : s.tokens) {
      const auto u = unit(t);
      for (std::size_t j = 0; j < d; ++j) m[j] += u[j];
    }
    double sq = 0.0;
    for (const double v : m) sq += v * v;
    if (!(sq > 0.0)) throw NumericError("correlation_matrix: class " + std::to_string(s.class_id) + " has a zero mean token vector");
    means.push_back(unit(m));
  }
  const std::size_t c = sets.size();
  Matrix out(c, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < c; ++i) {
    out[i][i] = 1.0;
    for (std::size_t k = i + 1; k < c; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += means[i][j] * means[k][j];
      dot = std::clamp(dot, -1.0, 1.0);
      out[i][k] = dot;
      out[k][i] = dot;
    }
  }
  return out;
}

double mean_offdiag(const Matrix& m) {
  const std::size_t n = m.size();
  if (n < 2) throw ContractError("mean_offdiag: needs at least a 2x2 matrix");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (m[i].size() != n) throw DimensionError("mean_offdiag: matrix is not square");
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) acc += m[i][j];
    }
  }
  return acc / static_cast<double>(n * (n - 1));
}

}  // namespace fsadapt
