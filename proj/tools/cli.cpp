#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <optional>

#include "CLI11.hpp"
#include "fsadapt/checkpoint.hpp"
#include "fsadapt/errors.hpp"
#include "fsadapt/evaluation.hpp"
#include "fsadapt/gradcheck.hpp"
#include "fsadapt/metrics.hpp"
#include "fsadapt/semantic.hpp"
#include "fsadapt/taskgen.hpp"

namespace fsadapt::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "fsadapt 0.1.0";
/// The toy text embedder stands in for a fixed pretrained language model, so
/// its projection does not follow the experiment seed.
constexpr std::uint64_t kEmbedderSeed = 0;

class Refusal : public IoError {
 public:
  using IoError::IoError;
};

std::string pretty(const Json& j) { return j.dump(2) + "\n"; }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void refuse_existing_file(const fs::path& path, bool force) {
  if (!force && fs::exists(path)) {
    throw Refusal("refusing to overwrite " + path.string() + " (pass --force)");
  }
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw ConfigError("output: an output directory is required (-o)");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
    if (!force && !fs::is_empty(dir)) {
      throw Refusal("refusing to write into non-empty directory " + dir.string() + " (pass --force)");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void throw_config_errors(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                    (errors.size() == 1 ? "" : "s") + "):";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

Json without_seed(Json j) {
  j.erase("seed");
  return j;
}

/// Flags shared by train and sweep-freeze; each overrides the config file.
struct Overrides {
  std::string config;
  std::optional<std::string> task, embeddings, contexts, head, output;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, frozen_stages;
  std::optional<double> learning_rate;
  bool eval_each_epoch = false;
  bool force = false;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config, "Experiment config (JSON)");
    cmd.add_option("--task", task, "Task file");
    cmd.add_option("--embeddings", embeddings, "Mask-token embedding file");
    cmd.add_option("--contexts", contexts, "Class context file, embedded with the toy text encoder");
    cmd.add_option("--head", head, "semantic or one_hot");
    cmd.add_option("--seed", seed, "Master seed");
    cmd.add_option("--epochs", epochs, "Adaptation epochs");
    cmd.add_option("--batch-size", batch_size, "Batch size");
    cmd.add_option("--lr", learning_rate, "Learning rate");
    cmd.add_option("--frozen-stages", frozen_stages, "Number of frozen encoder stages");
    cmd.add_flag("--eval-each-epoch", eval_each_epoch, "Score the query set after every epoch");
    cmd.add_option("-o,--output", output, "Output directory");
    cmd.add_flag("--force", force, "Overwrite existing outputs");
  }

  ExperimentConfig resolve() const {
    std::vector<std::string> errors;
    ExperimentConfig cfg;
    if (!config.empty()) {
      cfg = experiment_from_json(parse_json(read_text_file(config), config), errors);
    }
    if (task) cfg.task = *task;
    if (embeddings) cfg.embeddings = *embeddings;
    if (contexts) cfg.contexts = *contexts;
    if (head) {
      try {
        cfg.train.head = parse_head_kind(*head);
      } catch (const ConfigError& e) {
        errors.push_back(std::string("--head: ") + e.what());
      }
    }
    if (seed) {
      cfg.seed = *seed;
      cfg.encoder.seed = *seed;
      cfg.train.seed = *seed;
    }
    if (epochs) cfg.train.epochs = *epochs;
    if (batch_size) cfg.train.batch_size = *batch_size;
    if (learning_rate) cfg.train.learning_rate = *learning_rate;
    if (frozen_stages) cfg.freeze = {*frozen_stages, *frozen_stages >= 1};
    if (eval_each_epoch) cfg.train.eval_each_epoch = true;
    if (output) cfg.output = *output;
    try {
      cfg.train.validate();
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      for (std::size_t pos = msg.find('\n'); pos != std::string::npos; pos = msg.find('\n', pos + 1)) {
        const std::size_t next = msg.find('\n', pos + 1);
        errors.push_back("train: " + msg.substr(pos + 3, next == std::string::npos ? std::string::npos
                                                                                  : next - pos - 3));
      }
    }
    check_experiment(cfg, errors);
    throw_config_errors(errors);
    return cfg;
  }
};

std::vector<SemanticEmbeddingSet> load_semantics(const ExperimentConfig& cfg) {
  if (cfg.train.head == HeadKind::kOneHot) return {};
  std::vector<SemanticEmbeddingSet> sets;
  if (!cfg.embeddings.empty()) {
    sets = load_embeddings(cfg.embeddings);
  } else {
    const ContextFile file = load_contexts(cfg.contexts);
    for (const auto& ctx : file.classes) sets.push_back(toy_embed(ctx, cfg.text_dim, kEmbedderSeed));
  }
  std::sort(sets.begin(), sets.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  return sets;
}

Model build_model(const ExperimentConfig& cfg, std::size_t classes,
                  std::vector<SemanticEmbeddingSet> embeddings) {
  Encoder encoder(cfg.encoder);
  encoder.apply_freeze(cfg.freeze);
  return Model(std::move(encoder), cfg.train.head, cfg.head, classes, std::move(embeddings), cfg.seed);
}

std::vector<NamedTensor> text_tensors(const std::vector<SemanticEmbeddingSet>& sets) {
  std::vector<NamedTensor> out;
  for (const auto& set : sets) {
    NamedTensor t;
    t.key = "text." + std::to_string(set.class_id);
    t.shape = {set.size(), set.dim()};
    for (const auto& token : set.tokens) t.values.insert(t.values.end(), token.begin(), token.end());
    out.push_back(std::move(t));
  }
  return out;
}

Json metadata(const std::string& command, const std::string& started, double seconds) {
  return {{"command", command},
          {"tool", kVersion},
          {"started_utc", started},
          {"finished_utc", utc_now()},
          {"wall_time_s", seconds}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Json report_json(const EvalReport& report, std::size_t n_query) {
  Json j = report.to_json();
  j["n_query"] = n_query;
  j["config"] = "config.json";
  j["skip_policy"] = "classes without both positive and negative query items are skipped";
  return j;
}

// ---- gen-task ---------------------------------------------------------------

struct GenTaskArgs {
  std::string preset = "easy";
  std::uint64_t seed = 0;
  std::optional<std::size_t> n_classes, k_shot, query_size, image_size;
  std::optional<double> noise, overlap, multilabel_prob;
  std::string output;
  std::string semantics_dir;
  std::size_t text_dim = 32;
  bool force = false;
};

int cmd_gen_task(const GenTaskArgs& a, std::ostream& out) {
  TaskSpec spec = TaskSpec::preset(a.preset, a.seed);
  if (a.n_classes) spec.n_classes = *a.n_classes;
  if (a.k_shot) spec.k_shot = *a.k_shot;
  if (a.query_size) spec.query_size = *a.query_size;
  if (a.image_size) spec.image_size = *a.image_size;
  if (a.noise) spec.noise_std = *a.noise;
  if (a.overlap) spec.pattern_overlap = *a.overlap;
  if (a.multilabel_prob) spec.multilabel_prob = *a.multilabel_prob;
  spec.validate();
  if (a.text_dim == 0) throw ConfigError("--text-dim must be positive");

  refuse_existing_file(a.output, a.force);
  const fs::path sem(a.semantics_dir);
  if (!a.semantics_dir.empty()) {
    refuse_existing_file(sem / "context.emb", a.force);
    refuse_existing_file(sem / "class_name.emb", a.force);
  }

  const FewShotTask task = generate_task(spec);
  save_task(task, a.output);
  out << "wrote " << a.output << ": N=" << task.n_classes << " K=" << task.k_shot
      << " query=" << task.query.size() << " support=" << task.support.size()
      << " image=" << spec.image_size << "\n";
  if (!a.semantics_dir.empty()) {
    const PairedSemantics paired = paired_semantics(spec, a.text_dim, derive_seed(a.seed, 7));
    save_embeddings(sem / "context.emb", paired.context);
    save_embeddings(sem / "class_name.emb", paired.class_name);
    out << "wrote " << (sem / "context.emb").string() << " and " << (sem / "class_name.emb").string()
        << " (d_text=" << a.text_dim << ")\n";
  }
  return kOk;
}

// ---- train / eval -----------------------------------------------------------

int cmd_train(const Overrides& o, std::ostream& out) {
  const ExperimentConfig cfg = o.resolve();
  const fs::path dir(cfg.output);
  prepare_output_dir(dir, o.force);
  const Json snapshot = to_json(cfg);
  write_file(dir / "config.json", pretty(snapshot));

  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const FewShotTask task = load_task(cfg.task);
  auto embeddings = load_semantics(cfg);
  const Model model = build_model(cfg, task.n_classes, embeddings);
  const FreezeReport counts = model.partition();

  const AdaptResult result = adapt(task, model, cfg.train);
  const EvalReport report = evaluate_model(result.model, task, cfg.train.augmentation, cfg.eval_batch_size);

  Checkpoint ckpt;
  ckpt.config = snapshot;
  ckpt.tensors = result.model.export_parameters();
  for (auto& t : text_tensors(embeddings)) ckpt.tensors.push_back(std::move(t));
  save_checkpoint(dir / "checkpoint.bin", ckpt);
  write_file(dir / "history.json", pretty(result.history.to_json(snapshot)));
  write_file(dir / "report.json", pretty(report_json(report, task.query.size())));
  write_file(dir / "metadata.json", pretty(metadata("train", started, seconds_since(t0))));

  out << "trained " << cfg.train.epochs << " epochs on " << task.support.size()
      << " support images (frozen " << counts.frozen_params << ", trainable "
      << counts.trainable_params << " parameters)\n";
  out << report.table();
  out << "outputs in " << dir.string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> task;
  std::optional<std::string> output;
  bool force = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  std::vector<std::string> errors;
  ExperimentConfig cfg = experiment_from_json(ckpt.config, errors);
  if (!errors.empty()) throw FormatError(a.checkpoint + ": embedded config is invalid: " + errors.front());
  if (a.task) cfg.task = *a.task;
  if (cfg.task.empty()) throw ConfigError("task: no task file given (--task)");
  if (a.output) refuse_existing_file(fs::path(*a.output) / "report.json", a.force);

  std::vector<SemanticEmbeddingSet> embeddings;
  std::vector<NamedTensor> params;
  for (const auto& t : ckpt.tensors) {
    if (t.key.rfind("text.", 0) != 0) {
      params.push_back(t);
      continue;
    }
    if (t.shape.size() != 2) throw FormatError(a.checkpoint + ": text tensor " + t.key + " is not 2-D");
    SemanticEmbeddingSet set;
    set.class_id = std::stoi(t.key.substr(5));
    for (std::size_t r = 0; r < t.shape[0]; ++r) {
      const auto begin = t.values.begin() + static_cast<std::ptrdiff_t>(r * t.shape[1]);
      set.tokens.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(t.shape[1]));
    }
    embeddings.push_back(std::move(set));
  }
  const FewShotTask task = load_task(cfg.task);
  Model model = build_model(cfg, task.n_classes, std::move(embeddings));
  model.import_parameters(params);
  const EvalReport report = evaluate_model(model, task, cfg.train.augmentation, cfg.eval_batch_size);
  out << report.table();
  if (a.output) {
    const fs::path path = fs::path(*a.output) / "report.json";
    write_file(path, pretty(report_json(report, task.query.size())));
    out << "wrote " << path.string() << "\n";
  }
  return kOk;
}

// ---- sweep-freeze -----------------------------------------------------------

int cmd_sweep(const Overrides& o, const std::optional<std::string>& n_list, bool timing,
              std::ostream& out) {
  const ExperimentConfig cfg = o.resolve();
  const std::size_t stages = cfg.encoder.stages.size();
  std::string list = n_list.value_or("");
  if (list.empty()) {
    for (std::size_t n = 0; n <= stages; ++n) list += std::to_string(n) + ",";
    list += "linear";
  }
  const std::vector<SweepPoint> points = parse_sweep_points(list, stages);

  const fs::path dir(cfg.output);
  prepare_output_dir(dir, o.force);
  const Json snapshot = to_json(cfg);
  write_file(dir / "config.json", pretty(snapshot));

  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const FewShotTask task = load_task(cfg.task);
  SweepSetup setup;
  setup.encoder = cfg.encoder;
  setup.head = cfg.head;
  setup.embeddings = load_semantics(cfg);
  setup.train = cfg.train;
  setup.model_seed = cfg.seed;
  const std::vector<SweepRow> rows = sweep_freeze(task, setup, points);

  const std::string csv = sweep_csv(rows, timing);
  write_file(dir / "sweep.csv", csv);
  Json reports = Json::array();
  Json timings = Json::array();
  for (const auto& r : rows) {
    reports.push_back({{"N", r.label},
                       {"frozen_params", r.frozen_params},
                       {"trainable_params", r.trainable_params},
                       {"report", report_json(r.report, task.query.size())}});
    timings.push_back({{"N", r.label}, {"wall_time_s", r.wall_time_s}});
  }
  write_file(dir / "reports.json", pretty(Json{{"rows", reports}}));
  Json meta = metadata("sweep-freeze", started, seconds_since(t0));
  meta["rows"] = timings;
  write_file(dir / "metadata.json", pretty(meta));
  out << csv;
  return kOk;
}

// ---- analyze-embeddings -----------------------------------------------------

std::string source_name(const std::vector<SemanticEmbeddingSet>& sets) {
  const SupervisionSource first = sets.front().source;
  for (const auto& s : sets) {
    if (s.source != first) return "mixed";
  }
  return to_string(first);
}

int cmd_analyze(const std::vector<std::string>& files, const std::optional<std::string>& output,
                bool force, std::ostream& out) {
  struct Row {
    std::string file, source;
    std::size_t classes;
    double offdiag;
  };
  if (output) {
    for (const auto& f : files) {
      refuse_existing_file(fs::path(*output) / (fs::path(f).stem().string() + ".corr.csv"), force);
    }
    refuse_existing_file(fs::path(*output) / "summary.csv", force);
  }
  std::vector<Row> rows;
  char buf[64];
  for (const auto& f : files) {
    const auto sets = load_embeddings(f);
    const Matrix corr = correlation_matrix(sets);
    const double off = mean_offdiag(corr);
    rows.push_back({f, source_name(sets), sets.size(), off});

    out << "== " << f << " (" << rows.back().source << ", " << sets.size() << " classes)\n";
    out << "      ";
    for (const auto& s : sets) {
      std::snprintf(buf, sizeof buf, " %6d", s.class_id);
      out << buf;
    }
    out << "\n";
    std::string csv = "class";
    for (const auto& s : sets) csv += "," + std::to_string(s.class_id);
    csv += "\n";
    for (std::size_t i = 0; i < corr.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%6d", sets[i].class_id);
      out << buf;
      csv += std::to_string(sets[i].class_id);
      for (double v : corr[i]) {
        std::snprintf(buf, sizeof buf, " %6.3f", v);
        out << buf;
        csv += "," + format_double(v);
      }
      out << "\n";
      csv += "\n";
    }
    std::snprintf(buf, sizeof buf, "%.4f", off);
    out << "mean off-diagonal: " << buf << "\n\n";
    if (output) write_file(fs::path(*output) / (fs::path(f).stem().string() + ".corr.csv"), csv);
  }

  std::vector<Row> sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Row& a, const Row& b) { return a.offdiag < b.offdiag; });
  out << "source       classes  mean_offdiag  file\n";
  std::string summary = "file,source,classes,mean_offdiag\n";
  for (const auto& r : sorted) {
    std::snprintf(buf, sizeof buf, "%-12s %7zu  %12.4f  ", r.source.c_str(), r.classes, r.offdiag);
    out << buf << r.file << "\n";
    summary += r.file + "," + r.source + "," + std::to_string(r.classes) + "," + format_double(r.offdiag) + "\n";
  }
  if (sorted.size() > 1) {
    out << "ordering:";
    for (std::size_t i = 0; i < sorted.size(); ++i) out << (i ? " < " : " ") << sorted[i].source;
    out << "\n";
  }
  if (output) write_file(fs::path(*output) / "summary.csv", summary);
  return kOk;
}

// ---- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::size_t image_size = 32, patch_size = 8, stages = 2, blocks = 1, width = 16, heads = 2;
  std::size_t classes = 3, tokens = 2, batch = 2;
  double step = 1e-2;
  double tolerance = 1e-4;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  EncoderConfig ec;
  ec.image_size = a.image_size;
  ec.patch_size = a.patch_size;
  ec.stages.assign(a.stages, StageSpec{a.blocks, a.width});
  ec.heads = a.heads;
  ec.output_dim = a.width;
  ec.seed = a.seed;
  Encoder encoder(ec);
  if (a.classes == 0 || a.tokens == 0 || a.batch == 0) {
    throw ConfigError("--classes, --tokens and --batch must be positive");
  }
  if (!(a.step > 0.0)) throw ConfigError("--step must be positive");

  Rng rng(derive_seed(a.seed, 99));
  std::vector<SemanticEmbeddingSet> sets;
  for (std::size_t c = 0; c < a.classes; ++c) {
    SemanticEmbeddingSet set{static_cast<int>(c), {}, SupervisionSource::kContext};
    for (std::size_t t = 0; t < a.tokens; ++t) {
      std::vector<double> v(a.width);
      for (auto& x : v) x = rng.normal();
      set.tokens.push_back(std::move(v));
    }
    sets.push_back(std::move(set));
  }
  const TokenBank bank = TokenBank::all_tokens(sets, Aggregate::kSum);
  const SemanticHead head(AlignmentHeadConfig{}, a.width, a.width, derive_seed(a.seed, 98));

  std::vector<double> pixels(a.batch * a.image_size * a.image_size);
  for (auto& x : pixels) x = rng.uniform(-1.0, 1.0);
  const Tensor images({a.batch, 1, a.image_size, a.image_size}, std::move(pixels));
  std::vector<double> y(a.batch * a.classes);
  for (auto& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const Tensor targets({a.batch, a.classes}, std::move(y));

  std::vector<Tensor> params;
  for (const auto& p : encoder.parameters()) params.push_back(p.value);
  for (const auto& p : head.parameters()) params.push_back(p.value);
  auto loss = [&] { return bce_loss(sigmoid(head.logits(encoder.forward(images), bank)), targets); };

  for (auto& p : params) p.zero_grad();
  loss().backward();
  if (a.corrupt) params.front().mutable_grad()[0] += 1.0;
  const auto numeric = ridders_diff_grad([&] { return loss().item(); }, params, a.step);
  const GradCheckResult result = compare_gradients(params, numeric);

  const bool pass = result.max_relative_error <= a.tolerance;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "gradcheck: %zu parameters in %zu tensors checked; max relative error %.3e "
                "(tolerance %.1e): %s\n",
                result.coordinates, params.size(), result.max_relative_error, a.tolerance,
                pass ? "PASS" : "FAIL");
  out << buf;
  return pass ? kOk : kVerificationFailed;
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const Refusal& e) {
    err << "error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailed;
  }
}

}  // namespace

Json to_json(const ExperimentConfig& cfg) {
  return {{"task", cfg.task},
          {"embeddings", cfg.embeddings},
          {"contexts", cfg.contexts},
          {"text_dim", cfg.text_dim},
          {"output", cfg.output},
          {"encoder", without_seed(to_json(cfg.encoder))},
          {"freeze", to_json(cfg.freeze)},
          {"head", to_json(cfg.head)},
          {"train", without_seed(to_json(cfg.train))},
          {"eval", {{"batch_size", cfg.eval_batch_size}}},
          {"seed", cfg.seed}};
}

ExperimentConfig experiment_from_json(const Json& j, std::vector<std::string>& errors) {
  ExperimentConfig cfg;
  if (!j.is_object()) {
    errors.push_back("config: expected a JSON object");
    return cfg;
  }
  StrictObject obj(j, "", errors);
  obj.read("task", cfg.task);
  obj.read("embeddings", cfg.embeddings);
  obj.read("contexts", cfg.contexts);
  obj.read("text_dim", cfg.text_dim);
  obj.read("output", cfg.output);
  obj.read("seed", cfg.seed);
  auto no_seed = [&](const Json* sub, const char* key) {
    if (sub && sub->is_object() && sub->contains("seed")) {
      errors.push_back(std::string(key) + ".seed: set the seed at the top level");
    }
  };
  if (const Json* e = obj.child("encoder")) {
    no_seed(e, "encoder");
    Json copy = *e;
    copy.erase("seed");
    cfg.encoder = encoder_config_from_json(copy, "encoder", errors);
  }
  if (const Json* f = obj.child("freeze")) {
    cfg.freeze = freeze_policy_from_json(*f, "freeze", errors);
  }
  if (const Json* h = obj.child("head")) cfg.head = head_config_from_json(*h, "head", errors);
  if (const Json* t = obj.child("train")) {
    no_seed(t, "train");
    Json copy = *t;
    copy.erase("seed");
    cfg.train = train_config_from_json(copy, "train", errors);
  }
  if (const Json* e = obj.child("eval")) {
    StrictObject eval(*e, "eval", errors);
    eval.read("batch_size", cfg.eval_batch_size);
    eval.finish();
  }
  obj.finish();
  cfg.encoder.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.freeze.freeze_patch_embed = cfg.freeze.patch_embed_frozen();
  return cfg;
}

void check_experiment(const ExperimentConfig& cfg, std::vector<std::string>& errors) {
  if (cfg.task.empty()) errors.push_back("task: a task file is required");
  const bool semantic = cfg.train.head == HeadKind::kSemantic;
  if (semantic && cfg.embeddings.empty() && cfg.contexts.empty()) {
    errors.push_back("embeddings: required when train.head is semantic (or give contexts)");
  }
  if (!cfg.embeddings.empty() && !cfg.contexts.empty()) {
    errors.push_back("contexts: give either embeddings or contexts, not both");
  }
  if (!semantic && (!cfg.embeddings.empty() || !cfg.contexts.empty())) {
    errors.push_back("embeddings: the one_hot head does not use text supervision");
  }
  if (cfg.freeze.frozen_stages > cfg.encoder.stages.size()) {
    errors.push_back("freeze.frozen_stages: " + std::to_string(cfg.freeze.frozen_stages) +
                     " exceeds the encoder's " + std::to_string(cfg.encoder.stages.size()) + " stages");
  }
  if (cfg.text_dim == 0) errors.push_back("text_dim: must be positive");
  if (cfg.eval_batch_size == 0) errors.push_back("eval.batch_size: must be positive");
  if (!cfg.head.alignment.projection && semantic && cfg.embeddings.empty() &&
      cfg.text_dim != cfg.encoder.output_dim) {
    errors.push_back("head.projection: disabled, but text_dim differs from encoder.output_dim");
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot adaptation of vision transformers with semantic guidance", "fsadapt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenTaskArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-task", "Generate a synthetic few-shot task");
  gen_cmd->add_option("--preset", gen.preset, "easy or hard")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--n-classes", gen.n_classes, "Number of classes (N)");
  gen_cmd->add_option("--k-shot", gen.k_shot, "Support images per class (K)");
  gen_cmd->add_option("--query-size", gen.query_size, "Query images");
  gen_cmd->add_option("--image-size", gen.image_size, "Image side length");
  gen_cmd->add_option("--noise", gen.noise, "Pixel noise standard deviation");
  gen_cmd->add_option("--overlap", gen.overlap, "Shared-pattern weight in [0, 1]");
  gen_cmd->add_option("--multilabel-prob", gen.multilabel_prob, "Extra-label probability");
  gen_cmd->add_option("--semantics-dir", gen.semantics_dir,
                      "Also write paired context/class_name embedding files here");
  gen_cmd->add_option("--text-dim", gen.text_dim, "Embedding size for --semantics-dir")->capture_default_str();
  gen_cmd->add_option("-o,--output", gen.output, "Task file to write")->required();
  gen_cmd->add_flag("--force", gen.force, "Overwrite existing files");

  Overrides train;
  auto* train_cmd = app.add_subcommand("train", "Adapt an encoder on a task and evaluate it");
  train.attach(*train_cmd);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a task's query set");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint written by train")->required();
  eval_cmd->add_option("--task", ev.task, "Task file (defaults to the one in the checkpoint)");
  eval_cmd->add_option("-o,--output", ev.output, "Directory for report.json");
  eval_cmd->add_flag("--force", ev.force, "Overwrite existing files");

  Overrides sweep;
  std::optional<std::string> n_list;
  bool timing = false;
  auto* sweep_cmd = app.add_subcommand("sweep-freeze", "Adapt once per freeze depth and tabulate mAUC");
  sweep.attach(*sweep_cmd);
  sweep_cmd->add_option("--n-list", n_list, "Comma-separated depths, e.g. 0,1,2,linear");
  sweep_cmd->add_flag("--timing", timing, "Fill the wall_time_s column (not reproducible)");

  std::vector<std::string> files;
  std::optional<std::string> analyze_out;
  bool analyze_force = false;
  auto* analyze_cmd = app.add_subcommand("analyze-embeddings", "Inter-class correlation of embedding files");
  analyze_cmd->add_option("files", files, "Embedding files")->required();
  analyze_cmd->add_option("-o,--output", analyze_out, "Directory for CSV matrices and summary");
  analyze_cmd->add_flag("--force", analyze_force, "Overwrite existing files");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of encoder + head + BCE");
  gc_cmd->add_option("--seed", gc.seed, "Seed")->capture_default_str();
  gc_cmd->add_option("--image-size", gc.image_size, "Image side length")->capture_default_str();
  gc_cmd->add_option("--patch-size", gc.patch_size, "Patch side length")->capture_default_str();
  gc_cmd->add_option("--stages", gc.stages, "Encoder stages")->capture_default_str();
  gc_cmd->add_option("--blocks", gc.blocks, "Blocks per stage")->capture_default_str();
  gc_cmd->add_option("--width", gc.width, "Stage width")->capture_default_str();
  gc_cmd->add_option("--heads", gc.heads, "Attention heads")->capture_default_str();
  gc_cmd->add_option("--classes", gc.classes, "Classes")->capture_default_str();
  gc_cmd->add_option("--tokens", gc.tokens, "Text tokens per class")->capture_default_str();
  gc_cmd->add_option("--batch", gc.batch, "Images per batch")->capture_default_str();
  gc_cmd->add_option("--step", gc.step, "Initial finite-difference step")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gc_cmd->add_flag("--corrupt-gradient", gc.corrupt, "Perturb one analytic gradient (negative control)")
      ->group("");

  std::vector<std::string> argv_store{"fsadapt"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigFailure;
  }

  if (gen_cmd->parsed()) return guarded(err, [&] { return cmd_gen_task(gen, out); });
  if (train_cmd->parsed()) return guarded(err, [&] { return cmd_train(train, out); });
  if (eval_cmd->parsed()) return guarded(err, [&] { return cmd_eval(ev, out); });
  if (sweep_cmd->parsed()) return guarded(err, [&] { return cmd_sweep(sweep, n_list, timing, out); });
  if (analyze_cmd->parsed()) {
    return guarded(err, [&] { return cmd_analyze(files, analyze_out, analyze_force, out); });
  }
  if (gc_cmd->parsed()) return guarded(err, [&] { return cmd_gradcheck(gc, out); });
  err << app.help();
  return kConfigFailure;
}

}  // namespace fsadapt::cli
