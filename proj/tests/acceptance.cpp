#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "fsadapt/adaptation.hpp"
#include "fsadapt/evaluation.hpp"
#include "fsadapt/json_io.hpp"
#include "fsadapt/metrics.hpp"
#include "fsadapt/rng.hpp"
#include "fsadapt/semantic.hpp"
#include "fsadapt/taskgen.hpp"

using namespace fsadapt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

struct CliRun {
  int code;
  std::string out;
};

CliRun cli_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str() + err.str()};
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path workdir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fsadapt_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::vector<double>> values_of(const Model& model) {
  std::vector<std::vector<double>> out;
  for (const Parameter* p : model.parameters()) out.emplace_back(p->value.data().begin(), p->value.data().end());
  return out;
}

Model default_model(const TaskSpec& spec, std::uint64_t seed, FreezePolicy freeze = {2, true}) {
  EncoderConfig ec;
  ec.seed = seed;
  Encoder encoder(ec);
  encoder.apply_freeze(freeze);
  return Model(std::move(encoder), HeadKind::kSemantic, HeadConfig{}, spec.n_classes,
               paired_semantics(spec, 32, seed).context, seed);
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const CliRun r = cli_run({"gradcheck", "--image-size", "32", "--patch-size", "8", "--stages", "2",
                            "--blocks", "1", "--width", "16"});
  const double secs = elapsed(t0);
  std::string line = r.out.substr(0, r.out.find('\n'));
  const auto at = line.find("; ");
  if (at != std::string::npos) line = line.substr(at + 2);
  const auto verdict = line.rfind(": ");
  if (verdict != std::string::npos) line = line.substr(0, verdict);
  return {r.code == 0 && secs < 60.0, line + fmt(", %.1f s", secs)};
}

Outcome freeze_contract() {
  const auto spec = TaskSpec::preset("easy", 11);
  const auto task = generate_task(spec);
  const Model model = default_model(spec, 11);
  const auto before = values_of(model);
  TrainConfig cfg;
  cfg.seed = 11;
  const AdaptResult result = adapt(task, model, cfg);
  const auto after = values_of(result.model);
  const auto params = result.model.parameters();
  std::size_t frozen_tensors = 0, frozen_changed = 0, trainable_changed = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->frozen) {
      ++frozen_tensors;
      if (after[i] != before[i]) ++frozen_changed;
    } else if (after[i] != before[i]) {
      ++trainable_changed;
    }
  }

  SweepSetup setup;
  setup.embeddings = paired_semantics(spec, 32, 11).context;
  setup.train = cfg;
  setup.train.epochs = 1;
  setup.model_seed = 11;
  const std::size_t stages = setup.encoder.stages.size();
  std::string list;
  for (std::size_t n = 0; n <= stages; ++n) list += std::to_string(n) + (n < stages ? "," : "");
  const auto rows = sweep_freeze(task, setup, parse_sweep_points(list, stages));
  bool increasing = true;
  for (std::size_t i = 1; i < rows.size(); ++i) increasing &= rows[i].frozen_params > rows[i - 1].frozen_params;

  const bool pass = result.history.epochs.size() == 20 && frozen_tensors > 0 && frozen_changed == 0 &&
                    trainable_changed > 0 && increasing;
  return {pass, std::to_string(frozen_changed) + "/" + std::to_string(frozen_tensors) +
                    " frozen tensors changed, " + std::to_string(trainable_changed) +
                    " trainable tensors changed; frozen_params " +
                    (increasing ? "strictly increasing" : "NOT increasing") + " over N=0.." +
                    std::to_string(stages)};
}

Outcome likelihood_points() {
  AlignmentHeadConfig cfg;
  cfg.tau = 10.0;
  const SemanticEmbeddingSet token{0, {{1.0, 0.0}}, SupervisionSource::kContext};
  const std::size_t first[] = {0};
  const double orthogonal[] = {0.0, 2.5};
  const double p0 = class_likelihood(orthogonal, token, first, cfg);
  const double at03[] = {0.3, std::sqrt(1.0 - 0.09)};
  const double p3 = class_likelihood(at03, token, first, cfg);

  Rng rng(2024);
  const SemanticHead head(cfg, 6, 4, 5);
  double drift = 0.0;
  auto random_vec = [&](std::size_t d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
  };
  for (int t = 0; t < 200; ++t) {
    SemanticEmbeddingSet set{0, {random_vec(4), random_vec(4), random_vec(4)}, SupervisionSource::kContext};
    const std::size_t chosen[] = {0, 1, 2};
    const auto v = random_vec(6);
    const double base = class_likelihood(v, set, chosen, cfg, &head);
    auto scaled_v = v;
    const double sv = rng.uniform(0.01, 100.0);
    for (auto& x : scaled_v) x *= sv;
    auto scaled_set = set;
    const double st = rng.uniform(0.001, 1000.0);
    for (auto& x : scaled_set.tokens[1]) x *= st;
    drift = std::max(drift, std::abs(class_likelihood(scaled_v, set, chosen, cfg, &head) - base));
    drift = std::max(drift, std::abs(class_likelihood(v, scaled_set, chosen, cfg, &head) - base));
  }
  const bool pass = p0 == 0.5 && std::abs(p3 - 0.95257) <= 1e-5 && drift <= 1e-12;
  return {pass, fmt("sim 0 -> %.17g, sim 0.3 -> %.7f, max scale drift %.2e", p0, p3, drift)};
}

Outcome auc_oracle() {
  Rng rng(77);
  std::size_t matched = 0, instances = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(63);
    const bool ties = t % 2 == 0;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng.below(6)) : rng.uniform(-3.0, 3.0);
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    std::uint64_t twice = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (y[i] ? pos : neg) += 1;
      if (!y[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (y[j]) continue;
        twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
      }
    }
    const double oracle = static_cast<double>(twice) / (2.0 * static_cast<double>(pos * neg));
    const auto got = roc_auc(s, y);
    ++instances;
    if (got && *got == oracle) ++matched;
  }
  const std::vector<double> ws{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> wy{0, 0, 1, 1};
  const auto worked = roc_auc(ws, wy);
  const bool pass = matched == instances && worked && *worked == 0.75;
  return {pass, std::to_string(matched) + "/" + std::to_string(instances) +
                    " instances exact; worked case " + (worked ? fmt("%.17g", *worked) : "undefined")};
}

Outcome learning_sanity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = TaskSpec::preset("easy", 0);
  const auto task = generate_task(spec);
  TrainConfig cfg;
  const AdaptResult trained = adapt(task, default_model(spec, 0), cfg);
  const double after = evaluate_model(trained.model, task, cfg.augmentation).mean_auc;

  double untrained = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = TaskSpec::preset("easy", seed);
    untrained += evaluate_model(default_model(s, seed + 1000), generate_task(s), AugmentConfig{}).mean_auc;
  }
  untrained /= 10.0;
  const double secs = elapsed(t0);
  const bool pass = after >= 0.85 && untrained >= 0.4 && untrained <= 0.6 && secs < 300.0;
  return {pass, fmt("trained mAUC %.4f, untrained mean %.4f over 10 seeds, %.1f s", after, untrained, secs)};
}

Outcome supervision_comparison() {
  double worst_context = -1.0, worst_name = 2.0, worst_shape = 0.0;
  for (const char* preset : {"easy", "hard"}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto paired = paired_semantics(TaskSpec::preset(preset, seed), 32, seed);
      for (const auto* sets : {&paired.context, &paired.class_name}) {
        const Matrix m = correlation_matrix(*sets);
        for (std::size_t i = 0; i < m.size(); ++i) {
          worst_shape = std::max(worst_shape, std::abs(m[i][i] - 1.0));
          for (std::size_t j = 0; j < m.size(); ++j) {
            worst_shape = std::max(worst_shape, std::abs(m[i][j] - m[j][i]));
          }
        }
      }
      worst_context = std::max(worst_context, mean_offdiag(correlation_matrix(paired.context)));
      worst_name = std::min(worst_name, mean_offdiag(correlation_matrix(paired.class_name)));
    }
  }
  const fs::path dir = workdir("semantics");
  const CliRun gen = cli_run({"gen-task", "-o", (dir / "t.bin").string(), "--seed", "3", "--semantics-dir",
                              (dir / "sem").string()});
  const CliRun r = cli_run({"analyze-embeddings", (dir / "sem" / "class_name.emb").string(),
                            (dir / "sem" / "context.emb").string()});
  const bool ordering = gen.code == 0 && r.code == 0 &&
                        r.out.find("ordering: context < class_name") != std::string::npos;
  const bool pass = worst_name > 0.9 && worst_context < 0.5 && worst_shape <= 1e-12 && ordering;
  return {pass, fmt("class_name min %.4f, context max %.4f, symmetry/diagonal drift %.1e", worst_name,
                    worst_context, worst_shape) +
                    (ordering ? "; CLI ordering context < class_name" : "; CLI ordering missing")};
}

Outcome one_hot_equivalence() {
  auto spec = TaskSpec::preset("easy", 6);
  spec.query_size = 20;
  const auto task = generate_task(spec);
  EncoderConfig ec;
  ec.seed = 6;
  Encoder encoder(ec);
  encoder.apply_freeze({2, true});
  std::vector<SemanticEmbeddingSet> basis;
  for (int c = 0; c < 5; ++c) {
    std::vector<double> e(32, 0.0);
    e[static_cast<std::size_t>(c)] = 1.0;
    basis.push_back({c, {e}, SupervisionSource::kContext});
  }
  HeadConfig semantic_cfg;
  semantic_cfg.alignment.projection = false;
  HeadConfig one_hot_cfg;
  one_hot_cfg.one_hot_trainable = false;
  const Model semantic(encoder, HeadKind::kSemantic, semantic_cfg, 5, basis, 6);
  const Model one_hot(encoder, HeadKind::kOneHot, one_hot_cfg, 5, {}, 6);
  TrainConfig cfg;
  cfg.seed = 6;
  TrainConfig cfg_one_hot = cfg;
  cfg_one_hot.head = HeadKind::kOneHot;
  const auto a = adapt(task, semantic, cfg).history.step_losses;
  const auto b = adapt(task, one_hot, cfg_one_hot).history.step_losses;
  double worst = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return {worst <= 1e-9, fmt("max per-step loss difference %.2e over %g steps", worst, static_cast<double>(a.size()))};
}

Outcome determinism() {
  const fs::path dir = workdir("determinism");
  const std::string task = (dir / "t.bin").string();
  const std::string emb = (dir / "sem" / "context.emb").string();
  std::vector<std::string> mismatches;
  auto same_files = [&](const fs::path& a, const fs::path& b, std::initializer_list<const char*> names) {
    for (const char* n : names) {
      if (read_text_file(a / n) != read_text_file(b / n)) mismatches.push_back(n);
    }
  };
  bool ok = cli_run({"gen-task", "-o", task, "--seed", "8", "--semantics-dir", (dir / "sem").string()}).code == 0;
  const std::string first_task = read_text_file(task);
  ok &= cli_run({"gen-task", "-o", task, "--seed", "8", "--force"}).code == 0;
  if (read_text_file(task) != first_task) mismatches.push_back("task");

  const std::vector<std::string> train{"train", "--task", task, "--embeddings", emb, "--seed", "8",
                                       "-o", (dir / "run").string()};
  ok &= cli_run(train).code == 0;
  fs::rename(dir / "run", dir / "run_first");
  ok &= cli_run(train).code == 0;
  same_files(dir / "run_first", dir / "run",
             {"checkpoint.bin", "history.json", "report.json", "config.json"});

  const std::vector<std::string> sweep{"sweep-freeze", "--task", task, "--embeddings", emb, "--seed", "8",
                                       "--epochs", "5", "-o", (dir / "sweep").string()};
  ok &= cli_run(sweep).code == 0;
  fs::rename(dir / "sweep", dir / "sweep_first");
  ok &= cli_run(sweep).code == 0;
  same_files(dir / "sweep_first", dir / "sweep", {"sweep.csv", "reports.json", "config.json"});

  std::string detail = ok ? "gen-task, train, sweep-freeze outputs " : "a command failed; ";
  if (mismatches.empty()) {
    detail += "byte-identical";
  } else {
    detail += "differ:";
    for (const auto& m : mismatches) detail += " " + m;
  }
  return {ok && mismatches.empty(), detail};
}

Outcome bce_closed_forms() {
  const double half = bce_loss(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {1.0})).item();
  const double saturated = bce_loss(Tensor({1, 4}, {0.0, 1.0, 0.0, 1.0}), Tensor({1, 4}, {1.0, 0.0, 0.0, 1.0})).item();
  const bool pass = std::abs(half - std::log(2.0)) <= 1e-12 && std::isfinite(saturated);
  return {pass, fmt("(0.5, 1) -> %.15f, saturated p in {0,1} -> %.6f", half, saturated)};
}

Outcome adamw_decay() {
  Parameter p;
  p.key = "w";
  p.value = Tensor({1}, {1.0}, true);
  p.value.zero_grad();
  OptimizerState state;
  TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  cfg.weight_decay = 0.05;
  Parameter* params[] = {&p};
  adamw_step(params, state, cfg);
  const double v = p.value.data()[0];
  return {std::abs(v - 0.999995) <= 1e-12, fmt("1.0 -> %.15f", v)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"freeze contract", freeze_contract},
      {"likelihood point checks", likelihood_points},
      {"AUC oracle equivalence", auc_oracle},
      {"learning sanity", learning_sanity},
      {"supervision comparison", supervision_comparison},
      {"one-hot special case", one_hot_equivalence},
      {"determinism", determinism},
      {"BCE closed forms", bce_closed_forms},
      {"AdamW decoupled decay", adamw_decay},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
