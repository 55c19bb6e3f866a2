#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "fsadapt/json_io.hpp"
#include "fsadapt/semantic.hpp"

using namespace fsadapt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fsadapt_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read(const fs::path& p) { return read_text_file(p); }

/// Task plus paired embeddings in dir.
void make_task(const fs::path& dir, const std::string& seed = "1") {
  const Result r = invoke({"gen-task", "-o", (dir / "t.bin").string(), "--seed", seed, "--semantics-dir",
                           (dir / "sem").string()});
  REQUIRE(r.code == 0);
}

}  // namespace

TEST_CASE("gen-task summary, overwrite refusal and determinism") {
  const fs::path dir = scratch("gen");
  const std::string task = (dir / "t.bin").string();
  Result r = invoke({"gen-task", "-o", task, "--seed", "4"});
  CHECK(r.code == 0);
  CHECK(r.out.find("N=5 K=5 query=200") != std::string::npos);
  const std::string first = read(task);

  r = invoke({"gen-task", "-o", task, "--seed", "4"});
  CHECK(r.code == 3);
  CHECK(r.err.find("--force") != std::string::npos);

  r = invoke({"gen-task", "-o", task, "--seed", "4", "--force"});
  CHECK(r.code == 0);
  CHECK(read(task) == first);

  r = invoke({"gen-task", "-o", task, "--seed", "5", "--force"});
  CHECK(read(task) != first);

  r = invoke({"gen-task", "-o", (dir / "x.bin").string(), "--k-shot", "0"});
  CHECK(r.code == 2);
  r = invoke({"gen-task", "-o", (dir / "y.bin").string(), "--preset", "hard"});
  CHECK(r.code == 0);
  CHECK(r.out.find("N=8 K=2") != std::string::npos);
}

TEST_CASE("train writes outputs, eval reproduces the report, snapshot round-trips") {
  const fs::path dir = scratch("train");
  make_task(dir);
  const std::string out = (dir / "run").string();
  Result r = invoke({"train", "--task", (dir / "t.bin").string(), "--embeddings",
                     (dir / "sem" / "context.emb").string(), "--epochs", "3", "-o", out, "--seed", "2"});
  REQUIRE(r.code == 0);
  for (const char* f : {"checkpoint.bin", "history.json", "report.json", "config.json", "metadata.json"}) {
    CHECK(fs::exists(fs::path(out) / f));
  }
  CHECK(r.out.find("mAUC") != std::string::npos);

  const Json snapshot = parse_json(read(fs::path(out) / "config.json"), "config");
  std::vector<std::string> errors;
  const cli::ExperimentConfig cfg = cli::experiment_from_json(snapshot, errors);
  CHECK(errors.empty());
  CHECK(cli::to_json(cfg) == snapshot);
  CHECK(cfg.seed == 2);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.encoder.seed == 2);

  const Json history = parse_json(read(fs::path(out) / "history.json"), "history");
  CHECK(history.at("epochs").size() == 3);
  CHECK(history.at("config") == snapshot);

  const Json report = parse_json(read(fs::path(out) / "report.json"), "report");
  r = invoke({"eval", "--checkpoint", (fs::path(out) / "checkpoint.bin").string(), "-o",
              (dir / "ev").string()});
  REQUIRE(r.code == 0);
  CHECK(parse_json(read(dir / "ev" / "report.json"), "eval") == report);

  r = invoke({"train", "--task", (dir / "t.bin").string(), "--embeddings",
              (dir / "sem" / "context.emb").string(), "--epochs", "3", "-o", out});
  CHECK(r.code == 3);
}

TEST_CASE("train is byte-deterministic for identical invocations") {
  const fs::path dir = scratch("det");
  make_task(dir);
  const std::vector<std::string> args{"train", "--task", (dir / "t.bin").string(), "--embeddings",
                                      (dir / "sem" / "context.emb").string(), "--epochs", "2",
                                      "-o", (dir / "run").string(), "--seed", "9"};
  REQUIRE(invoke(args).code == 0);
  fs::rename(dir / "run", dir / "first");
  REQUIRE(invoke(args).code == 0);
  for (const char* f : {"checkpoint.bin", "history.json", "report.json", "config.json"}) {
    CHECK(read(dir / "first" / f) == read(dir / "run" / f));
  }
}

TEST_CASE("train config errors exit 2 and name the key") {
  const fs::path dir = scratch("cfg");
  make_task(dir);
  Result r = invoke({"train", "--task", (dir / "t.bin").string(), "-o", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("embeddings") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "run"));

  write_file(dir / "bad.json", R"({"task": "t.bin", "train": {"seed": 1, "lr_typo": 2}})");
  r = invoke({"train", "--config", (dir / "bad.json").string(), "--head", "one_hot", "-o",
              (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("train.seed") != std::string::npos);
  CHECK(r.err.find("train.lr_typo") != std::string::npos);

  r = invoke({"train", "--task", (dir / "t.bin").string(), "--head", "one_hot", "--frozen-stages", "9",
              "-o", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("frozen_stages") != std::string::npos);

  r = invoke({"train", "--task", (dir / "missing.bin").string(), "--head", "one_hot", "-o",
              (dir / "run").string()});
  CHECK(r.code == 3);

  r = invoke({"train", "--bogus-flag"});
  CHECK(r.code == 2);
}

TEST_CASE("sweep-freeze writes the CSV contract and rejects deep N before training") {
  const fs::path dir = scratch("sweep");
  make_task(dir);
  const std::vector<std::string> base{"sweep-freeze", "--task", (dir / "t.bin").string(), "--embeddings",
                                      (dir / "sem" / "context.emb").string(), "--epochs", "1"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return invoke(args);
  };
  Result r = with({"--n-list", "0,1,2,linear", "-o", (dir / "a").string()});
  REQUIRE(r.code == 0);
  const std::string csv = read(dir / "a" / "sweep.csv");
  CHECK(csv.rfind("N,frozen_params,trainable_params,mAUC,wall_time_s\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find("\nlinear,") != std::string::npos);
  CHECK(r.out == csv);
  CHECK(fs::exists(dir / "a" / "reports.json"));
  CHECK(fs::exists(dir / "a" / "metadata.json"));

  r = with({"--n-list", "0,1,2,linear", "-o", (dir / "b").string()});
  CHECK(read(dir / "b" / "sweep.csv") == csv);

  r = with({"--n-list", "0,5", "-o", (dir / "c").string()});
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(dir / "c"));
}

TEST_CASE("analyze-embeddings grid, ordering and errors") {
  const fs::path dir = scratch("analyze");
  std::vector<SemanticEmbeddingSet> three;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v(4, 0.0);
    v[c] = 1.0;
    three.push_back({c, {v}, SupervisionSource::kClassName});
  }
  save_embeddings(dir / "three.emb", three);
  Result r = invoke({"analyze-embeddings", (dir / "three.emb").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find(" 1.000  0.000  0.000") != std::string::npos);
  CHECK(r.out.find(" 0.000  0.000  1.000") != std::string::npos);

  make_task(dir);
  r = invoke({"analyze-embeddings", (dir / "sem" / "class_name.emb").string(),
              (dir / "sem" / "context.emb").string(), "-o", (dir / "csv").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("ordering: context < class_name") != std::string::npos);
  CHECK(fs::exists(dir / "csv" / "summary.csv"));
  CHECK(fs::exists(dir / "csv" / "context.corr.csv"));

  write_file(dir / "zero.emb", R"({"dim": 4, "classes": []})");
  r = invoke({"analyze-embeddings", (dir / "zero.emb").string()});
  CHECK(r.code == 3);
  r = invoke({"analyze-embeddings", (dir / "missing.emb").string()});
  CHECK(r.code == 3);
}

TEST_CASE("gradcheck passes on the default model and catches a corrupted gradient") {
  Result r = invoke({"gradcheck"});
  CHECK(r.code == 0);
  CHECK(r.out.find("8416 parameters") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);

  r = invoke({"gradcheck", "--image-size", "16", "--stages", "1", "--corrupt-gradient"});
  CHECK(r.code == 1);
  CHECK(r.out.find("FAIL") != std::string::npos);
}
