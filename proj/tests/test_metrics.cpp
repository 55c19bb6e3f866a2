#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "fsadapt/errors.hpp"
#include "fsadapt/metrics.hpp"
#include "fsadapt/rng.hpp"

using namespace fsadapt;

namespace {

/// Brute-force AUC over all positive/negative pairs; ties count one half.
std::optional<double> pair_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::uint64_t twice_wins = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++pos;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      if (s[i] > s[j]) twice_wins += 2;
      else if (s[i] == s[j]) twice_wins += 1;
    }
  }
  for (auto v : y) neg += v ? 0 : 1;
  if (pos == 0 || neg == 0) return std::nullopt;
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

struct Instance {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

Instance random_instance(Rng& rng, bool ties) {
  const std::size_t n = 2 + rng.below(60);
  Instance inst;
  for (std::size_t i = 0; i < n; ++i) {
    inst.scores.push_back(ties ? static_cast<double>(rng.below(5)) : rng.uniform(-3.0, 3.0));
    inst.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  inst.labels[0] = 1;
  inst.labels[1] = 0;
  return inst;
}

}  // namespace

TEST_CASE("roc_auc worked examples") {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y = {0, 0, 1, 1};
  CHECK(*roc_auc(s, y) == doctest::Approx(0.75).epsilon(1e-15));

  const std::vector<std::uint8_t> perfect = {0, 1, 0, 1};
  CHECK(*roc_auc(std::vector<double>{1, 4, 2, 3}, perfect) == 1.0);
  CHECK(*roc_auc(std::vector<double>{4, 1, 3, 2}, perfect) == 0.0);
  CHECK(*roc_auc(std::vector<double>{2, 2, 2, 2}, perfect) == 0.5);
  // One tied pair out of four.
  CHECK(*roc_auc(std::vector<double>{0, 1, 1, 2}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 0.875);
}

TEST_CASE("roc_auc degenerate and invalid inputs") {
  CHECK_FALSE(roc_auc(std::vector<double>{1, 2, 3}, std::vector<std::uint8_t>{1, 1, 1}));
  CHECK_FALSE(roc_auc(std::vector<double>{1, 2, 3}, std::vector<std::uint8_t>{0, 0, 0}));
  CHECK_FALSE(roc_auc(std::vector<double>{}, std::vector<std::uint8_t>{}));
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1}), DimensionError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, nan}, std::vector<std::uint8_t>{1, 0}), NumericError);
}

TEST_CASE("rank-sum AUC equals the pair-counting oracle") {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const auto inst = random_instance(rng, t % 2 == 0);
    const auto expected = pair_auc(inst.scores, inst.labels);
    const auto got = roc_auc(inst.scores, inst.labels);
    REQUIRE(expected.has_value());
    REQUIRE(got.has_value());
    CHECK(*got == *expected);
  }
}

TEST_CASE("AUC properties") {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    const auto inst = random_instance(rng, t % 3 == 0);
    const double auc = *roc_auc(inst.scores, inst.labels);
    CHECK(auc >= 0.0);
    CHECK(auc <= 1.0);

    std::vector<std::uint8_t> flipped;
    for (auto v : inst.labels) flipped.push_back(v ? 0 : 1);
    CHECK(std::abs(auc + *roc_auc(inst.scores, flipped) - 1.0) <= 1e-12);

    std::vector<double> transformed;
    for (double s : inst.scores) transformed.push_back(std::exp(0.5 * s) + 2.0);
    CHECK(std::abs(*roc_auc(transformed, inst.labels) - auc) <= 1e-12);

    std::vector<double> negated;
    for (double s : inst.scores) negated.push_back(-s);
    CHECK(std::abs(*roc_auc(negated, inst.labels) - (1.0 - auc)) <= 1e-12);
  }
}

TEST_CASE("evaluate_scores skips degenerate classes") {
  const std::vector<std::vector<double>> scores = {{0.9, 0.1, 0.5}, {0.2, 0.8, 0.5}, {0.7, 0.3, 0.5}};
  const std::vector<std::vector<std::uint8_t>> labels = {{1, 0, 1}, {0, 1, 1}, {1, 0, 1}};
  const auto report = evaluate_scores(scores, labels, {"a", "b", "c"});
  CHECK(report.scored_classes == 2);
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0] == "c");
  CHECK(report.mean_auc == 1.0);
  CHECK_FALSE(report.classes[2].auc);
  CHECK(report.classes[2].positives == 3);

  const Json j = report.to_json();
  CHECK(j["mean_auc"] == 1.0);
  CHECK(j["classes"][2]["auc"].is_null());
  CHECK(report.table().find("skipped") != std::string::npos);
  CHECK(report.table().find("mAUC 1.0000 over 2 class(es)") != std::string::npos);
}

TEST_CASE("evaluate_scores errors") {
  const std::vector<std::vector<double>> scores = {{0.1}, {0.2}};
  const std::vector<std::vector<std::uint8_t>> all_pos = {{1}, {1}};
  CHECK_THROWS_AS(evaluate_scores(scores, all_pos, {"a"}), EvaluationError);
  CHECK_THROWS_AS(evaluate_scores(scores, {{1}}, {"a"}), DimensionError);
  CHECK_THROWS_AS(evaluate_scores(scores, all_pos, {"a", "b"}), DimensionError);
}

TEST_CASE("random scores give chance-level AUC") {
  Rng rng(13);
  double total = 0.0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (int i = 0; i < 400; ++i) {
      s.push_back(rng.uniform());
      y.push_back(rng.bernoulli(0.3) ? 1 : 0);
    }
    total += *roc_auc(s, y);
  }
  CHECK(std::abs(total / trials - 0.5) < 0.03);
}
