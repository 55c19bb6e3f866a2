#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "fsadapt/errors.hpp"
#include "fsadapt/semantic.hpp"
#include "test_support.hpp"

using namespace fsadapt;
using fsadapt::testing::gradcheck;
using fsadapt::testing::random_tensor;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

SemanticEmbeddingSet make_set(int id, std::vector<std::vector<double>> tokens) {
  return {id, std::move(tokens), SupervisionSource::kContext};
}

std::vector<double> random_vec(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  return v;
}

}  // namespace

TEST_CASE("mask_class_mentions worked examples") {
  const auto a = mask_class_mentions("Pneumonia causes consolidation. Pneumonia is...", "Pneumonia");
  CHECK(a.replacements == 2);
  CHECK(a.context.context_text == "[MASK] causes consolidation. [MASK] is...");
  CHECK_FALSE(a.fallback_appended);

  const auto b = mask_class_mentions("The symptom of nodule in chest x-ray image is [MASK].", "nodule");
  CHECK(b.replacements == 1);
  CHECK(count_masks(b.context.context_text) == 2);

  const auto c = mask_class_mentions("No mention here.", "mass");
  CHECK(c.replacements == 0);
  CHECK(c.fallback_appended);
  CHECK(c.context.context_text == "No mention here. This image shows [MASK].");
  CHECK(count_masks(c.context.context_text) == 1);

  CHECK_THROWS_AS(mask_class_mentions("text", ""), ContractError);
}

TEST_CASE("masking is case-insensitive and whole-word only") {
  const auto r = mask_class_mentions("MASS, mass and masses; Mass.", "mass");
  CHECK(r.replacements == 3);
  CHECK(r.context.context_text == "[MASK], [MASK] and masses; [MASK].");
  // A class literally called "mask" must not eat existing markers.
  const auto m = mask_class_mentions("A [MASK] and a mask.", "mask");
  CHECK(m.replacements == 1);
  CHECK(m.context.context_text == "A [MASK] and a [MASK].");
  const auto multi = mask_class_mentions("Pleural effusion blunts angles; pleural Effusion.", "pleural effusion");
  CHECK(multi.replacements == 2);
}

TEST_CASE("class context invariants") {
  CHECK_NOTHROW(template_context(0, "nodule").validate());
  CHECK_NOTHROW(class_name_context(0, "nodule").validate());
  ClassContext bad{0, "nodule", "no markers", SupervisionSource::kContext};
  CHECK_THROWS_AS(bad.validate(), FormatError);
  ClassContext bad_name{0, "nodule", "nodule [MASK]", SupervisionSource::kClassName};
  CHECK_THROWS_AS(bad_name.validate(), FormatError);
}

TEST_CASE("toy embedder is deterministic, local and normalized") {
  const ClassContext ctx{0, "x",
                         "[MASK] causes dense consolidation in the lower lobe while [MASK] may also show "
                         "air bronchograms on the radiograph of the chest",
                         SupervisionSource::kContext};
  const auto a = toy_embed(ctx, 16, 5);
  const auto b = toy_embed(ctx, 16, 5);
  CHECK(a == b);
  CHECK(a.size() == 2);
  for (const auto& t : a.tokens) {
    double sq = 0.0;
    for (const double v : t) sq += v * v;
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
  }
  CHECK(a.tokens[0] != a.tokens[1]);
  CHECK(toy_embed(ctx, 16, 6).tokens[0] != a.tokens[0]);

  // Both markers see exactly the same +-2 word window.
  ToyEmbedderOptions narrow;
  narrow.window = 2;
  const ClassContext same{1, "x", "p q [MASK] r s . t u v w x y z p q [MASK] r s", SupervisionSource::kContext};
  const auto s = toy_embed(same, 8, 1, narrow);
  CHECK(s.tokens[0] == s.tokens[1]);

  const auto name = toy_embed(class_name_context(3, "nodule"), 8, 1);
  CHECK(name.size() == 1);
}

TEST_CASE("embedding files") {
  Rng rng(2);
  std::vector<SemanticEmbeddingSet> sets;
  sets.push_back(make_set(0, {random_vec(rng, 8), random_vec(rng, 8), random_vec(rng, 8)}));
  sets.push_back(make_set(1, {random_vec(rng, 8), random_vec(rng, 8), random_vec(rng, 8),
                              random_vec(rng, 8), random_vec(rng, 8)}));
  const std::string text = serialize_embeddings(sets);
  const auto back = parse_embeddings(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].size() == 3);
  CHECK(back[1].size() == 5);
  CHECK(back == sets);
  CHECK(serialize_embeddings(back) == text);

  SUBCASE("mixed dims") {
    auto mixed = sets;
    mixed[1].tokens = {random_vec(rng, 16)};
    CHECK_THROWS_AS(parse_embeddings(serialize_embeddings(mixed)), FormatError);
  }
  SUBCASE("duplicate id") {
    auto dup = sets;
    dup[1].class_id = 0;
    CHECK_THROWS_WITH_AS(parse_embeddings(serialize_embeddings(dup)), doctest::Contains("duplicate class id 0"), FormatError);
  }
  SUBCASE("zero vector names the class") {
    auto zero = sets;
    zero[1].tokens[2] = std::vector<double>(8, 0.0);
    CHECK_THROWS_WITH_AS(parse_embeddings(serialize_embeddings(zero)), doctest::Contains("class 1"), FormatError);
  }
  SUBCASE("empty class list") {
    CHECK_THROWS_AS(parse_embeddings("{\"dim\": 8, \"classes\": []}"), FormatError);
  }
  SUBCASE("malformed json") {
    CHECK_THROWS_AS(parse_embeddings("{\"dim\": 8, \"classes\": [}"), FormatError);
  }
}

TEST_CASE("class_likelihood worked examples") {
  AlignmentHeadConfig cfg;
  cfg.tau = 10.0;
  cfg.aggregate = Aggregate::kSum;
  const auto token = make_set(0, {{1.0, 0.0}});
  const std::size_t first[] = {0};

  // Orthogonal: similarity 0 -> exactly one half for any tau.
  const double v0[] = {0.0, 2.5};
  CHECK(class_likelihood(v0, token, first, cfg) == 0.5);
  cfg.tau = 3.7;
  CHECK(class_likelihood(v0, token, first, cfg) == 0.5);
  cfg.tau = 10.0;

  // cos = 0.3 -> sigmoid(3).
  const double v1[] = {0.3, std::sqrt(1.0 - 0.09)};
  const double p1 = class_likelihood(v1, token, first, cfg);
  CHECK(std::abs(p1 - 0.95257) <= 1e-5);
  CHECK(std::abs(p1 - sigmoid_ref(3.0)) <= 1e-14);

  // Parallel -> sigmoid(10).
  const double v2[] = {4.0, 0.0};
  const double p2 = class_likelihood(v2, token, first, cfg);
  CHECK(std::abs(p2 - 0.9999546) <= 1e-6);

  const double zero[] = {0.0, 0.0};
  CHECK_THROWS_AS(class_likelihood(zero, token, first, cfg), NumericError);
  CHECK_THROWS_AS(class_likelihood(v2, token, std::span<const std::size_t>(), cfg), ContractError);
}

TEST_CASE("class_likelihood is increasing in similarity") {
  AlignmentHeadConfig cfg;
  const auto token = make_set(0, {{1.0, 0.0}, {0.0, 1.0}});
  const std::size_t both[] = {0, 1};
  double prev = 0.0;
  for (double angle = -1.5; angle <= 0.78; angle += 0.05) {
    // Rotating toward the first token raises its similarity and (until 45
    // degrees) keeps the sum increasing too.
    const double v[] = {std::cos(angle), std::sin(angle)};
    const double p = class_likelihood(v, token, both, cfg);
    CHECK(p > prev);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    prev = p;
  }
}

TEST_CASE("class_likelihood is scale invariant") {
  Rng rng(8);
  AlignmentHeadConfig cfg;
  const SemanticHead head(cfg, 6, 4, 3);
  for (int t = 0; t < 50; ++t) {
    auto set = make_set(0, {random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4)});
    const std::size_t chosen[] = {0, 2};
    const auto v = random_vec(rng, 6);
    const double base = class_likelihood(v, set, chosen, cfg, &head);
    std::vector<double> scaled_v = v;
    const double sv = rng.uniform(0.01, 100.0);
    for (auto& x : scaled_v) x *= sv;
    auto scaled_set = set;
    const double st = rng.uniform(0.001, 1000.0);
    for (auto& x : scaled_set.tokens[2]) x *= st;
    CHECK(std::abs(class_likelihood(scaled_v, set, chosen, cfg, &head) - base) <= 1e-12);
    CHECK(std::abs(class_likelihood(v, scaled_set, chosen, cfg, &head) - base) <= 1e-12);
  }
}

TEST_CASE("mean aggregation stays within per-token bounds") {
  Rng rng(9);
  AlignmentHeadConfig cfg;
  cfg.aggregate = Aggregate::kMean;
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 1 + rng.below(6);
    std::vector<std::vector<double>> toks;
    for (std::size_t i = 0; i < m; ++i) toks.push_back(random_vec(rng, 5));
    const auto set = make_set(0, toks);
    const auto v = random_vec(rng, 5);
    std::vector<std::size_t> all(m);
    std::iota(all.begin(), all.end(), 0);
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t one[] = {i};
      const double p = class_likelihood(v, set, one, cfg);
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
    const double p = class_likelihood(v, set, all, cfg);
    CHECK(p >= lo - 1e-15);
    CHECK(p <= hi + 1e-15);
  }
}

TEST_CASE("one-hot supervision is a special case") {
  // Orthonormal single tokens e_c and identity projection: the likelihood orders
  // classes exactly like the linear logits <f(x), e_c>.
  Rng rng(10);
  const std::size_t c = 5;
  std::vector<SemanticEmbeddingSet> sets;
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> e(c, 0.0);
    e[k] = 1.0;
    sets.push_back(make_set(static_cast<int>(k), {e}));
  }
  AlignmentHeadConfig cfg;
  cfg.projection = false;
  for (int t = 0; t < 100; ++t) {
    const auto f = random_vec(rng, c);
    std::vector<std::size_t> by_prob(c), by_logit(c);
    std::iota(by_prob.begin(), by_prob.end(), 0);
    std::iota(by_logit.begin(), by_logit.end(), 0);
    std::vector<double> probs(c);
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t first[] = {0};
      probs[k] = class_likelihood(f, sets[k], first, cfg);
    }
    std::sort(by_prob.begin(), by_prob.end(), [&](auto a, auto b) { return probs[a] > probs[b]; });
    std::sort(by_logit.begin(), by_logit.end(), [&](auto a, auto b) { return f[a] > f[b]; });
    CHECK(by_prob == by_logit);
  }
}

TEST_CASE("bootstrap_tokens") {
  Rng rng(1);
  const auto five = make_set(0, {{1}, {2}, {3}, {4}, {5}});
  CHECK(bootstrap_tokens(five, 5, rng) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  const auto three = make_set(0, {{1}, {2}, {3}});
  CHECK(bootstrap_tokens(three, 8, rng) == std::vector<std::size_t>{0, 1, 2});

  std::vector<std::vector<double>> ten;
  for (int i = 0; i < 10; ++i) ten.push_back({1.0 + i});
  const auto set10 = make_set(0, ten);
  Rng r1(42), r2(42);
  const auto a = bootstrap_tokens(set10, 4, r1);
  CHECK(a == bootstrap_tokens(set10, 4, r2));
  CHECK(a.size() == 4);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 4);

  CHECK_THROWS_AS(bootstrap_tokens(make_set(0, {}), 2, rng), ContractError);
  CHECK_THROWS_AS(bootstrap_tokens(five, 0, rng), ContractError);
}

TEST_CASE("bootstrap covers every token over enough epochs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto set = make_set(0, {{1}, {2}, {3}, {4}});
    std::set<std::size_t> seen;
    // m0 = 2 of m = 4; 4 * m epochs makes a miss astronomically unlikely.
    for (int epoch = 0; epoch < 16; ++epoch) {
      for (const auto i : bootstrap_tokens(set, 2, rng)) seen.insert(i);
    }
    CHECK(seen.size() == 4);
  }
}

TEST_CASE("correlation_matrix worked examples") {
  const auto a = make_set(0, {{1, 0, 0}, {0.9, 0.1, 0}});
  const SemanticEmbeddingSet same[] = {a, make_set(1, a.tokens)};
  CHECK(std::abs(correlation_matrix(same)[0][1] - 1.0) <= 1e-15);

  const SemanticEmbeddingSet ortho[] = {make_set(0, {{1, 0}}), make_set(1, {{0, 1}})};
  CHECK(correlation_matrix(ortho)[0][1] == 0.0);

  const double r = 1.0 / std::sqrt(2.0);
  const SemanticEmbeddingSet three[] = {make_set(0, {{1, 0}}), make_set(1, {{0, 1}}),
                                        make_set(2, {{1, 1}})};
  const Matrix m = correlation_matrix(three);
  CHECK(m[0][1] == 0.0);
  CHECK(std::abs(m[0][2] - r) <= 1e-15);
  CHECK(std::abs(m[1][2] - r) <= 1e-15);
  CHECK(std::abs(mean_offdiag(m) - (0.0 + r + r) / 3.0) <= 1e-15);
  CHECK(std::abs(mean_offdiag(m) - 0.4714) <= 1e-4);

  CHECK_THROWS_AS(correlation_matrix(std::span(three).first(1)), ContractError);
  const SemanticEmbeddingSet cancel[] = {make_set(0, {{1, 0}, {-1, 0}}), make_set(1, {{0, 1}})};
  CHECK_THROWS_WITH_AS(correlation_matrix(cancel), doctest::Contains("class 0"), NumericError);
}

TEST_CASE("mean_offdiag worked examples") {
  CHECK(mean_offdiag({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}) == 0.0);
  CHECK(mean_offdiag({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}}) == 1.0);
  CHECK_THROWS_AS(mean_offdiag({{1}}), ContractError);
}

TEST_CASE("correlation matrices are symmetric with unit diagonal") {
  Rng rng(13);
  for (int t = 0; t < 30; ++t) {
    std::vector<SemanticEmbeddingSet> sets;
    const std::size_t c = 2 + rng.below(5);
    for (std::size_t k = 0; k < c; ++k) {
      sets.push_back(make_set(static_cast<int>(k), {random_vec(rng, 6), random_vec(rng, 6)}));
    }
    const Matrix m = correlation_matrix(sets);
    for (std::size_t i = 0; i < c; ++i) {
      CHECK(m[i][i] == 1.0);
      for (std::size_t j = 0; j < c; ++j) {
        CHECK(std::abs(m[i][j] - m[j][i]) <= 1e-12);
        CHECK(m[i][j] <= 1.0);
        CHECK(m[i][j] >= -1.0);
      }
    }
  }
}

TEST_CASE("semantic head gradients match finite differences") {
  Rng rng(21);
  AlignmentHeadConfig cfg;
  SemanticHead head(cfg, 4, 3, 5);
  std::vector<SemanticEmbeddingSet> sets;
  for (int k = 0; k < 3; ++k) sets.push_back(make_set(k, {random_vec(rng, 3), random_vec(rng, 3)}));
  const TokenBank bank = TokenBank::all_tokens(sets, Aggregate::kSum);
  Tensor visual = random_tensor(rng, {2, 4});
  const Tensor r = random_tensor(rng, {2, 3}, -1, 1, false);
  const double err = gradcheck([&] { return sum(mul(sigmoid(head.logits(visual, bank)), r)); },
                               {visual, head.parameters()[0].value});
  CHECK(err <= 1e-4);
}

TEST_CASE("disabled projection requires matching dims") {
  AlignmentHeadConfig cfg;
  cfg.projection = false;
  CHECK_THROWS_AS(SemanticHead(cfg, 4, 3, 0), ConfigError);
  CHECK(SemanticHead(cfg, 3, 3, 0).parameters().empty());
  cfg.m0 = 0;
  CHECK_THROWS_AS(SemanticHead(cfg, 3, 3, 0), ConfigError);
}
