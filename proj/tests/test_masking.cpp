#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "mmm/masking.hpp"
#include "mmm/synth.hpp"

using namespace mmm;

TEST_SUITE_BEGIN("masking");

TEST_CASE("proportions: degenerate and uniform points") {
  Rng rng = make_rng(1);
  CHECK(sample_proportions(0.7, 1, rng) == std::vector<double>{1.0});
  auto uniform = sample_proportions(std::numeric_limits<double>::infinity(), 4, rng);
  CHECK(uniform == std::vector<double>(4, 0.25));
  CHECK_THROWS_AS(sample_proportions(0.0, 3, rng), ContractError);
}

TEST_CASE("proportions match the analytic Dirichlet moments") {
  const double alpha = 0.5;
  const int k = 4, draws = 100000;
  Rng rng = make_rng(2);
  std::vector<double> mean(k, 0.0), var(k, 0.0);
  std::vector<std::vector<double>> all;
  all.reserve(draws);
  for (int i = 0; i < draws; ++i) {
    auto p = sample_proportions(alpha, k, rng);
    for (int j = 0; j < k; ++j) mean[j] += p[j];
    all.push_back(std::move(p));
  }
  for (int j = 0; j < k; ++j) mean[j] /= draws;
  for (const auto& p : all) {
    for (int j = 0; j < k; ++j) var[j] += (p[j] - mean[j]) * (p[j] - mean[j]);
  }
  const double expected_var = (1.0 / k) * (1.0 - 1.0 / k) / (k * alpha + 1.0);
  for (int j = 0; j < k; ++j) {
    CHECK(std::abs(mean[j] - 0.25) <= 0.01);
    CHECK(std::abs(var[j] / draws - expected_var) <= 0.1 * expected_var);
  }
}

TEST_CASE("budget allocation follows largest remainder with caps") {
  const std::int64_t inf = std::numeric_limits<std::int64_t>::max();
  CHECK(allocate_budget({0.5, 0.25, 0.25}, 12, {inf, inf, inf}) == std::vector<int>{6, 3, 3});
  CHECK(allocate_budget({1.0}, 128, {196}) == std::vector<int>{128});
  CHECK(allocate_budget({0.9, 0.1}, 10, {5, inf}) == std::vector<int>{5, 5});

  // sum stays at the budget whenever caps permit
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = sample_proportions(0.3, 5, rng);
    auto counts = allocate_budget(p, 64, {64, 64, 64, 64, 64});
    int sum = 0;
    for (int c : counts) sum += c;
    CHECK(sum == 64);
  }
  // and is capped by capacity otherwise
  auto clipped = allocate_budget({0.5, 0.5}, 100, {10, 20});
  CHECK(clipped[0] + clipped[1] == 30);
}

TEST_CASE("uniform point allocations differ by at most one token") {
  Rng rng = make_rng(4);
  const std::int64_t inf = std::numeric_limits<std::int64_t>::max();
  for (int k : {3, 4, 6}) {
    auto p = sample_proportions(std::numeric_limits<double>::infinity(), k, rng);
    auto counts = allocate_budget(p, 128, std::vector<std::int64_t>(k, inf));
    int lo = *std::min_element(counts.begin(), counts.end());
    int hi = *std::max_element(counts.begin(), counts.end());
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("dense masking is a uniform subset") {
  Rng rng = make_rng(5);
  CHECK(mask_dense(6, 6, rng) == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(mask_dense(6, 0, rng).empty());
  CHECK_THROWS_AS(mask_dense(4, 5, rng), CapacityError);

  // all 6 two-element subsets of four positions appear with frequency 1/6
  std::map<std::pair<int, int>, int> freq;
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) {
    auto s = mask_dense(4, 2, rng);
    ++freq[{s[0], s[1]}];
  }
  CHECK(freq.size() == 6);
  for (const auto& [subset, n] : freq) {
    CHECK(std::abs(static_cast<double>(n) / draws - 1.0 / 6) <= 0.01);
  }
}

namespace {

const ModalitySpec& caption_spec() {
  static Registry registry = make_registry(testing::tiny_dataset_config());
  return registry.at("caption");
}

TokenId sentinel(int i) { return static_cast<TokenId>(caption_spec().block("sentinel").begin + i); }

}  // namespace

TEST_CASE("span masking reproduces the hand-traced example") {
  const ModalitySpec& spec = caption_spec();
  const IdBlock& words = spec.block("word");
  // [a b c d e] with b, c, e masked
  std::vector<TokenId> seq;
  for (int i = 0; i < 5; ++i) seq.push_back(static_cast<TokenId>(words.begin + i));
  std::vector<bool> masked = {false, true, true, false, true};
  Rng rng = make_rng(6);
  SpanMaskResult r = span_mask_fixed(seq, spec, masked, -1, rng);

  CHECK(r.input_ids == std::vector<TokenId>{seq[0], sentinel(0), seq[3], sentinel(1)});
  CHECK(r.target_ids == std::vector<TokenId>{sentinel(0), seq[1], seq[2], sentinel(1), seq[4],
                                             sentinel(2)});
}

TEST_CASE("span masking boundary probabilities") {
  const ModalitySpec& spec = caption_spec();
  const IdBlock& words = spec.block("word");
  std::vector<TokenId> seq;
  for (int i = 0; i < 5; ++i) seq.push_back(static_cast<TokenId>(words.begin + i));
  Rng rng = make_rng(7);

  SpanMaskResult none = span_mask(seq, spec, 0.0, 16, 16, rng);
  CHECK(none.input_ids == seq);
  CHECK(none.target_ids == std::vector<TokenId>{sentinel(0)});

  SpanMaskResult all = span_mask(seq, spec, 1.0, 16, 16, rng);
  CHECK(all.input_ids == std::vector<TokenId>{sentinel(0)});
  std::vector<TokenId> expected = {sentinel(0)};
  expected.insert(expected.end(), seq.begin(), seq.end());
  expected.push_back(sentinel(1));
  CHECK(all.target_ids == expected);

  CHECK_THROWS_AS(span_mask(seq, spec, 0.5, 0, 16, rng), CapacityError);
  CHECK_THROWS_AS(span_mask({}, spec, 0.5, 4, 16, rng), ContractError);
}

TEST_CASE("span masking escalates the probability until the view fits") {
  const ModalitySpec& spec = caption_spec();
  const IdBlock& words = spec.block("word");
  std::vector<TokenId> seq;
  for (int i = 0; i < 20; ++i) seq.push_back(static_cast<TokenId>(words.begin + i % 10));
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    SpanMaskResult r = span_mask(seq, spec, 0.05, 4, 32, rng);
    CHECK(r.input_ids.size() <= 4);
    CHECK(r.p_mask_used >= 0.05);
  }
}

TEST_CASE("span results satisfy the structural invariants on random input") {
  const ModalitySpec& spec = caption_spec();
  const IdBlock& words = spec.block("word");
  const IdBlock& sentinels = spec.block("sentinel");
  Rng rng = make_rng(9);
  std::uniform_int_distribution<int> len_dist(1, 24);
  std::uniform_real_distribution<double> p_dist(0.0, 1.0);
  std::uniform_int_distribution<int> budget_dist(1, 20);

  for (int trial = 0; trial < 10000; ++trial) {
    int len = len_dist(rng);
    std::vector<TokenId> seq;
    for (int i = 0; i < len; ++i) {
      seq.push_back(static_cast<TokenId>(words.begin + (i * 7) % words.size()));
    }
    int in_budget = budget_dist(rng);
    int tgt_budget = budget_dist(rng);
    SpanMaskResult r = span_mask(seq, spec, p_dist(rng), in_budget, tgt_budget, rng);

    CHECK(static_cast<int>(r.input_ids.size()) <= in_budget);
    CHECK(static_cast<int>(r.target_ids.size()) <= tgt_budget);

    // sentinels in the input appear in ascending order S1, S2, ...
    int expect = 0;
    for (TokenId id : r.input_ids) {
      if (sentinels.contains(id)) {
        CHECK(id == sentinels.begin + expect);
        ++expect;
      }
    }
    REQUIRE(!r.target_ids.empty());
    CHECK(sentinels.contains(r.target_ids.front()));
    CHECK(sentinels.contains(r.target_ids.back()));
  }
}

namespace {

struct FullSetup {
  DatasetConfig dc = testing::tiny_dataset_config();
  Registry registry = make_registry(dc);
  SampleTokens sample;

  explicit FullSetup(std::uint64_t seed = 11, bool pixels = true) {
    Rng rng = make_rng(seed);
    sample = mmm::testing::random_sample_tokens(registry, rng, pixels);
  }
};

}  // namespace

TEST_CASE("masked samples respect budgets, disjointness, and exact dense counts") {
  FullSetup setup;
  MaskConfig cfg = testing::all_to_all_config();
  Rng rng = make_rng(12);

  for (int trial = 0; trial < 10000; ++trial) {
    MaskedSample m = build_masked_sample(setup.sample, setup.registry, cfg, rng);
    CHECK(m.input_token_count() <= cfg.budget_input);
    CHECK(m.target_token_count() <= cfg.budget_target);
    for (const auto& din : m.dense_inputs) {
      for (const auto& dtg : m.dense_targets) {
        if (din.modality != dtg.modality) continue;
        std::set<int> inputs(din.positions.begin(), din.positions.end());
        for (int p : dtg.positions) CHECK(inputs.count(p) == 0);
      }
    }
  }

  // dense-only strategies meet the input budget exactly
  MaskConfig dense_only = cfg;
  dense_only.strategies = {{"dense", 1.0, {"rgb", "depth", "seg", "feat"}}};
  for (int trial = 0; trial < 2000; ++trial) {
    MaskedSample m = build_masked_sample(setup.sample, setup.registry, dense_only, rng);
    CHECK(m.input_token_count() == cfg.budget_input);
  }
}

TEST_CASE("strategy mixture frequencies match their probabilities") {
  FullSetup setup;
  MaskConfig cfg = testing::all_to_all_config();
  cfg.strategies = {{"rgb-to-all", 0.5, {"rgb_pixels"}},
                    {"all-to-all", 0.5, {"rgb", "depth", "seg", "feat", "bbox", "caption"}}};
  Rng rng = make_rng(13);
  std::map<std::string, int> freq;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    ++freq[build_masked_sample(setup.sample, setup.registry, cfg, rng).strategy];
  }
  CHECK(std::abs(freq["rgb-to-all"] / static_cast<double>(draws) - 0.5) <= 0.02);
  CHECK(std::abs(freq["all-to-all"] / static_cast<double>(draws) - 0.5) <= 0.02);
}

TEST_CASE("pixel-only strategy draws inputs from patches and targets from everything") {
  FullSetup setup;
  MaskConfig cfg = testing::all_to_all_config();
  cfg.strategies = {{"rgb-to-all", 1.0, {"rgb_pixels"}}};
  Rng rng = make_rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    MaskedSample m = build_masked_sample(setup.sample, setup.registry, cfg, rng);
    CHECK(m.dense_inputs.empty());
    CHECK(m.input_seq_views.empty());
    REQUIRE(m.pixel_inputs.size() == 1);
    CHECK(m.pixel_inputs[0].modality == "rgb_pixels");
    CHECK(m.pixel_inputs[0].positions.size() == 16);  // whole input budget
  }
}

TEST_CASE("identical seeds produce byte-identical masked samples") {
  FullSetup setup;
  MaskConfig cfg = testing::all_to_all_config();
  for (int seed = 0; seed < 20; ++seed) {
    Rng r1 = make_rng(100, seed), r2 = make_rng(100, seed);
    MaskedSample a = build_masked_sample(setup.sample, setup.registry, cfg, r1);
    MaskedSample b = build_masked_sample(setup.sample, setup.registry, cfg, r2);
    CHECK(a.strategy == b.strategy);
    REQUIRE(a.dense_inputs.size() == b.dense_inputs.size());
    for (std::size_t i = 0; i < a.dense_inputs.size(); ++i) {
      CHECK(a.dense_inputs[i].positions == b.dense_inputs[i].positions);
      CHECK(a.dense_inputs[i].ids == b.dense_inputs[i].ids);
    }
    REQUIRE(a.target_seq_views.size() == b.target_seq_views.size());
    for (std::size_t i = 0; i < a.target_seq_views.size(); ++i) {
      CHECK(a.target_seq_views[i].ids == b.target_seq_views[i].ids);
    }
  }
}

TEST_CASE("config validation rejects malformed strategy sets") {
  MaskConfig cfg = testing::all_to_all_config();
  cfg.strategies[0].probability = 0.7;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.strategies.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  MaskConfig round = testing::all_to_all_config();
  round.alpha_input = std::numeric_limits<double>::infinity();
  MaskConfig back = MaskConfig::from_json(round.to_json());
  CHECK(std::isinf(back.alpha_input));
  CHECK(back.budget_input == round.budget_input);
  CHECK(back.strategies[0].input_modalities == round.strategies[0].input_modalities);
}

TEST_SUITE_END();
