#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "mmm/generate.hpp"
#include "mmm/synth.hpp"

using namespace mmm;

TEST_SUITE_BEGIN("generate");

TEST_CASE("guided logits identities and arithmetic") {
  ad::Mat<float> uncond(1, 2), c1(1, 2), c2(1, 2);
  uncond << 0, 0;
  c1 << 1, 0;
  c2 << 0, 1;

  // w = 1 collapses to the condition; w = 0 to the unconditional pass
  CHECK(guided_logits(uncond, {c1}, {1.0}) == c1);
  CHECK(guided_logits(uncond, {c1}, {0.0}) == uncond);

  ad::Mat<float> combo = guided_logits(uncond, {c1, c2}, {2.0, -1.0});
  CHECK(combo(0, 0) == 2.0f);
  CHECK(combo(0, 1) == -1.0f);

  // linearity in each weight, probed at three values per condition
  Rng rng = make_rng(3);
  ad::Mat<float> u = ad::Mat<float>::Random(2, 5);
  std::vector<ad::Mat<float>> conds = {ad::Mat<float>::Random(2, 5), ad::Mat<float>::Random(2, 5)};
  for (std::size_t ci = 0; ci < conds.size(); ++ci) {
    for (double w : {-1.5, 0.25, 2.0}) {
      std::vector<double> w0 = {0.7, -0.3};
      std::vector<double> w1 = w0;
      w1[ci] += w;
      ad::Mat<float> lhs = guided_logits(u, conds, w1);
      ad::Mat<float> rhs =
          guided_logits(u, conds, w0) + static_cast<float>(w) * (conds[ci] - u);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-6f);
    }
  }

  CHECK_THROWS_AS(guided_logits(u, {ad::Mat<float>::Random(1, 5)}, {1.0}), ContractError);
  CHECK_THROWS_AS(guided_logits(u, conds, {1.0}), ContractError);
}

TEST_CASE("token sampling: argmax modes and frequencies") {
  Rng rng = make_rng(5);
  Eigen::RowVectorXf logits(3);
  logits << std::log(2.0f), 0.0f, 0.0f;

  SamplingParams greedy;
  greedy.temperature = 0.0;
  auto g = sample_token(logits, greedy, rng);
  CHECK(g.id == 0);
  CHECK(g.confidence == 1.0);

  SamplingParams topk1;
  topk1.temperature = 5.0;
  topk1.top_k = 1;
  for (int i = 0; i < 50; ++i) CHECK(sample_token(logits, topk1, rng).id == 0);

  SamplingParams plain;
  std::map<TokenId, int> freq;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++freq[sample_token(logits, plain, rng).id];
  CHECK(std::abs(freq[0] / static_cast<double>(draws) - 0.5) <= 0.01);
  CHECK(std::abs(freq[1] / static_cast<double>(draws) - 0.25) <= 0.01);
  CHECK(std::abs(freq[2] / static_cast<double>(draws) - 0.25) <= 0.01);
}

TEST_CASE("sampling is invariant to constant logit shifts") {
  Eigen::RowVectorXf base(4);
  base << 1.0f, 2.0f, 0.0f, -1.0f;
  Eigen::RowVectorXf shifted = base.array() + 3.0f;
  SamplingParams params;
  params.top_p = 0.9;
  Rng r1 = make_rng(6), r2 = make_rng(6);
  for (int i = 0; i < 2000; ++i) {
    auto a = sample_token(base, params, r1);
    auto b = sample_token(shifted, params, r2);
    CHECK(a.id == b.id);
    CHECK(a.confidence == doctest::Approx(b.confidence).epsilon(1e-6));
  }
}

TEST_CASE("top-p keeps the smallest prefix reaching the mass") {
  Eigen::RowVectorXf logits(4);
  logits << 10.0f, 1.0f, 0.5f, 0.0f;  // top token carries ~99.98% mass
  SamplingParams p;
  p.top_p = 0.5;
  Rng rng = make_rng(7);
  for (int i = 0; i < 100; ++i) {
    auto tok = sample_token(logits, p, rng);
    CHECK(tok.id == 0);
    CHECK(tok.confidence == doctest::Approx(1.0));
  }
}

TEST_CASE("cosine plan: frozen values from the stated curve") {
  // n_t proportional to (cos(pi t / T - pi) + 1) / 2 with largest-remainder
  // rounding; values computed by hand for (196, 8)
  CHECK(cosine_plan(196, 8) == std::vector<int>{2, 6, 13, 22, 30, 37, 42, 44});

  // independent re-derivation as an in-test oracle over random cases
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> nd(1, 200), td(1, 12);
    int total = nd(rng), iters = td(rng);
    auto plan = cosine_plan(total, iters);
    int sum = 0;
    for (int n : plan) {
      CHECK(n > 0);  // zero-count iterations are dropped
      sum += n;
    }
    CHECK(sum == total);
    CHECK(static_cast<int>(plan.size()) <= iters);
  }
  CHECK(cosine_plan(0, 4).empty());
}

namespace {

struct GenFixture {
  DatasetConfig dc = testing::tiny_dataset_config();
  Registry registry = make_registry(dc);
  Model model = Model::make(testing::tiny_model_config(), registry, 19);

  DecodingState conditioning_with(const std::string& caption_text) {
    DecodingState state;
    WordVocab vocab(grammar_words(), registry.at("caption"));
    state.set_sequence(vocab.encode(caption_text, registry.at("caption")));
    return state;
  }
};

}  // namespace

TEST_CASE("maskgit decoding fixes exactly the planned counts") {
  GenFixture f;
  DecodingState state;
  state.init_masked("seg", f.registry);
  // pre-fix all but four positions so the plan is small
  DenseState& ds = state.dense["seg"];
  for (int p = 4; p < 64; ++p) {
    ds.fixed[p] = true;
    ds.ids[p] = 1;
  }
  Rng rng = make_rng(9);
  StepTrace trace;
  SamplingParams sampling;
  TokenGrid grid = maskgit_decode(state, "seg", {2, 2}, f.model, sampling, std::nullopt, rng,
                                  &trace);
  CHECK(trace.fixed_counts == std::vector<int>{62, 64});
  CHECK(state.dense["seg"].fixed_count() == 64);
  CHECK(grid.ids.size() == 64);
  CHECK(trace.model_calls == 2);

  // plan mismatch is a contract violation
  DecodingState bad;
  bad.init_masked("seg", f.registry);
  CHECK_THROWS_AS(
      maskgit_decode(bad, "seg", {2, 2}, f.model, sampling, std::nullopt, rng, nullptr),
      ContractError);
}

TEST_CASE("single-iteration maskgit is pure parallel sampling") {
  GenFixture f;
  DecodingState state;
  state.init_masked("seg", f.registry);
  Rng rng = make_rng(10);
  StepTrace trace;
  SamplingParams sampling;
  maskgit_decode(state, "seg", {64}, f.model, sampling, std::nullopt, rng, &trace);
  CHECK(trace.model_calls == 1);
  CHECK(trace.fixed_counts == std::vector<int>{64});
}

TEST_CASE("roar decoding counts model calls by step size") {
  GenFixture f;
  SamplingParams sampling;

  DecodingState one;
  one.init_masked("seg", f.registry);
  Rng r1 = make_rng(11);
  StepTrace t1;
  roar_decode(one, "seg", 1, f.model, sampling, std::nullopt, r1, &t1);
  CHECK(t1.model_calls == 64);  // fully sequential random order
  CHECK(one.dense["seg"].fixed_count() == 64);

  DecodingState all;
  all.init_masked("seg", f.registry);
  Rng r2 = make_rng(12);
  StepTrace t2;
  roar_decode(all, "seg", 64, f.model, sampling, std::nullopt, r2, &t2);
  CHECK(t2.model_calls == 1);

  // fixed seed, identical output
  DecodingState a, b;
  a.init_masked("seg", f.registry);
  b.init_masked("seg", f.registry);
  Rng ra = make_rng(13), rb = make_rng(13);
  TokenGrid ga = roar_decode(a, "seg", 8, f.model, sampling, std::nullopt, ra, nullptr);
  TokenGrid gb = roar_decode(b, "seg", 8, f.model, sampling, std::nullopt, rb, nullptr);
  CHECK(ga.ids == gb.ids);
}

TEST_CASE("monotone fixed counts until completion") {
  GenFixture f;
  DecodingState state;
  state.init_masked("rgb", f.registry);
  Rng rng = make_rng(14);
  StepTrace trace;
  SamplingParams sampling;
  maskgit_decode(state, "rgb", cosine_plan(64, 8), f.model, sampling, std::nullopt, rng, &trace);
  int prev = 0;
  for (int n : trace.fixed_counts) {
    CHECK(n > prev);
    prev = n;
  }
  CHECK(prev == 64);
}

namespace {

// rig the decoder so one sequence token always wins the argmax: zero the
// final-norm gain, steer its bias, and give the winner a huge embedding
void rig_sequence_argmax(Model& model, const std::string& modality, TokenId winner) {
  auto& gain = model.params.value(model.dec_ln_g);
  gain.setZero();
  auto& bias = model.params.value(model.dec_ln_b);
  bias.setOnes();
  const auto& mp = model.modality_params.at(modality);
  auto& table = model.params.value(mp.token_table);
  table *= 0.001f;
  table.row(winner).setOnes();
}

}  // namespace

TEST_CASE("autoregressive decoding stops at EOS or flags truncation") {
  GenFixture f;
  const ModalitySpec& spec = f.registry.at("caption");
  SamplingParams greedy;
  greedy.temperature = 0.0;
  Rng rng = make_rng(15);

  SUBCASE("a model that emits EOS first returns the empty content sequence") {
    Model rigged = f.model;
    rig_sequence_argmax(rigged, "caption", static_cast<TokenId>(spec.special("eos")));
    DecodingState state;
    SeqResult r = autoregressive_decode(state, "caption", rigged, greedy, std::nullopt, rng);
    CHECK(r.terminated);
    CHECK(r.seq.ids == std::vector<TokenId>{static_cast<TokenId>(spec.special("eos"))});
  }

  SUBCASE("hitting max_len without EOS flags the sequence") {
    Model rigged = f.model;
    rig_sequence_argmax(rigged, "caption",
                        static_cast<TokenId>(spec.block("word").begin + 3));
    DecodingState state;
    SeqResult r = autoregressive_decode(state, "caption", rigged, greedy, std::nullopt, rng, 6);
    CHECK_FALSE(r.terminated);
    CHECK(r.seq.ids.size() == 6);
  }

  SUBCASE("temperature zero is reproducible") {
    DecodingState cond = f.conditioning_with("a red square");
    Rng r1 = make_rng(16), r2 = make_rng(16);
    SeqResult a = autoregressive_decode(cond, "bbox", f.model, greedy, std::nullopt, r1);
    SeqResult b = autoregressive_decode(cond, "bbox", f.model, greedy, std::nullopt, r2);
    CHECK(a.seq.ids == b.seq.ids);
  }
}

TEST_CASE("chained generation completes every scheduled modality in order") {
  GenFixture f;
  GenerationSchedule schedule;
  GenerationStep seg;
  seg.target_modality = "seg";
  seg.scheme = DecodingScheme::MaskGit;
  seg.iterations = 4;
  GenerationStep rgb;
  rgb.target_modality = "rgb";
  rgb.scheme = DecodingScheme::Roar;
  rgb.roar_step = 16;
  schedule.steps = {seg, rgb};

  DecodingState cond = f.conditioning_with("a blue circle");
  Rng rng = make_rng(17);
  DecodingState out = chained_generate(cond, schedule, f.model, rng);
  CHECK(out.generated == std::vector<std::string>{"seg", "rgb"});
  CHECK(out.dense.at("seg").fixed_count() == 64);
  CHECK(out.dense.at("rgb").fixed_count() == 64);
  CHECK(out.sequences.count("caption") == 1);  // conditioning carried through

  // empty schedule echoes the conditioning
  DecodingState echo = chained_generate(cond, GenerationSchedule{}, f.model, rng);
  CHECK(echo.dense.empty());
  CHECK(echo.sequences.at("caption").ids == cond.sequences.at("caption").ids);

  // same seed, same everything
  Rng r1 = make_rng(18), r2 = make_rng(18);
  DecodingState o1 = chained_generate(cond, schedule, f.model, r1);
  DecodingState o2 = chained_generate(cond, schedule, f.model, r2);
  CHECK(o1.dense.at("rgb").ids == o2.dense.at("rgb").ids);
  CHECK(o1.dense.at("seg").ids == o2.dense.at("seg").ids);

  // regenerating a given modality is rejected
  GenerationSchedule bad;
  GenerationStep cap;
  cap.target_modality = "caption";
  cap.scheme = DecodingScheme::Autoregressive;
  bad.steps = {cap};
  CHECK_THROWS_AS(chained_generate(cond, bad, f.model, rng), ContractError);
}

TEST_CASE("guided decoding runs one extra pass per condition") {
  GenFixture f;
  DecodingState cond = f.conditioning_with("a red square");
  cond.init_masked("seg", f.registry);
  GuidanceSpec guidance;
  guidance.conditions = {{{"caption"}, 2.0}};
  Rng rng = make_rng(19);
  StepTrace trace;
  SamplingParams sampling;
  maskgit_decode(cond, "seg", {32, 32}, f.model, sampling, guidance, rng, &trace);
  CHECK(trace.model_calls == 2 * 2);  // (uncond + 1 cond) per iteration
  CHECK(cond.dense["seg"].fixed_count() == 64);
}

TEST_CASE("schedules round trip through json") {
  GenerationSchedule schedule;
  GenerationStep step;
  step.target_modality = "rgb";
  step.scheme = DecodingScheme::MaskGit;
  step.plan = {4, 12, 48};
  step.sampling.temperature = 0.7;
  step.sampling.top_k = 16;
  step.sampling.top_p = 0.9;
  GuidanceSpec g;
  g.conditions = {{{"caption", "seg"}, 1.5}, {{"depth"}, -0.5}};
  step.guidance = g;
  schedule.steps = {step};

  GenerationSchedule back = GenerationSchedule::from_json(schedule.to_json());
  REQUIRE(back.steps.size() == 1);
  CHECK(back.steps[0].plan == step.plan);
  CHECK(back.steps[0].sampling.top_k == 16);
  CHECK(*back.steps[0].sampling.top_p == doctest::Approx(0.9));
  REQUIRE(back.steps[0].guidance.has_value());
  CHECK(back.steps[0].guidance->conditions[1].weight == -0.5);
}

TEST_SUITE_END();
