#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "mmm/eval.hpp"

using namespace mmm;

TEST_SUITE_BEGIN("harness");

TEST_CASE("eval report json is strict about its schema") {
  EvalReport report;
  report.per_modality_ce = {{"seg", 1.5}, {"rgb", 2.0}};
  report.table = {{{"rgb"}, "seg", 1.5}, {{}, "seg", 2.5}};
  report.config_hash = "abcd";
  report.seed = 7;
  report.tokens_seen = 1000;

  EvalReport back = EvalReport::from_json(report.to_json());
  CHECK(back.per_modality_ce == report.per_modality_ce);
  REQUIRE(back.table.size() == 2);
  CHECK(back.table[0].inputs == std::vector<std::string>{"rgb"});
  CHECK(back.table[1].inputs.empty());
  CHECK(back.tokens_seen == 1000);

  std::string with_unknown = report.to_json();
  with_unknown.insert(with_unknown.rfind('}'), ",\"surprise\":1");
  CHECK_THROWS_AS(EvalReport::from_json(with_unknown), LoadError);
}

namespace {

struct HarnessFixture {
  DatasetConfig dc = testing::tiny_dataset_config();
  Registry registry = make_registry(dc);
  Model model = Model::make(testing::tiny_model_config(), registry, 23);
  std::vector<SampleTokens> val;

  HarnessFixture() {
    for (int i = 0; i < 8; ++i) {
      Rng rng = make_rng(88, i);
      val.push_back(testing::random_sample_tokens(registry, rng));
    }
  }
};

}  // namespace

TEST_CASE("unconditional CE of an untrained model is near the uniform entropy") {
  HarnessFixture f;
  for (const char* target : {"seg", "rgb"}) {
    double expected = std::log(static_cast<double>(f.registry.at(target).vocab_size));
    double ce = eval_conditional_ce(f.model, f.val, {}, target);
    CHECK(std::abs(ce - expected) / expected <= 0.05);
  }
  // conditioning on noise cannot be exploited by an untrained model either
  double ce_cond = eval_conditional_ce(f.model, f.val, {"rgb", "depth"}, "seg");
  double expected = std::log(static_cast<double>(f.registry.at("seg").vocab_size));
  CHECK(std::abs(ce_cond - expected) / expected <= 0.05);
}

TEST_CASE("the target may not appear among the inputs") {
  HarnessFixture f;
  CHECK_THROWS_AS(eval_conditional_ce(f.model, f.val, {"seg"}, "seg"), ContractError);
  CHECK_THROWS_AS(eval_conditional_ce(f.model, f.val, {}, "rgb_pixels"), ContractError);
}

TEST_CASE("eval report covers every target modality") {
  HarnessFixture f;
  EvalReport report = build_eval_report(f.model, f.val, 3, 12345);
  for (const auto& spec : f.registry.modalities()) {
    if (!spec.target_eligible()) continue;
    CHECK(report.per_modality_ce.count(spec.name) == 1);
  }
  CHECK(report.table.size() == 2 * report.per_modality_ce.size());
  CHECK(report.tokens_seen == 12345);
  for (const auto& row : report.table) CHECK(row.ce >= 0.0);
}

TEST_CASE("model extension copies every shared tensor and adds fresh task tensors") {
  HarnessFixture f;
  ModalitySpec task;
  task.name = "edges";
  task.kind = ModalityKind::DenseGrid;
  task.vocab_size = 16;
  task.grid_h = 8;
  task.grid_w = 8;
  Model extended = extend_model_with_modality(f.model, task, 5);
  CHECK(extended.registry.has("edges"));
  std::map<std::string, const ad::Mat<float>*> base_by_name;
  for (const auto& e : f.model.params.entries) base_by_name[e.name] = &e.value;
  int fresh = 0;
  for (const auto& e : extended.params.entries) {
    auto it = base_by_name.find(e.name);
    if (it == base_by_name.end()) {
      ++fresh;
      continue;
    }
    CHECK(e.value == *it->second);
  }
  CHECK(fresh == 3);  // emb.edges, head.edges, modemb.edges
}

namespace {

std::vector<SampleTokens> task_samples(const Registry& registry, int n, std::uint64_t seed) {
  std::vector<SampleTokens> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, i);
    SampleTokens s;
    for (const char* name : {"rgb", "edges"}) {
      const ModalitySpec& spec = registry.at(name);
      TokenGrid g;
      g.modality = name;
      std::uniform_int_distribution<int> dist(0, static_cast<int>(spec.vocab_size) - 1);
      for (int p = 0; p < spec.num_positions(); ++p) g.ids.push_back(static_cast<TokenId>(dist(rng)));
      s.grids.push_back(std::move(g));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("transfer phase one leaves the trunk bit-identical") {
  HarnessFixture f;
  ModalitySpec task;
  task.name = "edges";
  task.kind = ModalityKind::DenseGrid;
  task.vocab_size = 8;
  task.grid_h = 8;
  task.grid_w = 8;
  Model model = extend_model_with_modality(f.model, task, 5);
  std::vector<ad::Mat<float>> before;
  for (const auto& e : model.params.entries) before.push_back(e.value);

  auto train = task_samples(model.registry, 8, 900);
  auto val = task_samples(model.registry, 4, 901);

  TransferConfig cfg;
  cfg.phase1_steps = 3;
  cfg.phase2_steps = 0;
  cfg.batch_size = 4;
  cfg.measurements = 2;
  TransferResult r = transfer_finetune(model, train, val, "rgb", "edges", cfg);
  CHECK(std::isfinite(r.best_val_ce));

  for (int i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.entries[i].name;
    bool task_tensor =
        name == "emb.edges" || name == "head.edges" || name == "modemb.edges";
    if (task_tensor) continue;
    CHECK(model.params.entries[i].value == before[i]);
  }
}

TEST_CASE("zero-budget transfers return the initial CE") {
  HarnessFixture f;
  ModalitySpec task;
  task.name = "edges";
  task.kind = ModalityKind::DenseGrid;
  task.vocab_size = 8;
  task.grid_h = 8;
  task.grid_w = 8;
  Model model = extend_model_with_modality(f.model, task, 5);
  auto train = task_samples(model.registry, 4, 902);
  auto val = task_samples(model.registry, 2, 903);
  TransferConfig cfg;
  cfg.phase1_steps = 0;
  cfg.phase2_steps = 0;
  TransferResult r = transfer_finetune(model, train, val, "rgb", "edges", cfg);
  CHECK(r.best_val_ce == r.initial_val_ce);
}

TEST_CASE("tokenize_sample and pixel attachment produce registry-consistent shapes") {
  HarnessFixture f;
  Rng rng = make_rng(99);
  CodebookConfig cb;
  cb.K = 16;
  cb.d = 8;
  TokenizerSet toks;
  toks.by_modality.emplace("rgb", GridTokenizer::make("rgb", 4, 4, 3, false, 0, 32, cb, rng));
  toks.by_modality.emplace("depth", GridTokenizer::make("depth", 4, 4, 1, false, 0, 32, cb, rng));
  toks.by_modality.emplace(
      "seg", GridTokenizer::make("seg", 4, 4, 1, true, num_shape_classes() + 1, 32, cb, rng));
  toks.by_modality.emplace("feat", GridTokenizer::make("feat", 4, 4, 8, false, 0, 32, cb, rng));

  WordVocab vocab(grammar_words(), f.registry.at("caption"));
  AlignedSample raw = render_sample(generate_scene(rng, f.dc), f.dc);
  SampleTokens tokens = tokenize_sample(raw, f.dc, toks, f.registry, vocab);
  CHECK(tokens.grids.size() == 4);
  for (const auto& g : tokens.grids) f.registry.validate_grid(g);
  for (const auto& s : tokens.seqs) f.registry.validate_seq(s);

  std::vector<SampleTokens> batch = {tokens};
  attach_pixel_patches(batch, f.dc, toks, f.registry);
  REQUIRE(batch[0].pixels.size() == 1);
  CHECK(batch[0].pixels[0].patches.rows() == 64);
  CHECK(batch[0].pixels[0].patches.cols() == 48);
}

TEST_SUITE_END();
