#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "mmm/train.hpp"

using namespace mmm;

TEST_SUITE_BEGIN("train");

TEST_CASE("learning rate schedule hits its pinned points") {
  TrainConfig cfg;
  cfg.base_lr = 4e-3;
  cfg.batch_size = 64;
  cfg.warmup_tokens = 1000;
  cfg.total_tokens = 11000;
  const double peak = cfg.base_lr * 64 / 256.0;

  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(cfg.warmup_tokens, cfg) == doctest::Approx(peak).epsilon(1e-12));
  std::int64_t mid = (cfg.warmup_tokens + cfg.total_tokens) / 2;
  CHECK(lr_at(mid, cfg) == doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK(lr_at(cfg.total_tokens, cfg) == 0.0);

  // continuous, non-negative, and the max equals the peak
  double max_seen = 0, prev = 0;
  for (std::int64_t t = 0; t <= cfg.total_tokens; t += 10) {
    double lr = lr_at(t, cfg);
    CHECK(lr >= 0.0);
    CHECK(std::abs(lr - prev) <= peak * 10.0 / cfg.warmup_tokens + 1e-9);
    prev = lr;
    max_seen = std::max(max_seen, lr);
  }
  CHECK(max_seen == doctest::Approx(peak));
}

TEST_CASE("token accounting sums input and target counts") {
  CHECK(account_tokens({}) == 0);

  std::vector<MaskedSample> batch(4096);
  for (auto& s : batch) {
    DenseSelection in, tgt;
    in.modality = tgt.modality = "rgb";
    in.positions.resize(128);
    in.ids.resize(128);
    tgt.positions.resize(128);
    tgt.ids.resize(128);
    s.dense_inputs.push_back(in);
    s.dense_targets.push_back(tgt);
  }
  CHECK(account_tokens(batch) == 1048576);  // 4096 * 256

  // paper-scale arithmetic: 100B tokens at 256 tokens per sample is ~400M samples
  const double samples = 100e9 / 256.0;
  CHECK(samples > 3.8e8);
  CHECK(samples < 4.0e8);
}

TEST_CASE("repeat buffer emits every stream element exactly num_repeats times") {
  for (int repeats : {1, 4}) {
    RepeatBuffer buffer(50, repeats, 8, 123, /*cycle=*/false);
    std::map<std::int64_t, int> counts;
    while (auto pos = buffer.next()) ++counts[*pos];
    CHECK(counts.size() == 50);
    int total = 0;
    for (const auto& [pos, n] : counts) {
      CHECK(n == repeats);
      total += n;
    }
    CHECK(total == 50 * repeats);
  }
}

TEST_CASE("repeat buffer state serializes and restores exactly") {
  RepeatBuffer a(100, 4, 8, 9, true);
  for (int i = 0; i < 37; ++i) a.next();
  RepeatBuffer b(100, 4, 8, 1234, true);
  b.restore(a.serialize());
  for (int i = 0; i < 200; ++i) {
    CHECK(a.next() == b.next());
  }
}

TEST_CASE("decoupled weight decay never moves parameters at lr zero") {
  ad::ParamStore<float> params;
  params.add("w", ad::Mat<float>::Constant(3, 3, 2.0f));
  AdamW<float> opt;
  opt.weight_decay = 0.5;
  opt.init(params);
  std::vector<ad::Mat<float>> grads = {ad::Mat<float>::Constant(3, 3, 1.0f)};
  for (int i = 0; i < 5; ++i) opt.step(params, grads, 0.0);
  CHECK(params.value(0) == ad::Mat<float>::Constant(3, 3, 2.0f));

  opt.step(params, grads, 0.1);
  CHECK(params.value(0) != ad::Mat<float>::Constant(3, 3, 2.0f));
}

namespace {

struct TrainFixture {
  DatasetConfig dc = testing::tiny_dataset_config();
  Registry registry = make_registry(dc);
  std::vector<SampleTokens> dataset;

  TrainFixture() {
    for (int i = 0; i < 12; ++i) {
      Rng rng = make_rng(400, i);
      dataset.push_back(testing::random_sample_tokens(registry, rng));
    }
  }

  Model fresh_model(std::uint64_t seed = 5) const {
    return Model::make(testing::tiny_model_config(), registry, seed);
  }

  TrainConfig fast_config(const std::string& dir = "") const {
    TrainConfig cfg;
    cfg.base_lr = 4e-3;
    cfg.batch_size = 4;
    cfg.warmup_tokens = 200;
    cfg.total_tokens = 1600;
    cfg.num_repeats = 2;
    cfg.repeat_buffer_size = 8;
    cfg.seed = 11;
    cfg.num_threads = 2;
    cfg.checkpoint_dir = dir;
    return cfg;
  }
};

}  // namespace

TEST_CASE("training is deterministic and stops on the token budget") {
  TrainFixture f;
  MaskConfig mcfg = testing::all_to_all_config();

  Model m1 = f.fresh_model();
  TrainResult r1 = train(m1, f.dataset, f.fast_config(), mcfg);
  Model m2 = f.fresh_model();
  TrainResult r2 = train(m2, f.dataset, f.fast_config(), mcfg);

  CHECK(r1.counter.tokens_seen >= 1600);
  // one batch of 4 samples sees at most 4 * (16 + 16) tokens
  CHECK(r1.counter.tokens_seen < 1600 + 4 * 32);
  CHECK(static_cast<std::int64_t>(r1.metrics.size()) == r1.steps);
  REQUIRE(r1.metrics.size() == r2.metrics.size());
  for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
    CHECK(r1.metrics[i].loss == r2.metrics[i].loss);
    CHECK(r1.metrics[i].tokens_seen == r2.metrics[i].tokens_seen);
  }
  for (int p = 0; p < m1.params.size(); ++p) {
    CHECK(m1.params.entries[p].value == m2.params.entries[p].value);
  }
  // losses head downward on this tiny stream
  CHECK(r1.metrics.back().loss < r1.metrics.front().loss);
}

TEST_CASE("metrics lines are valid json, one per step") {
  TrainFixture f;
  TrainConfig cfg = f.fast_config();
  cfg.total_tokens = 400;
  cfg.metrics_path = "test_metrics.jsonl";
  Model model = f.fresh_model();
  TrainResult r = train(model, f.dataset, cfg, testing::all_to_all_config());
  std::ifstream in(cfg.metrics_path);
  std::string line;
  std::int64_t lines = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++lines;
  }
  CHECK(lines == r.steps);
  std::remove(cfg.metrics_path.c_str());
}

TEST_CASE("resume from a checkpoint reproduces the next step bit for bit") {
  TrainFixture f;
  MaskConfig mcfg = testing::all_to_all_config();
  namespace fs = std::filesystem;

  // full run
  TrainConfig full = f.fast_config("test_ckpt_full");
  full.checkpoint_every_tokens = 800;
  Model m_full = f.fresh_model();
  TrainResult r_full = train(m_full, f.dataset, full, mcfg);

  // interrupted run: same config, stop at the checkpoint boundary
  TrainConfig head = full;
  head.checkpoint_dir = "test_ckpt_head";
  head.total_tokens = 800;
  Model m_head = f.fresh_model();
  train(m_head, f.dataset, head, mcfg);

  // resume to the full horizon from the interrupted final checkpoint
  TrainConfig tail = full;
  tail.checkpoint_dir = "test_ckpt_tail";
  Model m_tail = f.fresh_model(999);  // will be overwritten by the checkpoint
  TrainResult r_tail = train(m_tail, f.dataset, tail, mcfg, "test_ckpt_head/final.ckpt");

  // the resumed run's steps must match the uninterrupted run's suffix exactly
  REQUIRE(!r_tail.metrics.empty());
  std::map<std::int64_t, double> full_by_step;
  for (const auto& rec : r_full.metrics) full_by_step[rec.step] = rec.loss;
  for (const auto& rec : r_tail.metrics) {
    REQUIRE(full_by_step.count(rec.step));
    CHECK(rec.loss == full_by_step[rec.step]);
  }
  for (int p = 0; p < m_full.params.size(); ++p) {
    CHECK(m_full.params.entries[p].value == m_tail.params.entries[p].value);
  }
  fs::remove_all("test_ckpt_full");
  fs::remove_all("test_ckpt_head");
  fs::remove_all("test_ckpt_tail");
}

TEST_CASE("non-finite losses abort with diagnostics") {
  TrainFixture f;
  TrainConfig cfg = f.fast_config("test_ckpt_diag");
  cfg.base_lr = 1e18;  // guarantees overflow within a few steps
  cfg.warmup_tokens = 0;
  Model model = f.fresh_model();
  CHECK_THROWS_AS(train(model, f.dataset, cfg, testing::all_to_all_config()), NumericError);
  CHECK(std::filesystem::exists("test_ckpt_diag/diagnostic.ckpt"));
  std::filesystem::remove_all("test_ckpt_diag");
}

TEST_CASE("config json round trip") {
  TrainConfig cfg;
  cfg.grad_clip = 3.0;
  cfg.seed = 42;
  TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.base_lr == cfg.base_lr);
  CHECK(back.grad_clip.has_value());
  CHECK(*back.grad_clip == 3.0);
  CHECK(back.seed == 42);
  CHECK(back.beta2 == cfg.beta2);

  TrainConfig bad;
  bad.warmup_tokens = 100;
  bad.total_tokens = 50;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_SUITE_END();
