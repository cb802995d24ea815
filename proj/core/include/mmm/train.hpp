#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmm/masking.hpp"
#include "mmm/model.hpp"
#include "mmm/optim.hpp"

namespace mmm {

struct TrainConfig {
  double base_lr = 4e-3;  // specified for batch-size 256, scaled linearly
  int batch_size = 64;
  std::int64_t warmup_tokens = 5'000'000;
  std::int64_t total_tokens = 50'000'000;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::optional<double> grad_clip;  // global-norm clip, off by default
  int num_repeats = 4;
  int repeat_buffer_size = 256;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every_tokens = 0;  // 0 = total_tokens / 20
  std::string checkpoint_dir;
  std::string metrics_path;
  int num_threads = 0;  // 0 = hardware concurrency
  int lr_scale_base = 256;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct TokensSeenCounter {
  std::int64_t tokens_seen = 0;
  std::int64_t samples_seen = 0;
};

// Peak learning rate is base_lr * batch_size / lr_scale_base; linear warmup
// in tokens, cosine decay to zero at total_tokens.
double lr_at(std::int64_t tokens_seen, const TrainConfig& cfg);

// Total input plus target tokens across the batch.
std::int64_t account_tokens(const std::vector<MaskedSample>& batch);

// Bounded buffer that re-emits each underlying stream element `num_repeats`
// times in random interleaving before replacing it with a fresh one.
class RepeatBuffer {
 public:
  RepeatBuffer(std::int64_t stream_length, int num_repeats, int buffer_size, std::uint64_t seed,
               bool cycle);

  std::optional<std::int64_t> next();

  std::string serialize() const;
  void restore(const std::string& text);

 private:
  void fill();

  std::int64_t stream_length_;
  int num_repeats_;
  int capacity_;
  bool cycle_;
  std::vector<std::pair<std::int64_t, int>> slots_;  // (stream position, emissions so far)
  std::int64_t next_pos_ = 0;
  Rng rng_;
};

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t tokens_seen = 0;
  double lr = 0;
  double loss = 0;
  std::map<std::string, double> per_modality;
};

struct TrainResult {
  TokensSeenCounter counter;
  std::int64_t steps = 0;
  std::vector<StepRecord> metrics;
};

TrainResult train(Model& model, const std::vector<SampleTokens>& dataset,
                  const TrainConfig& tcfg, const MaskConfig& mcfg,
                  const std::string& resume_path = "");

// byte <-> float32 packing for non-tensor state stored inside checkpoints
ad::Mat<float> pack_bytes(const std::string& bytes);
std::string unpack_bytes(const ad::Mat<float>& m);

}  // namespace mmm
