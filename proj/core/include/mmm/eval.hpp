#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmm/codecs.hpp"
#include "mmm/model.hpp"
#include "mmm/synth.hpp"
#include "mmm/train.hpp"
#include "mmm/vq.hpp"

namespace mmm {

struct TokenizerSet {
  std::map<std::string, GridTokenizer> by_modality;

  const GridTokenizer& at(const std::string& modality) const;
  void save_all(const std::string& dir) const;
  static TokenizerSet load_all(const std::string& dir, const std::vector<std::string>& modalities);
};

// Tokenize one rendered sample under the registry's modality set.
SampleTokens tokenize_sample(const AlignedSample& sample, const DatasetConfig& cfg,
                             const TokenizerSet& tokenizers, const Registry& registry,
                             const WordVocab& vocab);

// Pixel-input patches are derived from the frozen rgb tokenizer's
// reconstruction so shards stay token-only.
void attach_pixel_patches(std::vector<SampleTokens>& samples, const DatasetConfig& cfg,
                          const TokenizerSet& tokenizers, const Registry& registry);

struct EvalReport {
  struct Row {
    std::vector<std::string> inputs;
    std::string target;
    double ce = 0;
  };
  int version = 1;
  std::map<std::string, double> per_modality_ce;  // CE(m | all others)
  std::vector<Row> table;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::int64_t tokens_seen = 0;

  std::string to_json() const;
  // strict: unknown fields are rejected
  static EvalReport from_json(const std::string& text);
  void save(const std::string& path) const;
  static EvalReport load(const std::string& path);
};

// Mean per-token CE of predicting every token of `target` from the full
// content of the modalities in `inputs` (empty set = unconditional).
double eval_conditional_ce(const Model& model, const std::vector<SampleTokens>& val,
                           const std::vector<std::string>& inputs, const std::string& target,
                           int batch_size = 16);

EvalReport build_eval_report(const Model& model, const std::vector<SampleTokens>& val,
                             std::uint64_t seed, std::int64_t tokens_seen);

// New-modality transfer: phase 1 trains only the task embedding/head with
// the trunk frozen, phase 2 unfreezes everything; the best of the periodic
// validation measurements is reported.
struct TransferConfig {
  int phase1_steps = 100;
  int phase2_steps = 300;
  double phase1_base_lr = 8e-3;
  double phase2_base_lr = 2e-3;
  int batch_size = 16;
  int measurements = 10;
  std::uint64_t seed = 0;
  int eval_batch = 16;
};

struct TransferResult {
  double best_val_ce = 0;
  double initial_val_ce = 0;
  std::vector<double> measurements;
};

// Extend a trained model with a fresh modality (new embedding, head, and
// modality embedding); all existing tensors are copied.
Model extend_model_with_modality(const Model& base, const ModalitySpec& task_spec,
                                 std::uint64_t seed);

TransferResult transfer_finetune(Model& model, const std::vector<SampleTokens>& train,
                                 const std::vector<SampleTokens>& val,
                                 const std::string& input_modality,
                                 const std::string& task_modality, const TransferConfig& cfg);

}  // namespace mmm
