#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmm/model.hpp"

namespace mmm {

enum class DecodingScheme { MaskGit, Roar, Autoregressive };
std::string to_string(DecodingScheme s);
DecodingScheme decoding_scheme_from_string(const std::string& s);

struct GuidanceCondition {
  std::vector<std::string> modalities;
  double weight = 1.0;  // may be negative
};

struct GuidanceSpec {
  std::vector<GuidanceCondition> conditions;
};

struct SamplingParams {
  double temperature = 1.0;  // 0 = argmax
  std::optional<int> top_k;
  std::optional<double> top_p;
};

struct GenerationStep {
  std::string target_modality;
  DecodingScheme scheme = DecodingScheme::MaskGit;
  std::vector<int> plan;  // explicit per-iteration counts; empty = cosine curve
  int iterations = 8;     // cosine-curve iteration count
  int roar_step = 1;
  SamplingParams sampling;
  std::optional<GuidanceSpec> guidance;
  int max_len = 0;  // autoregressive cap; 0 = modality max_seq_len
};

struct GenerationSchedule {
  std::vector<GenerationStep> steps;

  std::string to_json() const;
  static GenerationSchedule from_json(const std::string& text);
  static GenerationSchedule load(const std::string& path);
};

struct DenseState {
  std::vector<TokenId> ids;  // one per grid position, valid where fixed
  std::vector<bool> fixed;

  int fixed_count() const;
  std::vector<int> masked_positions() const;
};

struct DecodingState {
  std::map<std::string, DenseState> dense;
  std::map<std::string, TokenSeq> sequences;
  struct PixelCond {
    ad::Mat<float> patches;
    std::vector<int> positions;
  };
  std::map<std::string, PixelCond> pixels;
  std::vector<std::string> generated;  // chained completion order

  void set_full_grid(const TokenGrid& grid, const Registry& registry);
  void set_sequence(const TokenSeq& seq);
  void init_masked(const std::string& modality, const Registry& registry);
};

// logits_uncond + sum_i w_i (logits_cond_i - logits_uncond), row-wise
ad::Mat<float> guided_logits(const ad::Mat<float>& uncond,
                             const std::vector<ad::Mat<float>>& conds,
                             const std::vector<double>& weights);

struct SampledToken {
  TokenId id = 0;
  double confidence = 0;  // post-filter probability of the sampled token
};

SampledToken sample_token(const Eigen::RowVectorXf& logits, const SamplingParams& params,
                          Rng& rng);

// Iteration plan from the cosine curve, largest-remainder rounded to sum to
// `total`; zero-count iterations are dropped.
std::vector<int> cosine_plan(int total, int iterations);

struct StepTrace {
  std::vector<int> fixed_counts;  // per iteration, after fixing
  int model_calls = 0;
};

TokenGrid maskgit_decode(DecodingState& state, const std::string& modality,
                         const std::vector<int>& plan, const Model& model,
                         const SamplingParams& sampling,
                         const std::optional<GuidanceSpec>& guidance, Rng& rng,
                         StepTrace* trace = nullptr);

TokenGrid roar_decode(DecodingState& state, const std::string& modality, int step_size,
                      const Model& model, const SamplingParams& sampling,
                      const std::optional<GuidanceSpec>& guidance, Rng& rng,
                      StepTrace* trace = nullptr);

struct SeqResult {
  TokenSeq seq;
  bool terminated = false;  // reached EOS before the length cap
};

SeqResult autoregressive_decode(DecodingState& state, const std::string& modality,
                                const Model& model, const SamplingParams& sampling,
                                const std::optional<GuidanceSpec>& guidance, Rng& rng,
                                int max_len = 0);

DecodingState chained_generate(const DecodingState& conditioning,
                               const GenerationSchedule& schedule, const Model& model, Rng& rng);

}  // namespace mmm
