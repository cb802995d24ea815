#pragma once

#include <string>
#include <vector>

#include "mmm/autodiff.hpp"
#include "mmm/registry.hpp"

namespace mmm {

struct MaskStrategy {
  std::string name;
  double probability = 1.0;
  // Modalities eligible as inputs under this strategy. Targets always draw
  // from every target-eligible (non-pixel) modality.
  std::vector<std::string> input_modalities;
};

struct MaskConfig {
  double alpha_input = 0.5;
  double alpha_target = 0.5;
  int budget_input = 128;
  int budget_target = 128;
  std::vector<MaskStrategy> strategies;

  void validate() const;
  std::string to_json() const;
  static MaskConfig from_json(const std::string& text);
};

struct SpanMaskResult {
  std::vector<TokenId> input_ids;   // unmasked tokens with sentinels for spans
  std::vector<TokenId> target_ids;  // spans delimited by sentinels + final sentinel
  double p_mask_used = 0.0;
};

struct DenseSelection {
  std::string modality;
  std::vector<int> positions;   // ascending, row-major grid positions
  std::vector<TokenId> ids;
};

struct PixelSelection {
  std::string modality;
  std::vector<int> positions;
  ad::Mat<float> patches;  // one row of raw patch content per position
};

struct SeqView {
  std::string modality;
  std::vector<TokenId> ids;
  double p_mask_used = 0.0;
};

struct MaskedSample {
  std::string strategy;
  std::vector<DenseSelection> dense_inputs;
  std::vector<PixelSelection> pixel_inputs;
  std::vector<SeqView> input_seq_views;
  std::vector<DenseSelection> dense_targets;
  std::vector<SeqView> target_seq_views;

  int input_token_count() const;
  int target_token_count() const;
};

// Everything one training example offers to the masker: pre-tokenized
// content for dense and sequence modalities plus raw patches for
// pixel-input modalities.
struct SampleTokens {
  std::vector<TokenGrid> grids;
  std::vector<TokenSeq> seqs;
  struct PixelField {
    std::string modality;
    ad::Mat<float> patches;  // (grid positions) x patch_dim
  };
  std::vector<PixelField> pixels;

  const TokenGrid& grid(const std::string& modality) const;
  const TokenSeq& seq(const std::string& modality) const;
  const PixelField& pixel(const std::string& modality) const;
};

// Symmetric Dirichlet draw; alpha = +infinity yields the uniform point.
std::vector<double> sample_proportions(double alpha, int k, Rng& rng);

// Largest-remainder rounding of proportions * budget, clipped to caps with
// surplus redistributed proportionally among uncapped modalities.
std::vector<int> allocate_budget(const std::vector<double>& proportions, int budget,
                                 const std::vector<std::int64_t>& caps);

// Uniform n-subset of [0, total), returned ascending.
std::vector<int> mask_dense(int total, int n, Rng& rng);

SpanMaskResult span_mask(const std::vector<TokenId>& seq, const ModalitySpec& spec,
                         double p_mask, int input_budget, int target_budget, Rng& rng);

// Same construction with the mask decided by the caller; no budget
// enforcement on the input side, target truncated when target_budget >= 0.
SpanMaskResult span_mask_fixed(const std::vector<TokenId>& seq, const ModalitySpec& spec,
                               const std::vector<bool>& masked, int target_budget, Rng& rng);

MaskedSample build_masked_sample(const SampleTokens& sample, const Registry& registry,
                                 const MaskConfig& config, Rng& rng);

}  // namespace mmm
