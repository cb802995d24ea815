#pragma once

#include <vector>

#include "mmm/eval.hpp"
#include "mmm/masking.hpp"
#include "mmm/model.hpp"
#include "mmm/synth.hpp"
#include "mmm/vq.hpp"

namespace mmm::testing {

inline DatasetConfig tiny_dataset_config() {
  DatasetConfig cfg;
  cfg.n_bins = 100;
  cfg.rgb_vocab = 64;
  cfg.depth_vocab = 32;
  cfg.seg_vocab = 16;
  cfg.feat_vocab = 32;
  return cfg;
}

inline ModelConfig tiny_model_config(int dim = 32, int layers = 2, int heads = 4) {
  ModelConfig cfg;
  cfg.enc_layers = layers;
  cfg.dec_layers = layers;
  cfg.dim = dim;
  cfg.heads = heads;
  cfg.pixel_patch_dims["rgb_pixels"] = 48;
  return cfg;
}

// Tokens drawn uniformly; content does not matter for structural tests.
inline SampleTokens random_sample_tokens(const Registry& registry, Rng& rng,
                                         bool with_pixels = false) {
  SampleTokens sample;
  for (const auto& spec : registry.modalities()) {
    if (spec.is_dense()) {
      TokenGrid grid;
      grid.modality = spec.name;
      std::uniform_int_distribution<int> dist(0, static_cast<int>(spec.vocab_size) - 1);
      for (int p = 0; p < spec.num_positions(); ++p) {
        grid.ids.push_back(static_cast<TokenId>(dist(rng)));
      }
      sample.grids.push_back(std::move(grid));
    } else if (spec.is_sequence()) {
      const IdBlock& words = spec.block("word");
      std::uniform_int_distribution<int> len_dist(1, spec.max_seq_len - 1);
      std::uniform_int_distribution<std::uint32_t> word_dist(words.begin, words.end - 1);
      TokenSeq seq;
      seq.modality = spec.name;
      int len = len_dist(rng);
      for (int i = 0; i < len - 1; ++i) seq.ids.push_back(static_cast<TokenId>(word_dist(rng)));
      seq.ids.push_back(static_cast<TokenId>(spec.special("eos")));
      sample.seqs.push_back(std::move(seq));
    } else if (with_pixels) {
      SampleTokens::PixelField field;
      field.modality = spec.name;
      field.patches = ad::Mat<float>::Random(spec.num_positions(), 48);
      sample.pixels.push_back(std::move(field));
    }
  }
  return sample;
}

inline MaskConfig all_to_all_config(int budget_in = 16, int budget_tgt = 16) {
  MaskConfig cfg;
  cfg.budget_input = budget_in;
  cfg.budget_target = budget_tgt;
  cfg.strategies = {{"all-to-all", 1.0, {"rgb", "depth", "seg", "feat", "bbox", "caption"}}};
  return cfg;
}

}  // namespace mmm::testing
