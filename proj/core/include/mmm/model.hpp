#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmm/autodiff.hpp"
#include "mmm/masking.hpp"
#include "mmm/registry.hpp"

namespace mmm {

enum class FfnActivation { GatedSwish, Gelu };

std::string to_string(FfnActivation act);
FfnActivation ffn_activation_from_string(const std::string& s);

struct ModelConfig {
  int enc_layers = 4;
  int dec_layers = 4;
  int dim = 128;
  int heads = 8;
  double ffn_mult = 4.0;
  FfnActivation ffn_activation = FfnActivation::GatedSwish;
  bool bias_terms = false;
  // raw patch width per pixel-input modality, needed by the patch projection
  std::map<std::string, int> pixel_patch_dims;

  int ffn_hidden() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  void validate() const;
};

// ---- model inputs ----
// One sample's encoder tokens and decoder queries, grouped per modality.
// Groups stay contiguous so decoder attention isolation is a block mask.

struct EncItem {
  std::string modality;
  std::vector<int> positions;    // grid positions, or view slots for sequences
  std::vector<TokenId> ids;      // empty for pixel groups
  ad::Mat<float> patches;        // pixel groups only
  bool is_seq = false;
};

struct DecDenseItem {
  std::string modality;
  std::vector<int> positions;
  std::vector<TokenId> target_ids;  // labels; empty when only logits are needed
};

struct DecSeqItem {
  std::string modality;
  std::vector<TokenId> view_ids;  // span-format view; next-token labels implied
  bool want_loss = true;
};

struct BatchItem {
  std::vector<EncItem> enc;
  std::vector<DecDenseItem> dense_dec;
  std::vector<DecSeqItem> seq_dec;
};

BatchItem batch_item_from_masked_sample(const MaskedSample& sample, const Registry& registry);

enum class LossMode { PerModality, PerToken };

template <class T>
struct BuiltBatchT {
  using Ref = int;
  Ref enc_pre = -1;  // encoder output before re-injection
  Ref memory = -1;   // encoder output after re-injection
  Ref dec_out = -1;  // decoder output after the final norm
  struct Group {
    int sample = 0;
    std::string modality;
    bool is_seq = false;
    int row0 = 0;
    int rows = 0;
    std::vector<int> positions;
    std::vector<TokenId> view_ids;
    std::vector<TokenId> target_ids;
    bool want_loss = true;
  };
  std::vector<Group> groups;
  std::vector<std::pair<int, int>> enc_spans;  // per-sample (row0, rows)
};

struct LossBreakdown {
  double total = 0;
  std::map<std::string, double> per_modality;  // mean CE per modality
  std::map<std::string, std::int64_t> per_modality_counts;
  std::int64_t label_count = 0;
};

template <class T>
struct ForwardOutT {
  typename ad::Tape<T>::Ref loss = -1;
  LossBreakdown stats;
};

template <class T>
struct ModelT {
  using Tape = ad::Tape<T>;
  using Ref = typename Tape::Ref;

  ModelConfig cfg;
  Registry registry;
  std::uint64_t registry_hash = 0;
  ad::ParamStore<T> params;

  struct ModalityParams {
    int token_table = -1;
    int pixel_proj = -1;
    int modality_emb = -1;
    int out_head = -1;  // dense modalities; sequences tie to token_table
  };
  std::map<std::string, ModalityParams> modality_params;
  int mask_token = -1;

  struct LayerParams {
    int ln1_g = -1, ln1_b = -1;
    int wq = -1, wk = -1, wv = -1, wo = -1;
    int bq = -1, bk = -1, bv = -1, bo = -1;
    int lnc_g = -1, lnc_b = -1;  // decoder cross-attention norm
    int cq = -1, ck = -1, cv = -1, co = -1;
    int cbq = -1, cbk = -1, cbv = -1, cbo = -1;
    int ln2_g = -1, ln2_b = -1;
    int w_in = -1, w_gate = -1, w_out = -1;
    int b_in = -1, b_gate = -1, b_out = -1;
  };
  std::vector<LayerParams> enc_layers;
  std::vector<LayerParams> dec_layers;
  int enc_ln_g = -1, enc_ln_b = -1;
  int dec_ln_g = -1, dec_ln_b = -1;

  std::map<std::string, ad::Mat<T>> pos_tables;  // fixed sine-cosine tables

  static ModelT make(ModelConfig cfg, const Registry& registry, std::uint64_t seed);

  // Builds the full encoder/decoder graph for a batch. `attn_capture`, when
  // set, collects every attention probability matrix of the pass.
  BuiltBatchT<T> build(Tape& tape, const std::vector<BatchItem>& batch,
                       std::vector<ad::Mat<T>>* attn_capture = nullptr) const;

  // Per-query logits over the group's modality vocabulary.
  Ref group_logits(Tape& tape, const BuiltBatchT<T>& built, std::size_t group) const;

  ForwardOutT<T> loss_from_built(Tape& tape, const BuiltBatchT<T>& built, LossMode mode) const;

  // embed -> encode -> reinject -> decode -> loss
  ForwardOutT<T> forward_train(Tape& tape, const std::vector<BatchItem>& batch,
                               LossMode mode = LossMode::PerModality,
                               std::vector<ad::Mat<T>>* attn_capture = nullptr) const;

  std::int64_t parameter_count() const { return params.scalar_count(); }

  const ad::Mat<T>& pos_table(const std::string& modality) const;

 private:
  Ref embed_enc_items(Tape& tape, const std::vector<BatchItem>& batch,
                      std::vector<std::pair<int, int>>& spans, bool posmod_only) const;
  Ref run_encoder(Tape& tape, Ref x, const std::vector<std::pair<int, int>>& spans,
                  std::vector<ad::Mat<T>>* attn_capture) const;
  Ref ffn(Tape& tape, Ref x, const LayerParams& lp) const;
  Ref linear(Tape& tape, Ref x, int w, int b) const;
};

using Model = ModelT<float>;

// Fixed sine-cosine table: rows are positions, width `dim`.
template <class T>
ad::Mat<T> sincos_table_1d(int positions, int dim);
template <class T>
ad::Mat<T> sincos_table_2d(int rows, int cols, int dim);

// Checkpoint format: magic "4MCK", version, model config JSON, registry
// hash, then named float32 tensors (model parameters plus any extra state
// the caller appends, e.g. optimizer moments).
void save_model(const Model& model, const std::string& path,
                const std::vector<std::pair<std::string, ad::Mat<float>>>& extra = {});

struct LoadedModel {
  Model model;
  std::map<std::string, ad::Mat<float>> extra;
};
LoadedModel load_model(const std::string& path, const Registry& registry);

extern template struct ModelT<float>;
extern template struct ModelT<double>;

}  // namespace mmm
