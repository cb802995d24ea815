#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mmm/autodiff.hpp"
#include "mmm/grid.hpp"
#include "mmm/registry.hpp"

namespace mmm {

struct CodebookConfig {
  int K = 64;
  int d = 16;
  double ema_decay = 0.99;
  double c_replace = 32.0;
  double commitment_weight = 1.0;
  double codebook_weight = 1.0;
};

template <class T>
struct CodebookT {
  ad::Mat<T> entries;                       // K x d, rows unit-norm
  Eigen::Vector<T, Eigen::Dynamic> ema_counts;  // K

  int K() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }

  static CodebookT random(int K, int d, Rng& rng) {
    CodebookT cb;
    cb.entries = ad::Mat<T>(K, d);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < K; ++i) {
      for (int j = 0; j < d; ++j) cb.entries(i, j) = static_cast<T>(dist(rng));
      cb.entries.row(i).normalize();
    }
    cb.ema_counts = Eigen::Vector<T, Eigen::Dynamic>::Zero(K);
    return cb;
  }

  T max_norm_deviation() const {
    T worst = 0;
    for (int i = 0; i < K(); ++i) worst = std::max(worst, std::abs(entries.row(i).norm() - T(1)));
    return worst;
  }
};

using Codebook = CodebookT<float>;

template <class T>
struct QuantizeResultT {
  std::vector<int> indices;
  ad::Mat<T> quantized;  // N x d, rows are codebook entries
  T commitment_loss = 0;
  T codebook_loss = 0;
};

// Latents are l2-normalized, then matched by maximal dot product (equivalent
// to nearest Euclidean neighbor on the unit sphere). Losses are mean squared
// distances per latent.
template <class T>
QuantizeResultT<T> quantize(const ad::Mat<T>& latents, const CodebookT<T>& codebook);

template <class T>
void ema_update(CodebookT<T>& codebook, const ad::Mat<T>& latents_norm,
                const std::vector<int>& indices, const CodebookConfig& cfg);

double stale_threshold(std::int64_t batch_size, std::int64_t tokens_per_item,
                       const CodebookConfig& cfg);

template <class T>
int restart_stale(CodebookT<T>& codebook, const ad::Mat<T>& latents_norm, double threshold,
                  Rng& rng);

// Per-patch MLP tokenizer for one dense-grid modality. Encoder and decoder
// are two-hidden-layer MLPs; the quantizer sits between them.
template <class T>
struct GridTokenizerT {
  std::string modality;
  int patch_h = 4, patch_w = 4;
  int channels = 1;        // raw channels (categorical fields store ids in one channel)
  bool categorical = false;
  int n_classes = 0;       // categorical only; encoder sees one-hot of this width
  int hidden = 64;
  CodebookConfig cb_cfg;

  CodebookT<T> codebook;
  ad::ParamStore<T> params;

  int in_dim() const { return patch_h * patch_w * (categorical ? n_classes : channels); }
  int out_dim() const { return patch_h * patch_w * (categorical ? n_classes : channels); }

  static GridTokenizerT make(std::string modality, int patch_h, int patch_w, int channels,
                             bool categorical, int n_classes, int hidden, CodebookConfig cb,
                             Rng& rng);

  // patches: rows of flattened patch content (one-hot expanded when categorical)
  ad::Mat<T> encode_patches(const ad::Mat<T>& patches) const;
  ad::Mat<T> decode_latents(const ad::Mat<T>& latents) const;

  TokenGrid tokenize(const GridT<T>& raw) const;
  GridT<T> detokenize(const TokenGrid& grid, int grid_h, int grid_w) const;

  ad::Mat<T> extract_patches(const GridT<T>& raw) const;
  GridT<T> assemble_patches(const ad::Mat<T>& patch_values, int grid_h, int grid_w) const;

  int token_rows(const GridT<T>& raw) const { return raw.h / patch_h; }
  int token_cols(const GridT<T>& raw) const { return raw.w / patch_w; }
};

using GridTokenizer = GridTokenizerT<float>;

struct VqTrainConfig {
  int steps = 1500;
  int batch_items = 16;
  double base_lr = 4e-3;  // scaled by batch tokens / 256 like the main loop
  double weight_decay = 0.0;
  double warmup_frac = 0.05;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct VqTrainStats {
  double final_loss = 0;
  double first_loss = 0;
  int total_restarts = 0;
  double perplexity = 0;  // exp(entropy) of ema usage at the end
};

template <class T>
VqTrainStats train_tokenizer(GridTokenizerT<T>& tok, const std::vector<GridT<T>>& dataset,
                             const VqTrainConfig& cfg);

template <class T>
double codebook_perplexity(const CodebookT<T>& cb);

void save_tokenizer(const GridTokenizer& tok, const std::string& path);
GridTokenizer load_tokenizer(const std::string& path);

extern template struct GridTokenizerT<float>;
extern template struct GridTokenizerT<double>;

}  // namespace mmm
