#include "mmm/vq.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "mmm/optim.hpp"
#include "mmm/tensor_io.hpp"

namespace mmm {

template <class T>
QuantizeResultT<T> quantize(const ad::Mat<T>& latents, const CodebookT<T>& codebook) {
  const Eigen::Index n = latents.rows();
  if (latents.cols() != codebook.entries.cols()) {
    throw ShapeError("quantize: latent dim does not match codebook dim");
  }
  if (!latents.allFinite()) throw NumericError("quantize: non-finite latents");

  ad::Mat<T> z(n, latents.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    T norm = latents.row(i).norm();
    if (norm < T(1e-12)) throw NumericError("quantize: zero-norm latent");
    z.row(i) = latents.row(i) / norm;
  }

  // Maximal dot product == minimal Euclidean distance on the unit sphere.
  ad::Mat<T> scores = z * codebook.entries.transpose();
  QuantizeResultT<T> result;
  result.indices.resize(n);
  result.quantized = ad::Mat<T>(n, latents.cols());
  T dist_sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    result.indices[i] = static_cast<int>(best);
    result.quantized.row(i) = codebook.entries.row(best);
    dist_sum += (z.row(i) - result.quantized.row(i)).squaredNorm();
  }
  result.commitment_loss = n > 0 ? dist_sum / static_cast<T>(n) : T(0);
  result.codebook_loss = result.commitment_loss;
  return result;
}

template <class T>
void ema_update(CodebookT<T>& codebook, const ad::Mat<T>& latents_norm,
                const std::vector<int>& indices, const CodebookConfig& cfg) {
  const int K = codebook.K();
  const T decay = static_cast<T>(cfg.ema_decay);
  Eigen::Vector<T, Eigen::Dynamic> counts = Eigen::Vector<T, Eigen::Dynamic>::Zero(K);
  ad::Mat<T> sums = ad::Mat<T>::Zero(K, codebook.dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    counts(indices[i]) += T(1);
    sums.row(indices[i]) += latents_norm.row(static_cast<Eigen::Index>(i));
  }
  codebook.ema_counts = decay * codebook.ema_counts + (T(1) - decay) * counts;
  for (int k = 0; k < K; ++k) {
    if (counts(k) == T(0)) continue;  // unassigned entries keep their vector
    ad::Mat<T> mean = sums.row(k) / counts(k);
    ad::Mat<T> moved = decay * codebook.entries.row(k) + (T(1) - decay) * mean;
    T norm = moved.norm();
    if (norm > T(1e-12)) codebook.entries.row(k) = moved / norm;
  }
}

double stale_threshold(std::int64_t batch_size, std::int64_t tokens_per_item,
                       const CodebookConfig& cfg) {
  if (batch_size <= 0 || tokens_per_item <= 0 || cfg.c_replace <= 0 || cfg.K <= 0) {
    throw ConfigError("stale_threshold: all arguments must be positive");
  }
  return static_cast<double>(batch_size) * static_cast<double>(tokens_per_item) /
         (cfg.c_replace * static_cast<double>(cfg.K));
}

template <class T>
int restart_stale(CodebookT<T>& codebook, const ad::Mat<T>& latents_norm, double threshold,
                  Rng& rng) {
  if (latents_norm.rows() == 0) throw ContractError("restart_stale: empty batch");
  int replaced = 0;
  std::uniform_int_distribution<Eigen::Index> pick(0, latents_norm.rows() - 1);
  for (int k = 0; k < codebook.K(); ++k) {
    if (codebook.ema_counts(k) < static_cast<T>(threshold)) {
      ad::Mat<T> cand = latents_norm.row(pick(rng));
      T norm = cand.norm();
      if (norm < T(1e-12)) continue;
      codebook.entries.row(k) = cand / norm;
      // Reset to the threshold so a restarted entry is not replaced again
      // on the very next step.
      codebook.ema_counts(k) = static_cast<T>(threshold);
      ++replaced;
    }
  }
  return replaced;
}

template <class T>
double codebook_perplexity(const CodebookT<T>& cb) {
  double total = cb.ema_counts.template cast<double>().sum();
  if (total <= 0) return 1.0;
  double entropy = 0;
  for (int k = 0; k < cb.K(); ++k) {
    double p = static_cast<double>(cb.ema_counts(k)) / total;
    if (p > 0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

namespace {

template <class T>
ad::Mat<T> random_linear(int in, int out, double std_dev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  ad::Mat<T> w(in, out);
  for (int i = 0; i < in; ++i)
    for (int j = 0; j < out; ++j) w(i, j) = static_cast<T>(dist(rng));
  return w;
}

}  // namespace

template <class T>
GridTokenizerT<T> GridTokenizerT<T>::make(std::string modality, int patch_h, int patch_w,
                                          int channels, bool categorical, int n_classes,
                                          int hidden, CodebookConfig cb, Rng& rng) {
  GridTokenizerT<T> tok;
  tok.modality = std::move(modality);
  tok.patch_h = patch_h;
  tok.patch_w = patch_w;
  tok.channels = channels;
  tok.categorical = categorical;
  tok.n_classes = n_classes;
  tok.hidden = hidden;
  tok.cb_cfg = cb;
  tok.codebook = CodebookT<T>::random(cb.K, cb.d, rng);

  const int in = tok.in_dim(), out = tok.out_dim(), h = hidden, d = cb.d;
  auto& p = tok.params;
  const double s = 0.02;
  p.add("enc.w1", random_linear<T>(in, h, s, rng));
  p.add("enc.b1", ad::Mat<T>::Zero(1, h));
  p.add("enc.w2", random_linear<T>(h, h, s, rng));
  p.add("enc.b2", ad::Mat<T>::Zero(1, h));
  p.add("enc.w3", random_linear<T>(h, d, s, rng));
  // small noise keeps degenerate inputs (all-zero grids) off the sphere's origin
  p.add("enc.b3", random_linear<T>(1, d, s, rng));
  p.add("dec.w1", random_linear<T>(d, h, s, rng));
  p.add("dec.b1", ad::Mat<T>::Zero(1, h));
  p.add("dec.w2", random_linear<T>(h, h, s, rng));
  p.add("dec.b2", ad::Mat<T>::Zero(1, h));
  p.add("dec.w3", random_linear<T>(h, out, s, rng));
  p.add("dec.b3", ad::Mat<T>::Zero(1, out));
  return tok;
}

template <class T>
ad::Mat<T> GridTokenizerT<T>::extract_patches(const GridT<T>& raw) const {
  if (raw.h % patch_h != 0 || raw.w % patch_w != 0) {
    throw ShapeError("grid shape not divisible by patch size");
  }
  if (raw.c != channels) throw ShapeError("grid channel count mismatch");
  const int th = raw.h / patch_h, tw = raw.w / patch_w;
  const int cell_dim = categorical ? n_classes : channels;
  ad::Mat<T> patches(th * tw, patch_h * patch_w * cell_dim);
  for (int py = 0; py < th; ++py) {
    for (int px = 0; px < tw; ++px) {
      int row = py * tw + px;
      int col = 0;
      for (int dy = 0; dy < patch_h; ++dy) {
        for (int dx = 0; dx < patch_w; ++dx) {
          int y = py * patch_h + dy, x = px * patch_w + dx;
          if (categorical) {
            int cls = static_cast<int>(raw.at(y, x, 0));
            if (cls < 0 || cls >= n_classes) throw ShapeError("class id out of range");
            for (int ch = 0; ch < n_classes; ++ch) {
              patches(row, col++) = (ch == cls) ? T(1) : T(0);
            }
          } else {
            for (int ch = 0; ch < channels; ++ch) patches(row, col++) = raw.at(y, x, ch);
          }
        }
      }
    }
  }
  return patches;
}

template <class T>
GridT<T> GridTokenizerT<T>::assemble_patches(const ad::Mat<T>& patch_values, int grid_h,
                                             int grid_w) const {
  const int th = grid_h / patch_h, tw = grid_w / patch_w;
  if (patch_values.rows() != th * tw) throw ShapeError("patch count mismatch");
  GridT<T> out(grid_h, grid_w, channels);
  const int cell_dim = categorical ? n_classes : channels;
  for (int py = 0; py < th; ++py) {
    for (int px = 0; px < tw; ++px) {
      int row = py * tw + px;
      int col = 0;
      for (int dy = 0; dy < patch_h; ++dy) {
        for (int dx = 0; dx < patch_w; ++dx) {
          int y = py * patch_h + dy, x = px * patch_w + dx;
          if (categorical) {
            Eigen::Index best;
            patch_values.row(row).segment(col, n_classes).maxCoeff(&best);
            out.at(y, x, 0) = static_cast<T>(best);
            col += n_classes;
          } else {
            for (int ch = 0; ch < channels; ++ch) out.at(y, x, ch) = patch_values(row, col++);
          }
        }
      }
    }
  }
  return out;
}

template <class T>
ad::Mat<T> GridTokenizerT<T>::encode_patches(const ad::Mat<T>& patches) const {
  auto silu = [](const ad::Mat<T>& x) {
    return ad::Mat<T>(x.array() / (T(1) + (-x.array()).exp()));
  };
  const auto& p = params;
  ad::Mat<T> h1 = silu(((patches * p.value(0)).rowwise() +
                        Eigen::RowVector<T, Eigen::Dynamic>(p.value(1).row(0))).eval());
  ad::Mat<T> h2 = silu(((h1 * p.value(2)).rowwise() +
                        Eigen::RowVector<T, Eigen::Dynamic>(p.value(3).row(0))).eval());
  return ((h2 * p.value(4)).rowwise() +
          Eigen::RowVector<T, Eigen::Dynamic>(p.value(5).row(0))).eval();
}

template <class T>
ad::Mat<T> GridTokenizerT<T>::decode_latents(const ad::Mat<T>& latents) const {
  auto silu = [](const ad::Mat<T>& x) {
    return ad::Mat<T>(x.array() / (T(1) + (-x.array()).exp()));
  };
  const auto& p = params;
  ad::Mat<T> h1 = silu(((latents * p.value(6)).rowwise() +
                        Eigen::RowVector<T, Eigen::Dynamic>(p.value(7).row(0))).eval());
  ad::Mat<T> h2 = silu(((h1 * p.value(8)).rowwise() +
                        Eigen::RowVector<T, Eigen::Dynamic>(p.value(9).row(0))).eval());
  return ((h2 * p.value(10)).rowwise() +
          Eigen::RowVector<T, Eigen::Dynamic>(p.value(11).row(0))).eval();
}

template <class T>
TokenGrid GridTokenizerT<T>::tokenize(const GridT<T>& raw) const {
  ad::Mat<T> latents = encode_patches(extract_patches(raw));
  QuantizeResultT<T> q = quantize(latents, codebook);
  TokenGrid grid;
  grid.modality = modality;
  grid.ids.reserve(q.indices.size());
  for (int idx : q.indices) grid.ids.push_back(static_cast<TokenId>(idx));
  return grid;
}

template <class T>
GridT<T> GridTokenizerT<T>::detokenize(const TokenGrid& grid, int grid_h, int grid_w) const {
  ad::Mat<T> latents(grid.ids.size(), codebook.dim());
  for (std::size_t i = 0; i < grid.ids.size(); ++i) {
    if (grid.ids[i] >= codebook.K()) throw ShapeError("token id outside codebook");
    latents.row(static_cast<Eigen::Index>(i)) = codebook.entries.row(grid.ids[i]);
  }
  return assemble_patches(decode_latents(latents), grid_h, grid_w);
}

namespace {

// Tape-side forward pass of the tokenizer MLPs; returns (latents, recon).
template <class T>
std::pair<typename ad::Tape<T>::Ref, typename ad::Tape<T>::Ref> tokenizer_graph(
    ad::Tape<T>& tape, const GridTokenizerT<T>& tok, typename ad::Tape<T>::Ref patches,
    const ad::Mat<T>& quantized) {
  using Ref = typename ad::Tape<T>::Ref;
  auto lin = [&](Ref x, int w, int b) {
    return tape.add_rowvec(tape.matmul(x, tape.param(w)), tape.param(b));
  };
  Ref h1 = tape.silu(lin(patches, 0, 1));
  Ref h2 = tape.silu(lin(h1, 2, 3));
  Ref latents = lin(h2, 4, 5);
  Ref z = tape.l2normalize_rows(latents);
  Ref st = tape.straight_through(z, quantized);
  Ref d1 = tape.silu(lin(st, 6, 7));
  Ref d2 = tape.silu(lin(d1, 8, 9));
  Ref recon = lin(d2, 10, 11);
  return {z, recon};
}

}  // namespace

template <class T>
VqTrainStats train_tokenizer(GridTokenizerT<T>& tok, const std::vector<GridT<T>>& dataset,
                             const VqTrainConfig& cfg) {
  if (dataset.empty()) throw ConfigError("train_tokenizer: empty dataset");
  Rng rng = make_rng(cfg.seed, 0x7100);
  AdamW<T> opt;
  opt.weight_decay = cfg.weight_decay;
  opt.init(tok.params);

  const int tokens_per_item =
      (dataset[0].h / tok.patch_h) * (dataset[0].w / tok.patch_w);
  const double threshold = stale_threshold(cfg.batch_items, tokens_per_item, tok.cb_cfg);
  const double peak_lr =
      cfg.base_lr * static_cast<double>(cfg.batch_items) * tokens_per_item / 256.0;

  VqTrainStats stats;
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ad::Mat<T>> patch_rows;
    patch_rows.reserve(cfg.batch_items);
    Eigen::Index total_rows = 0;
    for (int b = 0; b < cfg.batch_items; ++b) {
      patch_rows.push_back(tok.extract_patches(dataset[pick(rng)]));
      total_rows += patch_rows.back().rows();
    }
    ad::Mat<T> patches(total_rows, patch_rows[0].cols());
    Eigen::Index at = 0;
    for (const auto& m : patch_rows) {
      patches.middleRows(at, m.rows()) = m;
      at += m.rows();
    }

    ad::Mat<T> latents = tok.encode_patches(patches);
    QuantizeResultT<T> q = quantize(latents, tok.codebook);

    ad::Tape<T> tape(&tok.params);
    auto patches_ref = tape.constant(patches);
    auto [z, recon] = tokenizer_graph(tape, tok, patches_ref, q.quantized);

    typename ad::Tape<T>::Ref recon_loss;
    if (tok.categorical) {
      // per-cell class logits; targets recovered from the one-hot input
      const int cells = tok.patch_h * tok.patch_w;
      std::vector<typename ad::Tape<T>::Ref> blocks;
      for (int cell = 0; cell < cells; ++cell) {
        std::vector<int> tg(total_rows);
        for (Eigen::Index r = 0; r < total_rows; ++r) {
          int cls = 0;
          for (int c = 0; c < tok.n_classes; ++c) {
            if (patches(r, cell * tok.n_classes + c) > T(0.5)) cls = c;
          }
          tg[r] = cls;
        }
        auto block = tape.slice_cols(recon, cell * tok.n_classes, tok.n_classes);
        blocks.push_back(tape.mean(tape.cross_entropy_rows(block, std::move(tg))));
      }
      recon_loss = tape.affine_combine(
          blocks, std::vector<T>(blocks.size(), T(1) / static_cast<T>(blocks.size())));
    } else {
      recon_loss = tape.mse(recon, patches);
    }

    auto commit = tape.mse(z, q.quantized);
    auto loss = tape.affine_combine(
        {recon_loss, commit},
        {T(1), static_cast<T>(tok.cb_cfg.commitment_weight * tok.codebook.dim())});
    double loss_val = static_cast<double>(tape.item(loss)) +
                      tok.cb_cfg.codebook_weight * static_cast<double>(q.codebook_loss);

    if (!std::isfinite(loss_val)) {
      throw NumericError("tokenizer training diverged at step " + std::to_string(step) +
                         " (loss not finite)");
    }
    if (step == 0) stats.first_loss = loss_val;
    stats.final_loss = loss_val;

    tape.backward(loss);
    std::vector<ad::Mat<T>> grads = tok.params.zeros_like();
    tape.accumulate_param_grads(grads);
    double lr = warmup_cosine_lr(peak_lr, step + 1,
                                 static_cast<std::int64_t>(cfg.warmup_frac * cfg.steps),
                                 cfg.steps);
    opt.step(tok.params, grads, lr);

    ad::Mat<T> z_val = tape.val(z);
    ema_update(tok.codebook, z_val, q.indices, tok.cb_cfg);
    stats.total_restarts += restart_stale(tok.codebook, z_val, threshold, rng);
  }
  stats.perplexity = codebook_perplexity(tok.codebook);
  return stats;
}

namespace {
constexpr char kVqMagic[4] = {'4', 'M', 'V', 'Q'};
constexpr std::uint32_t kVqVersion = 1;
}  // namespace

void save_tokenizer(const GridTokenizer& tok, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write tokenizer file: " + path);
  io::write_magic(out, kVqMagic);
  io::write_u32(out, kVqVersion);
  io::write_string(out, tok.modality);
  io::write_u32(out, static_cast<std::uint32_t>(tok.cb_cfg.K));
  io::write_u32(out, static_cast<std::uint32_t>(tok.cb_cfg.d));
  nlohmann::json patch_cfg{{"patch_h", tok.patch_h},
                           {"patch_w", tok.patch_w},
                           {"channels", tok.channels},
                           {"categorical", tok.categorical},
                           {"n_classes", tok.n_classes},
                           {"hidden", tok.hidden},
                           {"ema_decay", tok.cb_cfg.ema_decay},
                           {"c_replace", tok.cb_cfg.c_replace},
                           {"commitment_weight", tok.cb_cfg.commitment_weight},
                           {"codebook_weight", tok.cb_cfg.codebook_weight}};
  io::write_string(out, patch_cfg.dump());
  io::write_u32(out, static_cast<std::uint32_t>(2 + tok.params.size()));
  io::write_named_matrix(out, "codebook.entries", tok.codebook.entries);
  io::write_named_matrix(out, "codebook.ema_counts", tok.codebook.ema_counts);
  for (const auto& e : tok.params.entries) io::write_named_matrix(out, e.name, e.value);
}

GridTokenizer load_tokenizer(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open tokenizer file: " + path);
  io::expect_magic(in, kVqMagic, "tokenizer file " + path);
  if (io::read_u32(in) != kVqVersion) throw LoadError("unsupported tokenizer version");
  GridTokenizer tok;
  tok.modality = io::read_string(in);
  tok.cb_cfg.K = static_cast<int>(io::read_u32(in));
  tok.cb_cfg.d = static_cast<int>(io::read_u32(in));
  nlohmann::json patch_cfg = nlohmann::json::parse(io::read_string(in));
  tok.patch_h = patch_cfg.at("patch_h").get<int>();
  tok.patch_w = patch_cfg.at("patch_w").get<int>();
  tok.channels = patch_cfg.at("channels").get<int>();
  tok.categorical = patch_cfg.at("categorical").get<bool>();
  tok.n_classes = patch_cfg.at("n_classes").get<int>();
  tok.hidden = patch_cfg.at("hidden").get<int>();
  tok.cb_cfg.ema_decay = patch_cfg.at("ema_decay").get<double>();
  tok.cb_cfg.c_replace = patch_cfg.at("c_replace").get<double>();
  tok.cb_cfg.commitment_weight = patch_cfg.at("commitment_weight").get<double>();
  tok.cb_cfg.codebook_weight = patch_cfg.at("codebook_weight").get<double>();

  std::uint32_t n_tensors = io::read_u32(in);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto [name, m] = io::read_named_matrix(in);
    if (name == "codebook.entries") {
      tok.codebook.entries = std::move(m);
    } else if (name == "codebook.ema_counts") {
      tok.codebook.ema_counts = m.col(0);
    } else {
      tok.params.add(name, std::move(m));
    }
  }
  if (tok.codebook.entries.rows() != tok.cb_cfg.K || tok.codebook.entries.cols() != tok.cb_cfg.d) {
    throw LoadError("tokenizer file codebook shape mismatch");
  }
  if (tok.params.size() != 12) throw LoadError("tokenizer file missing network tensors");
  return tok;
}

template struct GridTokenizerT<float>;
template struct GridTokenizerT<double>;

template QuantizeResultT<float> quantize(const ad::Mat<float>&, const CodebookT<float>&);
template QuantizeResultT<double> quantize(const ad::Mat<double>&, const CodebookT<double>&);
template void ema_update(CodebookT<float>&, const ad::Mat<float>&, const std::vector<int>&,
                         const CodebookConfig&);
template void ema_update(CodebookT<double>&, const ad::Mat<double>&, const std::vector<int>&,
                         const CodebookConfig&);
template int restart_stale(CodebookT<float>&, const ad::Mat<float>&, double, Rng&);
template int restart_stale(CodebookT<double>&, const ad::Mat<double>&, double, Rng&);
template double codebook_perplexity(const CodebookT<float>&);
template double codebook_perplexity(const CodebookT<double>&);
template VqTrainStats train_tokenizer(GridTokenizerT<float>&, const std::vector<GridT<float>>&,
                                      const VqTrainConfig&);
template VqTrainStats train_tokenizer(GridTokenizerT<double>&, const std::vector<GridT<double>>&,
                                      const VqTrainConfig&);

}  // namespace mmm
