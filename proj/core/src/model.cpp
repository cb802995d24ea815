#include "mmm/model.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "mmm/tensor_io.hpp"

namespace mmm {

using nlohmann::json;

std::string to_string(FfnActivation act) {
  return act == FfnActivation::GatedSwish ? "gated-linear-swish" : "gaussian-error";
}

FfnActivation ffn_activation_from_string(const std::string& s) {
  if (s == "gated-linear-swish") return FfnActivation::GatedSwish;
  if (s == "gaussian-error") return FfnActivation::Gelu;
  throw ConfigError("unknown ffn activation: " + s);
}

int ModelConfig::ffn_hidden() const {
  // the gated variant uses a 2/3 expansion to hold the parameter count
  if (ffn_activation == FfnActivation::GatedSwish) {
    return static_cast<int>(std::lround(dim * ffn_mult * 2.0 / 3.0));
  }
  return static_cast<int>(std::lround(dim * ffn_mult));
}

void ModelConfig::validate() const {
  if (dim <= 0 || heads <= 0 || enc_layers < 0 || dec_layers < 0) {
    throw ConfigError("model config: sizes must be positive");
  }
  if (dim % heads != 0) throw ConfigError("model config: dim must be divisible by heads");
  if (dim % 4 != 0) throw ConfigError("model config: dim must be divisible by 4 for 2d tables");
}

std::string ModelConfig::to_json() const {
  json doc{{"enc_layers", enc_layers},
           {"dec_layers", dec_layers},
           {"dim", dim},
           {"heads", heads},
           {"ffn_mult", ffn_mult},
           {"ffn_activation", to_string(ffn_activation)},
           {"bias_terms", bias_terms},
           {"pixel_patch_dims", pixel_patch_dims}};
  return doc.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json doc = json::parse(text);
  ModelConfig cfg;
  cfg.enc_layers = doc.at("enc_layers").get<int>();
  cfg.dec_layers = doc.at("dec_layers").get<int>();
  cfg.dim = doc.at("dim").get<int>();
  cfg.heads = doc.at("heads").get<int>();
  cfg.ffn_mult = doc.at("ffn_mult").get<double>();
  cfg.ffn_activation = ffn_activation_from_string(doc.at("ffn_activation").get<std::string>());
  cfg.bias_terms = doc.at("bias_terms").get<bool>();
  if (doc.contains("pixel_patch_dims")) {
    cfg.pixel_patch_dims = doc.at("pixel_patch_dims").get<std::map<std::string, int>>();
  }
  cfg.validate();
  return cfg;
}

template <class T>
ad::Mat<T> sincos_table_1d(int positions, int dim) {
  ad::Mat<T> table(positions, dim);
  for (int p = 0; p < positions; ++p) {
    for (int i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * i / dim);
      table(p, 2 * i) = static_cast<T>(std::sin(p * freq));
      table(p, 2 * i + 1) = static_cast<T>(std::cos(p * freq));
    }
  }
  return table;
}

// rows embedded in the first half of the width, columns in the second
template <class T>
ad::Mat<T> sincos_table_2d(int rows, int cols, int dim) {
  ad::Mat<T> row_t = sincos_table_1d<T>(rows, dim / 2);
  ad::Mat<T> col_t = sincos_table_1d<T>(cols, dim / 2);
  ad::Mat<T> table(rows * cols, dim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      table.row(r * cols + c).head(dim / 2) = row_t.row(r);
      table.row(r * cols + c).tail(dim / 2) = col_t.row(c);
    }
  }
  return table;
}

namespace {

template <class T>
ad::Mat<T> random_matrix(int rows, int cols, double std_dev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  ad::Mat<T> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<T>(dist(rng));
  return m;
}

constexpr double kMaskNeg = -1e30;

}  // namespace

template <class T>
ModelT<T> ModelT<T>::make(ModelConfig cfg, const Registry& registry, std::uint64_t seed) {
  cfg.validate();
  ModelT<T> model;
  model.cfg = cfg;
  model.registry = registry;
  model.registry_hash = registry.hash();
  Rng rng = make_rng(seed, 0x4d4b);

  const int d = cfg.dim;
  const double s = 0.02;
  auto& p = model.params;

  for (const auto& spec : registry.modalities()) {
    ModalityParams mp;
    if (spec.is_pixel()) {
      auto it = cfg.pixel_patch_dims.find(spec.name);
      if (it == cfg.pixel_patch_dims.end()) {
        throw ConfigError("pixel modality '" + spec.name + "' missing from pixel_patch_dims");
      }
      mp.pixel_proj = p.add("pixproj." + spec.name, random_matrix<T>(it->second, d, s, rng));
    } else {
      mp.token_table =
          p.add("emb." + spec.name, random_matrix<T>(static_cast<int>(spec.vocab_size), d, s, rng));
      if (spec.is_dense()) {
        mp.out_head =
            p.add("head." + spec.name, random_matrix<T>(d, static_cast<int>(spec.vocab_size), s, rng));
      }
    }
    mp.modality_emb = p.add("modemb." + spec.name, random_matrix<T>(1, d, s, rng));
    model.modality_params[spec.name] = mp;

    if (spec.is_sequence()) {
      model.pos_tables[spec.name] = sincos_table_1d<T>(spec.max_seq_len + 2, d);
    } else {
      model.pos_tables[spec.name] = sincos_table_2d<T>(spec.grid_h, spec.grid_w, d);
    }
  }
  model.mask_token = p.add("mask_token", random_matrix<T>(1, d, s, rng));

  const int h = cfg.ffn_hidden();
  auto add_layer = [&](const std::string& prefix, bool cross) {
    LayerParams lp;
    lp.ln1_g = p.add(prefix + ".ln1.g", ad::Mat<T>::Ones(1, d));
    lp.ln1_b = p.add(prefix + ".ln1.b", ad::Mat<T>::Zero(1, d));
    lp.wq = p.add(prefix + ".wq", random_matrix<T>(d, d, s, rng));
    lp.wk = p.add(prefix + ".wk", random_matrix<T>(d, d, s, rng));
    lp.wv = p.add(prefix + ".wv", random_matrix<T>(d, d, s, rng));
    lp.wo = p.add(prefix + ".wo", random_matrix<T>(d, d, s, rng));
    if (cfg.bias_terms) {
      lp.bq = p.add(prefix + ".bq", ad::Mat<T>::Zero(1, d));
      lp.bk = p.add(prefix + ".bk", ad::Mat<T>::Zero(1, d));
      lp.bv = p.add(prefix + ".bv", ad::Mat<T>::Zero(1, d));
      lp.bo = p.add(prefix + ".bo", ad::Mat<T>::Zero(1, d));
    }
    if (cross) {
      lp.lnc_g = p.add(prefix + ".lnc.g", ad::Mat<T>::Ones(1, d));
      lp.lnc_b = p.add(prefix + ".lnc.b", ad::Mat<T>::Zero(1, d));
      lp.cq = p.add(prefix + ".cq", random_matrix<T>(d, d, s, rng));
      lp.ck = p.add(prefix + ".ck", random_matrix<T>(d, d, s, rng));
      lp.cv = p.add(prefix + ".cv", random_matrix<T>(d, d, s, rng));
      lp.co = p.add(prefix + ".co", random_matrix<T>(d, d, s, rng));
      if (cfg.bias_terms) {
        lp.cbq = p.add(prefix + ".cbq", ad::Mat<T>::Zero(1, d));
        lp.cbk = p.add(prefix + ".cbk", ad::Mat<T>::Zero(1, d));
        lp.cbv = p.add(prefix + ".cbv", ad::Mat<T>::Zero(1, d));
        lp.cbo = p.add(prefix + ".cbo", ad::Mat<T>::Zero(1, d));
      }
    }
    lp.ln2_g = p.add(prefix + ".ln2.g", ad::Mat<T>::Ones(1, d));
    lp.ln2_b = p.add(prefix + ".ln2.b", ad::Mat<T>::Zero(1, d));
    lp.w_in = p.add(prefix + ".ffn.w_in", random_matrix<T>(d, h, s, rng));
    if (cfg.ffn_activation == FfnActivation::GatedSwish) {
      lp.w_gate = p.add(prefix + ".ffn.w_gate", random_matrix<T>(d, h, s, rng));
    }
    lp.w_out = p.add(prefix + ".ffn.w_out", random_matrix<T>(h, d, s, rng));
    if (cfg.bias_terms) {
      lp.b_in = p.add(prefix + ".ffn.b_in", ad::Mat<T>::Zero(1, h));
      if (cfg.ffn_activation == FfnActivation::GatedSwish) {
        lp.b_gate = p.add(prefix + ".ffn.b_gate", ad::Mat<T>::Zero(1, h));
      }
      lp.b_out = p.add(prefix + ".ffn.b_out", ad::Mat<T>::Zero(1, d));
    }
    return lp;
  };

  for (int l = 0; l < cfg.enc_layers; ++l) {
    model.enc_layers.push_back(add_layer("enc." + std::to_string(l), false));
  }
  model.enc_ln_g = p.add("enc.ln.g", ad::Mat<T>::Ones(1, d));
  model.enc_ln_b = p.add("enc.ln.b", ad::Mat<T>::Zero(1, d));
  for (int l = 0; l < cfg.dec_layers; ++l) {
    model.dec_layers.push_back(add_layer("dec." + std::to_string(l), true));
  }
  model.dec_ln_g = p.add("dec.ln.g", ad::Mat<T>::Ones(1, d));
  model.dec_ln_b = p.add("dec.ln.b", ad::Mat<T>::Zero(1, d));
  return model;
}

template <class T>
const ad::Mat<T>& ModelT<T>::pos_table(const std::string& modality) const {
  auto it = pos_tables.find(modality);
  if (it == pos_tables.end()) throw ConfigError("no positional table for " + modality);
  return it->second;
}

template <class T>
typename ModelT<T>::Ref ModelT<T>::linear(Tape& tape, Ref x, int w, int b) const {
  Ref y = tape.matmul(x, tape.param(w));
  if (b >= 0) y = tape.add_rowvec(y, tape.param(b));
  return y;
}

template <class T>
typename ModelT<T>::Ref ModelT<T>::ffn(Tape& tape, Ref x, const LayerParams& lp) const {
  if (cfg.ffn_activation == FfnActivation::GatedSwish) {
    Ref gate = tape.silu(linear(tape, x, lp.w_gate, lp.b_gate));
    Ref val = linear(tape, x, lp.w_in, lp.b_in);
    return linear(tape, tape.hadamard(gate, val), lp.w_out, lp.b_out);
  }
  return linear(tape, tape.gelu(linear(tape, x, lp.w_in, lp.b_in)), lp.w_out, lp.b_out);
}

namespace {

template <class T>
ad::Mat<T> gather_pos_rows(const ad::Mat<T>& table, const std::vector<int>& positions) {
  ad::Mat<T> out(positions.size(), table.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= table.rows()) {
      throw ShapeError("position index outside the positional table");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(positions[i]);
  }
  return out;
}

std::vector<int> iota_positions(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
  return v;
}

}  // namespace

template <class T>
typename ModelT<T>::Ref ModelT<T>::embed_enc_items(Tape& tape, const std::vector<BatchItem>& batch,
                                                   std::vector<std::pair<int, int>>& spans,
                                                   bool posmod_only) const {
  std::vector<Ref> pieces;
  spans.clear();
  int row = 0;
  for (const auto& item : batch) {
    int start = row;
    for (const auto& g : item.enc) {
      const ModalitySpec& spec = registry.at(g.modality);
      const auto& mp = modality_params.at(g.modality);
      std::vector<int> positions = g.positions;
      if (spec.is_sequence() && positions.empty()) {
        positions = iota_positions(g.ids.size());
      }
      std::size_t n = spec.is_pixel() ? static_cast<std::size_t>(g.patches.rows()) : g.ids.size();
      if (positions.size() != n) throw ContractError("enc group positions/ids length mismatch");
      if (n == 0) continue;
      ad::Mat<T> pos_rows = gather_pos_rows(pos_table(g.modality), positions);
      Ref x;
      if (posmod_only) {
        x = tape.constant(std::move(pos_rows));
      } else if (spec.is_pixel()) {
        Ref raw = tape.constant(g.patches.template cast<T>());
        x = tape.add_const(tape.matmul(raw, tape.param(mp.pixel_proj)), pos_rows);
      } else {
        std::vector<int> idx(g.ids.begin(), g.ids.end());
        x = tape.add_const(tape.gather_rows(tape.param(mp.token_table), std::move(idx)), pos_rows);
      }
      x = tape.add_rowvec(x, tape.param(mp.modality_emb));
      pieces.push_back(x);
      row += static_cast<int>(n);
    }
    spans.emplace_back(start, row - start);
  }
  if (pieces.empty()) return tape.constant(ad::Mat<T>::Zero(0, cfg.dim));
  return pieces.size() == 1 ? pieces[0] : tape.concat_rows(pieces);
}

template <class T>
typename ModelT<T>::Ref ModelT<T>::run_encoder(Tape& tape, Ref x,
                                               const std::vector<std::pair<int, int>>& spans,
                                               std::vector<ad::Mat<T>>* attn_capture) const {
  const ad::Mat<T> no_mask;
  Ref h = x;
  for (const auto& lp : enc_layers) {
    Ref a = tape.layernorm_rows(h, tape.param(lp.ln1_g), tape.param(lp.ln1_b));
    Ref q = linear(tape, a, lp.wq, lp.bq);
    Ref k = linear(tape, a, lp.wk, lp.bk);
    Ref v = linear(tape, a, lp.wv, lp.bv);
    std::vector<Ref> outs;
    for (const auto& [start, len] : spans) {
      if (len == 0) continue;
      Ref qs = tape.slice_rows(q, start, len);
      Ref ks = tape.slice_rows(k, start, len);
      Ref vs = tape.slice_rows(v, start, len);
      outs.push_back(tape.attention(qs, ks, vs, cfg.heads, no_mask, attn_capture));
    }
    Ref attn = outs.empty() ? tape.constant(ad::Mat<T>::Zero(0, cfg.dim))
                            : (outs.size() == 1 ? outs[0] : tape.concat_rows(outs));
    h = tape.add(h, linear(tape, attn, lp.wo, lp.bo));
    Ref b = tape.layernorm_rows(h, tape.param(lp.ln2_g), tape.param(lp.ln2_b));
    h = tape.add(h, ffn(tape, b, lp));
  }
  return tape.layernorm_rows(h, tape.param(enc_ln_g), tape.param(enc_ln_b));
}

template <class T>
BuiltBatchT<T> ModelT<T>::build(Tape& tape, const std::vector<BatchItem>& batch,
                                std::vector<ad::Mat<T>>* attn_capture) const {
  BuiltBatchT<T> built;

  // ---- encoder ----
  std::vector<std::pair<int, int>> enc_spans;
  Ref x = embed_enc_items(tape, batch, enc_spans, false);
  Ref enc_out = run_encoder(tape, x, enc_spans, attn_capture);

  // re-inject positional and modality embeddings before cross-attention
  std::vector<std::pair<int, int>> spans_again;
  Ref posmod = embed_enc_items(tape, batch, spans_again, true);
  Ref memory = tape.val(enc_out).rows() > 0 ? tape.add(enc_out, posmod) : enc_out;
  built.enc_pre = enc_out;
  built.memory = memory;
  built.enc_spans = enc_spans;

  // ---- decoder queries ----
  std::vector<Ref> pieces;
  std::vector<std::pair<int, int>> dec_spans;
  std::vector<ad::Mat<T>> dec_masks;
  int row = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& item = batch[s];
    int start = row;
    struct GroupSpan {
      int row0, rows;
      bool is_seq;
    };
    std::vector<GroupSpan> sample_groups;
    for (const auto& g : item.dense_dec) {
      const ModalitySpec& spec = registry.at(g.modality);
      if (!spec.is_dense()) throw ContractError("dense decode of a non-dense modality");
      if (g.positions.empty()) continue;
      const auto& mp = modality_params.at(g.modality);
      ad::Mat<T> pos_rows = gather_pos_rows(pos_table(g.modality), g.positions);
      Ref qx = tape.add_const(
          tape.broadcast_row(tape.param(mask_token), static_cast<int>(g.positions.size())),
          pos_rows);
      qx = tape.add_rowvec(qx, tape.param(mp.modality_emb));
      pieces.push_back(qx);
      typename BuiltBatchT<T>::Group group;
      group.sample = static_cast<int>(s);
      group.modality = g.modality;
      group.is_seq = false;
      group.row0 = row;
      group.rows = static_cast<int>(g.positions.size());
      group.positions = g.positions;
      group.target_ids = g.target_ids;
      built.groups.push_back(std::move(group));
      sample_groups.push_back({row, static_cast<int>(g.positions.size()), false});
      row += static_cast<int>(g.positions.size());
    }
    for (const auto& g : item.seq_dec) {
      const ModalitySpec& spec = registry.at(g.modality);
      if (!spec.is_sequence()) throw ContractError("sequence decode of a non-sequence modality");
      if (g.view_ids.empty()) continue;
      const auto& mp = modality_params.at(g.modality);
      std::vector<int> slots = iota_positions(g.view_ids.size());
      ad::Mat<T> pos_rows = gather_pos_rows(pos_table(g.modality), slots);
      std::vector<int> idx(g.view_ids.begin(), g.view_ids.end());
      Ref qx = tape.add_const(tape.gather_rows(tape.param(mp.token_table), std::move(idx)),
                              pos_rows);
      qx = tape.add_rowvec(qx, tape.param(mp.modality_emb));
      pieces.push_back(qx);
      typename BuiltBatchT<T>::Group group;
      group.sample = static_cast<int>(s);
      group.modality = g.modality;
      group.is_seq = true;
      group.row0 = row;
      group.rows = static_cast<int>(g.view_ids.size());
      group.view_ids = g.view_ids;
      group.want_loss = g.want_loss;
      built.groups.push_back(std::move(group));
      sample_groups.push_back({row, static_cast<int>(g.view_ids.size()), true});
      row += static_cast<int>(g.view_ids.size());
    }
    int len = row - start;
    dec_spans.emplace_back(start, len);

    // decoder self-attention: tokens of different modalities never attend
    // each other; sequences are additionally causal
    ad::Mat<T> mask = ad::Mat<T>::Constant(len, len, static_cast<T>(kMaskNeg));
    for (const auto& g : sample_groups) {
      for (int i = 0; i < g.rows; ++i) {
        for (int j = 0; j < g.rows; ++j) {
          if (!g.is_seq || j <= i) {
            mask(g.row0 - start + i, g.row0 - start + j) = T(0);
          }
        }
      }
    }
    dec_masks.push_back(std::move(mask));
  }

  Ref d = pieces.empty() ? tape.constant(ad::Mat<T>::Zero(0, cfg.dim))
                         : (pieces.size() == 1 ? pieces[0] : tape.concat_rows(pieces));

  // ---- decoder stack ----
  for (const auto& lp : dec_layers) {
    Ref a = tape.layernorm_rows(d, tape.param(lp.ln1_g), tape.param(lp.ln1_b));
    Ref q = linear(tape, a, lp.wq, lp.bq);
    Ref k = linear(tape, a, lp.wk, lp.bk);
    Ref v = linear(tape, a, lp.wv, lp.bv);
    std::vector<Ref> outs;
    for (std::size_t s = 0; s < dec_spans.size(); ++s) {
      auto [start, len] = dec_spans[s];
      if (len == 0) continue;
      Ref qs = tape.slice_rows(q, start, len);
      Ref ks = tape.slice_rows(k, start, len);
      Ref vs = tape.slice_rows(v, start, len);
      outs.push_back(tape.attention(qs, ks, vs, cfg.heads, dec_masks[s], attn_capture));
    }
    Ref attn = outs.empty() ? tape.constant(ad::Mat<T>::Zero(0, cfg.dim))
                            : (outs.size() == 1 ? outs[0] : tape.concat_rows(outs));
    d = tape.add(d, linear(tape, attn, lp.wo, lp.bo));

    // cross-attention reads the re-injected encoder memory, unrestricted
    Ref c = tape.layernorm_rows(d, tape.param(lp.lnc_g), tape.param(lp.lnc_b));
    Ref cq = linear(tape, c, lp.cq, lp.cbq);
    Ref ck = linear(tape, memory, lp.ck, lp.cbk);
    Ref cv = linear(tape, memory, lp.cv, lp.cbv);
    const ad::Mat<T> no_mask;
    std::vector<Ref> couts;
    for (std::size_t s = 0; s < dec_spans.size(); ++s) {
      auto [start, len] = dec_spans[s];
      if (len == 0) continue;
      auto [estart, elen] = built.enc_spans[s];
      Ref qs = tape.slice_rows(cq, start, len);
      Ref ks = tape.slice_rows(ck, estart, elen);
      Ref vs = tape.slice_rows(cv, estart, elen);
      couts.push_back(tape.attention(qs, ks, vs, cfg.heads, no_mask, attn_capture));
    }
    Ref cattn = couts.empty() ? tape.constant(ad::Mat<T>::Zero(0, cfg.dim))
                              : (couts.size() == 1 ? couts[0] : tape.concat_rows(couts));
    d = tape.add(d, linear(tape, cattn, lp.co, lp.cbo));

    Ref b = tape.layernorm_rows(d, tape.param(lp.ln2_g), tape.param(lp.ln2_b));
    d = tape.add(d, ffn(tape, b, lp));
  }
  built.dec_out = tape.layernorm_rows(d, tape.param(dec_ln_g), tape.param(dec_ln_b));
  return built;
}

template <class T>
typename ModelT<T>::Ref ModelT<T>::group_logits(Tape& tape, const BuiltBatchT<T>& built,
                                                std::size_t group) const {
  const auto& g = built.groups.at(group);
  const auto& mp = modality_params.at(g.modality);
  Ref rows = tape.slice_rows(built.dec_out, g.row0, g.rows);
  if (g.is_seq) {
    // output projection tied to the input embedding table
    return tape.matmul_nt(rows, tape.param(mp.token_table));
  }
  return tape.matmul(rows, tape.param(mp.out_head));
}

template <class T>
ForwardOutT<T> ModelT<T>::loss_from_built(Tape& tape, const BuiltBatchT<T>& built,
                                          LossMode mode) const {
  ForwardOutT<T> out;
  struct SampleAcc {
    std::vector<Ref> means;
  };
  std::map<int, SampleAcc> per_sample;
  std::vector<Ref> sums;
  std::int64_t total_labels = 0;
  std::map<std::string, std::pair<double, std::int64_t>> mod_stats;

  for (std::size_t gi = 0; gi < built.groups.size(); ++gi) {
    const auto& g = built.groups[gi];
    if (!g.want_loss) continue;
    std::vector<int> labels;
    Ref logits;
    if (g.is_seq) {
      if (g.rows < 2) continue;  // a lone sentinel has no next-token labels
      logits = tape.slice_rows(group_logits(tape, built, gi), 0, g.rows - 1);
      for (int i = 1; i < g.rows; ++i) labels.push_back(g.view_ids[i]);
    } else {
      if (g.target_ids.empty()) continue;
      logits = group_logits(tape, built, gi);
      for (TokenId id : g.target_ids) labels.push_back(id);
    }
    const std::int64_t n = static_cast<std::int64_t>(labels.size());
    Ref ce = tape.cross_entropy_rows(logits, std::move(labels));
    double ce_sum = tape.val(ce).sum();
    auto& stat = mod_stats[g.modality];
    stat.first += ce_sum;
    stat.second += n;
    total_labels += n;
    if (mode == LossMode::PerModality) {
      per_sample[g.sample].means.push_back(tape.mean(ce));
    } else {
      sums.push_back(tape.sum(ce));
    }
  }

  if (total_labels == 0) throw ContractError("loss requires at least one target token");
  out.stats.label_count = total_labels;
  for (const auto& [name, stat] : mod_stats) {
    out.stats.per_modality[name] = stat.first / static_cast<double>(stat.second);
    out.stats.per_modality_counts[name] = stat.second;
  }

  if (mode == LossMode::PerModality) {
    std::vector<Ref> sample_losses;
    for (auto& [sample, acc] : per_sample) {
      std::vector<T> w(acc.means.size(), T(1) / static_cast<T>(acc.means.size()));
      sample_losses.push_back(tape.affine_combine(acc.means, w));
    }
    std::vector<T> w(sample_losses.size(), T(1) / static_cast<T>(sample_losses.size()));
    out.loss = tape.affine_combine(sample_losses, w);
  } else {
    std::vector<T> w(sums.size(), T(1) / static_cast<T>(total_labels));
    out.loss = tape.affine_combine(sums, w);
  }
  out.stats.total = static_cast<double>(tape.item(out.loss));
  return out;
}

template <class T>
ForwardOutT<T> ModelT<T>::forward_train(Tape& tape, const std::vector<BatchItem>& batch,
                                        LossMode mode,
                                        std::vector<ad::Mat<T>>* attn_capture) const {
  BuiltBatchT<T> built = build(tape, batch, attn_capture);
  return loss_from_built(tape, built, mode);
}

BatchItem batch_item_from_masked_sample(const MaskedSample& sample, const Registry& registry) {
  BatchItem item;
  for (const auto& d : sample.dense_inputs) {
    EncItem e;
    e.modality = d.modality;
    e.positions = d.positions;
    e.ids = d.ids;
    item.enc.push_back(std::move(e));
  }
  for (const auto& p : sample.pixel_inputs) {
    EncItem e;
    e.modality = p.modality;
    e.positions = p.positions;
    e.patches = p.patches;
    item.enc.push_back(std::move(e));
  }
  for (const auto& s : sample.input_seq_views) {
    EncItem e;
    e.modality = s.modality;
    e.ids = s.ids;
    e.is_seq = true;
    item.enc.push_back(std::move(e));
  }
  for (const auto& d : sample.dense_targets) {
    item.dense_dec.push_back(DecDenseItem{d.modality, d.positions, d.ids});
  }
  for (const auto& s : sample.target_seq_views) {
    item.seq_dec.push_back(DecSeqItem{s.modality, s.ids, true});
  }
  (void)registry;
  return item;
}

namespace {
constexpr char kModelMagic[4] = {'4', 'M', 'C', 'K'};
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

void save_model(const Model& model, const std::string& path,
                const std::vector<std::pair<std::string, ad::Mat<float>>>& extra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write checkpoint: " + path);
  io::write_magic(out, kModelMagic);
  io::write_u32(out, kModelVersion);
  io::write_string(out, model.cfg.to_json());
  io::write_u64(out, model.registry_hash);
  io::write_u32(out, static_cast<std::uint32_t>(model.params.size() + extra.size()));
  for (const auto& e : model.params.entries) io::write_named_matrix(out, e.name, e.value);
  for (const auto& [name, m] : extra) io::write_named_matrix(out, name, m);
}

LoadedModel load_model(const std::string& path, const Registry& registry) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path);
  io::expect_magic(in, kModelMagic, "checkpoint " + path);
  if (io::read_u32(in) != kModelVersion) throw LoadError("unsupported checkpoint version");
  ModelConfig cfg = ModelConfig::from_json(io::read_string(in));
  std::uint64_t hash = io::read_u64(in);
  if (hash != registry.hash()) {
    throw LoadError("checkpoint registry hash " + to_hex(hash) +
                    " does not match the loaded registry " + to_hex(registry.hash()));
  }
  LoadedModel loaded{Model::make(cfg, registry, 0), {}};
  std::map<std::string, int> by_name;
  for (int i = 0; i < loaded.model.params.size(); ++i) {
    by_name[loaded.model.params.entries[i].name] = i;
  }
  std::uint32_t n = io::read_u32(in);
  std::size_t matched = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, m] = io::read_named_matrix(in);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      loaded.extra[name] = std::move(m);
      continue;
    }
    auto& dst = loaded.model.params.entries[it->second].value;
    if (dst.rows() != m.rows() || dst.cols() != m.cols()) {
      throw LoadError("checkpoint tensor '" + name + "' has unexpected shape");
    }
    dst = std::move(m);
    ++matched;
  }
  if (matched != static_cast<std::size_t>(loaded.model.params.size())) {
    throw LoadError("checkpoint missing model tensors");
  }
  return loaded;
}

template struct ModelT<float>;
template struct ModelT<double>;
template ad::Mat<float> sincos_table_1d<float>(int, int);
template ad::Mat<double> sincos_table_1d<double>(int, int);
template ad::Mat<float> sincos_table_2d<float>(int, int, int);
template ad::Mat<double> sincos_table_2d<double>(int, int, int);

}  // namespace mmm
