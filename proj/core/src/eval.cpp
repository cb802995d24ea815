#include "mmm/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mmm/optim.hpp"

namespace mmm {

using nlohmann::json;

const GridTokenizer& TokenizerSet::at(const std::string& modality) const {
  auto it = by_modality.find(modality);
  if (it == by_modality.end()) throw ConfigError("no tokenizer for modality " + modality);
  return it->second;
}

void TokenizerSet::save_all(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [name, tok] : by_modality) {
    save_tokenizer(tok, dir + "/" + name + ".vq");
  }
}

TokenizerSet TokenizerSet::load_all(const std::string& dir,
                                    const std::vector<std::string>& modalities) {
  TokenizerSet set;
  for (const auto& name : modalities) {
    set.by_modality.emplace(name, load_tokenizer(dir + "/" + name + ".vq"));
  }
  return set;
}

SampleTokens tokenize_sample(const AlignedSample& sample, const DatasetConfig& cfg,
                             const TokenizerSet& tokenizers, const Registry& registry,
                             const WordVocab& vocab) {
  SampleTokens out;
  out.grids.push_back(tokenizers.at("rgb").tokenize(sample.rgb));
  out.grids.push_back(tokenizers.at("depth").tokenize(sample.depth));
  out.grids.push_back(tokenizers.at("seg").tokenize(sample.seg));
  out.grids.push_back(tokenizers.at("feat").tokenize(sample.feat));
  out.seqs.push_back(encode_bboxes(sample.bboxes, registry.at("bbox")));
  out.seqs.push_back(vocab.encode(sample.caption, registry.at("caption")));
  (void)cfg;
  return out;
}

void attach_pixel_patches(std::vector<SampleTokens>& samples, const DatasetConfig& cfg,
                          const TokenizerSet& tokenizers, const Registry& registry) {
  if (!registry.has("rgb_pixels")) return;
  const GridTokenizer& rgb_tok = tokenizers.at("rgb");
  for (auto& sample : samples) {
    Grid recon = rgb_tok.detokenize(sample.grid("rgb"), cfg.canvas, cfg.canvas);
    SampleTokens::PixelField field;
    field.modality = "rgb_pixels";
    field.patches = extract_raw_patches(recon, cfg.patch, cfg.patch);
    sample.pixels.clear();
    sample.pixels.push_back(std::move(field));
  }
}

std::string EvalReport::to_json() const {
  json rows = json::array();
  for (const auto& row : table) {
    rows.push_back({{"inputs", row.inputs}, {"target", row.target}, {"ce", row.ce}});
  }
  json doc{{"version", version},
           {"per_modality_ce", per_modality_ce},
           {"table", rows},
           {"config_hash", config_hash},
           {"seed", seed},
           {"tokens_seen", tokens_seen}};
  return doc.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json doc = json::parse(text);
  static const std::vector<std::string> known = {"version", "per_modality_ce", "table",
                                                 "config_hash", "seed", "tokens_seen"};
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw LoadError("eval report has unknown field: " + key);
    }
  }
  EvalReport report;
  report.version = doc.at("version").get<int>();
  if (report.version != 1) throw LoadError("unsupported eval report version");
  report.per_modality_ce = doc.at("per_modality_ce").get<std::map<std::string, double>>();
  for (const auto& row : doc.at("table")) {
    report.table.push_back({row.at("inputs").get<std::vector<std::string>>(),
                            row.at("target").get<std::string>(), row.at("ce").get<double>()});
  }
  report.config_hash = doc.at("config_hash").get<std::string>();
  report.seed = doc.at("seed").get<std::uint64_t>();
  report.tokens_seen = doc.at("tokens_seen").get<std::int64_t>();
  return report;
}

void EvalReport::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write eval report: " + path);
  out << to_json() << "\n";
}

EvalReport EvalReport::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open eval report: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

// full-content encoder item for one modality of one sample
EncItem full_enc_item(const SampleTokens& sample, const ModalitySpec& spec) {
  EncItem e;
  e.modality = spec.name;
  if (spec.is_pixel()) {
    const auto& field = sample.pixel(spec.name);
    e.patches = field.patches;
    for (int i = 0; i < field.patches.rows(); ++i) e.positions.push_back(i);
  } else if (spec.is_dense()) {
    const TokenGrid& grid = sample.grid(spec.name);
    e.ids = grid.ids;
    for (int i = 0; i < spec.num_positions(); ++i) e.positions.push_back(i);
  } else {
    e.ids = sample.seq(spec.name).ids;
    e.is_seq = true;
  }
  return e;
}

}  // namespace

double eval_conditional_ce(const Model& model, const std::vector<SampleTokens>& val,
                           const std::vector<std::string>& inputs, const std::string& target,
                           int batch_size) {
  for (const auto& name : inputs) {
    if (name == target) throw ContractError("eval: target cannot be among the inputs");
  }
  const ModalitySpec& target_spec = model.registry.at(target);
  if (!target_spec.target_eligible()) throw ContractError("eval: pixel modalities are input-only");
  const IdBlock* sentinels = target_spec.is_sequence() ? &target_spec.block("sentinel") : nullptr;

  double ce_sum = 0;
  std::int64_t count = 0;
  for (std::size_t at = 0; at < val.size(); at += static_cast<std::size_t>(batch_size)) {
    std::vector<BatchItem> batch;
    for (std::size_t i = at; i < std::min(val.size(), at + batch_size); ++i) {
      BatchItem item;
      for (const auto& name : inputs) {
        item.enc.push_back(full_enc_item(val[i], model.registry.at(name)));
      }
      if (target_spec.is_dense()) {
        const TokenGrid& grid = val[i].grid(target);
        DecDenseItem d;
        d.modality = target;
        for (int p = 0; p < target_spec.num_positions(); ++p) {
          d.positions.push_back(p);
          d.target_ids.push_back(grid.ids[p]);
        }
        item.dense_dec.push_back(std::move(d));
      } else {
        // fully masked view: sentinel, content, closing sentinel
        const TokenSeq& seq = val[i].seq(target);
        DecSeqItem s;
        s.modality = target;
        s.view_ids.push_back(static_cast<TokenId>(sentinels->begin));
        s.view_ids.insert(s.view_ids.end(), seq.ids.begin(), seq.ids.end());
        s.view_ids.push_back(static_cast<TokenId>(sentinels->begin + 1));
        item.seq_dec.push_back(std::move(s));
      }
      batch.push_back(std::move(item));
    }
    ad::Tape<float> tape(&model.params);
    ForwardOutT<float> fwd = model.forward_train(tape, batch, LossMode::PerToken);
    ce_sum += fwd.stats.total * static_cast<double>(fwd.stats.label_count);
    count += fwd.stats.label_count;
  }
  if (count == 0) throw ContractError("eval: no target tokens");
  return ce_sum / static_cast<double>(count);
}

EvalReport build_eval_report(const Model& model, const std::vector<SampleTokens>& val,
                             std::uint64_t seed, std::int64_t tokens_seen) {
  EvalReport report;
  report.seed = seed;
  report.tokens_seen = tokens_seen;
  report.config_hash = to_hex(fnv1a64(model.cfg.to_json()));

  std::vector<std::string> targets;
  for (const auto& spec : model.registry.modalities()) {
    if (spec.target_eligible()) targets.push_back(spec.name);
  }
  for (const auto& target : targets) {
    std::vector<std::string> others;
    for (const auto& spec : model.registry.modalities()) {
      if (spec.name != target && !spec.is_pixel()) others.push_back(spec.name);
    }
    double ce_all = eval_conditional_ce(model, val, others, target);
    report.per_modality_ce[target] = ce_all;
    report.table.push_back({others, target, ce_all});
    report.table.push_back({{}, target, eval_conditional_ce(model, val, {}, target)});
  }
  return report;
}

Model extend_model_with_modality(const Model& base, const ModalitySpec& task_spec,
                                 std::uint64_t seed) {
  std::vector<ModalitySpec> specs = base.registry.modalities();
  specs.push_back(task_spec);
  Registry extended(std::move(specs));
  ModelConfig cfg = base.cfg;
  Model fresh = Model::make(cfg, extended, seed);
  std::map<std::string, const ad::Mat<float>*> donor;
  for (const auto& e : base.params.entries) donor[e.name] = &e.value;
  for (auto& e : fresh.params.entries) {
    auto it = donor.find(e.name);
    if (it != donor.end()) e.value = *it->second;
  }
  return fresh;
}

TransferResult transfer_finetune(Model& model, const std::vector<SampleTokens>& train,
                                 const std::vector<SampleTokens>& val,
                                 const std::string& input_modality,
                                 const std::string& task_modality, const TransferConfig& cfg) {
  if (train.empty() || val.empty()) throw ConfigError("transfer: empty dataset");
  const ModalitySpec& task_spec = model.registry.at(task_modality);
  if (!task_spec.is_dense()) throw ConfigError("transfer tasks are dense modalities");

  // phase 1 trains only the new task tensors
  std::vector<bool> frozen(model.params.entries.size(), true);
  for (std::size_t i = 0; i < model.params.entries.size(); ++i) {
    const std::string& name = model.params.entries[i].name;
    if (name == "emb." + task_modality || name == "head." + task_modality ||
        name == "modemb." + task_modality) {
      frozen[i] = false;
    }
  }

  AdamW<float> opt;
  opt.weight_decay = 0.05;
  opt.init(model.params);

  TransferResult result;
  result.initial_val_ce = eval_conditional_ce(model, val, {input_modality}, task_modality,
                                              cfg.eval_batch);
  const int total_steps = cfg.phase1_steps + cfg.phase2_steps;
  if (total_steps == 0) {
    result.best_val_ce = result.initial_val_ce;
    result.measurements.push_back(result.initial_val_ce);
    return result;
  }
  const int measure_every = std::max(1, total_steps / std::max(1, cfg.measurements));

  Rng rng = make_rng(cfg.seed, 0x7f);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  result.best_val_ce = std::numeric_limits<double>::infinity();

  for (int step = 1; step <= total_steps; ++step) {
    const bool phase1 = step <= cfg.phase1_steps;
    std::vector<BatchItem> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SampleTokens& s = train[pick(rng)];
      BatchItem item;
      item.enc.push_back(full_enc_item(s, model.registry.at(input_modality)));
      const TokenGrid& grid = s.grid(task_modality);
      DecDenseItem d;
      d.modality = task_modality;
      for (int p = 0; p < task_spec.num_positions(); ++p) {
        d.positions.push_back(p);
        d.target_ids.push_back(grid.ids[p]);
      }
      item.dense_dec.push_back(std::move(d));
      batch.push_back(std::move(item));
    }

    ad::Tape<float> tape(&model.params);
    ForwardOutT<float> fwd = model.forward_train(tape, batch, LossMode::PerToken);
    if (!std::isfinite(fwd.stats.total)) throw NumericError("transfer loss not finite");
    tape.backward(fwd.loss);
    std::vector<ad::Mat<float>> grads = model.params.zeros_like();
    tape.accumulate_param_grads(grads);

    double base_lr = phase1 ? cfg.phase1_base_lr : cfg.phase2_base_lr;
    double lr = base_lr * cfg.batch_size / 256.0;
    opt.step(model.params, grads, lr, phase1 ? &frozen : nullptr);

    if (step % measure_every == 0 || step == total_steps) {
      double ce = eval_conditional_ce(model, val, {input_modality}, task_modality, cfg.eval_batch);
      result.measurements.push_back(ce);
      result.best_val_ce = std::min(result.best_val_ce, ce);
    }
  }
  return result;
}

}  // namespace mmm
