#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmm/eval.hpp"
#include "mmm/generate.hpp"
#include "mmm/model.hpp"
#include "mmm/synth.hpp"
#include "mmm/train.hpp"
#include "mmm/vq.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mmm::LoadError("cannot open file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RawDataset {
  std::vector<mmm::AlignedSample> samples;
};

RawDataset generate_raw(std::uint64_t seed, int count, const mmm::DatasetConfig& cfg) {
  RawDataset data;
  data.samples.reserve(count);
  for (int i = 0; i < count; ++i) {
    mmm::Rng rng = mmm::make_rng(seed, 0x5ce4e000ull + static_cast<std::uint64_t>(i));
    data.samples.push_back(mmm::render_sample(mmm::generate_scene(rng, cfg), cfg));
  }
  return data;
}

mmm::GridTokenizer train_one_tokenizer(const std::string& modality,
                                       const std::vector<mmm::Grid>& grids,
                                       const mmm::DatasetConfig& cfg, int vocab, int steps,
                                       std::uint64_t seed, bool categorical, int n_classes) {
  mmm::CodebookConfig cb;
  cb.K = vocab;
  cb.d = 16;
  mmm::Rng rng = mmm::make_rng(seed, mmm::fnv1a64(modality));
  mmm::GridTokenizer tok = mmm::GridTokenizer::make(
      modality, cfg.patch, cfg.patch, grids.front().c, categorical, n_classes, 96, cb, rng);
  mmm::VqTrainConfig vq_cfg;
  vq_cfg.steps = steps;
  vq_cfg.seed = seed;
  mmm::VqTrainStats stats = mmm::train_tokenizer(tok, grids, vq_cfg);
  std::cout << "  " << modality << ": loss " << stats.first_loss << " -> " << stats.final_loss
            << ", restarts " << stats.total_restarts << ", perplexity " << stats.perplexity
            << "\n";
  return tok;
}

struct LoadedData {
  mmm::DatasetConfig dataset_cfg;
  mmm::Registry registry;
  mmm::TokenizerSet tokenizers;
  std::string dir;
};

LoadedData load_data_dir(const std::string& dir, bool with_tokenizers = true) {
  LoadedData data;
  data.dir = dir;
  data.dataset_cfg = mmm::DatasetConfig::load(dir + "/dataset.json");
  data.registry = mmm::Registry::load(dir + "/registry.json");
  if (with_tokenizers) {
    data.tokenizers =
        mmm::TokenizerSet::load_all(dir + "/tokenizers", {"rgb", "depth", "seg", "feat"});
  }
  return data;
}

std::vector<mmm::SampleTokens> load_manifest_samples(const std::string& manifest_path,
                                                     const mmm::Registry& registry) {
  mmm::Manifest manifest = mmm::Manifest::load(manifest_path);
  if (manifest.registry_hash != mmm::to_hex(registry.hash())) {
    throw mmm::LoadError("manifest registry hash does not match the loaded registry");
  }
  std::vector<mmm::SampleTokens> samples;
  fs::path base = fs::path(manifest_path).parent_path();
  for (const auto& entry : manifest.shards) {
    auto shard = mmm::read_shard((base / entry.path).string(), registry);
    if (static_cast<std::int64_t>(shard.size()) != entry.samples) {
      throw mmm::LoadError("shard sample count does not match the manifest");
    }
    for (auto& s : shard) samples.push_back(std::move(s));
  }
  return samples;
}

int cmd_train_tokenizers(const std::string& out_dir, std::uint64_t seed, int num_samples,
                         int steps, const std::string& modality, const std::string& cfg_path) {
  mmm::DatasetConfig cfg =
      cfg_path.empty() ? mmm::DatasetConfig() : mmm::DatasetConfig::from_json(slurp(cfg_path));
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/tokenizers");
  cfg.save(out_dir + "/dataset.json");
  mmm::make_registry(cfg).save(out_dir + "/registry.json");

  std::cout << "generating " << num_samples << " scenes for tokenizer training\n";
  RawDataset raw = generate_raw(seed, num_samples, cfg);

  auto collect = [&](auto getter) {
    std::vector<mmm::Grid> grids;
    grids.reserve(raw.samples.size());
    for (const auto& s : raw.samples) grids.push_back(getter(s));
    return grids;
  };

  const int n_classes = mmm::num_shape_classes() + 1;
  struct Plan {
    std::string name;
    int vocab;
    bool categorical;
    int classes;
  };
  std::vector<Plan> plans = {{"rgb", cfg.rgb_vocab, false, 0},
                             {"depth", cfg.depth_vocab, false, 0},
                             {"seg", cfg.seg_vocab, true, n_classes},
                             {"feat", cfg.feat_vocab, false, 0}};
  for (const auto& plan : plans) {
    if (modality != "all" && modality != plan.name) continue;
    std::vector<mmm::Grid> grids = collect([&](const mmm::AlignedSample& s) -> mmm::Grid {
      if (plan.name == "rgb") return s.rgb;
      if (plan.name == "depth") return s.depth;
      if (plan.name == "seg") return s.seg;
      return s.feat;
    });
    mmm::GridTokenizer tok = train_one_tokenizer(plan.name, grids, cfg, plan.vocab, steps, seed,
                                                 plan.categorical, plan.classes);
    mmm::save_tokenizer(tok, out_dir + "/tokenizers/" + plan.name + ".vq");
  }
  std::cout << "tokenizers written to " << out_dir << "/tokenizers\n";
  return 0;
}

int cmd_build_data(const std::string& out_dir, const std::string& tok_dir, std::uint64_t seed,
                   int num_samples, double val_fraction, int shard_size) {
  LoadedData td = load_data_dir(tok_dir);
  fs::create_directories(out_dir);
  td.dataset_cfg.save(out_dir + "/dataset.json");
  td.registry.save(out_dir + "/registry.json");
  if (fs::path(out_dir) != fs::path(tok_dir)) {
    fs::create_directories(out_dir + "/tokenizers");
    for (const auto& name : {"rgb", "depth", "seg", "feat"}) {
      fs::copy_file(tok_dir + "/tokenizers/" + std::string(name) + ".vq",
                    out_dir + "/tokenizers/" + std::string(name) + ".vq",
                    fs::copy_options::overwrite_existing);
    }
  }

  mmm::WordVocab vocab(mmm::grammar_words(), td.registry.at("caption"));
  const int val_count = static_cast<int>(num_samples * val_fraction);
  const int train_count = num_samples - val_count;

  auto write_split = [&](const std::string& name, int count, std::uint64_t split_seed) {
    mmm::Manifest manifest;
    manifest.registry_hash = mmm::to_hex(td.registry.hash());
    std::vector<mmm::SampleTokens> pending;
    int shard_idx = 0;
    auto flush = [&]() {
      if (pending.empty()) return;
      std::string shard_name = name + "_" + std::to_string(shard_idx++) + ".shard";
      mmm::write_shard(pending, td.registry, out_dir + "/" + shard_name);
      manifest.shards.push_back({shard_name, static_cast<std::int64_t>(pending.size())});
      manifest.total_samples += static_cast<std::int64_t>(pending.size());
      pending.clear();
    };
    for (int i = 0; i < count; ++i) {
      mmm::Rng rng = mmm::make_rng(split_seed, 0x5ce4e000ull + static_cast<std::uint64_t>(i));
      mmm::AlignedSample sample =
          mmm::render_sample(mmm::generate_scene(rng, td.dataset_cfg), td.dataset_cfg);
      pending.push_back(
          mmm::tokenize_sample(sample, td.dataset_cfg, td.tokenizers, td.registry, vocab));
      if (static_cast<int>(pending.size()) >= shard_size) flush();
    }
    flush();
    manifest.save(out_dir + "/manifest_" + name + ".json");
    std::cout << name << ": " << manifest.total_samples << " samples in "
              << manifest.shards.size() << " shard(s)\n";
  };
  write_split("train", train_count, seed);
  write_split("val", val_count, seed ^ 0x9e3779b97f4a7c15ull);
  return 0;
}

int cmd_pretrain(const std::string& config_path) {
  json doc = json::parse(slurp(config_path));
  mmm::ModelConfig model_cfg = mmm::ModelConfig::from_json(doc.at("model").dump());
  mmm::TrainConfig train_cfg = mmm::TrainConfig::from_json(doc.at("train").dump());
  mmm::MaskConfig mask_cfg = mmm::MaskConfig::from_json(doc.at("mask").dump());
  const std::string data_dir = doc.at("data").at("dir").get<std::string>();
  const std::string resume = doc.value("resume", std::string());

  LoadedData data = load_data_dir(data_dir);
  std::vector<mmm::SampleTokens> samples =
      load_manifest_samples(data_dir + "/manifest_train.json", data.registry);

  if (data.registry.has("rgb_pixels")) {
    model_cfg.pixel_patch_dims["rgb_pixels"] =
        data.dataset_cfg.patch * data.dataset_cfg.patch * 3;
  }
  bool needs_pixels = false;
  for (const auto& s : mask_cfg.strategies) {
    for (const auto& m : s.input_modalities) needs_pixels = needs_pixels || m == "rgb_pixels";
  }
  if (needs_pixels) {
    mmm::attach_pixel_patches(samples, data.dataset_cfg, data.tokenizers, data.registry);
  }

  mmm::Model model = mmm::Model::make(model_cfg, data.registry, train_cfg.seed);
  std::cout << "model parameters: " << model.parameter_count() << "\n";
  mmm::TrainResult result = mmm::train(model, samples, train_cfg, mask_cfg, resume);
  std::cout << "trained " << result.steps << " steps, " << result.counter.tokens_seen
            << " tokens seen\n";
  if (!result.metrics.empty()) {
    std::cout << "final loss " << result.metrics.back().loss << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             const std::string& out_path, int limit) {
  fs::path data_dir = fs::path(manifest_path).parent_path();
  mmm::Registry registry = mmm::Registry::load((data_dir / "registry.json").string());
  std::vector<mmm::SampleTokens> val = load_manifest_samples(manifest_path, registry);
  if (limit > 0 && static_cast<int>(val.size()) > limit) val.resize(limit);

  mmm::LoadedModel loaded = mmm::load_model(checkpoint, registry);
  std::int64_t tokens_seen = 0;
  if (auto it = loaded.extra.find("train.state"); it != loaded.extra.end()) {
    tokens_seen = json::parse(mmm::unpack_bytes(it->second)).at("tokens_seen").get<std::int64_t>();
  }
  mmm::EvalReport report = mmm::build_eval_report(loaded.model, val, 0, tokens_seen);
  report.save(out_path);
  std::cout << report.to_json() << "\n";
  return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& schedule_path,
                 const std::string& conditioning_path, const std::string& data_dir,
                 const std::string& out_dir, std::uint64_t seed) {
  LoadedData data = load_data_dir(data_dir);
  mmm::LoadedModel loaded = mmm::load_model(checkpoint, data.registry);
  mmm::GenerationSchedule schedule = mmm::GenerationSchedule::load(schedule_path);

  mmm::DecodingState conditioning;
  if (!conditioning_path.empty()) {
    json cond = json::parse(slurp(conditioning_path));
    if (cond.contains("caption")) {
      mmm::WordVocab vocab(mmm::grammar_words(), data.registry.at("caption"));
      conditioning.set_sequence(
          vocab.encode(cond.at("caption").get<std::string>(), data.registry.at("caption")));
    }
    if (cond.contains("from_sample")) {
      const auto& fs_cfg = cond.at("from_sample");
      auto samples = load_manifest_samples(fs_cfg.at("manifest").get<std::string>(), data.registry);
      const auto& sample = samples.at(fs_cfg.at("index").get<std::size_t>());
      for (const auto& name : fs_cfg.at("modalities").get<std::vector<std::string>>()) {
        const mmm::ModalitySpec& spec = data.registry.at(name);
        if (spec.is_dense()) {
          conditioning.set_full_grid(sample.grid(name), data.registry);
        } else {
          conditioning.set_sequence(sample.seq(name));
        }
      }
    }
  }

  mmm::Rng rng = mmm::make_rng(seed, 0x9e4);
  mmm::DecodingState result = mmm::chained_generate(conditioning, schedule, loaded.model, rng);

  fs::create_directories(out_dir);
  json out_doc;
  for (const auto& [name, ds] : result.dense) {
    out_doc["dense"][name] = ds.ids;
    const mmm::ModalitySpec& spec = data.registry.at(name);
    if (data.tokenizers.by_modality.count(name)) {
      mmm::Grid recon = data.tokenizers.at(name).detokenize(
          mmm::TokenGrid{name, ds.ids}, data.dataset_cfg.canvas, data.dataset_cfg.canvas);
      if (recon.c == 3) {
        mmm::write_ppm(recon, out_dir + "/" + name + ".ppm");
      } else if (recon.c == 1) {
        float scale = name == "seg" ? 1.0f / mmm::num_shape_classes() : 1.0f;
        mmm::write_pgm(recon, out_dir + "/" + name + ".pgm", scale);
      }
    }
    (void)spec;
  }
  for (const auto& [name, seq] : result.sequences) {
    out_doc["sequences"][name] = seq.ids;
    if (name == "caption") {
      try {
        mmm::WordVocab vocab(mmm::grammar_words(), data.registry.at("caption"));
        out_doc["caption_text"] = vocab.decode(seq, data.registry.at("caption"));
      } catch (const mmm::CodecError& e) {
        out_doc["caption_parse_error"] = e.what();
      }
    }
    if (name == "bbox") {
      try {
        json boxes = json::array();
        for (const auto& dec : mmm::decode_bboxes(seq, data.registry.at("bbox"))) {
          boxes.push_back({{"xmin", dec.box.xmin},
                           {"ymin", dec.box.ymin},
                           {"xmax", dec.box.xmax},
                           {"ymax", dec.box.ymax},
                           {"class_id", dec.box.class_id},
                           {"valid", dec.valid}});
        }
        out_doc["bboxes"] = boxes;
      } catch (const mmm::CodecError& e) {
        out_doc["bbox_parse_error"] = e.what();
      }
    }
  }

  // a shard is written only when every non-pixel modality is present
  bool complete = true;
  mmm::SampleTokens sample;
  for (const auto& spec : data.registry.modalities()) {
    if (spec.is_pixel()) continue;
    if (spec.is_dense()) {
      auto it = result.dense.find(spec.name);
      if (it == result.dense.end() || it->second.fixed_count() != spec.num_positions()) {
        complete = false;
        break;
      }
      sample.grids.push_back(mmm::TokenGrid{spec.name, it->second.ids});
    } else {
      auto it = result.sequences.find(spec.name);
      if (it == result.sequences.end()) {
        complete = false;
        break;
      }
      sample.seqs.push_back(it->second);
    }
  }
  if (complete) {
    mmm::write_shard({sample}, data.registry, out_dir + "/generated.shard");
  }
  std::ofstream(out_dir + "/generated.json") << out_doc.dump(2) << "\n";
  std::cout << "generated " << result.generated.size() << " modality(ies) into " << out_dir
            << (complete ? " (with shard)" : "") << "\n";
  return 0;
}

int cmd_transfer(const std::string& checkpoint, bool scratch_only, const std::string& task_name,
                 const std::string& data_dir, const std::string& out_path, std::uint64_t seed,
                 int num_samples, int phase1_steps, int phase2_steps) {
  LoadedData data = load_data_dir(data_dir);
  mmm::TransferTask task = mmm::transfer_task_from_string(task_name);

  // held-out task data generated from a seed stream the pretraining never saw
  const std::uint64_t task_seed = seed ^ 0x7472616e73666572ull;
  RawDataset raw = generate_raw(task_seed, num_samples, data.dataset_cfg);

  std::vector<mmm::Grid> task_grids;
  task_grids.reserve(raw.samples.size());
  for (const auto& s : raw.samples) task_grids.push_back(mmm::derive_transfer_task(s, task));

  const bool categorical = task != mmm::TransferTask::FlippedDepth;
  const int classes = task == mmm::TransferTask::Edges ? 2 : (mmm::num_shape_classes() + 1);
  mmm::CodebookConfig cb;
  cb.K = 32;
  cb.d = 16;
  mmm::Rng tok_rng = mmm::make_rng(task_seed, 0x70);
  mmm::GridTokenizer task_tok =
      mmm::GridTokenizer::make(task_name, data.dataset_cfg.patch, data.dataset_cfg.patch,
                               task_grids.front().c, categorical, classes, 96, cb, tok_rng);
  mmm::VqTrainConfig vq_cfg;
  vq_cfg.steps = 600;
  vq_cfg.seed = task_seed;
  mmm::train_tokenizer(task_tok, task_grids, vq_cfg);

  mmm::ModalitySpec task_spec;
  task_spec.name = task_name;
  task_spec.kind = mmm::ModalityKind::DenseGrid;
  task_spec.vocab_size = static_cast<std::uint32_t>(cb.K);
  task_spec.grid_h = task_grids.front().h / data.dataset_cfg.patch;
  task_spec.grid_w = task_grids.front().w / data.dataset_cfg.patch;

  std::vector<mmm::SampleTokens> tokenized;
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    mmm::SampleTokens s;
    s.grids.push_back(data.tokenizers.at("rgb").tokenize(raw.samples[i].rgb));
    s.grids.push_back(task_tok.tokenize(task_grids[i]));
    tokenized.push_back(std::move(s));
  }
  const std::size_t val_count = std::max<std::size_t>(1, tokenized.size() / 5);
  std::vector<mmm::SampleTokens> val(tokenized.end() - val_count, tokenized.end());
  tokenized.resize(tokenized.size() - val_count);

  mmm::TransferConfig cfg;
  cfg.phase1_steps = phase1_steps;
  cfg.phase2_steps = phase2_steps;
  cfg.seed = seed;

  json report;
  report["task"] = task_name;
  auto run_arm = [&](const std::string& arm, mmm::Model&& model) {
    mmm::TransferResult r = mmm::transfer_finetune(model, tokenized, val, "rgb", task_name, cfg);
    std::cout << arm << ": best val CE " << r.best_val_ce << " (initial " << r.initial_val_ce
              << ")\n";
    report[arm] = {{"best_val_ce", r.best_val_ce},
                   {"initial_val_ce", r.initial_val_ce},
                   {"measurements", r.measurements}};
  };

  if (!scratch_only) {
    mmm::LoadedModel loaded = mmm::load_model(checkpoint, data.registry);
    run_arm("pretrained", mmm::extend_model_with_modality(loaded.model, task_spec, seed));
  }
  {
    std::vector<mmm::ModalitySpec> specs = data.registry.modalities();
    specs.push_back(task_spec);
    mmm::Registry extended(specs);
    mmm::ModelConfig cfg_model =
        scratch_only ? mmm::ModelConfig() : mmm::load_model(checkpoint, data.registry).model.cfg;
    run_arm("scratch", mmm::Model::make(cfg_model, extended, seed));
  }
  if (report.contains("pretrained") && report.contains("scratch")) {
    double p = report["pretrained"]["best_val_ce"].get<double>();
    double s = report["scratch"]["best_val_ce"].get<double>();
    report["relative_gap"] = (s - p) / s;
  }
  if (!out_path.empty()) std::ofstream(out_path) << report.dump(2) << "\n";
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_inspect(const std::string& shard, const std::string& checkpoint,
                const std::string& tokenizer, const std::string& registry_path) {
  if (!shard.empty()) {
    std::ifstream in(shard, std::ios::binary);
    if (!in) throw mmm::LoadError("cannot open shard: " + shard);
    char magic[4];
    in.read(magic, 4);
    std::uint32_t version;
    in.read(reinterpret_cast<char*>(&version), 4);
    std::uint64_t hash, count;
    in.read(reinterpret_cast<char*>(&hash), 8);
    in.read(reinterpret_cast<char*>(&count), 8);
    std::cout << "shard " << shard << ": magic " << std::string(magic, 4) << " version "
              << version << " registry " << mmm::to_hex(hash) << " samples " << count << "\n";
  }
  if (!checkpoint.empty()) {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw mmm::LoadError("cannot open checkpoint: " + checkpoint);
    char magic[4];
    in.read(magic, 4);
    std::uint32_t version;
    in.read(reinterpret_cast<char*>(&version), 4);
    std::uint32_t len;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string cfg(len, '\0');
    in.read(cfg.data(), len);
    std::uint64_t hash;
    in.read(reinterpret_cast<char*>(&hash), 8);
    std::cout << "checkpoint " << checkpoint << ": magic " << std::string(magic, 4) << " version "
              << version << " registry " << mmm::to_hex(hash) << "\n  config " << cfg << "\n";
  }
  if (!tokenizer.empty()) {
    mmm::GridTokenizer tok = mmm::load_tokenizer(tokenizer);
    std::cout << "tokenizer " << tokenizer << ": modality " << tok.modality << " K "
              << tok.cb_cfg.K << " d " << tok.cb_cfg.d << " patch " << tok.patch_h << "x"
              << tok.patch_w << (tok.categorical ? " categorical" : "") << "\n";
  }
  if (!registry_path.empty()) {
    mmm::Registry reg = mmm::Registry::load(registry_path);
    std::cout << "registry " << registry_path << ": hash " << mmm::to_hex(reg.hash()) << ", "
              << reg.modalities().size() << " modalities\n";
    for (const auto& spec : reg.modalities()) {
      std::cout << "  " << spec.name << " (" << mmm::to_string(spec.kind) << ") vocab "
                << spec.vocab_size << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal masked modeling toolkit"};
  app.require_subcommand(1);

  // train-tokenizers
  auto* tt = app.add_subcommand("train-tokenizers", "train VQ tokenizers for dense modalities");
  std::string tt_out = "data", tt_modality = "all", tt_config;
  std::uint64_t tt_seed = 0;
  int tt_samples = 512, tt_steps = 1200;
  tt->add_option("--out", tt_out, "output directory");
  tt->add_option("--seed", tt_seed, "rng seed");
  tt->add_option("--num-samples", tt_samples, "scenes to generate for training");
  tt->add_option("--steps", tt_steps, "optimization steps per tokenizer");
  tt->add_option("--modality", tt_modality, "one of rgb/depth/seg/feat or 'all'");
  tt->add_option("--config", tt_config, "dataset config JSON");

  // build-data
  auto* bd = app.add_subcommand("build-data", "generate scenes and write token shards");
  std::string bd_out = "data", bd_tok = "data";
  std::uint64_t bd_seed = 0;
  int bd_samples = 1000, bd_shard = 1000;
  double bd_val = 0.1;
  bd->add_option("--out", bd_out, "output directory");
  bd->add_option("--tokenizers", bd_tok, "directory holding dataset.json and tokenizers/");
  bd->add_option("--seed", bd_seed, "rng seed");
  bd->add_option("--num-samples", bd_samples, "total scenes");
  bd->add_option("--val-fraction", bd_val, "validation split fraction");
  bd->add_option("--shard-size", bd_shard, "samples per shard");

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "run the masked pre-training loop");
  std::string pt_config;
  pt->add_option("--config", pt_config, "training config JSON")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "conditional cross-entropy evaluation");
  std::string ev_ckpt, ev_manifest, ev_out = "eval_report.json";
  int ev_limit = 0;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--out", ev_out);
  ev->add_option("--limit", ev_limit, "cap validation samples (0 = all)");

  // generate
  auto* gen = app.add_subcommand("generate", "schedule-driven generation");
  std::string g_ckpt, g_schedule, g_cond, g_data = "data", g_out = "generated";
  std::uint64_t g_seed = 0;
  gen->add_option("--checkpoint", g_ckpt)->required();
  gen->add_option("--schedule", g_schedule)->required();
  gen->add_option("--conditioning", g_cond, "conditioning JSON");
  gen->add_option("--data", g_data, "data directory (registry + tokenizers)");
  gen->add_option("--out", g_out);
  gen->add_option("--seed", g_seed);

  // transfer
  auto* tr = app.add_subcommand("transfer", "new-modality transfer benchmark");
  std::string tr_ckpt, tr_task = "edges", tr_data = "data", tr_out = "transfer_report.json";
  bool tr_scratch = false;
  std::uint64_t tr_seed = 0;
  int tr_samples = 400, tr_p1 = 100, tr_p2 = 300;
  tr->add_option("--checkpoint", tr_ckpt, "pretrained checkpoint (omit with --scratch)");
  tr->add_flag("--scratch", tr_scratch, "run only the from-scratch arm");
  tr->add_option("--task", tr_task, "edges | flipped-depth | coarse-seg");
  tr->add_option("--data", tr_data);
  tr->add_option("--out", tr_out);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--num-samples", tr_samples);
  tr->add_option("--phase1-steps", tr_p1);
  tr->add_option("--phase2-steps", tr_p2);

  // inspect
  auto* ins = app.add_subcommand("inspect", "print file headers");
  std::string in_shard, in_ckpt, in_tok, in_reg;
  ins->add_option("--shard", in_shard);
  ins->add_option("--checkpoint", in_ckpt);
  ins->add_option("--tokenizer", in_tok);
  ins->add_option("--registry", in_reg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tt->parsed()) {
      return cmd_train_tokenizers(tt_out, tt_seed, tt_samples, tt_steps, tt_modality, tt_config);
    }
    if (bd->parsed()) return cmd_build_data(bd_out, bd_tok, bd_seed, bd_samples, bd_val, bd_shard);
    if (pt->parsed()) return cmd_pretrain(pt_config);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_manifest, ev_out, ev_limit);
    if (gen->parsed()) return cmd_generate(g_ckpt, g_schedule, g_cond, g_data, g_out, g_seed);
    if (tr->parsed()) {
      if (tr_ckpt.empty() && !tr_scratch) {
        throw mmm::ConfigError("transfer needs --checkpoint or --scratch");
      }
      return cmd_transfer(tr_ckpt, tr_scratch, tr_task, tr_data, tr_out, tr_seed, tr_samples,
                          tr_p1, tr_p2);
    }
    if (ins->parsed()) return cmd_inspect(in_shard, in_ckpt, in_tok, in_reg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
