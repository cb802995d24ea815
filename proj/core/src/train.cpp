#include "mmm/train.hpp"

#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace mmm {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (total_tokens < 1) throw ConfigError("total_tokens must be positive");
  if (warmup_tokens < 0 || warmup_tokens > total_tokens) {
    throw ConfigError("warmup_tokens must lie in [0, total_tokens]");
  }
  if (num_repeats < 1) throw ConfigError("num_repeats must be >= 1");
  if (repeat_buffer_size < 1) throw ConfigError("repeat_buffer_size must be >= 1");
  if (lr_scale_base < 1) throw ConfigError("lr_scale_base must be positive");
}

std::string TrainConfig::to_json() const {
  json doc{{"base_lr", base_lr},
           {"batch_size", batch_size},
           {"warmup_tokens", warmup_tokens},
           {"total_tokens", total_tokens},
           {"weight_decay", weight_decay},
           {"betas", {beta1, beta2}},
           {"num_repeats", num_repeats},
           {"repeat_buffer_size", repeat_buffer_size},
           {"seed", seed},
           {"checkpoint_every_tokens", checkpoint_every_tokens},
           {"checkpoint_dir", checkpoint_dir},
           {"metrics_path", metrics_path},
           {"num_threads", num_threads},
           {"lr_scale_base", lr_scale_base}};
  if (grad_clip) doc["grad_clip"] = *grad_clip;
  return doc.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json doc = json::parse(text);
  TrainConfig cfg;
  cfg.base_lr = doc.at("base_lr").get<double>();
  cfg.batch_size = doc.at("batch_size").get<int>();
  cfg.warmup_tokens = doc.at("warmup_tokens").get<std::int64_t>();
  cfg.total_tokens = doc.at("total_tokens").get<std::int64_t>();
  cfg.weight_decay = doc.value("weight_decay", 0.05);
  if (doc.contains("betas")) {
    cfg.beta1 = doc.at("betas").at(0).get<double>();
    cfg.beta2 = doc.at("betas").at(1).get<double>();
  }
  if (doc.contains("grad_clip") && !doc.at("grad_clip").is_null()) {
    cfg.grad_clip = doc.at("grad_clip").get<double>();
  }
  cfg.num_repeats = doc.value("num_repeats", 4);
  cfg.repeat_buffer_size = doc.value("repeat_buffer_size", 256);
  cfg.seed = doc.value("seed", static_cast<std::uint64_t>(0));
  cfg.checkpoint_every_tokens = doc.value("checkpoint_every_tokens", static_cast<std::int64_t>(0));
  cfg.checkpoint_dir = doc.value("checkpoint_dir", std::string());
  cfg.metrics_path = doc.value("metrics_path", std::string());
  cfg.num_threads = doc.value("num_threads", 0);
  cfg.lr_scale_base = doc.value("lr_scale_base", 256);
  cfg.validate();
  return cfg;
}

double lr_at(std::int64_t tokens_seen, const TrainConfig& cfg) {
  const double peak = cfg.base_lr * cfg.batch_size / static_cast<double>(cfg.lr_scale_base);
  return warmup_cosine_lr(peak, tokens_seen, cfg.warmup_tokens, cfg.total_tokens);
}

std::int64_t account_tokens(const std::vector<MaskedSample>& batch) {
  std::int64_t total = 0;
  for (const auto& s : batch) total += s.input_token_count() + s.target_token_count();
  return total;
}

RepeatBuffer::RepeatBuffer(std::int64_t stream_length, int num_repeats, int buffer_size,
                           std::uint64_t seed, bool cycle)
    : stream_length_(stream_length),
      num_repeats_(num_repeats),
      capacity_(buffer_size),
      cycle_(cycle),
      rng_(make_rng(seed, 0xb0f)) {
  if (buffer_size < 1) throw ConfigError("repeat buffer size must be >= 1");
  if (num_repeats < 1) throw ConfigError("num_repeats must be >= 1");
  fill();
}

void RepeatBuffer::fill() {
  while (static_cast<int>(slots_.size()) < capacity_) {
    if (!cycle_ && next_pos_ >= stream_length_) break;
    slots_.emplace_back(next_pos_++, 0);
  }
}

std::optional<std::int64_t> RepeatBuffer::next() {
  if (slots_.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, slots_.size() - 1);
  std::size_t i = pick(rng_);
  std::int64_t pos = slots_[i].first;
  if (++slots_[i].second >= num_repeats_) {
    if (cycle_ || next_pos_ < stream_length_) {
      slots_[i] = {next_pos_++, 0};
    } else {
      slots_.erase(slots_.begin() + static_cast<std::ptrdiff_t>(i));
    }
  }
  return pos;
}

std::string RepeatBuffer::serialize() const {
  std::ostringstream out;
  out << slots_.size() << ' ';
  for (const auto& [pos, count] : slots_) out << pos << ' ' << count << ' ';
  out << next_pos_ << ' ' << rng_;
  return out.str();
}

void RepeatBuffer::restore(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  in >> n;
  slots_.assign(n, {0, 0});
  for (auto& [pos, count] : slots_) in >> pos >> count;
  in >> next_pos_ >> rng_;
  if (!in) throw LoadError("corrupt repeat-buffer state");
}

ad::Mat<float> pack_bytes(const std::string& bytes) {
  ad::Mat<float> m(1, static_cast<Eigen::Index>(bytes.size()));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    m(0, static_cast<Eigen::Index>(i)) = static_cast<float>(static_cast<unsigned char>(bytes[i]));
  }
  return m;
}

std::string unpack_bytes(const ad::Mat<float>& m) {
  std::string s(static_cast<std::size_t>(m.size()), '\0');
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    s[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(m(0, i)));
  }
  return s;
}

namespace {

struct Pipeline {
  const std::vector<SampleTokens>* dataset;
  const Registry* registry;
  const MaskConfig* mask_cfg;
  RepeatBuffer buffer;
  std::int64_t emission_counter = 0;
  std::uint64_t seed = 0;

  MaskedSample next() {
    auto pos = buffer.next();
    if (!pos) throw ContractError("data stream exhausted");
    const SampleTokens& sample = (*dataset)[static_cast<std::size_t>(*pos % dataset->size())];
    Rng rng = make_rng(seed, 0x5a5a0000ull ^ static_cast<std::uint64_t>(emission_counter++));
    return build_masked_sample(sample, *registry, *mask_cfg, rng);
  }

  json state() const {
    return json{{"buffer", buffer.serialize()}, {"emissions", emission_counter}};
  }
  void restore(const json& doc) {
    buffer.restore(doc.at("buffer").get<std::string>());
    emission_counter = doc.at("emissions").get<std::int64_t>();
  }
};

void save_training_checkpoint(const Model& model, const AdamW<float>& opt,
                              const TokensSeenCounter& counter, std::int64_t step,
                              const Pipeline& pipe, const std::string& path) {
  std::vector<std::pair<std::string, ad::Mat<float>>> extra;
  for (std::size_t i = 0; i < model.params.entries.size(); ++i) {
    extra.emplace_back("opt.m." + model.params.entries[i].name, opt.m[i]);
    extra.emplace_back("opt.v." + model.params.entries[i].name, opt.v[i]);
  }
  json state{{"step", step},
             {"tokens_seen", counter.tokens_seen},
             {"samples_seen", counter.samples_seen},
             {"opt_t", opt.t},
             {"pipeline", pipe.state()}};
  extra.emplace_back("train.state", pack_bytes(state.dump()));
  save_model(model, path, extra);
}

}  // namespace

TrainResult train(Model& model, const std::vector<SampleTokens>& dataset, const TrainConfig& tcfg,
                  const MaskConfig& mcfg, const std::string& resume_path) {
  tcfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");

  AdamW<float> opt;
  opt.beta1 = tcfg.beta1;
  opt.beta2 = tcfg.beta2;
  opt.weight_decay = tcfg.weight_decay;
  opt.init(model.params);

  Pipeline pipe{&dataset, &model.registry, &mcfg,
                RepeatBuffer(std::numeric_limits<std::int64_t>::max() / 2, tcfg.num_repeats,
                             tcfg.repeat_buffer_size, tcfg.seed, /*cycle=*/true),
                0, tcfg.seed};

  TrainResult result;
  std::int64_t step = 0;

  if (!resume_path.empty()) {
    LoadedModel loaded = load_model(resume_path, model.registry);
    model = std::move(loaded.model);
    auto it = loaded.extra.find("train.state");
    if (it == loaded.extra.end()) throw LoadError("checkpoint has no training state");
    json state = json::parse(unpack_bytes(it->second));
    step = state.at("step").get<std::int64_t>();
    result.counter.tokens_seen = state.at("tokens_seen").get<std::int64_t>();
    result.counter.samples_seen = state.at("samples_seen").get<std::int64_t>();
    opt.t = state.at("opt_t").get<std::int64_t>();
    pipe.restore(state.at("pipeline"));
    for (std::size_t i = 0; i < model.params.entries.size(); ++i) {
      const auto& name = model.params.entries[i].name;
      opt.m[i] = loaded.extra.at("opt.m." + name);
      opt.v[i] = loaded.extra.at("opt.v." + name);
    }
  }

  std::ofstream metrics_out;
  if (!tcfg.metrics_path.empty()) {
    metrics_out.open(tcfg.metrics_path, step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics_out) throw LoadError("cannot open metrics file: " + tcfg.metrics_path);
  }
  const std::int64_t ckpt_every =
      tcfg.checkpoint_every_tokens > 0 ? tcfg.checkpoint_every_tokens : tcfg.total_tokens / 20;
  std::int64_t next_ckpt = ckpt_every > 0 ? ((result.counter.tokens_seen / ckpt_every) + 1) * ckpt_every
                                          : tcfg.total_tokens;

  int threads = tcfg.num_threads > 0
                    ? tcfg.num_threads
                    : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, tcfg.batch_size);

  std::vector<ad::Mat<float>> grads = model.params.zeros_like();

  while (result.counter.tokens_seen < tcfg.total_tokens) {
    std::vector<MaskedSample> masked;
    masked.reserve(tcfg.batch_size);
    for (int b = 0; b < tcfg.batch_size; ++b) masked.push_back(pipe.next());
    std::vector<BatchItem> batch;
    batch.reserve(masked.size());
    for (const auto& m : masked) batch.push_back(batch_item_from_masked_sample(m, model.registry));

    result.counter.tokens_seen += account_tokens(masked);
    result.counter.samples_seen += tcfg.batch_size;
    ++step;

    // contiguous per-thread chunks; gradients reduced in thread order so the
    // result is deterministic for a fixed thread count
    std::vector<std::vector<ad::Mat<float>>> thread_grads(threads);
    std::vector<LossBreakdown> thread_stats(threads);
    std::vector<int> chunk_sizes(threads);
    {
      std::vector<std::thread> workers;
      int base = tcfg.batch_size / threads, rem = tcfg.batch_size % threads;
      int at = 0;
      for (int t = 0; t < threads; ++t) {
        int len = base + (t < rem ? 1 : 0);
        chunk_sizes[t] = len;
        workers.emplace_back([&, t, at, len]() {
          if (len == 0) {
            thread_grads[t] = model.params.zeros_like();
            return;
          }
          std::vector<BatchItem> chunk(batch.begin() + at, batch.begin() + at + len);
          ad::Tape<float> tape(&model.params);
          ForwardOutT<float> fwd = model.forward_train(tape, chunk, LossMode::PerModality);
          tape.backward(fwd.loss);
          thread_grads[t] = model.params.zeros_like();
          tape.accumulate_param_grads(thread_grads[t]);
          thread_stats[t] = fwd.stats;
        });
        at += len;
      }
      for (auto& w : workers) w.join();
    }

    for (auto& g : grads) g.setZero();
    double loss = 0;
    std::map<std::string, std::pair<double, std::int64_t>> mod_acc;
    for (int t = 0; t < threads; ++t) {
      if (chunk_sizes[t] == 0) continue;
      float w = static_cast<float>(chunk_sizes[t]) / static_cast<float>(tcfg.batch_size);
      for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += thread_grads[t][i] * w;
      loss += thread_stats[t].total * w;
      for (const auto& [name, ce] : thread_stats[t].per_modality) {
        auto& acc = mod_acc[name];
        std::int64_t n = thread_stats[t].per_modality_counts.at(name);
        acc.first += ce * static_cast<double>(n);
        acc.second += n;
      }
    }

    if (!std::isfinite(loss)) {
      if (!tcfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(tcfg.checkpoint_dir);
        save_training_checkpoint(model, opt, result.counter, step, pipe,
                                 tcfg.checkpoint_dir + "/diagnostic.ckpt");
      }
      throw NumericError("training loss not finite at step " + std::to_string(step));
    }

    if (tcfg.grad_clip) {
      double sq = 0;
      for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
      double norm = std::sqrt(sq);
      if (norm > *tcfg.grad_clip && norm > 0) {
        float s = static_cast<float>(*tcfg.grad_clip / norm);
        for (auto& g : grads) g *= s;
      }
    }

    double lr = lr_at(result.counter.tokens_seen, tcfg);
    opt.step(model.params, grads, lr);

    StepRecord rec;
    rec.step = step;
    rec.tokens_seen = result.counter.tokens_seen;
    rec.lr = lr;
    rec.loss = loss;
    for (const auto& [name, acc] : mod_acc) {
      rec.per_modality[name] = acc.first / static_cast<double>(acc.second);
    }
    if (metrics_out.is_open()) {
      json line{{"step", rec.step},
                {"tokens_seen", rec.tokens_seen},
                {"lr", rec.lr},
                {"loss", rec.loss},
                {"per_modality", rec.per_modality}};
      metrics_out << line.dump() << "\n";
    }
    result.metrics.push_back(std::move(rec));

    if (!tcfg.checkpoint_dir.empty() && result.counter.tokens_seen >= next_ckpt) {
      std::filesystem::create_directories(tcfg.checkpoint_dir);
      save_training_checkpoint(model, opt, result.counter, step, pipe,
                               tcfg.checkpoint_dir + "/ckpt_" +
                                   std::to_string(result.counter.tokens_seen) + ".ckpt");
      next_ckpt += ckpt_every;
    }
  }

  result.steps = step;
  if (!tcfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(tcfg.checkpoint_dir);
    save_training_checkpoint(model, opt, result.counter, step, pipe,
                             tcfg.checkpoint_dir + "/final.ckpt");
  }
  if (metrics_out.is_open()) metrics_out.flush();
  return result;
}

}  // namespace mmm
