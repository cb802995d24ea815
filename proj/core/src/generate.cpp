#include "mmm/generate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mmm {

using nlohmann::json;

std::string to_string(DecodingScheme s) {
  switch (s) {
    case DecodingScheme::MaskGit: return "maskgit";
    case DecodingScheme::Roar: return "roar";
    case DecodingScheme::Autoregressive: return "autoregressive";
  }
  throw ContractError("unknown decoding scheme");
}

DecodingScheme decoding_scheme_from_string(const std::string& s) {
  if (s == "maskgit") return DecodingScheme::MaskGit;
  if (s == "roar") return DecodingScheme::Roar;
  if (s == "autoregressive") return DecodingScheme::Autoregressive;
  throw ConfigError("unknown decoding scheme: " + s);
}

std::string GenerationSchedule::to_json() const {
  json doc;
  doc["steps"] = json::array();
  for (const auto& step : steps) {
    json s{{"target_modality", step.target_modality},
           {"scheme", to_string(step.scheme)},
           {"iterations", step.iterations},
           {"roar_step", step.roar_step},
           {"temperature", step.sampling.temperature},
           {"max_len", step.max_len}};
    if (!step.plan.empty()) s["plan"] = step.plan;
    if (step.sampling.top_k) s["top_k"] = *step.sampling.top_k;
    if (step.sampling.top_p) s["top_p"] = *step.sampling.top_p;
    if (step.guidance) {
      json conds = json::array();
      for (const auto& c : step.guidance->conditions) {
        conds.push_back({{"modalities", c.modalities}, {"weight", c.weight}});
      }
      s["guidance"] = {{"conditions", conds}};
    }
    doc["steps"].push_back(std::move(s));
  }
  return doc.dump(2);
}

GenerationSchedule GenerationSchedule::from_json(const std::string& text) {
  json doc = json::parse(text);
  GenerationSchedule schedule;
  for (const auto& s : doc.at("steps")) {
    GenerationStep step;
    step.target_modality = s.at("target_modality").get<std::string>();
    step.scheme = decoding_scheme_from_string(s.at("scheme").get<std::string>());
    step.iterations = s.value("iterations", 8);
    step.roar_step = s.value("roar_step", 1);
    step.sampling.temperature = s.value("temperature", 1.0);
    if (s.contains("plan")) step.plan = s.at("plan").get<std::vector<int>>();
    if (s.contains("top_k") && !s.at("top_k").is_null()) {
      step.sampling.top_k = s.at("top_k").get<int>();
    }
    if (s.contains("top_p") && !s.at("top_p").is_null()) {
      step.sampling.top_p = s.at("top_p").get<double>();
    }
    step.max_len = s.value("max_len", 0);
    if (s.contains("guidance") && !s.at("guidance").is_null()) {
      GuidanceSpec g;
      for (const auto& c : s.at("guidance").at("conditions")) {
        g.conditions.push_back(
            {c.at("modalities").get<std::vector<std::string>>(), c.at("weight").get<double>()});
      }
      if (g.conditions.empty()) throw ConfigError("guidance requires at least one condition");
      step.guidance = std::move(g);
    }
    schedule.steps.push_back(std::move(step));
  }
  return schedule;
}

GenerationSchedule GenerationSchedule::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open schedule: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

int DenseState::fixed_count() const {
  return static_cast<int>(std::count(fixed.begin(), fixed.end(), true));
}

std::vector<int> DenseState::masked_positions() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (!fixed[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

void DecodingState::set_full_grid(const TokenGrid& grid, const Registry& registry) {
  registry.validate_grid(grid);
  DenseState ds;
  ds.ids = grid.ids;
  ds.fixed.assign(grid.ids.size(), true);
  dense[grid.modality] = std::move(ds);
}

void DecodingState::set_sequence(const TokenSeq& seq) { sequences[seq.modality] = seq; }

void DecodingState::init_masked(const std::string& modality, const Registry& registry) {
  const ModalitySpec& spec = registry.at(modality);
  if (!spec.is_dense()) throw ContractError("init_masked is for dense modalities");
  DenseState ds;
  ds.ids.assign(spec.num_positions(), 0);
  ds.fixed.assign(spec.num_positions(), false);
  dense[modality] = std::move(ds);
}

ad::Mat<float> guided_logits(const ad::Mat<float>& uncond,
                             const std::vector<ad::Mat<float>>& conds,
                             const std::vector<double>& weights) {
  if (conds.size() != weights.size()) {
    throw ContractError("guided_logits: conditions and weights must pair up");
  }
  ad::Mat<float> out = uncond;
  for (std::size_t i = 0; i < conds.size(); ++i) {
    if (conds[i].rows() != uncond.rows() || conds[i].cols() != uncond.cols()) {
      throw ContractError("guided_logits: logits shape mismatch");
    }
    out += static_cast<float>(weights[i]) * (conds[i] - uncond);
  }
  return out;
}

SampledToken sample_token(const Eigen::RowVectorXf& logits, const SamplingParams& params,
                          Rng& rng) {
  if (!logits.allFinite()) throw NumericError("sample_token: non-finite logits");
  const int v = static_cast<int>(logits.size());
  if (v == 0) throw ContractError("sample_token: empty logits");

  std::vector<int> order(v);
  for (int i = 0; i < v; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits(a) > logits(b); });

  if (params.temperature <= 0.0) {
    return {static_cast<TokenId>(order[0]), 1.0};
  }

  int keep = v;
  if (params.top_k) keep = std::min(keep, std::max(1, *params.top_k));

  // softmax over the kept prefix at the given temperature
  std::vector<double> probs(keep);
  double max_l = logits(order[0]) / params.temperature;
  double total = 0;
  for (int i = 0; i < keep; ++i) {
    probs[i] = std::exp(logits(order[i]) / params.temperature - max_l);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;

  if (params.top_p) {
    double p_limit = std::clamp(*params.top_p, 0.0, 1.0);
    double cum = 0;
    int nucleus = 0;
    for (int i = 0; i < keep; ++i) {
      cum += probs[i];
      nucleus = i + 1;
      if (cum >= p_limit) break;  // the top-1 token always survives
    }
    keep = nucleus;
    double renorm = 0;
    for (int i = 0; i < keep; ++i) renorm += probs[i];
    for (int i = 0; i < keep; ++i) probs[i] /= renorm;
  }

  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0;
  int chosen = keep - 1;
  for (int i = 0; i < keep; ++i) {
    cum += probs[i];
    if (u < cum) {
      chosen = i;
      break;
    }
  }
  return {static_cast<TokenId>(order[chosen]), probs[chosen]};
}

std::vector<int> cosine_plan(int total, int iterations) {
  if (total < 0 || iterations < 1) throw ContractError("cosine_plan: bad arguments");
  std::vector<double> weights(iterations);
  double wsum = 0;
  for (int t = 1; t <= iterations; ++t) {
    weights[t - 1] = (std::cos(M_PI * t / iterations - M_PI) + 1.0) / 2.0;
    wsum += weights[t - 1];
  }
  std::vector<int> plan(iterations, 0);
  std::vector<double> raw(iterations);
  int assigned = 0;
  for (int t = 0; t < iterations; ++t) {
    raw[t] = weights[t] / wsum * total;
    plan[t] = static_cast<int>(std::floor(raw[t]));
    assigned += plan[t];
  }
  std::vector<int> order(iterations);
  for (int t = 0; t < iterations; ++t) order[t] = t;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return raw[a] - std::floor(raw[a]) > raw[b] - std::floor(raw[b]);
  });
  for (int i = 0; i < total - assigned; ++i) ++plan[order[i]];
  std::vector<int> compact;
  for (int n : plan) {
    if (n > 0) compact.push_back(n);
  }
  return compact;
}

namespace {

// Encoder view of the current state, restricted to `only` when given. The
// target modality's already-fixed tokens ride along in every pass.
std::vector<EncItem> state_enc_items(const DecodingState& state, const Registry& registry,
                                     const std::vector<std::string>* only,
                                     const std::string& always_include) {
  auto wanted = [&](const std::string& name) {
    if (name == always_include) return true;
    if (!only) return true;
    return std::find(only->begin(), only->end(), name) != only->end();
  };
  std::vector<EncItem> items;
  for (const auto& [name, ds] : state.dense) {
    if (!wanted(name) || ds.fixed_count() == 0) continue;
    EncItem e;
    e.modality = name;
    for (std::size_t i = 0; i < ds.fixed.size(); ++i) {
      if (ds.fixed[i]) {
        e.positions.push_back(static_cast<int>(i));
        e.ids.push_back(ds.ids[i]);
      }
    }
    items.push_back(std::move(e));
  }
  for (const auto& [name, seq] : state.sequences) {
    if (!wanted(name) || seq.ids.empty()) continue;
    EncItem e;
    e.modality = name;
    e.ids = seq.ids;
    e.is_seq = true;
    items.push_back(std::move(e));
  }
  for (const auto& [name, px] : state.pixels) {
    if (!wanted(name)) continue;
    EncItem e;
    e.modality = name;
    e.positions = px.positions;
    e.patches = px.patches;
    items.push_back(std::move(e));
  }
  (void)registry;
  return items;
}

// One decoder pass; returns the logits matrix for the single decoder group.
ad::Mat<float> run_pass(const Model& model, std::vector<EncItem> enc, const BatchItem& query) {
  BatchItem item = query;
  item.enc = std::move(enc);
  ad::Tape<float> tape(&model.params);
  BuiltBatchT<float> built = model.build(tape, {item});
  if (built.groups.empty()) throw ContractError("decode pass produced no decoder group");
  return tape.val(model.group_logits(tape, built, 0));
}

ad::Mat<float> decode_logits(const Model& model, const DecodingState& state,
                             const std::string& target, const BatchItem& query,
                             const std::optional<GuidanceSpec>& guidance) {
  if (!guidance) {
    return run_pass(model, state_enc_items(state, model.registry, nullptr, target), query);
  }
  // guidance extrapolates each condition from a shared unconditional pass;
  // the target's fixed tokens stay visible in every branch
  std::vector<std::string> none;
  ad::Mat<float> uncond =
      run_pass(model, state_enc_items(state, model.registry, &none, target), query);
  std::vector<ad::Mat<float>> conds;
  std::vector<double> weights;
  for (const auto& c : guidance->conditions) {
    conds.push_back(
        run_pass(model, state_enc_items(state, model.registry, &c.modalities, target), query));
    weights.push_back(c.weight);
  }
  return guided_logits(uncond, conds, weights);
}

int guidance_passes(const std::optional<GuidanceSpec>& guidance) {
  return guidance ? 1 + static_cast<int>(guidance->conditions.size()) : 1;
}

}  // namespace

TokenGrid maskgit_decode(DecodingState& state, const std::string& modality,
                         const std::vector<int>& plan, const Model& model,
                         const SamplingParams& sampling,
                         const std::optional<GuidanceSpec>& guidance, Rng& rng,
                         StepTrace* trace) {
  const ModalitySpec& spec = model.registry.at(modality);
  if (!spec.is_dense()) throw ContractError("maskgit_decode requires a dense modality");
  auto it = state.dense.find(modality);
  if (it == state.dense.end()) {
    state.init_masked(modality, model.registry);
    it = state.dense.find(modality);
  }
  DenseState& ds = it->second;

  int masked = static_cast<int>(ds.masked_positions().size());
  int plan_sum = 0;
  for (int n : plan) plan_sum += n;
  if (plan_sum != masked) {
    throw ContractError("maskgit plan sums to " + std::to_string(plan_sum) + " but " +
                        std::to_string(masked) + " positions are masked");
  }

  for (int n : plan) {
    std::vector<int> positions = ds.masked_positions();
    BatchItem query;
    query.dense_dec.push_back(DecDenseItem{modality, positions, {}});
    ad::Mat<float> logits = decode_logits(model, state, modality, query, guidance);
    if (trace) trace->model_calls += guidance_passes(guidance);

    std::vector<SampledToken> sampled(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      sampled[i] = sample_token(logits.row(static_cast<Eigen::Index>(i)), sampling, rng);
    }
    // keep the n most confident, ties broken by position index
    std::vector<std::size_t> order(positions.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sampled[a].confidence > sampled[b].confidence;
    });
    for (int i = 0; i < n; ++i) {
      std::size_t pick = order[static_cast<std::size_t>(i)];
      ds.ids[positions[pick]] = sampled[pick].id;
      ds.fixed[positions[pick]] = true;
    }
    if (trace) trace->fixed_counts.push_back(ds.fixed_count());
  }

  TokenGrid out;
  out.modality = modality;
  out.ids = ds.ids;
  return out;
}

TokenGrid roar_decode(DecodingState& state, const std::string& modality, int step_size,
                      const Model& model, const SamplingParams& sampling,
                      const std::optional<GuidanceSpec>& guidance, Rng& rng, StepTrace* trace) {
  const ModalitySpec& spec = model.registry.at(modality);
  if (!spec.is_dense()) throw ContractError("roar_decode requires a dense modality");
  if (step_size < 1) throw ContractError("roar_decode: step size must be >= 1");
  auto it = state.dense.find(modality);
  if (it == state.dense.end()) {
    state.init_masked(modality, model.registry);
    it = state.dense.find(modality);
  }
  DenseState& ds = it->second;

  while (true) {
    std::vector<int> masked = ds.masked_positions();
    if (masked.empty()) break;
    int n = std::min<int>(step_size, static_cast<int>(masked.size()));
    // randomly select n still-masked positions and decode only those
    std::vector<int> subset = mask_dense(static_cast<int>(masked.size()), n, rng);
    std::vector<int> positions;
    for (int s : subset) positions.push_back(masked[s]);

    BatchItem query;
    query.dense_dec.push_back(DecDenseItem{modality, positions, {}});
    ad::Mat<float> logits = decode_logits(model, state, modality, query, guidance);
    if (trace) trace->model_calls += guidance_passes(guidance);

    for (std::size_t i = 0; i < positions.size(); ++i) {
      SampledToken tok = sample_token(logits.row(static_cast<Eigen::Index>(i)), sampling, rng);
      ds.ids[positions[i]] = tok.id;
      ds.fixed[positions[i]] = true;
    }
    if (trace) trace->fixed_counts.push_back(ds.fixed_count());
  }

  TokenGrid out;
  out.modality = modality;
  out.ids = ds.ids;
  return out;
}

SeqResult autoregressive_decode(DecodingState& state, const std::string& modality,
                                const Model& model, const SamplingParams& sampling,
                                const std::optional<GuidanceSpec>& guidance, Rng& rng,
                                int max_len) {
  const ModalitySpec& spec = model.registry.at(modality);
  if (!spec.is_sequence()) throw ContractError("autoregressive_decode requires a sequence modality");
  const TokenId eos = static_cast<TokenId>(spec.special("eos"));
  const IdBlock& sentinels = spec.block("sentinel");
  const int cap = max_len > 0 ? max_len : spec.max_seq_len;

  // a fully masked sequence is a lone sentinel; content follows it
  std::vector<TokenId> prefix = {static_cast<TokenId>(sentinels.begin)};
  SeqResult result;
  result.seq.modality = modality;

  while (static_cast<int>(result.seq.ids.size()) < cap) {
    BatchItem query;
    query.seq_dec.push_back(DecSeqItem{modality, prefix, false});
    ad::Mat<float> logits = decode_logits(model, state, modality, query, guidance);
    SampledToken tok =
        sample_token(logits.row(logits.rows() - 1), sampling, rng);  // next-token slot
    if (tok.id == eos) {
      result.seq.ids.push_back(eos);
      result.terminated = true;
      break;
    }
    if (sentinels.contains(tok.id)) break;  // span closed without EOS
    result.seq.ids.push_back(tok.id);
    prefix.push_back(tok.id);
  }
  return result;
}

DecodingState chained_generate(const DecodingState& conditioning,
                               const GenerationSchedule& schedule, const Model& model, Rng& rng) {
  DecodingState state = conditioning;
  std::set<std::string> given;
  for (const auto& [name, ds] : conditioning.dense) {
    if (ds.fixed_count() == static_cast<int>(ds.fixed.size())) given.insert(name);
  }
  for (const auto& [name, seq] : conditioning.sequences) given.insert(name);

  for (const auto& step : schedule.steps) {
    if (given.count(step.target_modality)) {
      throw ContractError("schedule regenerates fully given modality " + step.target_modality);
    }
    // chained guidance: previously generated modalities join the guided set
    std::optional<GuidanceSpec> guidance = step.guidance;
    if (guidance) {
      for (const auto& done : state.generated) {
        guidance->conditions.push_back({{done}, 1.0});
      }
    }
    switch (step.scheme) {
      case DecodingScheme::MaskGit: {
        const ModalitySpec& spec = model.registry.at(step.target_modality);
        auto it = state.dense.find(step.target_modality);
        int masked = it == state.dense.end()
                         ? spec.num_positions()
                         : static_cast<int>(it->second.masked_positions().size());
        std::vector<int> plan =
            step.plan.empty() ? cosine_plan(masked, step.iterations) : step.plan;
        maskgit_decode(state, step.target_modality, plan, model, step.sampling, guidance, rng);
        break;
      }
      case DecodingScheme::Roar:
        roar_decode(state, step.target_modality, step.roar_step, model, step.sampling, guidance,
                    rng);
        break;
      case DecodingScheme::Autoregressive: {
        SeqResult r = autoregressive_decode(state, step.target_modality, model, step.sampling,
                                            guidance, rng, step.max_len);
        state.set_sequence(r.seq);
        break;
      }
    }
    state.generated.push_back(step.target_modality);
  }
  return state;
}

}  // namespace mmm
