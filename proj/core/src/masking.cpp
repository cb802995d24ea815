#include "mmm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace mmm {

void MaskConfig::validate() const {
  if (budget_input < 1 || budget_target < 1) throw ConfigError("budgets must be positive");
  if (!(alpha_input > 0) || !(alpha_target > 0)) throw ConfigError("alpha must be positive");
  if (strategies.empty()) throw ConfigError("at least one masking strategy required");
  double total = 0;
  for (const auto& s : strategies) {
    if (s.probability < 0) throw ConfigError("strategy probability must be non-negative");
    if (s.input_modalities.empty()) throw ConfigError("strategy needs input modalities");
    total += s.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("strategy probabilities must sum to 1");
}

std::string MaskConfig::to_json() const {
  nlohmann::json strategies_json = nlohmann::json::array();
  for (const auto& s : strategies) {
    strategies_json.push_back({{"name", s.name},
                               {"probability", s.probability},
                               {"input_modalities", s.input_modalities}});
  }
  auto alpha_field = [](double a) {
    return std::isinf(a) ? nlohmann::json("inf") : nlohmann::json(a);
  };
  nlohmann::json doc{{"alpha_input", alpha_field(alpha_input)},
                     {"alpha_target", alpha_field(alpha_target)},
                     {"budget_input", budget_input},
                     {"budget_target", budget_target},
                     {"strategies", strategies_json}};
  return doc.dump();
}

MaskConfig MaskConfig::from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  MaskConfig cfg;
  auto alpha = [](const nlohmann::json& v) {
    if (v.is_string() && (v.get<std::string>() == "inf" || v.get<std::string>() == "infinity")) {
      return std::numeric_limits<double>::infinity();
    }
    return v.get<double>();
  };
  cfg.alpha_input = alpha(doc.at("alpha_input"));
  cfg.alpha_target = alpha(doc.at("alpha_target"));
  cfg.budget_input = doc.at("budget_input").get<int>();
  cfg.budget_target = doc.at("budget_target").get<int>();
  for (const auto& s : doc.at("strategies")) {
    cfg.strategies.push_back({s.at("name").get<std::string>(),
                              s.at("probability").get<double>(),
                              s.at("input_modalities").get<std::vector<std::string>>()});
  }
  cfg.validate();
  return cfg;
}

int MaskedSample::input_token_count() const {
  int n = 0;
  for (const auto& d : dense_inputs) n += static_cast<int>(d.positions.size());
  for (const auto& p : pixel_inputs) n += static_cast<int>(p.positions.size());
  for (const auto& s : input_seq_views) n += static_cast<int>(s.ids.size());
  return n;
}

int MaskedSample::target_token_count() const {
  int n = 0;
  for (const auto& d : dense_targets) n += static_cast<int>(d.positions.size());
  for (const auto& s : target_seq_views) n += static_cast<int>(s.ids.size());
  return n;
}

const TokenGrid& SampleTokens::grid(const std::string& modality) const {
  for (const auto& g : grids) {
    if (g.modality == modality) return g;
  }
  throw ContractError("sample has no grid for modality " + modality);
}

const TokenSeq& SampleTokens::seq(const std::string& modality) const {
  for (const auto& s : seqs) {
    if (s.modality == modality) return s;
  }
  throw ContractError("sample has no sequence for modality " + modality);
}

const SampleTokens::PixelField& SampleTokens::pixel(const std::string& modality) const {
  for (const auto& p : pixels) {
    if (p.modality == modality) return p;
  }
  throw ContractError("sample has no pixel field for modality " + modality);
}

std::vector<double> sample_proportions(double alpha, int k, Rng& rng) {
  if (k < 1) throw ContractError("sample_proportions: k must be >= 1");
  if (std::isinf(alpha)) return std::vector<double>(k, 1.0 / k);
  if (!(alpha > 0)) throw ContractError("sample_proportions: alpha must be positive");
  std::vector<double> draws(k);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  double total = 0;
  for (int i = 0; i < k; ++i) {
    draws[i] = gamma(rng);
    total += draws[i];
  }
  if (total <= 0) {
    // all draws underflowed to zero (tiny alpha); fall back to a one-hot draw
    std::uniform_int_distribution<int> pick(0, k - 1);
    std::vector<double> out(k, 0.0);
    out[pick(rng)] = 1.0;
    return out;
  }
  for (double& d : draws) d /= total;
  return draws;
}

namespace {

// one round of largest-remainder apportionment over the open slots
void largest_remainder(const std::vector<double>& weights, int amount,
                       const std::vector<std::int64_t>& room, std::vector<int>& counts) {
  const int k = static_cast<int>(weights.size());
  double wsum = 0;
  for (int i = 0; i < k; ++i) {
    if (room[i] > 0) wsum += weights[i];
  }
  if (wsum <= 0) return;
  std::vector<double> raw(k, 0.0);
  std::vector<int> base(k, 0);
  int assigned = 0;
  for (int i = 0; i < k; ++i) {
    if (room[i] <= 0) continue;
    raw[i] = weights[i] / wsum * amount;
    base[i] = static_cast<int>(std::floor(raw[i]));
    assigned += base[i];
  }
  // distribute leftovers by descending fractional part, ties by index order
  std::vector<int> order;
  for (int i = 0; i < k; ++i) {
    if (room[i] > 0) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return raw[a] - std::floor(raw[a]) > raw[b] - std::floor(raw[b]);
  });
  int leftover = amount - assigned;
  for (int idx : order) {
    if (leftover <= 0) break;
    ++base[idx];
    --leftover;
  }
  for (int i = 0; i < k; ++i) counts[i] += base[i];
}

}  // namespace

std::vector<int> allocate_budget(const std::vector<double>& proportions, int budget,
                                 const std::vector<std::int64_t>& caps) {
  const int k = static_cast<int>(proportions.size());
  if (static_cast<int>(caps.size()) != k) throw ContractError("allocate_budget: caps size mismatch");
  std::vector<int> counts(k, 0);
  std::vector<std::int64_t> room = caps;
  int remaining = budget;
  // Allocate, clip to caps, and re-apportion any surplus among the
  // modalities that still have room. Terminates because each round either
  // exhausts the budget or saturates at least one cap.
  while (remaining > 0) {
    bool any_room = false;
    for (int i = 0; i < k; ++i) any_room = any_room || (room[i] > 0 && proportions[i] > 0);
    if (!any_room) {
      // proportions with zero mass get the leftover only if capacity remains
      for (int i = 0; i < k && remaining > 0; ++i) {
        int take = static_cast<int>(std::min<std::int64_t>(room[i], remaining));
        counts[i] += take;
        room[i] -= take;
        remaining -= take;
      }
      break;
    }
    std::vector<int> round(k, 0);
    largest_remainder(proportions, remaining, room, round);
    bool progressed = false;
    for (int i = 0; i < k; ++i) {
      int granted = static_cast<int>(std::min<std::int64_t>(round[i], room[i]));
      counts[i] += granted;
      room[i] -= granted;
      remaining -= granted;
      progressed = progressed || granted > 0;
    }
    if (!progressed) break;
  }
  return counts;
}

std::vector<int> mask_dense(int total, int n, Rng& rng) {
  if (n < 0 || n > total) {
    throw CapacityError("mask_dense: cannot draw " + std::to_string(n) + " of " +
                        std::to_string(total) + " positions");
  }
  std::vector<int> pool(total);
  std::iota(pool.begin(), pool.end(), 0);
  // partial Fisher-Yates
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + n);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

struct SpanLayout {
  std::vector<TokenId> input;
  std::vector<std::vector<TokenId>> runs;  // masked spans, in order
};

SpanLayout collapse_spans(const std::vector<TokenId>& seq, const std::vector<bool>& masked,
                          const IdBlock& sentinels) {
  SpanLayout out;
  std::size_t i = 0;
  std::size_t next_sentinel = 0;
  while (i < seq.size()) {
    if (!masked[i]) {
      out.input.push_back(seq[i]);
      ++i;
      continue;
    }
    std::vector<TokenId> run;
    while (i < seq.size() && masked[i]) run.push_back(seq[i++]);
    if (next_sentinel >= sentinels.size()) {
      throw CapacityError("sentinel block exhausted while span masking");
    }
    out.input.push_back(static_cast<TokenId>(sentinels.begin + next_sentinel++));
    out.runs.push_back(std::move(run));
  }
  return out;
}

std::vector<TokenId> build_span_target(const std::vector<std::vector<TokenId>>& runs,
                                       const IdBlock& sentinels) {
  if (runs.size() + 1 > sentinels.size()) {
    throw CapacityError("sentinel block exhausted while span masking");
  }
  std::vector<TokenId> target;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    target.push_back(static_cast<TokenId>(sentinels.begin + r));
    target.insert(target.end(), runs[r].begin(), runs[r].end());
  }
  target.push_back(static_cast<TokenId>(sentinels.begin + runs.size()));
  return target;
}

// Random truncation that keeps the span format: starts at a sentinel, keeps
// whole spans while they fit, and always closes with a sentinel.
std::vector<TokenId> truncate_span_target(const std::vector<std::vector<TokenId>>& runs,
                                          const IdBlock& sentinels, int budget, Rng& rng) {
  auto sentinel = [&](std::size_t i) { return static_cast<TokenId>(sentinels.begin + i); };
  std::vector<TokenId> out;
  if (budget < 1 || runs.empty()) return {sentinel(runs.size())};
  std::uniform_int_distribution<std::size_t> pick(0, runs.size() - 1);
  std::size_t a = pick(rng);
  out.push_back(sentinel(a));
  std::size_t i = a;
  while (i < runs.size() &&
         out.size() + runs[i].size() + 1 <= static_cast<std::size_t>(budget)) {
    out.insert(out.end(), runs[i].begin(), runs[i].end());
    out.push_back(sentinel(i + 1));
    ++i;
  }
  if (i == a && budget >= 2) {
    std::size_t take = std::min(runs[a].size(), static_cast<std::size_t>(budget - 2));
    out.insert(out.end(), runs[a].begin(), runs[a].begin() + take);
    out.push_back(sentinel(a + 1));
  }
  return out;
}

}  // namespace

SpanMaskResult span_mask_fixed(const std::vector<TokenId>& seq, const ModalitySpec& spec,
                               const std::vector<bool>& masked, int target_budget, Rng& rng) {
  if (seq.empty()) throw ContractError("span_mask: sequence must be non-empty");
  if (masked.size() != seq.size()) throw ContractError("span_mask_fixed: mask length mismatch");
  const IdBlock& sentinels = spec.block("sentinel");
  SpanLayout layout = collapse_spans(seq, masked, sentinels);
  SpanMaskResult result;
  result.p_mask_used =
      static_cast<double>(std::count(masked.begin(), masked.end(), true)) / seq.size();
  result.input_ids = std::move(layout.input);
  std::vector<TokenId> target = build_span_target(layout.runs, sentinels);
  if (target_budget >= 0 && static_cast<int>(target.size()) > target_budget) {
    target = truncate_span_target(layout.runs, sentinels, target_budget, rng);
  }
  result.target_ids = std::move(target);
  return result;
}

SpanMaskResult span_mask(const std::vector<TokenId>& seq, const ModalitySpec& spec,
                         double p_mask, int input_budget, int target_budget, Rng& rng) {
  if (seq.empty()) throw ContractError("span_mask: sequence must be non-empty");
  if (input_budget < 1) throw CapacityError("span_mask: input budget below 1");
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ContractError("span_mask: p_mask outside [0,1]");
  const IdBlock& sentinels = spec.block("sentinel");

  double p = p_mask;
  SpanLayout layout;
  for (int attempt = 0;; ++attempt) {
    std::vector<bool> masked(seq.size(), false);
    if (p >= 1.0) {
      masked.assign(seq.size(), true);
    } else if (p > 0.0) {
      std::bernoulli_distribution coin(p);
      for (std::size_t i = 0; i < seq.size(); ++i) masked[i] = coin(rng);
    }
    layout = collapse_spans(seq, masked, sentinels);
    if (static_cast<int>(layout.input.size()) <= input_budget) break;
    // The paper only says to progressively increase the probability; the
    // increment and retry cap are fixed here.
    if (attempt >= 40) {
      p = 1.0;
      continue;
    }
    p = std::min(1.0, p + 0.05);
  }

  SpanMaskResult result;
  result.p_mask_used = p;
  result.input_ids = std::move(layout.input);
  std::vector<TokenId> target = build_span_target(layout.runs, sentinels);
  if (target_budget >= 0 && static_cast<int>(target.size()) > target_budget) {
    target = truncate_span_target(layout.runs, sentinels, target_budget, rng);
  }
  result.target_ids = std::move(target);
  return result;
}

MaskedSample build_masked_sample(const SampleTokens& sample, const Registry& registry,
                                 const MaskConfig& config, Rng& rng) {
  config.validate();

  // pick a strategy by its mixture probability
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const MaskStrategy* strategy = &config.strategies.back();
  double acc = 0;
  for (const auto& s : config.strategies) {
    acc += s.probability;
    if (u < acc) {
      strategy = &s;
      break;
    }
  }

  MaskedSample out;
  out.strategy = strategy->name;

  // ---- input side ----
  std::vector<const ModalitySpec*> in_specs;
  for (const auto& name : strategy->input_modalities) in_specs.push_back(&registry.at(name));
  std::vector<double> in_props =
      sample_proportions(config.alpha_input, static_cast<int>(in_specs.size()), rng);
  std::vector<std::int64_t> in_caps;
  for (const auto* spec : in_specs) {
    if (spec->is_sequence()) {
      in_caps.push_back(static_cast<std::int64_t>(sample.seq(spec->name).ids.size()));
    } else {
      in_caps.push_back(spec->num_positions());
    }
  }
  std::vector<int> in_counts = allocate_budget(in_props, config.budget_input, in_caps);

  std::map<std::string, std::vector<int>> dense_input_positions;
  std::map<std::string, std::pair<int, int>> seq_budgets;  // modality -> (input, target)
  for (std::size_t i = 0; i < in_specs.size(); ++i) {
    const ModalitySpec& spec = *in_specs[i];
    const int n = in_counts[i];
    if (spec.is_sequence()) {
      seq_budgets[spec.name].first = n;
      continue;
    }
    std::vector<int> positions = mask_dense(spec.num_positions(), n, rng);
    if (spec.is_pixel()) {
      const auto& field = sample.pixel(spec.name);
      PixelSelection sel;
      sel.modality = spec.name;
      sel.positions = positions;
      sel.patches = ad::Mat<float>(positions.size(), field.patches.cols());
      for (std::size_t r = 0; r < positions.size(); ++r) {
        sel.patches.row(static_cast<Eigen::Index>(r)) = field.patches.row(positions[r]);
      }
      if (n > 0) out.pixel_inputs.push_back(std::move(sel));
    } else {
      dense_input_positions[spec.name] = positions;
      const TokenGrid& grid = sample.grid(spec.name);
      DenseSelection sel;
      sel.modality = spec.name;
      sel.positions = positions;
      for (int pos : positions) sel.ids.push_back(grid.ids[pos]);
      if (n > 0) out.dense_inputs.push_back(std::move(sel));
    }
  }

  // ---- target side (all non-pixel modalities) ----
  std::vector<const ModalitySpec*> tgt_specs;
  for (const auto& spec : registry.modalities()) {
    if (spec.target_eligible()) tgt_specs.push_back(&spec);
  }
  std::vector<double> tgt_props =
      sample_proportions(config.alpha_target, static_cast<int>(tgt_specs.size()), rng);
  std::vector<std::int64_t> tgt_caps;
  for (const auto* spec : tgt_specs) {
    if (spec->is_sequence()) {
      // full-mask target is the whole sequence plus two sentinels
      tgt_caps.push_back(static_cast<std::int64_t>(sample.seq(spec->name).ids.size()) + 2);
    } else {
      auto it = dense_input_positions.find(spec->name);
      int used = it == dense_input_positions.end() ? 0 : static_cast<int>(it->second.size());
      tgt_caps.push_back(spec->num_positions() - used);
    }
  }
  std::vector<int> tgt_counts = allocate_budget(tgt_props, config.budget_target, tgt_caps);

  for (std::size_t i = 0; i < tgt_specs.size(); ++i) {
    const ModalitySpec& spec = *tgt_specs[i];
    const int n = tgt_counts[i];
    if (spec.is_sequence()) {
      seq_budgets[spec.name].second = n;
      continue;
    }
    if (n == 0) continue;
    // draw from the complement of the input positions so the sets stay disjoint
    const auto& taken = dense_input_positions[spec.name];
    std::vector<int> complement;
    complement.reserve(spec.num_positions() - taken.size());
    std::size_t t = 0;
    for (int pos = 0; pos < spec.num_positions(); ++pos) {
      if (t < taken.size() && taken[t] == pos) {
        ++t;
        continue;
      }
      complement.push_back(pos);
    }
    std::vector<int> chosen = mask_dense(static_cast<int>(complement.size()), n, rng);
    const TokenGrid& grid = sample.grid(spec.name);
    DenseSelection sel;
    sel.modality = spec.name;
    for (int c : chosen) sel.positions.push_back(complement[c]);
    for (int pos : sel.positions) sel.ids.push_back(grid.ids[pos]);
    out.dense_targets.push_back(std::move(sel));
  }

  // ---- sequence modalities: one span draw covers both sides ----
  for (const auto& [name, budgets] : seq_budgets) {
    const auto [in_budget, tgt_budget] = budgets;
    if (in_budget == 0 && tgt_budget == 0) continue;
    const ModalitySpec& spec = registry.at(name);
    const TokenSeq& seq = sample.seq(name);
    if (in_budget == 0) {
      // not visible at all: fully masked, target is the whole sequence
      SpanMaskResult r = span_mask(seq.ids, spec, 1.0, 1, tgt_budget, rng);
      out.target_seq_views.push_back(SeqView{name, std::move(r.target_ids), 1.0});
      continue;
    }
    double p0 = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    SpanMaskResult r = span_mask(seq.ids, spec, p0, in_budget, tgt_budget, rng);
    out.input_seq_views.push_back(SeqView{name, std::move(r.input_ids), r.p_mask_used});
    if (tgt_budget > 0) {
      out.target_seq_views.push_back(SeqView{name, std::move(r.target_ids), r.p_mask_used});
    }
  }

  return out;
}

}  // namespace mmm
