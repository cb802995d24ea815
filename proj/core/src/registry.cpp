#include "mmm/registry.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mmm {

using nlohmann::json;

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string to_string(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::DenseGrid: return "dense-grid";
    case ModalityKind::Sequence: return "sequence";
    case ModalityKind::PixelInput: return "pixel-input";
  }
  throw ContractError("unknown modality kind");
}

ModalityKind modality_kind_from_string(const std::string& s) {
  if (s == "dense-grid") return ModalityKind::DenseGrid;
  if (s == "sequence") return ModalityKind::Sequence;
  if (s == "pixel-input") return ModalityKind::PixelInput;
  throw ConfigError("unknown modality kind: " + s);
}

int ModalitySpec::num_positions() const {
  if (kind == ModalityKind::Sequence) return max_seq_len;
  return grid_h * grid_w;
}

std::uint32_t ModalitySpec::special(const std::string& key) const {
  auto it = special_tokens.find(key);
  if (it == special_tokens.end()) {
    throw ConfigError("modality '" + name + "' has no special token '" + key + "'");
  }
  return it->second;
}

const IdBlock& ModalitySpec::block(const std::string& key) const {
  auto it = id_blocks.find(key);
  if (it == id_blocks.end()) {
    throw ConfigError("modality '" + name + "' has no id block '" + key + "'");
  }
  return it->second;
}

void ModalitySpec::validate() const {
  if (name.empty()) throw ConfigError("modality with empty name");
  if (vocab_size == 0) throw ConfigError("modality '" + name + "': vocab_size must be positive");
  if (kind == ModalityKind::Sequence) {
    if (max_seq_len <= 0) throw ConfigError("modality '" + name + "': max_seq_len must be positive");
  } else {
    if (grid_h <= 0 || grid_w <= 0) {
      throw ConfigError("modality '" + name + "': grid shape must be positive");
    }
  }
  std::vector<bool> seen(vocab_size, false);
  for (const auto& [key, id] : special_tokens) {
    if (id >= vocab_size) {
      throw ConfigError("modality '" + name + "': special token '" + key + "' id out of range");
    }
    if (seen[id]) {
      throw ConfigError("modality '" + name + "': special token ids not pairwise distinct");
    }
    seen[id] = true;
  }
  // Declared id blocks must partition [0, vocab_size) without overlap.
  if (!id_blocks.empty()) {
    std::uint64_t covered = 0;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> ranges;
    for (const auto& [key, blk] : id_blocks) {
      if (blk.end <= blk.begin || blk.end > vocab_size) {
        throw ConfigError("modality '" + name + "': id block '" + key + "' out of range");
      }
      ranges.emplace_back(blk.begin, blk.end);
      covered += blk.size();
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
      if (ranges[i].first < ranges[i - 1].second) {
        throw ConfigError("modality '" + name + "': id blocks overlap");
      }
    }
    if (covered != vocab_size) {
      throw ConfigError("modality '" + name + "': id blocks do not partition the vocabulary");
    }
  }
}

Registry::Registry(std::vector<ModalitySpec> specs) : specs_(std::move(specs)) {
  for (const auto& spec : specs_) spec.validate();
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    for (std::size_t j = i + 1; j < specs_.size(); ++j) {
      if (specs_[i].name == specs_[j].name) {
        throw ConfigError("duplicate modality name: " + specs_[i].name);
      }
    }
  }
}

const ModalitySpec* Registry::find(const std::string& name) const {
  for (const auto& spec : specs_) {
    if (spec.name == name) return &spec;
  }
  return nullptr;
}

const ModalitySpec& Registry::at(const std::string& name) const {
  const ModalitySpec* spec = find(name);
  if (!spec) throw ConfigError("modality not registered: " + name);
  return *spec;
}

std::size_t Registry::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].name == name) return i;
  }
  throw ConfigError("modality not registered: " + name);
}

void Registry::validate_grid(const TokenGrid& grid) const {
  const ModalitySpec& spec = at(grid.modality);
  if (!spec.is_dense()) throw ShapeError("modality '" + grid.modality + "' is not a dense grid");
  if (static_cast<int>(grid.ids.size()) != spec.num_positions()) {
    throw ShapeError("grid '" + grid.modality + "': expected " +
                     std::to_string(spec.num_positions()) + " ids, got " +
                     std::to_string(grid.ids.size()));
  }
  for (TokenId id : grid.ids) {
    if (id >= spec.vocab_size) throw ShapeError("grid '" + grid.modality + "': id out of range");
  }
}

void Registry::validate_seq(const TokenSeq& seq) const {
  const ModalitySpec& spec = at(seq.modality);
  if (!spec.is_sequence()) throw ShapeError("modality '" + seq.modality + "' is not a sequence");
  if (static_cast<int>(seq.ids.size()) > spec.max_seq_len) {
    throw CapacityError("sequence '" + seq.modality + "' exceeds max_seq_len");
  }
  const std::uint32_t eos = spec.special("eos");
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] >= spec.vocab_size) throw ShapeError("sequence id out of range");
    if (seq.ids[i] == eos && i + 1 != seq.ids.size()) {
      throw ShapeError("sequence '" + seq.modality + "': EOS must be the last id");
    }
  }
}

std::string Registry::to_json() const {
  json doc;
  doc["version"] = kVersion;
  doc["modalities"] = json::array();
  for (const auto& spec : specs_) {
    json m;
    m["name"] = spec.name;
    m["kind"] = to_string(spec.kind);
    m["vocab_size"] = spec.vocab_size;
    if (spec.kind == ModalityKind::Sequence) {
      m["max_seq_len"] = spec.max_seq_len;
    } else {
      m["grid_shape"] = {spec.grid_h, spec.grid_w};
    }
    m["special_tokens"] = spec.special_tokens;
    json blocks = json::object();
    for (const auto& [key, blk] : spec.id_blocks) {
      blocks[key] = {blk.begin, blk.end};
    }
    m["id_blocks"] = blocks;
    doc["modalities"].push_back(std::move(m));
  }
  return doc.dump(2);
}

Registry Registry::from_json(const std::string& text) {
  json doc = json::parse(text);
  if (doc.at("version").get<int>() != kVersion) {
    throw LoadError("unsupported registry version");
  }
  std::vector<ModalitySpec> specs;
  for (const auto& m : doc.at("modalities")) {
    ModalitySpec spec;
    spec.name = m.at("name").get<std::string>();
    spec.kind = modality_kind_from_string(m.at("kind").get<std::string>());
    spec.vocab_size = m.at("vocab_size").get<std::uint32_t>();
    if (spec.kind == ModalityKind::Sequence) {
      spec.max_seq_len = m.at("max_seq_len").get<int>();
    } else {
      spec.grid_h = m.at("grid_shape").at(0).get<int>();
      spec.grid_w = m.at("grid_shape").at(1).get<int>();
    }
    for (const auto& [key, id] : m.at("special_tokens").items()) {
      spec.special_tokens[key] = id.get<std::uint32_t>();
    }
    for (const auto& [key, range] : m.at("id_blocks").items()) {
      spec.id_blocks[key] = IdBlock{range.at(0).get<std::uint32_t>(), range.at(1).get<std::uint32_t>()};
    }
    specs.push_back(std::move(spec));
  }
  return Registry(std::move(specs));
}

void Registry::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write registry file: " + path);
  out << to_json() << "\n";
}

Registry Registry::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open registry file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::uint64_t Registry::hash() const {
  // nlohmann objects keep keys sorted, so to_json() is canonical.
  return fnv1a64(to_json());
}

}  // namespace mmm
