#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmm/common.hpp"

namespace mmm {

enum class ModalityKind { DenseGrid, Sequence, PixelInput };

std::string to_string(ModalityKind kind);
ModalityKind modality_kind_from_string(const std::string& s);

// Half-open token-id range [begin, end) inside a sequence vocabulary.
struct IdBlock {
  std::uint32_t begin = 0;
  std::uint32_t end = 0;
  std::uint32_t size() const { return end - begin; }
  bool contains(std::uint32_t id) const { return id >= begin && id < end; }
};

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::DenseGrid;
  std::uint32_t vocab_size = 0;
  int grid_h = 0;  // DenseGrid / PixelInput
  int grid_w = 0;
  int max_seq_len = 0;  // Sequence
  std::map<std::string, std::uint32_t> special_tokens;
  std::map<std::string, IdBlock> id_blocks;

  int num_positions() const;
  std::uint32_t special(const std::string& name) const;
  const IdBlock& block(const std::string& name) const;
  bool is_dense() const { return kind == ModalityKind::DenseGrid; }
  bool is_sequence() const { return kind == ModalityKind::Sequence; }
  bool is_pixel() const { return kind == ModalityKind::PixelInput; }
  // PixelInput never appears as a target; only non-pixel modalities carry ids.
  bool target_eligible() const { return kind != ModalityKind::PixelInput; }

  void validate() const;
};

struct TokenGrid {
  std::string modality;
  std::vector<TokenId> ids;  // row-major, grid_h * grid_w entries
};

struct TokenSeq {
  std::string modality;
  std::vector<TokenId> ids;
};

class Registry {
 public:
  Registry() = default;
  explicit Registry(std::vector<ModalitySpec> specs);

  const std::vector<ModalitySpec>& modalities() const { return specs_; }
  const ModalitySpec& at(const std::string& name) const;
  const ModalitySpec* find(const std::string& name) const;
  bool has(const std::string& name) const { return find(name) != nullptr; }
  std::size_t index_of(const std::string& name) const;

  void validate_grid(const TokenGrid& grid) const;
  void validate_seq(const TokenSeq& seq) const;

  // Canonical JSON document; the single source of truth shared by shards,
  // checkpoints, and every CLI subcommand.
  std::string to_json() const;
  static Registry from_json(const std::string& text);
  void save(const std::string& path) const;
  static Registry load(const std::string& path);

  std::uint64_t hash() const;

  static constexpr int kVersion = 1;

 private:
  std::vector<ModalitySpec> specs_;
};

}  // namespace mmm
