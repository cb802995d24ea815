#include "mmm/codecs.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmm {

int coord_to_bin(double v, int n_bins) {
  if (n_bins <= 0) throw ConfigError("n_bins must be positive");
  if (!(v >= 0.0 && v <= 1.0)) {
    throw std::domain_error("coordinate " + std::to_string(v) + " outside [0,1]");
  }
  int bin = static_cast<int>(std::floor(v * n_bins));
  return std::clamp(bin, 0, n_bins - 1);
}

double bin_to_coord(int bin, int n_bins) {
  if (n_bins <= 0) throw ConfigError("n_bins must be positive");
  if (bin < 0 || bin >= n_bins) {
    throw std::domain_error("bin " + std::to_string(bin) + " outside [0," + std::to_string(n_bins) + ")");
  }
  return (bin + 0.5) / n_bins;
}

namespace {

constexpr const char* kCornerBlocks[4] = {"xmin", "ymin", "xmax", "ymax"};

double corner_distance(const BBox& b) {
  return std::sqrt(b.xmin * b.xmin + b.ymin * b.ymin);
}

}  // namespace

TokenSeq encode_bboxes(const std::vector<BBox>& boxes, const ModalitySpec& spec) {
  for (const auto& b : boxes) {
    if (b.degenerate()) throw CodecError("degenerate bbox (xmin>=xmax or ymin>=ymax)");
    for (double v : {b.xmin, b.ymin, b.xmax, b.ymax}) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error("bbox coordinate outside [0,1]");
    }
  }
  const IdBlock& class_block = spec.block("class");
  const int n_bins = static_cast<int>(spec.block("xmin").size());

  std::vector<BBox> sorted = boxes;
  // Objects ordered by the distance of their (xmin, ymin) corner to the
  // origin; ties broken by (ymin, xmin, class_id).
  std::stable_sort(sorted.begin(), sorted.end(), [](const BBox& a, const BBox& b) {
    double da = corner_distance(a), db = corner_distance(b);
    if (da != db) return da < db;
    return std::tie(a.ymin, a.xmin, a.class_id) < std::tie(b.ymin, b.xmin, b.class_id);
  });

  TokenSeq seq;
  seq.modality = spec.name;
  std::size_t needed = sorted.size() * 5 + 1;
  if (needed > static_cast<std::size_t>(spec.max_seq_len)) {
    throw CapacityError("bbox sequence of " + std::to_string(needed) +
                        " tokens exceeds max_seq_len " + std::to_string(spec.max_seq_len));
  }
  seq.ids.reserve(needed);
  for (const auto& b : sorted) {
    const double coords[4] = {b.xmin, b.ymin, b.xmax, b.ymax};
    for (int c = 0; c < 4; ++c) {
      const IdBlock& blk = spec.block(kCornerBlocks[c]);
      seq.ids.push_back(static_cast<TokenId>(blk.begin + coord_to_bin(coords[c], n_bins)));
    }
    if (b.class_id < 0 || static_cast<std::uint32_t>(b.class_id) >= class_block.size()) {
      throw CodecError("bbox class_id " + std::to_string(b.class_id) + " outside class block");
    }
    seq.ids.push_back(static_cast<TokenId>(class_block.begin + b.class_id));
  }
  seq.ids.push_back(static_cast<TokenId>(spec.special("eos")));
  return seq;
}

std::vector<DecodedBox> decode_bboxes(const TokenSeq& seq, const ModalitySpec& spec) {
  const std::uint32_t eos = spec.special("eos");
  const IdBlock& class_block = spec.block("class");
  const int n_bins = static_cast<int>(spec.block("xmin").size());

  std::vector<DecodedBox> out;
  std::size_t i = 0;
  while (true) {
    if (i >= seq.ids.size()) throw CodecError("bbox sequence missing EOS");
    if (seq.ids[i] == eos) break;
    if (i + 5 > seq.ids.size()) {
      throw CodecError("truncated bbox group at position " + std::to_string(i));
    }
    DecodedBox dec;
    double coords[4];
    for (int c = 0; c < 4; ++c) {
      const IdBlock& blk = spec.block(kCornerBlocks[c]);
      TokenId id = seq.ids[i + c];
      if (!blk.contains(id)) {
        throw CodecError("expected " + std::string(kCornerBlocks[c]) + " token at position " +
                         std::to_string(i + c));
      }
      coords[c] = bin_to_coord(static_cast<int>(id - blk.begin), n_bins);
    }
    TokenId cls = seq.ids[i + 4];
    if (!class_block.contains(cls)) {
      throw CodecError("expected class token at position " + std::to_string(i + 4));
    }
    dec.box = BBox{coords[0], coords[1], coords[2], coords[3], static_cast<int>(cls - class_block.begin)};
    dec.valid = !dec.box.degenerate();
    out.push_back(dec);
    i += 5;
  }
  return out;
}

WordVocab::WordVocab(std::vector<std::string> words, const ModalitySpec& spec)
    : words_(std::move(words)), word_block_(spec.block("word")) {
  if (words_.size() > word_block_.size()) {
    throw ConfigError("word list larger than the word id block");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], word_block_.begin + static_cast<std::uint32_t>(i)).second) {
      throw ConfigError("duplicate word in vocabulary: " + words_[i]);
    }
  }
}

TokenSeq WordVocab::encode(const std::string& text, const ModalitySpec& spec) const {
  TokenSeq seq;
  seq.modality = spec.name;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) {
    auto it = index_.find(word);
    if (it == index_.end()) throw CodecError("word not in vocabulary: " + word);
    seq.ids.push_back(static_cast<TokenId>(it->second));
  }
  seq.ids.push_back(static_cast<TokenId>(spec.special("eos")));
  if (static_cast<int>(seq.ids.size()) > spec.max_seq_len) {
    throw CapacityError("caption exceeds max_seq_len");
  }
  return seq;
}

std::string WordVocab::decode(const TokenSeq& seq, const ModalitySpec& spec) const {
  const std::uint32_t eos = spec.special("eos");
  std::string out;
  for (TokenId id : seq.ids) {
    if (id == eos) break;
    if (!word_block_.contains(id) || id - word_block_.begin >= words_.size()) {
      throw CodecError("token " + std::to_string(id) + " is not a word token");
    }
    if (!out.empty()) out += ' ';
    out += words_[id - word_block_.begin];
  }
  return out;
}

}  // namespace mmm
