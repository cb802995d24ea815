#pragma once

#include <string>
#include <vector>

#include "mmm/registry.hpp"

namespace mmm {

struct BBox {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;  // in [0,1]
  int class_id = 0;

  bool degenerate() const { return !(xmin < xmax) || !(ymin < ymax); }
};

struct DecodedBox {
  BBox box;
  bool valid = true;  // false for degenerate boxes (xmin>=xmax or ymin>=ymax)
};

int coord_to_bin(double v, int n_bins);
double bin_to_coord(int bin, int n_bins);

// Blocks expected in a sequence-modality spec: "eos", "pad", "sentinel",
// "xmin", "ymin", "xmax", "ymax", "class", "word".
TokenSeq encode_bboxes(const std::vector<BBox>& boxes, const ModalitySpec& spec);
std::vector<DecodedBox> decode_bboxes(const TokenSeq& seq, const ModalitySpec& spec);

// Closed word-level vocabulary for the synthetic caption grammar. Word ids
// live in the joint sequence vocabulary's "word" block.
class WordVocab {
 public:
  WordVocab() = default;
  WordVocab(std::vector<std::string> words, const ModalitySpec& spec);

  TokenSeq encode(const std::string& text, const ModalitySpec& spec) const;
  std::string decode(const TokenSeq& seq, const ModalitySpec& spec) const;

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::uint32_t> index_;  // word -> id in joint vocab
  IdBlock word_block_;
};

}  // namespace mmm
