#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "mmm/codecs.hpp"
#include "mmm/synth.hpp"

using namespace mmm;

TEST_SUITE_BEGIN("codecs");

TEST_CASE("coord_to_bin boundaries and worked values") {
  CHECK(coord_to_bin(0.0, 1000) == 0);
  CHECK(coord_to_bin(1.0, 1000) == 999);
  CHECK(coord_to_bin(0.15, 1000) == 150);
  CHECK(coord_to_bin(0.3, 1000) == 300);
  CHECK(coord_to_bin(0.65, 1000) == 650);
  CHECK_THROWS_AS(coord_to_bin(-0.01, 1000), std::domain_error);
  CHECK_THROWS_AS(coord_to_bin(1.01, 1000), std::domain_error);
}

TEST_CASE("bin_to_coord is the bin center") {
  CHECK(bin_to_coord(150, 1000) == doctest::Approx(0.1505).epsilon(1e-12));
  CHECK(bin_to_coord(0, 2) == doctest::Approx(0.25));
  CHECK_THROWS_AS(bin_to_coord(1000, 1000), std::domain_error);
  CHECK_THROWS_AS(bin_to_coord(-1, 1000), std::domain_error);
}

TEST_CASE("binning round trip stays within half a bin width") {
  Rng rng = make_rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int n_bins : {100, 1000}) {
    for (int i = 0; i < 2000; ++i) {
      double v = unit(rng);
      double back = bin_to_coord(coord_to_bin(v, n_bins), n_bins);
      CHECK(std::abs(back - v) <= 0.5 / n_bins + 1e-12);
    }
  }
}

namespace {

ModalitySpec bbox_spec_with_bins(int n_bins) {
  DatasetConfig cfg = testing::tiny_dataset_config();
  cfg.n_bins = n_bins;
  return make_registry(cfg).at("bbox");
}

}  // namespace

TEST_CASE("bbox encoding reproduces the documented token layout") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  // cat = class 0, potted plant analog = class 1
  std::vector<BBox> boxes = {{0.15, 0.3, 0.65, 0.5, 0}, {0.75, 0.3, 0.95, 0.8, 1}};
  TokenSeq seq = encode_bboxes(boxes, spec);

  auto corner = [&](const char* block, int bin) {
    return static_cast<TokenId>(spec.block(block).begin + bin);
  };
  auto cls = [&](int c) { return static_cast<TokenId>(spec.block("class").begin + c); };
  std::vector<TokenId> expected = {
      corner("xmin", 150), corner("ymin", 300), corner("xmax", 650), corner("ymax", 500), cls(0),
      corner("xmin", 750), corner("ymin", 300), corner("xmax", 950), corner("ymax", 800), cls(1),
      static_cast<TokenId>(spec.special("eos"))};
  CHECK(seq.ids == expected);
}

TEST_CASE("empty scene is a lone EOS") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  TokenSeq seq = encode_bboxes({}, spec);
  CHECK(seq.ids == std::vector<TokenId>{static_cast<TokenId>(spec.special("eos"))});
  CHECK(decode_bboxes(seq, spec).empty());
}

TEST_CASE("objects are ordered by corner distance to the origin") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  BBox far{0.63, 0.64, 0.9, 0.9, 0};   // corner distance ~0.9
  BBox near{0.06, 0.08, 0.3, 0.3, 1};  // corner distance 0.1
  TokenSeq seq = encode_bboxes({far, near}, spec);
  auto decoded = decode_bboxes(seq, spec);
  REQUIRE(decoded.size() == 2);
  CHECK(decoded[0].box.class_id == 1);  // the 0.1 box serializes first
  CHECK(decoded[1].box.class_id == 0);

  // permutation invariance of the input list
  TokenSeq swapped = encode_bboxes({near, far}, spec);
  CHECK(seq.ids == swapped.ids);
}

TEST_CASE("bbox round trip error bounded by half a bin") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  Rng rng = make_rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int iter = 0; iter < 500; ++iter) {
    std::vector<BBox> boxes;
    std::uniform_int_distribution<int> count(0, 4);
    int n = count(rng);
    for (int i = 0; i < n; ++i) {
      double x0 = unit(rng) * 0.8, y0 = unit(rng) * 0.8;
      boxes.push_back({x0, y0, x0 + 0.05 + unit(rng) * 0.15, y0 + 0.05 + unit(rng) * 0.15,
                       static_cast<int>(unit(rng) * 3)});
    }
    auto decoded = decode_bboxes(encode_bboxes(boxes, spec), spec);
    REQUIRE(decoded.size() == boxes.size());
    std::vector<BBox> sorted = boxes;
    std::stable_sort(sorted.begin(), sorted.end(), [](const BBox& a, const BBox& b) {
      double da = std::hypot(a.xmin, a.ymin), db = std::hypot(b.xmin, b.ymin);
      if (da != db) return da < db;
      return std::tie(a.ymin, a.xmin, a.class_id) < std::tie(b.ymin, b.xmin, b.class_id);
    });
    for (std::size_t i = 0; i < decoded.size(); ++i) {
      CHECK(decoded[i].valid);
      CHECK(decoded[i].box.class_id == sorted[i].class_id);
      CHECK(std::abs(decoded[i].box.xmin - sorted[i].xmin) <= 0.5 / 1000 + 1e-12);
      CHECK(std::abs(decoded[i].box.ymin - sorted[i].ymin) <= 0.5 / 1000 + 1e-12);
      CHECK(std::abs(decoded[i].box.xmax - sorted[i].xmax) <= 0.5 / 1000 + 1e-12);
      CHECK(std::abs(decoded[i].box.ymax - sorted[i].ymax) <= 0.5 / 1000 + 1e-12);
    }
  }
}

TEST_CASE("malformed sequences fail with positioned parse errors") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  // a class token where an xmin token is expected
  TokenSeq bad;
  bad.modality = "bbox";
  bad.ids = {static_cast<TokenId>(spec.block("class").begin),
             static_cast<TokenId>(spec.special("eos"))};
  CHECK_THROWS_WITH_AS(decode_bboxes(bad, spec), doctest::Contains("position 0"), CodecError);

  TokenSeq no_eos;
  no_eos.modality = "bbox";
  no_eos.ids = {static_cast<TokenId>(spec.block("xmin").begin + 1),
                static_cast<TokenId>(spec.block("ymin").begin + 1),
                static_cast<TokenId>(spec.block("xmax").begin + 2),
                static_cast<TokenId>(spec.block("ymax").begin + 2),
                static_cast<TokenId>(spec.block("class").begin)};
  CHECK_THROWS_AS(decode_bboxes(no_eos, spec), CodecError);
}

TEST_CASE("degenerate decoded boxes are reported, not fatal") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  TokenSeq seq;
  seq.modality = "bbox";
  // xmax bin < xmin bin
  seq.ids = {static_cast<TokenId>(spec.block("xmin").begin + 500),
             static_cast<TokenId>(spec.block("ymin").begin + 100),
             static_cast<TokenId>(spec.block("xmax").begin + 100),
             static_cast<TokenId>(spec.block("ymax").begin + 300),
             static_cast<TokenId>(spec.block("class").begin),
             static_cast<TokenId>(spec.special("eos"))};
  auto decoded = decode_bboxes(seq, spec);
  REQUIRE(decoded.size() == 1);
  CHECK_FALSE(decoded[0].valid);
}

TEST_CASE("capacity errors on oversized box lists") {
  ModalitySpec spec = bbox_spec_with_bins(1000);
  std::vector<BBox> boxes;
  for (int i = 0; i < 10; ++i) boxes.push_back({0.1, 0.1, 0.2, 0.2, 0});
  CHECK_THROWS_AS(encode_bboxes(boxes, spec), CapacityError);  // 51 tokens > 24
}

TEST_CASE("caption codec is exact on the closed grammar") {
  DatasetConfig cfg = testing::tiny_dataset_config();
  Registry registry = make_registry(cfg);
  const ModalitySpec& spec = registry.at("caption");
  WordVocab vocab(grammar_words(), spec);

  TokenSeq seq = vocab.encode("a red square above a blue circle", spec);
  CHECK(seq.ids.size() == 8);  // 7 words + EOS
  CHECK(seq.ids.back() == spec.special("eos"));
  CHECK(vocab.decode(seq, spec) == "a red square above a blue circle");

  TokenSeq empty = vocab.encode("", spec);
  CHECK(empty.ids == std::vector<TokenId>{static_cast<TokenId>(spec.special("eos"))});
  CHECK(vocab.decode(empty, spec) == "");

  CHECK_THROWS_AS(vocab.encode("a purple square", spec), CodecError);

  // bijective on grammar output
  Rng rng = make_rng(77);
  for (int i = 0; i < 200; ++i) {
    AlignedSample s = render_sample(generate_scene(rng, cfg), cfg);
    TokenSeq enc = vocab.encode(s.caption, spec);
    CHECK(vocab.decode(enc, spec) == s.caption);
  }
}

TEST_CASE("registry blocks partition the joint vocabulary") {
  DatasetConfig cfg = testing::tiny_dataset_config();
  Registry registry = make_registry(cfg);
  const ModalitySpec& spec = registry.at("bbox");
  std::uint32_t covered = 0;
  for (const auto& [name, blk] : spec.id_blocks) covered += blk.size();
  CHECK(covered == spec.vocab_size);

  // overlapping blocks must be rejected at construction
  ModalitySpec broken = spec;
  broken.id_blocks["word"].begin -= 1;
  CHECK_THROWS_AS(Registry({broken}), ConfigError);
}

TEST_CASE("registry json round trip preserves the hash") {
  Registry registry = make_registry(testing::tiny_dataset_config());
  Registry back = Registry::from_json(registry.to_json());
  CHECK(back.hash() == registry.hash());
  CHECK(back.modalities().size() == registry.modalities().size());
  CHECK(back.at("seg").grid_h == registry.at("seg").grid_h);

  // a changed vocabulary must change the fingerprint
  DatasetConfig other = testing::tiny_dataset_config();
  other.seg_vocab = 32;
  CHECK(make_registry(other).hash() != registry.hash());
}

TEST_CASE("token containers are validated against their specs") {
  Registry registry = make_registry(testing::tiny_dataset_config());
  TokenGrid grid;
  grid.modality = "seg";
  grid.ids.assign(63, 0);
  CHECK_THROWS_AS(registry.validate_grid(grid), ShapeError);
  grid.ids.assign(64, 0);
  CHECK_NOTHROW(registry.validate_grid(grid));

  TokenSeq seq;
  seq.modality = "caption";
  seq.ids = {static_cast<TokenId>(registry.at("caption").special("eos")), 5};
  CHECK_THROWS_AS(registry.validate_seq(seq), ShapeError);  // EOS must be last
}

TEST_SUITE_END();
