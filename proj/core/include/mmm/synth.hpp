#pragma once

#include <array>
#include <string>
#include <vector>

#include "mmm/codecs.hpp"
#include "mmm/grid.hpp"
#include "mmm/masking.hpp"
#include "mmm/registry.hpp"

namespace mmm {

enum class ShapeClass { Square = 0, Circle = 1, Triangle = 2 };

struct Shape {
  ShapeClass cls = ShapeClass::Square;
  int color = 0;    // palette index
  int cy = 0, cx = 0;
  int half = 3;     // half extent / radius
  int depth_layer = 0;  // 0 = nearest
};

struct Scene {
  std::vector<Shape> shapes;
};

struct AlignedSample {
  Grid rgb;    // canvas x canvas x 3
  Grid depth;  // canvas x canvas x 1, near = small, background = 1
  Grid seg;    // canvas x canvas x 1, class ids, 0 = background
  Grid feat;   // canvas x canvas x 8, blurred class-embedding field
  std::vector<BBox> bboxes;
  std::string caption;
};

struct DatasetConfig {
  int canvas = 32;
  int patch = 4;  // dense tokenizer patch edge -> canvas/patch tokens per side
  int n_bins = 1000;
  int rgb_vocab = 256;
  int depth_vocab = 128;
  int seg_vocab = 64;
  int feat_vocab = 128;
  int n_sentinels = 32;
  int bbox_max_len = 24;
  int caption_max_len = 28;

  int token_side() const { return canvas / patch; }

  std::string to_json() const;
  static DatasetConfig from_json(const std::string& text);
  void save(const std::string& path) const;
  static DatasetConfig load(const std::string& path);
};

// Modality names used throughout: "rgb", "depth", "seg", "feat" (dense),
// "bbox", "caption" (sequences, joint vocabulary), "rgb_pixels" (pixel input).
Registry make_registry(const DatasetConfig& cfg);

const std::vector<std::string>& grammar_words();
const std::vector<std::string>& palette_names();
const std::vector<std::array<float, 3>>& palette_colors();
int num_shape_classes();

Scene generate_scene(Rng& rng, const DatasetConfig& cfg);
AlignedSample render_sample(const Scene& scene, const DatasetConfig& cfg);

// Full-extent pixel mask of one shape, ignoring occlusion.
GridT<float> shape_mask(const Shape& shape, int canvas);

enum class TransferTask { Edges, FlippedDepth, CoarseSeg };
TransferTask transfer_task_from_string(const std::string& s);
std::string to_string(TransferTask task);
Grid derive_transfer_task(const AlignedSample& sample, TransferTask task);

// raw patch rows for pixel-input embedding: (tokens) x (ph*pw*channels)
ad::Mat<float> extract_raw_patches(const Grid& raw, int patch_h, int patch_w);

// ---- shard format ----
// Header: magic "4MSH", version, registry hash, sample count. Per sample,
// modalities in registry order: dense grids as H*W u16 ids, sequences as a
// u32 length followed by u16 ids. Pixel-input modalities are not stored.
void write_shard(const std::vector<SampleTokens>& samples, const Registry& registry,
                 const std::string& path);
std::vector<SampleTokens> read_shard(const std::string& path, const Registry& registry);

struct Manifest {
  struct Entry {
    std::string path;
    std::int64_t samples = 0;
  };
  std::vector<Entry> shards;
  std::string registry_hash;
  std::int64_t total_samples = 0;

  void save(const std::string& path) const;
  static Manifest load(const std::string& path);
};

void write_ppm(const Grid& rgb, const std::string& path);
void write_pgm(const Grid& mono, const std::string& path, float scale = 1.0f);

}  // namespace mmm
