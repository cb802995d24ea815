#include "mmm/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mmm/tensor_io.hpp"

namespace mmm {

namespace {

const std::vector<std::string> kColors = {"red",  "green",   "blue",   "yellow",
                                          "cyan", "magenta", "orange", "white"};
const std::vector<std::array<float, 3>> kColorValues = {
    {0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.15f, 0.2f, 0.9f}, {0.9f, 0.9f, 0.1f},
    {0.1f, 0.85f, 0.85f}, {0.85f, 0.1f, 0.85f}, {0.95f, 0.55f, 0.1f}, {0.95f, 0.95f, 0.95f}};
const std::vector<std::string> kClassNames = {"square", "circle", "triangle"};
constexpr float kBackgroundShade = 0.08f;
constexpr int kFeatDim = 8;

std::vector<std::string> build_words() {
  std::vector<std::string> words = {"a",  "above", "below", "left",  "right", "of",
                                    "behind", "in", "front", "and", "near"};
  words.insert(words.end(), kColors.begin(), kColors.end());
  words.insert(words.end(), kClassNames.begin(), kClassNames.end());
  return words;
}

}  // namespace

const std::vector<std::string>& grammar_words() {
  static const std::vector<std::string> words = build_words();
  return words;
}

const std::vector<std::string>& palette_names() { return kColors; }
const std::vector<std::array<float, 3>>& palette_colors() { return kColorValues; }
int num_shape_classes() { return static_cast<int>(kClassNames.size()); }

std::string DatasetConfig::to_json() const {
  nlohmann::json doc{{"canvas", canvas},
                     {"patch", patch},
                     {"n_bins", n_bins},
                     {"rgb_vocab", rgb_vocab},
                     {"depth_vocab", depth_vocab},
                     {"seg_vocab", seg_vocab},
                     {"feat_vocab", feat_vocab},
                     {"n_sentinels", n_sentinels},
                     {"bbox_max_len", bbox_max_len},
                     {"caption_max_len", caption_max_len}};
  return doc.dump(2);
}

DatasetConfig DatasetConfig::from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  DatasetConfig cfg;
  cfg.canvas = doc.value("canvas", 32);
  cfg.patch = doc.value("patch", 4);
  cfg.n_bins = doc.value("n_bins", 1000);
  cfg.rgb_vocab = doc.value("rgb_vocab", 256);
  cfg.depth_vocab = doc.value("depth_vocab", 128);
  cfg.seg_vocab = doc.value("seg_vocab", 64);
  cfg.feat_vocab = doc.value("feat_vocab", 128);
  cfg.n_sentinels = doc.value("n_sentinels", 32);
  cfg.bbox_max_len = doc.value("bbox_max_len", 24);
  cfg.caption_max_len = doc.value("caption_max_len", 28);
  return cfg;
}

void DatasetConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write dataset config: " + path);
  out << to_json() << "\n";
}

DatasetConfig DatasetConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open dataset config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

Registry make_registry(const DatasetConfig& cfg) {
  if (cfg.canvas % cfg.patch != 0) throw ConfigError("canvas must be divisible by patch");
  const int side = cfg.token_side();

  auto dense = [&](const std::string& name, int vocab) {
    ModalitySpec spec;
    spec.name = name;
    spec.kind = ModalityKind::DenseGrid;
    spec.vocab_size = static_cast<std::uint32_t>(vocab);
    spec.grid_h = side;
    spec.grid_w = side;
    return spec;
  };

  const std::uint32_t n_words = static_cast<std::uint32_t>(grammar_words().size());
  const std::uint32_t n_classes = static_cast<std::uint32_t>(kClassNames.size());
  const std::uint32_t bins = static_cast<std::uint32_t>(cfg.n_bins);
  const std::uint32_t sent = static_cast<std::uint32_t>(cfg.n_sentinels);

  // fixed id-block layout of the joint caption/bbox vocabulary
  std::map<std::string, IdBlock> blocks;
  std::uint32_t at = 0;
  auto block = [&](const std::string& name, std::uint32_t size) {
    blocks[name] = IdBlock{at, at + size};
    at += size;
  };
  block("pad", 1);
  block("eos", 1);
  block("sentinel", sent);
  block("xmin", bins);
  block("ymin", bins);
  block("xmax", bins);
  block("ymax", bins);
  block("class", n_classes);
  block("word", n_words);
  const std::uint32_t joint_vocab = at;

  auto sequence = [&](const std::string& name, int max_len) {
    ModalitySpec spec;
    spec.name = name;
    spec.kind = ModalityKind::Sequence;
    spec.vocab_size = joint_vocab;
    spec.max_seq_len = max_len;
    spec.special_tokens = {{"pad", 0}, {"eos", 1}};
    spec.id_blocks = blocks;
    return spec;
  };

  ModalitySpec pixels;
  pixels.name = "rgb_pixels";
  pixels.kind = ModalityKind::PixelInput;
  pixels.vocab_size = 1;
  pixels.grid_h = side;
  pixels.grid_w = side;

  return Registry({dense("rgb", cfg.rgb_vocab), dense("depth", cfg.depth_vocab),
                   dense("seg", cfg.seg_vocab), dense("feat", cfg.feat_vocab),
                   sequence("bbox", cfg.bbox_max_len), sequence("caption", cfg.caption_max_len),
                   pixels});
}

Scene generate_scene(Rng& rng, const DatasetConfig& cfg) {
  std::uniform_int_distribution<int> n_dist(1, 4);
  std::uniform_int_distribution<int> cls_dist(0, num_shape_classes() - 1);
  std::uniform_int_distribution<int> color_dist(0, static_cast<int>(kColors.size()) - 1);
  std::uniform_int_distribution<int> half_dist(3, 7);

  Scene scene;
  const int n = n_dist(rng);
  for (int i = 0; i < n; ++i) {
    Shape s;
    s.cls = static_cast<ShapeClass>(cls_dist(rng));
    s.color = color_dist(rng);
    s.half = half_dist(rng);
    // rejection-free placement: sample the center inside the safe band
    std::uniform_int_distribution<int> pos(s.half, cfg.canvas - 1 - s.half);
    s.cy = pos(rng);
    s.cx = pos(rng);
    scene.shapes.push_back(s);
  }
  // distinct depth layers
  std::vector<int> layers(n);
  for (int i = 0; i < n; ++i) layers[i] = i;
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(layers[i], layers[pick(rng)]);
  }
  for (int i = 0; i < n; ++i) scene.shapes[i].depth_layer = layers[i];
  return scene;
}

GridT<float> shape_mask(const Shape& shape, int canvas) {
  GridT<float> mask(canvas, canvas, 1);
  const int h = shape.half;
  for (int y = std::max(0, shape.cy - h); y <= std::min(canvas - 1, shape.cy + h); ++y) {
    for (int x = std::max(0, shape.cx - h); x <= std::min(canvas - 1, shape.cx + h); ++x) {
      const int dy = y - shape.cy, dx = x - shape.cx;
      bool in = false;
      switch (shape.cls) {
        case ShapeClass::Square: in = true; break;
        case ShapeClass::Circle: in = dy * dy + dx * dx <= h * h; break;
        case ShapeClass::Triangle: in = std::abs(dx) * 2 <= dy + h; break;  // apex up
      }
      if (in) mask.at(y, x, 0) = 1.0f;
    }
  }
  return mask;
}

namespace {

std::string relation_word(const Shape& a, const Shape& b, int canvas) {
  // overlapping extents are described by depth; disjoint ones by position
  GridT<float> ma = shape_mask(a, canvas), mb = shape_mask(b, canvas);
  bool overlap = false;
  for (int i = 0; i < ma.cells() && !overlap; ++i) {
    overlap = ma.data(i, 0) > 0 && mb.data(i, 0) > 0;
  }
  if (overlap && a.depth_layer != b.depth_layer) {
    return a.depth_layer < b.depth_layer ? "in front of" : "behind";
  }
  const int dy = b.cy - a.cy, dx = b.cx - a.cx;
  if (dy == 0 && dx == 0) return "near";
  if (std::abs(dy) >= std::abs(dx)) return dy > 0 ? "above" : "below";
  return dx > 0 ? "left of" : "right of";
}

}  // namespace

AlignedSample render_sample(const Scene& scene, const DatasetConfig& cfg) {
  const int canvas = cfg.canvas;
  AlignedSample out;
  out.rgb = Grid(canvas, canvas, 3);
  out.depth = Grid(canvas, canvas, 1);
  out.seg = Grid(canvas, canvas, 1);
  out.feat = Grid(canvas, canvas, kFeatDim);

  for (int i = 0; i < canvas * canvas; ++i) {
    out.rgb.data(i, 0) = out.rgb.data(i, 1) = out.rgb.data(i, 2) = kBackgroundShade;
    out.depth.data(i, 0) = 1.0f;
  }

  // painter's algorithm: far layers first, layer 0 (nearest) last
  std::vector<const Shape*> order;
  for (const auto& s : scene.shapes) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const Shape* a, const Shape* b) {
    return a->depth_layer > b->depth_layer;
  });
  for (const Shape* s : order) {
    GridT<float> mask = shape_mask(*s, canvas);
    const auto& color = kColorValues[s->color];
    // dyadic values keep 1 - (1 - d) exact for the flipped-depth involution
    const float depth_value = 0.25f + 0.125f * static_cast<float>(s->depth_layer);
    for (int i = 0; i < canvas * canvas; ++i) {
      if (mask.data(i, 0) <= 0) continue;
      out.rgb.data(i, 0) = color[0];
      out.rgb.data(i, 1) = color[1];
      out.rgb.data(i, 2) = color[2];
      out.depth.data(i, 0) = depth_value;
      out.seg.data(i, 0) = static_cast<float>(static_cast<int>(s->cls) + 1);
    }
  }

  // one-hot class embedding smoothed with a 3x3 box blur
  Grid onehot(canvas, canvas, kFeatDim);
  for (int y = 0; y < canvas; ++y) {
    for (int x = 0; x < canvas; ++x) {
      onehot.at(y, x, static_cast<int>(out.seg.at(y, x, 0))) = 1.0f;
    }
  }
  for (int y = 0; y < canvas; ++y) {
    for (int x = 0; x < canvas; ++x) {
      for (int c = 0; c < kFeatDim; ++c) {
        float sum = 0;
        int count = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= canvas || xx < 0 || xx >= canvas) continue;
            sum += onehot.at(yy, xx, c);
            ++count;
          }
        }
        out.feat.at(y, x, c) = sum / static_cast<float>(count);
      }
    }
  }

  // tight full-extent boxes, occlusion ignored
  for (const auto& s : scene.shapes) {
    GridT<float> mask = shape_mask(s, canvas);
    int ymin = canvas, ymax = -1, xmin = canvas, xmax = -1;
    for (int y = 0; y < canvas; ++y) {
      for (int x = 0; x < canvas; ++x) {
        if (mask.at(y, x, 0) <= 0) continue;
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
    }
    BBox box;
    box.xmin = static_cast<double>(xmin) / canvas;
    box.xmax = static_cast<double>(xmax + 1) / canvas;
    box.ymin = static_cast<double>(ymin) / canvas;
    box.ymax = static_cast<double>(ymax + 1) / canvas;
    box.class_id = static_cast<int>(s.cls);
    out.bboxes.push_back(box);
  }

  // caption covers every shape's color and class, nearest shape first
  std::vector<const Shape*> mention;
  for (const auto& s : scene.shapes) mention.push_back(&s);
  std::sort(mention.begin(), mention.end(), [](const Shape* a, const Shape* b) {
    return a->depth_layer < b->depth_layer;
  });
  std::ostringstream caption;
  for (std::size_t i = 0; i < mention.size(); ++i) {
    if (i > 0) caption << ' ' << relation_word(*mention[i - 1], *mention[i], canvas) << ' ';
    caption << "a " << kColors[mention[i]->color] << ' '
            << kClassNames[static_cast<int>(mention[i]->cls)];
  }
  out.caption = caption.str();
  return out;
}

TransferTask transfer_task_from_string(const std::string& s) {
  if (s == "edges") return TransferTask::Edges;
  if (s == "flipped-depth") return TransferTask::FlippedDepth;
  if (s == "coarse-seg") return TransferTask::CoarseSeg;
  throw ConfigError("unknown transfer task: " + s);
}

std::string to_string(TransferTask task) {
  switch (task) {
    case TransferTask::Edges: return "edges";
    case TransferTask::FlippedDepth: return "flipped-depth";
    case TransferTask::CoarseSeg: return "coarse-seg";
  }
  throw ContractError("unknown transfer task");
}

Grid derive_transfer_task(const AlignedSample& sample, TransferTask task) {
  switch (task) {
    case TransferTask::Edges: {
      const Grid& seg = sample.seg;
      Grid edges(seg.h, seg.w, 1);
      for (int y = 0; y < seg.h; ++y) {
        for (int x = 0; x < seg.w; ++x) {
          float own = seg.at(y, x, 0);
          if (own == 0) continue;  // boundary cells live on the shape side
          const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
          for (int k = 0; k < 4; ++k) {
            int yy = y + dy[k], xx = x + dx[k];
            if (yy < 0 || yy >= seg.h || xx < 0 || xx >= seg.w) continue;
            if (seg.at(yy, xx, 0) != own) {
              edges.at(y, x, 0) = 1.0f;
              break;
            }
          }
        }
      }
      return edges;
    }
    case TransferTask::FlippedDepth: {
      Grid flipped = sample.depth;
      flipped.data = (1.0f - flipped.data.array()).matrix();
      return flipped;
    }
    case TransferTask::CoarseSeg: {
      const Grid& seg = sample.seg;
      Grid coarse(seg.h / 2, seg.w / 2, 1);
      for (int y = 0; y < coarse.h; ++y) {
        for (int x = 0; x < coarse.w; ++x) {
          std::array<int, 16> votes{};
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              ++votes[static_cast<int>(seg.at(2 * y + dy, 2 * x + dx, 0))];
            }
          }
          int best = 0;
          for (int c = 1; c < 16; ++c) {
            if (votes[c] > votes[best]) best = c;  // ties keep the smaller id
          }
          coarse.at(y, x, 0) = static_cast<float>(best);
        }
      }
      return coarse;
    }
  }
  throw ContractError("unknown transfer task");
}

ad::Mat<float> extract_raw_patches(const Grid& raw, int patch_h, int patch_w) {
  if (raw.h % patch_h != 0 || raw.w % patch_w != 0) {
    throw ShapeError("grid shape not divisible by patch size");
  }
  const int th = raw.h / patch_h, tw = raw.w / patch_w;
  ad::Mat<float> patches(th * tw, patch_h * patch_w * raw.c);
  for (int py = 0; py < th; ++py) {
    for (int px = 0; px < tw; ++px) {
      int col = 0;
      for (int dy = 0; dy < patch_h; ++dy) {
        for (int dx = 0; dx < patch_w; ++dx) {
          for (int c = 0; c < raw.c; ++c) {
            patches(py * tw + px, col++) = raw.at(py * patch_h + dy, px * patch_w + dx, c);
          }
        }
      }
    }
  }
  return patches;
}

namespace {
constexpr char kShardMagic[4] = {'4', 'M', 'S', 'H'};
constexpr std::uint32_t kShardVersion = 1;
}  // namespace

void write_shard(const std::vector<SampleTokens>& samples, const Registry& registry,
                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write shard: " + path);
  io::write_magic(out, kShardMagic);
  io::write_u32(out, kShardVersion);
  io::write_u64(out, registry.hash());
  io::write_u64(out, static_cast<std::uint64_t>(samples.size()));
  for (const auto& sample : samples) {
    for (const auto& spec : registry.modalities()) {
      if (spec.is_pixel()) continue;
      if (spec.is_dense()) {
        const TokenGrid& grid = sample.grid(spec.name);
        registry.validate_grid(grid);
        io::write_u16_array(out, grid.ids);
      } else {
        const TokenSeq& seq = sample.seq(spec.name);
        registry.validate_seq(seq);
        io::write_u32(out, static_cast<std::uint32_t>(seq.ids.size()));
        io::write_u16_array(out, seq.ids);
      }
    }
  }
}

std::vector<SampleTokens> read_shard(const std::string& path, const Registry& registry) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open shard: " + path);
  io::expect_magic(in, kShardMagic, "shard " + path);
  if (io::read_u32(in) != kShardVersion) throw LoadError("unsupported shard version");
  std::uint64_t hash = io::read_u64(in);
  if (hash != registry.hash()) {
    throw LoadError("shard " + path + " was tokenized under registry " + to_hex(hash) +
                    ", current registry is " + to_hex(registry.hash()));
  }
  std::uint64_t count = io::read_u64(in);
  std::vector<SampleTokens> samples;
  samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SampleTokens sample;
    for (const auto& spec : registry.modalities()) {
      if (spec.is_pixel()) continue;
      if (spec.is_dense()) {
        TokenGrid grid;
        grid.modality = spec.name;
        grid.ids = io::read_u16_array(in, static_cast<std::size_t>(spec.num_positions()));
        for (TokenId id : grid.ids) {
          if (id >= spec.vocab_size) {
            throw LoadError("shard " + path + ": oversized id in modality " + spec.name);
          }
        }
        sample.grids.push_back(std::move(grid));
      } else {
        std::uint32_t len = io::read_u32(in);
        if (len > static_cast<std::uint32_t>(spec.max_seq_len)) {
          throw LoadError("shard " + path + ": sequence longer than max_seq_len");
        }
        TokenSeq seq;
        seq.modality = spec.name;
        seq.ids = io::read_u16_array(in, len);
        for (TokenId id : seq.ids) {
          if (id >= spec.vocab_size) {
            throw LoadError("shard " + path + ": oversized id in modality " + spec.name);
          }
        }
        sample.seqs.push_back(std::move(seq));
      }
    }
    samples.push_back(std::move(sample));
  }
  // trailing data means the header count lied
  char probe;
  if (in.read(&probe, 1)) throw LoadError("shard " + path + ": payload exceeds header count");
  return samples;
}

void Manifest::save(const std::string& path) const {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["registry_hash"] = registry_hash;
  doc["total_samples"] = total_samples;
  doc["shards"] = nlohmann::json::array();
  for (const auto& entry : shards) {
    doc["shards"].push_back({{"path", entry.path}, {"samples", entry.samples}});
  }
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write manifest: " + path);
  out << doc.dump(2) << "\n";
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest: " + path);
  nlohmann::json doc = nlohmann::json::parse(in);
  if (doc.at("version").get<int>() != 1) throw LoadError("unsupported manifest version");
  Manifest m;
  m.registry_hash = doc.at("registry_hash").get<std::string>();
  m.total_samples = doc.at("total_samples").get<std::int64_t>();
  for (const auto& entry : doc.at("shards")) {
    m.shards.push_back({entry.at("path").get<std::string>(), entry.at("samples").get<std::int64_t>()});
  }
  return m;
}

void write_ppm(const Grid& rgb, const std::string& path) {
  if (rgb.c != 3) throw ShapeError("write_ppm expects a 3-channel grid");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write image: " + path);
  out << "P6\n" << rgb.w << ' ' << rgb.h << "\n255\n";
  for (int i = 0; i < rgb.cells(); ++i) {
    for (int c = 0; c < 3; ++c) {
      float v = std::clamp(rgb.data(i, c), 0.0f, 1.0f);
      out.put(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
    }
  }
}

void write_pgm(const Grid& mono, const std::string& path, float scale) {
  if (mono.c != 1) throw ShapeError("write_pgm expects a 1-channel grid");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write image: " + path);
  out << "P5\n" << mono.w << ' ' << mono.h << "\n255\n";
  for (int i = 0; i < mono.cells(); ++i) {
    float v = std::clamp(mono.data(i, 0) * scale, 0.0f, 1.0f);
    out.put(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
  }
}

}  // namespace mmm
