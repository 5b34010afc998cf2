#pragma once

// Procedural video-caption corpus: colored shapes moving across a dark,
// slightly noisy background. A class is a (shape, color, motion direction)
// triple; size and speed vary per clip and are optionally mentioned in the
// caption, so captions always determine the class but can also pin down more.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/binio.hpp"
#include "miles/errors.hpp"
#include "miles/rng.hpp"
#include "miles/tensor.hpp"

namespace miles {

inline constexpr const char* kGeneratorVersion = "moving-shapes/1";

struct CorpusConfig {
  std::size_t train_size = 256;  // clips in the training split
  std::size_t val_size = 64;
  std::size_t test_size = 64;
  std::size_t classes = 8;
  std::size_t frames = 8;  // stored frames per clip
  std::size_t resolution = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  double noise = 0.03;
  double mention_prob = 1.0;       // chance a caption names the clip's size / speed
  std::size_t sentences_per_clip = 1;  // >1 concatenates several descriptions
  std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusConfig, train_size, val_size, test_size, classes, frames,
                                                resolution, channels, patch_size, noise, mention_prob,
                                                sentences_per_clip, seed)

struct VideoClip {
  std::string clip_id;
  Tensor<float> frames;  // (M, H, W, C), values in [0, 1]
  std::string caption;
  int class_id = 0;

  std::size_t num_frames() const { return frames.dim(0); }
};

struct ClipRecord {
  std::string id;
  std::string path;  // relative to the corpus directory
  std::string caption;
  int class_id = 0;
};

struct CorpusManifest {
  std::string split;
  std::vector<ClipRecord> clips;
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
};

// ---------------------------------------------------------------------------
// Caption grammar and vocabulary.

inline constexpr std::array<const char*, 4> kShapes = {"square", "circle", "triangle", "cross"};
inline constexpr std::array<const char*, 4> kColors = {"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 4> kMotions = {"left", "right", "up", "down"};
inline constexpr std::array<const char*, 2> kSizes = {"small", "large"};
inline constexpr std::array<const char*, 2> kSpeeds = {"slowly", "quickly"};
inline constexpr std::size_t kMaxClasses = 64;

struct ClassSpec {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t motion = 0;
};

/// Class k -> attributes. Consecutive class pairs differ only in motion
/// direction (left/right first), so separating them needs more than one frame.
inline ClassSpec class_spec(std::size_t k) {
  if (k >= kMaxClasses) throw ConfigError("class index " + std::to_string(k) + " exceeds 64");
  const std::size_t vertical = k / 32;
  const std::size_t r = (k / 2) % 16;
  ClassSpec c;
  c.motion = (k % 2) + 2 * vertical;
  c.shape = r % 4;
  c.color = (r + r / 4) % 4;
  return c;
}

inline std::string class_caption(std::size_t k) {
  const ClassSpec c = class_spec(k);
  return std::string("a ") + kColors[c.color] + " " + kShapes[c.shape] + " moving " + kMotions[c.motion];
}

class CaptionVocab {
 public:
  static constexpr int kCls = 0;
  static constexpr int kPad = 1;

  CaptionVocab() {
    words_ = {"[CLS]", "[PAD]", "a", "moving"};
    for (auto w : kSizes) words_.emplace_back(w);
    for (auto w : kColors) words_.emplace_back(w);
    for (auto w : kShapes) words_.emplace_back(w);
    for (auto w : kMotions) words_.emplace_back(w);
    for (auto w : kSpeeds) words_.emplace_back(w);
    rebuild();
  }

  explicit CaptionVocab(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[kCls] != "[CLS]" || words_[kPad] != "[PAD]") {
      throw VocabularyError("vocabulary must start with [CLS], [PAD]");
    }
    rebuild();
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw VocabularyError("word '" + word + "' not in vocabulary");
    return it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw VocabularyError("token id " + std::to_string(id) + " not in vocabulary");
    }
    return words_[static_cast<std::size_t>(id)];
  }

 private:
  void rebuild() {
    ids_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!ids_.emplace(words_[i], static_cast<int>(i)).second) throw VocabularyError("duplicate word " + words_[i]);
    }
  }

  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

/// [CLS] followed by the caption's word ids, right-padded to `max_len`.
inline std::vector<int> tokenize_caption(const std::string& caption, const CaptionVocab& vocab, std::size_t max_len) {
  std::istringstream is(caption);
  std::vector<int> ids{CaptionVocab::kCls};
  std::string w;
  while (is >> w) ids.push_back(vocab.id(w));
  if (ids.size() == 1) throw VocabularyError("empty caption");
  if (ids.size() > max_len) {
    throw VocabularyError("caption of " + std::to_string(ids.size() - 1) + " words exceeds text_max_len " +
                          std::to_string(max_len));
  }
  ids.resize(max_len, CaptionVocab::kPad);
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const CaptionVocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == CaptionVocab::kCls || id == CaptionVocab::kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering.

namespace detail {

inline constexpr std::array<std::array<float, 3>, 4> kRgb = {{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.85f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.95f, 0.90f, 0.15f},
}};

inline constexpr std::array<float, 5> kTrail = {1.0f, 0.7f, 0.5f, 0.35f, 0.2f};

inline bool inside_shape(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:
      return dx * dx + dy * dy <= r * r;
    case 2:
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    default:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
  }
}

}  // namespace detail

/// Renders one clip; a pure function of (config, class, global clip index).
inline VideoClip render_clip(const CorpusConfig& cfg, std::size_t class_id, std::uint64_t clip_index,
                             std::string clip_id) {
  Rng rng = make_rng(cfg.seed, {0x636C6970ULL, clip_index});
  const ClassSpec cs = class_spec(class_id);
  const std::size_t res = cfg.resolution;
  const std::size_t M = cfg.frames;
  const double unit = static_cast<double>(res) / 32.0;
  const std::size_t size_idx = uniform_index(rng, 2);
  const std::size_t speed_idx = uniform_index(rng, 2);
  const double radius = (size_idx == 0 ? 4.0 : 6.5) * unit;
  const double speed = (speed_idx == 0 ? 1.5 : 3.0) * unit;
  const double travel = speed * static_cast<double>(M - 1);
  const double lo = radius;
  const double hi = static_cast<double>(res) - radius;
  double dirx = 0.0;
  double diry = 0.0;
  switch (cs.motion) {
    case 0: dirx = -1.0; break;
    case 1: dirx = 1.0; break;
    case 2: diry = -1.0; break;
    default: diry = 1.0; break;
  }
  auto start_along = [&](double dir) {
    const double a = dir > 0 ? lo : lo + travel;
    const double b = dir > 0 ? hi - travel : hi;
    return a < b ? uniform(rng, a, b) : 0.5 * (lo + hi) - dir * travel / 2.0;
  };
  const double cx0 = dirx != 0.0 ? start_along(dirx) : uniform(rng, lo, hi);
  const double cy0 = diry != 0.0 ? start_along(diry) : uniform(rng, lo, hi);
  const float gain = static_cast<float>(uniform(rng, 0.9, 1.05));
  const float background = static_cast<float>(uniform(rng, 0.05, 0.15));
  std::normal_distribution<double> noise(0.0, cfg.noise);

  Tensor<float> frames({M, res, res, cfg.channels});
  for (std::size_t t = 0; t < M; ++t) {
    for (std::size_t y = 0; y < res; ++y) {
      for (std::size_t x = 0; x < res; ++x) {
        // Coverage by the shape now (weight 1) or at the two previous
        // positions, which leave a fading trail.
        float cover = 0.0f;
        for (std::size_t back = 0; back < detail::kTrail.size(); ++back) {
          const double tt = static_cast<double>(t) - static_cast<double>(back);
          const double cx = cx0 + dirx * speed * tt;
          const double cy = cy0 + diry * speed * tt;
          if (detail::inside_shape(cs.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy,
                                   radius)) {
            cover = detail::kTrail[back];
            break;
          }
        }
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          const float base = cover * detail::kRgb[cs.color][c % 3] * gain + (1.0f - cover) * background;
          const float v = base + static_cast<float>(noise(rng));
          frames[((t * res + y) * res + x) * cfg.channels + c] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
  }

  auto sentence = [&]() {
    std::string s = "a ";
    if (uniform01(rng) < cfg.mention_prob) s += std::string(kSizes[size_idx]) + " ";
    s += std::string(kColors[cs.color]) + " " + kShapes[cs.shape] + " moving " + kMotions[cs.motion];
    if (uniform01(rng) < cfg.mention_prob) s += std::string(" ") + kSpeeds[speed_idx];
    return s;
  };
  std::string caption = sentence();
  for (std::size_t i = 1; i < cfg.sentences_per_clip; ++i) caption += " " + sentence();

  return VideoClip{std::move(clip_id), std::move(frames), std::move(caption), static_cast<int>(class_id)};
}

inline void validate_corpus_config(const CorpusConfig& cfg) {
  if (cfg.classes < 2 || cfg.classes > kMaxClasses) throw ConfigError("classes must be in [2, 64]");
  if (cfg.patch_size == 0 || cfg.resolution % cfg.patch_size != 0) {
    throw ConfigError("resolution " + std::to_string(cfg.resolution) + " not divisible by patch size " +
                      std::to_string(cfg.patch_size));
  }
  if (cfg.frames < 1) throw ConfigError("frames must be >= 1");
  if (cfg.channels < 1) throw ConfigError("channels must be >= 1");
  if (cfg.sentences_per_clip < 1) throw ConfigError("sentences_per_clip must be >= 1");
}

inline constexpr std::array<const char*, 3> kSplits = {"train", "val", "test"};

inline std::size_t split_size(const CorpusConfig& cfg, std::size_t split) {
  return split == 0 ? cfg.train_size : split == 1 ? cfg.val_size : cfg.test_size;
}

/// Renders a split in memory. Classes are assigned round-robin so every
/// split is class-balanced up to the remainder.
inline std::vector<VideoClip> generate_split(const CorpusConfig& cfg, std::size_t split) {
  validate_corpus_config(cfg);
  std::uint64_t offset = 0;
  for (std::size_t s = 0; s < split; ++s) offset += split_size(cfg, s);
  std::vector<VideoClip> clips;
  const std::size_t n = split_size(cfg, split);
  clips.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%s_%05zu", kSplits[split], i);
    clips.push_back(render_clip(cfg, i % cfg.classes, offset + i, id));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// On-disk format: one little-endian binary per clip (u32 M,H,W,C then f32
// body) and a JSON-lines manifest per split.

inline void write_clip(const std::filesystem::path& path, const Tensor<float>& frames) {
  if (frames.rank() != 4) throw DimensionError("clip tensor must be (M,H,W,C)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < 4; ++i) binio::put_u32(os, static_cast<std::uint32_t>(frames.dim(i)));
  binio::put_f32s(os, frames.raw(), frames.size());
  if (!os) throw IoError("write failed for " + path.string());
}

inline Tensor<float> read_clip(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing clip file " + path.string());
  Shape shape(4);
  for (auto& d : shape) d = binio::get_u32(is);
  if (shape_numel(shape) == 0 || shape_numel(shape) > (std::size_t{1} << 28)) {
    throw DataError("implausible clip header in " + path.string());
  }
  Tensor<float> frames(shape);
  binio::get_f32s(is, frames.raw(), frames.size());
  return frames;
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& c : m.clips) {
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["path"] = c.path;
    j["caption"] = c.caption;
    j["class"] = c.class_id;
    os << j.dump() << '\n';
  }
}

inline CorpusManifest read_manifest(const std::filesystem::path& path, const std::string& split) {
  std::ifstream is(path);
  if (!is) throw DataError("missing manifest " + path.string());
  CorpusManifest m;
  m.split = split;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    m.clips.push_back(ClipRecord{j.at("id").get<std::string>(), j.at("path").get<std::string>(),
                                 j.at("caption").get<std::string>(), j.at("class").get<int>()});
  }
  return m;
}

/// Writes all three splits plus corpus.json under `out_dir`.
inline std::vector<CorpusManifest> generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  validate_corpus_config(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "clips");
  std::vector<CorpusManifest> manifests;
  for (std::size_t s = 0; s < kSplits.size(); ++s) {
    CorpusManifest m;
    m.split = kSplits[s];
    m.seed = cfg.seed;
    for (auto& clip : generate_split(cfg, s)) {
      const std::string rel = "clips/" + clip.clip_id + ".bin";
      write_clip(out_dir / rel, clip.frames);
      m.clips.push_back(ClipRecord{clip.clip_id, rel, clip.caption, clip.class_id});
    }
    write_manifest(out_dir / (m.split + ".jsonl"), m);
    manifests.push_back(std::move(m));
  }
  nlohmann::ordered_json meta;
  meta["generator_version"] = kGeneratorVersion;
  meta["seed"] = cfg.seed;
  meta["config"] = nlohmann::ordered_json::parse(nlohmann::json(cfg).dump());
  meta["vocab"] = CaptionVocab().words();
  std::vector<std::string> names;
  for (std::size_t k = 0; k < cfg.classes; ++k) names.push_back(class_caption(k));
  meta["class_captions"] = names;
  std::ofstream os(out_dir / "corpus.json");
  os << meta.dump(2) << '\n';
  return manifests;
}

struct CorpusInfo {
  CorpusConfig config;
  CaptionVocab vocab;
  std::vector<std::string> class_captions;
};

inline CorpusInfo read_corpus_info(const std::filesystem::path& dir) {
  const auto path = dir / "corpus.json";
  if (!std::filesystem::exists(path)) throw DataError("no corpus at " + dir.string() + " (missing corpus.json)");
  const auto j = nlohmann::json::parse(binio::read_file(path));
  CorpusInfo info;
  info.config = j.at("config").get<CorpusConfig>();
  info.vocab = CaptionVocab(j.at("vocab").get<std::vector<std::string>>());
  info.class_captions = j.at("class_captions").get<std::vector<std::string>>();
  return info;
}

/// Loads every clip of a split into memory.
inline std::vector<VideoClip> load_split(const std::filesystem::path& dir, const std::string& split) {
  const CorpusManifest m = read_manifest(dir / (split + ".jsonl"), split);
  std::vector<VideoClip> clips;
  clips.reserve(m.clips.size());
  for (const auto& r : m.clips) {
    if (r.caption.empty()) throw DataError("clip " + r.id + " has an empty caption");
    clips.push_back(VideoClip{r.id, read_clip(dir / r.path), r.caption, r.class_id});
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Frame sampling.

enum class SampleMode { train, test };

/// Splits [0, length) into `count` equal segments and picks one frame per
/// segment: uniformly at random for training, the midpoint for testing.
inline std::vector<std::size_t> sample_frame_indices(std::size_t length, std::size_t count, SampleMode mode, Rng& rng) {
  if (count == 0) throw ContractError("sample_frames: target frame count must be >= 1");
  if (length < count) {
    throw DataError("clip has " + std::to_string(length) + " frames, " + std::to_string(count) + " requested");
  }
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) {
    if (mode == SampleMode::test) {
      idx[k] = (2 * k + 1) * length / (2 * count);
    } else {
      const std::size_t a = k * length / count;
      const std::size_t b = (k + 1) * length / count;
      idx[k] = a + uniform_index(rng, b - a);
    }
  }
  return idx;
}

inline Tensor<float> sample_frames(const VideoClip& clip, std::size_t count, SampleMode mode, Rng& rng) {
  const auto idx = sample_frame_indices(clip.num_frames(), count, mode, rng);
  const Shape& s = clip.frames.shape();
  const std::size_t frame = s[1] * s[2] * s[3];
  Tensor<float> out({count, s[1], s[2], s[3]});
  for (std::size_t k = 0; k < count; ++k) {
    std::copy_n(clip.frames.raw() + idx[k] * frame, frame, out.raw() + k * frame);
  }
  return out;
}

}  // namespace miles
