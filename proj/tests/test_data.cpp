#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "miles/data.hpp"

using namespace miles;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("miles_test_data_" + name);
  fs::remove_all(p);
  return p;
}

CorpusConfig small_corpus() {
  CorpusConfig c;
  c.train_size = 32;
  c.val_size = 8;
  c.test_size = 8;
  return c;
}

}  // namespace

TEST(Corpus, DefaultSplitIsClassBalanced) {
  CorpusConfig c;
  const auto train = generate_split(c, 0);
  ASSERT_EQ(train.size(), 256u);
  std::map<int, int> per_class;
  for (const auto& clip : train) ++per_class[clip.class_id];
  ASSERT_EQ(per_class.size(), 8u);
  for (const auto& [k, n] : per_class) EXPECT_EQ(n, 32) << "class " << k;
}

TEST(Corpus, ClipsAreWellFormed) {
  const CorpusConfig c = small_corpus();
  for (const auto& clip : generate_split(c, 0)) {
    EXPECT_EQ(clip.frames.shape(), (Shape{c.frames, c.resolution, c.resolution, c.channels}));
    for (float v : clip.frames.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    EXPECT_FALSE(clip.caption.empty());
  }
}

TEST(Corpus, SameSeedGivesByteIdenticalCorpora) {
  const CorpusConfig c = small_corpus();
  const fs::path a = fresh_dir("a"), b = fresh_dir("b");
  generate_corpus(c, a);
  generate_corpus(c, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(binio::read_file(e.path()), binio::read_file(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 32u + 8u + 8u + 3u + 1u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Corpus, DifferentSeedsDiffer) {
  CorpusConfig c = small_corpus();
  const auto x = generate_split(c, 0);
  c.seed = 1;
  const auto y = generate_split(c, 0);
  EXPECT_NE(x[0].frames.vec(), y[0].frames.vec());
}

TEST(Corpus, SplitsHaveDisjointIds) {
  const CorpusConfig c = small_corpus();
  std::set<std::string> ids;
  std::size_t n = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& clip : generate_split(c, s)) {
      ids.insert(clip.clip_id);
      ++n;
    }
  }
  EXPECT_EQ(ids.size(), n);
}

TEST(Corpus, ClipDependsOnlyOnSeedAndIndex) {
  const CorpusConfig c = small_corpus();
  const auto split = generate_split(c, 0);
  const VideoClip again = render_clip(c, 5 % c.classes, 5, "again");
  EXPECT_EQ(again.frames.vec(), split[5].frames.vec());
  EXPECT_EQ(again.caption, split[5].caption);
}

TEST(Corpus, CaptionDeterminesClass) {
  CorpusConfig c;
  c.classes = 16;
  std::map<std::string, int> seen;
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& clip : generate_split(c, s)) {
      auto [it, inserted] = seen.emplace(clip.caption, clip.class_id);
      EXPECT_EQ(it->second, clip.class_id) << clip.caption;
      // The class description is embedded in the caption.
      const ClassSpec k = class_spec(static_cast<std::size_t>(clip.class_id));
      EXPECT_NE(clip.caption.find(std::string(kColors[k.color]) + " " + kShapes[k.shape] + " moving " + kMotions[k.motion]),
                std::string::npos);
    }
  }
}

TEST(Corpus, ClassAttributesAreDistinct) {
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (std::size_t k = 0; k < kMaxClasses; ++k) {
    const ClassSpec c = class_spec(k);
    EXPECT_TRUE(seen.insert({c.shape, c.color, c.motion}).second) << k;
  }
  // Pairs (2j, 2j+1) differ only in direction.
  for (std::size_t k = 0; k < 8; k += 2) {
    EXPECT_EQ(class_spec(k).shape, class_spec(k + 1).shape);
    EXPECT_EQ(class_spec(k).color, class_spec(k + 1).color);
    EXPECT_NE(class_spec(k).motion, class_spec(k + 1).motion);
  }
  EXPECT_THROW(class_spec(64), ConfigError);
}

TEST(Corpus, InvalidConfigIsConfigError) {
  CorpusConfig c;
  c.resolution = 30;
  EXPECT_THROW(generate_split(c, 0), ConfigError);
  c = CorpusConfig{};
  c.classes = 1;
  EXPECT_THROW(validate_corpus_config(c), ConfigError);
}

// Oracle: nearest centroid on per-channel mean pixels, labelled by colour.
TEST(Corpus, ColourIsLearnableFromMeanPixels) {
  const CorpusConfig c;
  const auto train = generate_split(c, 0);
  const auto test = generate_split(c, 2);
  auto feature = [&](const VideoClip& clip) {
    std::array<double, 3> f{};
    const std::size_t n = clip.frames.size() / c.channels;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) f[ch] += clip.frames[i * c.channels + ch] / static_cast<double>(n);
    }
    return f;
  };
  std::array<std::array<double, 3>, 4> centroid{};
  std::array<int, 4> count{};
  for (const auto& clip : train) {
    const auto col = class_spec(static_cast<std::size_t>(clip.class_id)).color;
    const auto f = feature(clip);
    for (int ch = 0; ch < 3; ++ch) centroid[col][ch] += f[ch];
    ++count[col];
  }
  for (int k = 0; k < 4; ++k) {
    for (int ch = 0; ch < 3; ++ch) centroid[k][ch] /= std::max(count[k], 1);
  }
  int correct = 0;
  for (const auto& clip : test) {
    const auto f = feature(clip);
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 4; ++k) {
      if (count[k] == 0) continue;
      double d = 0;
      for (int ch = 0; ch < 3; ++ch) d += (f[ch] - centroid[k][ch]) * (f[ch] - centroid[k][ch]);
      if (d < best_d) best_d = d, best = k;
    }
    if (best == static_cast<int>(class_spec(static_cast<std::size_t>(clip.class_id)).color)) ++correct;
  }
  int colours = 0;
  for (int k = 0; k < 4; ++k) colours += count[k] > 0;
  const double chance = 1.0 / colours;
  EXPECT_GT(static_cast<double>(correct) / test.size(), chance + 0.2);
}

TEST(Corpus, RoundTripThroughDisk) {
  const CorpusConfig c = small_corpus();
  const fs::path dir = fresh_dir("roundtrip");
  const auto manifests = generate_corpus(c, dir);
  ASSERT_EQ(manifests.size(), 3u);
  const auto info = read_corpus_info(dir);
  EXPECT_EQ(info.class_captions.size(), c.classes);
  EXPECT_EQ(info.class_captions[0], class_caption(0));
  const auto loaded = load_split(dir, "val");
  const auto expected = generate_split(c, 1);
  ASSERT_EQ(loaded.size(), expected.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].clip_id, expected[i].clip_id);
    EXPECT_EQ(loaded[i].caption, expected[i].caption);
    EXPECT_EQ(loaded[i].class_id, expected[i].class_id);
    EXPECT_EQ(loaded[i].frames.vec(), expected[i].frames.vec());
  }
  for (const auto& m : manifests) {
    for (const auto& r : m.clips) EXPECT_TRUE(fs::exists(dir / r.path)) << r.path;
  }
  fs::remove_all(dir);
}

TEST(Corpus, ClipFileHeaderIsLittleEndianDims) {
  const fs::path dir = fresh_dir("clipfile");
  fs::create_directories(dir);
  Tensor<float> f({2, 4, 4, 3}, 0.25f);
  write_clip(dir / "x.bin", f);
  const std::string bytes = binio::read_file(dir / "x.bin");
  ASSERT_EQ(bytes.size(), 16u + 4u * f.size());
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 4);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 3);
  EXPECT_EQ(read_clip(dir / "x.bin").vec(), f.vec());
  fs::remove_all(dir);
}

TEST(Corpus, MissingCorpusIsDataError) {
  EXPECT_THROW(read_corpus_info(fresh_dir("missing")), DataError);
  EXPECT_THROW(load_split(fresh_dir("missing"), "train"), DataError);
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization.

TEST(Tokenize, EmptyCaptionIsRejected) {
  const CaptionVocab v;
  EXPECT_THROW(tokenize_caption("", v, 10), VocabularyError);
}

TEST(Tokenize, DirectLookupWithClsAndPadding) {
  const CaptionVocab v({"[CLS]", "[PAD]", "a", "b", "c", "red", "d", "e", "f", "square"});
  ASSERT_EQ(v.id("red"), 5);
  ASSERT_EQ(v.id("square"), 9);
  EXPECT_EQ(tokenize_caption("red square", v, 6), (std::vector<int>{0, 5, 9, 1, 1, 1}));
}

TEST(Tokenize, UnknownWordAndOverlongCaptionAreVocabularyErrors) {
  const CaptionVocab v;
  EXPECT_THROW(tokenize_caption("a purple square", v, 10), VocabularyError);
  EXPECT_THROW(tokenize_caption("a red square moving left", v, 4), VocabularyError);
  EXPECT_THROW(v.word(99), VocabularyError);
}

TEST(Tokenize, RoundTripOverGeneratedCorpus) {
  const CaptionVocab v;
  EXPECT_LE(v.size(), 64u);
  EXPECT_EQ(v.id("[CLS]"), 0);
  CorpusConfig c;
  c.classes = 64;
  c.train_size = 256;
  c.mention_prob = 0.5;
  for (const auto& clip : generate_split(c, 0)) {
    const auto ids = tokenize_caption(clip.caption, v, 10);
    EXPECT_EQ(ids.front(), CaptionVocab::kCls);
    EXPECT_EQ(detokenize(ids, v), clip.caption);
  }
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(detokenize(tokenize_caption(class_caption(k), v, 10), v), class_caption(k));
}

TEST(Tokenize, VocabularyMustStartWithSpecialTokens) {
  EXPECT_THROW(CaptionVocab({"a", "b"}), VocabularyError);
  EXPECT_THROW(CaptionVocab({"[CLS]", "[PAD]", "a", "a"}), VocabularyError);
}

// ---------------------------------------------------------------------------
// Frame sampling.

TEST(SampleFrames, FullLengthReturnsAllFramesInOrder) {
  Rng rng(1);
  for (auto mode : {SampleMode::train, SampleMode::test}) {
    EXPECT_EQ(sample_frame_indices(8, 8, mode, rng), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  }
}

TEST(SampleFrames, TestModeTakesSegmentMidpoints) {
  Rng rng(1);
  EXPECT_EQ(sample_frame_indices(8, 4, SampleMode::test, rng), (std::vector<std::size_t>{1, 3, 5, 7}));
  // Enumerated midpoint oracle floor((2k+1)L/(2M)).
  for (std::size_t L = 1; L <= 16; ++L) {
    for (std::size_t M = 1; M <= L; ++M) {
      const auto idx = sample_frame_indices(L, M, SampleMode::test, rng);
      for (std::size_t k = 0; k < M; ++k) EXPECT_EQ(idx[k], (2 * k + 1) * L / (2 * M));
    }
  }
}

TEST(SampleFrames, TrainModePicksOnePerSegment) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto idx = sample_frame_indices(10, 4, SampleMode::train, rng);
    for (std::size_t k = 0; k < 4; ++k) {
      ASSERT_GE(idx[k], k * 10 / 4);
      ASSERT_LT(idx[k], (k + 1) * 10 / 4);
      if (k) {
        ASSERT_GT(idx[k], idx[k - 1]);
      }
    }
  }
}

TEST(SampleFrames, TooFewFramesIsDataError) {
  Rng rng(1);
  EXPECT_THROW(sample_frame_indices(3, 4, SampleMode::test, rng), DataError);
  EXPECT_THROW(sample_frame_indices(3, 0, SampleMode::test, rng), ContractError);
}

TEST(SampleFrames, CopiesTheChosenFrames) {
  Tensor<float> f({4, 2, 2, 1});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(i / 4);  // frame index
  const VideoClip clip{"x", f, "a red square moving left", 0};
  Rng rng(1);
  const auto out = sample_frames(clip, 2, SampleMode::test, rng);
  EXPECT_EQ(out[0], 1.0f);
  EXPECT_EQ(out[4], 3.0f);
}
