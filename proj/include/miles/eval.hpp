#pragma once

// Retrieval metrics and zero-shot classification.
//
// Ranks are pessimistic: a gallery item tied with the ground truth counts as
// ranked ahead of it.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/data.hpp"
#include "miles/encoders.hpp"
#include "miles/errors.hpp"
#include "miles/tensor.hpp"

namespace miles {

enum class Direction { t2v, v2t };

inline const char* to_string(Direction d) { return d == Direction::t2v ? "t2v" : "v2t"; }

inline constexpr std::array<std::size_t, 4> kRecallAt = {1, 5, 10, 50};

struct RetrievalReport {
  Direction direction = Direction::t2v;
  std::array<double, kRecallAt.size()> r_at{};  // percentages, aligned with kRecallAt
  double med_r = 0.0;
  double mean_r = 0.0;
  std::size_t n_queries = 0;
  std::size_t gallery = 0;

  double recall(std::size_t k) const {
    for (std::size_t i = 0; i < kRecallAt.size(); ++i) {
      if (kRecallAt[i] == k) return r_at[i];
    }
    throw ContractError("recall@" + std::to_string(k) + " is not reported");
  }
};

inline nlohmann::ordered_json to_json_value(const RetrievalReport& r) {
  nlohmann::ordered_json j;
  j["direction"] = to_string(r.direction);
  for (std::size_t i = 0; i < kRecallAt.size(); ++i) j["R@" + std::to_string(kRecallAt[i])] = r.r_at[i];
  j["MedR"] = r.med_r;
  j["MnR"] = r.mean_r;
  j["queries"] = r.n_queries;
  j["gallery"] = r.gallery;
  return j;
}

/// 1 + number of gallery items scoring at least as high as the truth
/// (excluding the truth itself).
template <typename T>
std::size_t rank_of_truth(std::span<const T> row, std::size_t truth) {
  if (truth >= row.size()) throw ContractError("rank_of_truth: truth index outside the gallery");
  const T s = row[truth];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j != truth && row[j] >= s) ++rank;
  }
  return rank;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline RetrievalReport report_from_ranks(const std::vector<std::size_t>& ranks, std::size_t gallery,
                                         Direction direction) {
  if (ranks.empty()) throw ContractError("retrieval report over an empty query set");
  RetrievalReport r;
  r.direction = direction;
  r.n_queries = ranks.size();
  r.gallery = gallery;
  std::vector<double> rd(ranks.begin(), ranks.end());
  for (std::size_t i = 0; i < kRecallAt.size(); ++i) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t x) { return x <= kRecallAt[i]; });
    r.r_at[i] = 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
  }
  r.med_r = median(rd);
  double sum = 0.0;
  for (double x : rd) sum += x;
  r.mean_r = sum / static_cast<double>(ranks.size());
  return r;
}

/// S is (Q, G), one row per query; truth[q] is the gallery index of query q.
template <typename T>
RetrievalReport retrieval_report(const Tensor<T>& S, const std::vector<std::size_t>& truth, Direction direction) {
  if (S.rank() != 2) throw DimensionError("similarity matrix must be 2-D");
  const std::size_t Q = S.dim(0), G = S.dim(1);
  if (Q == 0) throw ContractError("retrieval report over an empty query set");
  if (truth.size() != Q) throw ContractError("one ground-truth index per query required");
  if (!S.all_finite()) throw NumericError("similarity matrix has non-finite entries");
  std::vector<std::size_t> ranks(Q);
  for (std::size_t q = 0; q < Q; ++q) ranks[q] = rank_of_truth(std::span<const T>(S.raw() + q * G, G), truth[q]);
  return report_from_ranks(ranks, G, direction);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& m) {
  const std::size_t R = m.dim(0), C = m.dim(1);
  Tensor<T> out({C, R});
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = m[r * C + c];
  }
  return out;
}

/// (A, P) x (B, P) -> (A, B) dot products.
template <typename T>
Tensor<T> similarity_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(1) != b.dim(1)) throw DimensionError("similarity: embedding widths differ");
  const std::size_t A = a.dim(0), B = b.dim(0), P = a.dim(1);
  Tensor<T> out({A, B});
  for (std::size_t i = 0; i < A; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      out[i * B + j] = similarity(std::span<const T>(a.raw() + i * P, P), std::span<const T>(b.raw() + j * P, P));
    }
  }
  return out;
}

struct ZeroShotReport {
  double accuracy = 0.0;  // percent
  std::size_t classes = 0;
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
};

inline nlohmann::ordered_json to_json_value(const ZeroShotReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["classes"] = r.classes;
  j["videos"] = r.n;
  j["confusion"] = r.confusion;
  return j;
}

/// Predicts, for each video, the class whose caption embedding scores
/// highest (lowest class index on ties).
template <typename T>
ZeroShotReport zero_shot_classify(const Tensor<T>& videos, const Tensor<T>& class_texts,
                                  const std::vector<std::size_t>& labels) {
  const std::size_t V = videos.dim(0), C = class_texts.dim(0);
  if (labels.size() != V) throw ContractError("one label per video required");
  if (V == 0 || C == 0) throw ContractError("zero-shot classification needs videos and classes");
  const Tensor<T> S = similarity_rows(videos, class_texts);
  ZeroShotReport r;
  r.classes = C;
  r.n = V;
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < V; ++i) {
    if (labels[i] >= C) throw ContractError("label outside the class set");
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (S[i * C + c] > S[i * C + best]) best = c;
    }
    r.predictions.push_back(best);
    ++r.confusion[labels[i]][best];
    if (best == labels[i]) ++correct;
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(V);
  return r;
}

// ---------------------------------------------------------------------------
// Embedding.

/// Video embeddings (G, proj_dim) with test-time frame sampling. A model
/// whose temporal table is shorter than `frames` is evaluated with the table
/// zero-extended, as at a curriculum stage boundary.
inline Tensor<float> embed_videos(const EncoderConfig& model, const ParamStore<float>& video,
                                  const std::vector<VideoClip>& clips, std::size_t frames, std::size_t batch_size) {
  if (clips.empty()) throw ContractError("no clips to embed");
  ParamStore<float> ps = video.clone_values();
  expand_temporal_table(ps, frames);
  Tensor<float> out({clips.size(), model.proj_dim});
  Rng unused(0);
  for (std::size_t b = 0; b < clips.size(); b += batch_size) {
    const std::size_t e = std::min(clips.size(), b + batch_size);
    std::vector<Tensor<float>> fr;
    for (std::size_t i = b; i < e; ++i) fr.push_back(sample_frames(clips[i], frames, SampleMode::test, unused));
    const VideoBatch<float> vb = make_video_batch<float>(fr, model.patch_size);
    Tape<float> tape(false);
    const VideoEncoding<float> enc = video_forward(tape, ps, model, vb, nullptr);
    std::copy(enc.cls.value().raw(), enc.cls.value().raw() + enc.cls.value().size(), out.raw() + b * model.proj_dim);
  }
  return out;
}

inline Tensor<float> embed_texts(const EncoderConfig& model, const ParamStore<float>& text,
                                 const std::vector<std::vector<int>>& ids, std::size_t batch_size) {
  if (ids.empty()) throw ContractError("no captions to embed");
  ParamStore<float> ps = text.clone_values();
  Tensor<float> out({ids.size(), model.proj_dim});
  for (std::size_t b = 0; b < ids.size(); b += batch_size) {
    const std::size_t e = std::min(ids.size(), b + batch_size);
    std::vector<std::vector<int>> chunk(ids.begin() + static_cast<std::ptrdiff_t>(b),
                                        ids.begin() + static_cast<std::ptrdiff_t>(e));
    Tape<float> tape(false);
    const TextEncoding<float> enc = text_forward(tape, ps, model, chunk);
    std::copy(enc.cls.value().raw(), enc.cls.value().raw() + enc.cls.value().size(), out.raw() + b * model.proj_dim);
  }
  return out;
}

struct EvalResult {
  RetrievalReport t2v;
  RetrievalReport v2t;
  ZeroShotReport zero_shot;
};

/// Caption-to-clip retrieval in both directions (the i-th caption belongs to
/// the i-th clip) and zero-shot classification against the class captions.
inline EvalResult evaluate(const EncoderConfig& model, const ParamStore<float>& video, const ParamStore<float>& text,
                           const std::vector<VideoClip>& clips, const CaptionVocab& vocab,
                           const std::vector<std::string>& class_captions, std::size_t frames,
                           std::size_t batch_size) {
  std::vector<std::vector<int>> caps, cls;
  std::vector<std::size_t> truth(clips.size()), labels(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    caps.push_back(tokenize_caption(clips[i].caption, vocab, model.text_max_len));
    truth[i] = i;
    labels[i] = static_cast<std::size_t>(clips[i].class_id);
  }
  for (const auto& c : class_captions) cls.push_back(tokenize_caption(c, vocab, model.text_max_len));
  const Tensor<float> V = embed_videos(model, video, clips, frames, batch_size);
  const Tensor<float> T = embed_texts(model, text, caps, batch_size);
  const Tensor<float> C = embed_texts(model, text, cls, batch_size);
  const Tensor<float> S = similarity_rows(T, V);  // captions x clips
  EvalResult r;
  r.t2v = retrieval_report(S, truth, Direction::t2v);
  r.v2t = retrieval_report(transpose(S), truth, Direction::v2t);
  r.zero_shot = zero_shot_classify(V, C, labels);
  return r;
}

/// Fixed-width table of retrieval reports.
inline std::string format_reports(const std::vector<RetrievalReport>& rs) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "dir" << std::right;
  for (auto k : kRecallAt) os << std::setw(9) << ("R@" + std::to_string(k));
  os << std::setw(9) << "MedR" << std::setw(9) << "MnR" << std::setw(8) << "Q" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rs) {
    os << std::left << std::setw(6) << to_string(r.direction) << std::right;
    for (double v : r.r_at) os << std::setw(9) << v;
    os << std::setw(9) << r.med_r << std::setw(9) << r.mean_r << std::setw(8) << r.n_queries << '\n';
  }
  return os.str();
}

}  // namespace miles
