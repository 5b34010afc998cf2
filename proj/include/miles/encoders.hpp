#pragma once

// Dual encoders.
//
// Video: non-overlapping P x P patches are projected to D dims; masked
// patches are swapped for a learned [MASK] embedding; spatial and temporal
// positional embeddings are added; a learned [CLS] token is kept alongside.
// Each block runs temporal attention (the M tokens sharing a spatial index),
// then spatial attention (the N tokens of one frame plus [CLS]), then an MLP,
// all pre-norm with residuals. [CLS] is not part of temporal attention; its
// spatial-attention outputs from the M frames are averaged.
//
// Text: token + learned position embeddings, bidirectional self-attention
// with padding keys masked out, [CLS] at position 0.
//
// Both project their final [CLS] feature to a shared space and L2-normalize.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/autodiff.hpp"
#include "miles/errors.hpp"
#include "miles/masking.hpp"
#include "miles/params.hpp"
#include "miles/rng.hpp"

namespace miles {

// Reference scale for the full-size model: 224x224 input, P=16, D=768, 12
// blocks, 256-d common space. The defaults here are a CPU-sized version.
struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_frames = 1;  // rows of the temporal positional table
  std::size_t proj_dim = 32;
  std::size_t text_max_len = 10;
  std::size_t vocab_size = 20;
  double init_std = 0.1;

  std::size_t patches_per_frame() const {
    const std::size_t s = image_size / patch_size;
    return s * s;
  }
  std::size_t patch_pixels() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / heads; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, image_size, channels, patch_size, embed_dim, depth,
                                                heads, mlp_ratio, max_frames, proj_dim, text_max_len, vocab_size,
                                                init_std)

inline void validate(const EncoderConfig& c) {
  if (c.patch_size == 0 || c.image_size % c.patch_size != 0) {
    throw ConfigError("image size " + std::to_string(c.image_size) + " not divisible by patch size " +
                      std::to_string(c.patch_size));
  }
  if (c.heads == 0 || c.embed_dim % c.heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (c.depth == 0 || c.proj_dim == 0 || c.max_frames == 0) throw ConfigError("depth, proj_dim, max_frames must be > 0");
  if (c.text_max_len < 2) throw ConfigError("text_max_len must be >= 2");
}

namespace detail {

template <typename T>
void add_linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, double std, Rng& rng) {
  ps.add(name + ".weight", truncated_normal<T>({in, out}, std, rng));
  ps.add(name + ".bias", Tensor<T>({out}, T{0}));
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".gain", Tensor<T>({d}, T{1}));
  ps.add(name + ".bias", Tensor<T>({d}, T{0}));
}

template <typename T>
void add_attention(ParamStore<T>& ps, const std::string& name, const EncoderConfig& c, Rng& rng) {
  add_linear(ps, name + ".qkv", c.embed_dim, 3 * c.embed_dim, c.init_std, rng);
  add_linear(ps, name + ".out", c.embed_dim, c.embed_dim, c.init_std, rng);
}

template <typename T>
void add_mlp(ParamStore<T>& ps, const std::string& name, const EncoderConfig& c, Rng& rng) {
  add_linear(ps, name + ".fc1", c.embed_dim, c.mlp_ratio * c.embed_dim, c.init_std, rng);
  add_linear(ps, name + ".fc2", c.mlp_ratio * c.embed_dim, c.embed_dim, c.init_std, rng);
}

inline std::string block_name(std::size_t i) { return "blocks." + std::to_string(i); }

}  // namespace detail

template <typename T>
ParamStore<T> init_video_params(const EncoderConfig& c, Rng& rng) {
  validate(c);
  ParamStore<T> ps;
  const std::size_t D = c.embed_dim;
  detail::add_linear(ps, "patch_embed", c.patch_pixels(), D, c.init_std, rng);
  ps.add("cls_token", truncated_normal<T>({1, D}, c.init_std, rng));
  ps.add("mask_token", truncated_normal<T>({1, D}, c.init_std, rng));
  ps.add("pos_spatial", truncated_normal<T>({c.patches_per_frame(), D}, c.init_std, rng));
  ps.add("pos_temporal", truncated_normal<T>({c.max_frames, D}, c.init_std, rng));
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string b = detail::block_name(i);
    detail::add_norm(ps, b + ".temporal_norm", D);
    detail::add_attention(ps, b + ".temporal_attn", c, rng);
    detail::add_norm(ps, b + ".spatial_norm", D);
    detail::add_attention(ps, b + ".spatial_attn", c, rng);
    detail::add_norm(ps, b + ".mlp_norm", D);
    detail::add_mlp(ps, b + ".mlp", c, rng);
  }
  detail::add_norm(ps, "final_norm", D);
  detail::add_linear(ps, "proj", D, c.proj_dim, c.init_std, rng);
  return ps;
}

template <typename T>
ParamStore<T> init_text_params(const EncoderConfig& c, Rng& rng) {
  validate(c);
  ParamStore<T> ps;
  const std::size_t D = c.embed_dim;
  ps.add("token_embed", truncated_normal<T>({c.vocab_size, D}, c.init_std, rng));
  ps.add("pos_embed", truncated_normal<T>({c.text_max_len, D}, c.init_std, rng));
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string b = detail::block_name(i);
    detail::add_norm(ps, b + ".attn_norm", D);
    detail::add_attention(ps, b + ".attn", c, rng);
    detail::add_norm(ps, b + ".mlp_norm", D);
    detail::add_mlp(ps, b + ".mlp", c, rng);
  }
  detail::add_norm(ps, "final_norm", D);
  detail::add_linear(ps, "proj", D, c.proj_dim, c.init_std, rng);
  return ps;
}

/// Appends zero rows to the temporal positional table so it covers `frames`.
template <typename T>
void expand_temporal_table(ParamStore<T>& ps, std::size_t frames) {
  Parameter<T>& p = ps.at("pos_temporal");
  const std::size_t rows = p.value.dim(0);
  if (frames <= rows) return;
  const std::size_t D = p.value.dim(1);
  std::vector<T> data = p.value.vec();
  data.resize(frames * D, T{0});
  p.value = Tensor<T>({frames, D}, std::move(data));
  p.zero_grad();
}

// ---------------------------------------------------------------------------
// Patching.

/// (M, H, W, C) frames -> (M*N, P*P*C) raw patch rows, frame-major then
/// row-major within a frame; each row is the patch flattened as (py, px, c).
template <typename T>
Tensor<T> patchify(const Tensor<float>& frames, std::size_t patch) {
  if (frames.rank() != 4) throw DimensionError("patchify expects (M,H,W,C) frames");
  const std::size_t M = frames.dim(0), H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("frame size " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch size " +
                      std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch;
  const std::size_t row = patch * patch * C;
  Tensor<T> out({M * gh * gw, row});
  for (std::size_t t = 0; t < M; ++t) {
    for (std::size_t i = 0; i < gh; ++i) {
      for (std::size_t j = 0; j < gw; ++j) {
        T* dst = out.raw() + ((t * gh + i) * gw + j) * row;
        for (std::size_t py = 0; py < patch; ++py) {
          const float* src = frames.raw() + ((t * H + i * patch + py) * W + j * patch) * C;
          for (std::size_t k = 0; k < patch * C; ++k) *dst++ = static_cast<T>(src[k]);
        }
      }
    }
  }
  return out;
}

/// A batch of B clips with M frames each, already patched.
template <typename T>
struct VideoBatch {
  std::size_t batch = 0;
  std::size_t frames = 0;
  std::size_t patches = 0;
  Tensor<T> pixels;  // (B*M*N, P*P*C)
};

template <typename T>
VideoBatch<T> make_video_batch(const std::vector<Tensor<float>>& clips, std::size_t patch) {
  if (clips.empty()) throw ContractError("empty video batch");
  VideoBatch<T> vb;
  vb.batch = clips.size();
  vb.frames = clips.front().dim(0);
  std::vector<T> all;
  std::size_t row = 0;
  for (const auto& c : clips) {
    if (c.dim(0) != vb.frames) throw DimensionError("clips in a batch must share the frame count");
    Tensor<T> p = patchify<T>(c, patch);
    row = p.dim(1);
    vb.patches = p.dim(0) / vb.frames;
    all.insert(all.end(), p.vec().begin(), p.vec().end());
  }
  vb.pixels = Tensor<T>({vb.batch * vb.frames * vb.patches, row}, std::move(all));
  return vb;
}

/// Linear patch projection: (rows, P*P*C) -> (rows, D).
template <typename T>
Var<T> embed_patches(Tape<T>& tape, ParamStore<T>& ps, const Tensor<T>& pixels) {
  return linear(tape.constant(pixels), ps.var(tape, "patch_embed.weight"), ps.var(tape, "patch_embed.bias"));
}

template <typename T>
struct VideoTokens {
  Var<T> cls;      // (B, D)
  Var<T> patches;  // (B*M*N, D)
};

/// Replaces masked tokens by [MASK], then adds spatial (by in-frame index)
/// and temporal (by frame index) embeddings. [CLS] gets no positional term.
/// `masks` may be null (nothing masked) or hold one MaskSpec per clip.
template <typename T>
VideoTokens<T> apply_mask_and_positions(Tape<T>& tape, ParamStore<T>& ps, const Var<T>& tokens, std::size_t batch,
                                        std::size_t frames, std::size_t patches, const std::vector<MaskSpec>* masks) {
  const std::size_t rows = batch * frames * patches;
  if (tokens.dim(0) != rows) throw ContractError("token count does not match batch x frames x patches");
  if (ps.at("pos_temporal").value.dim(0) < frames) {
    throw ContractError("temporal positional table has " + std::to_string(ps.at("pos_temporal").value.dim(0)) +
                        " rows, " + std::to_string(frames) + " frames supplied");
  }
  if (ps.at("pos_spatial").value.dim(0) != patches) throw ContractError("spatial positional table size mismatch");
  Var<T> x = tokens;
  if (masks != nullptr) {
    if (masks->size() != batch) throw ContractError("one mask per clip required");
    Tensor<T> m({rows, 1}, T{0});
    Tensor<T> keep({rows, 1}, T{1});
    for (std::size_t b = 0; b < batch; ++b) {
      const MaskSpec& ms = (*masks)[b];
      if (ms.frames != frames || ms.patches != patches) {
        throw ContractError("mask grid " + std::to_string(ms.frames) + "x" + std::to_string(ms.patches) +
                            " does not match tokens " + std::to_string(frames) + "x" + std::to_string(patches));
      }
      for (std::size_t i = 0; i < frames * patches; ++i) {
        if (ms.grid[i]) {
          m[b * frames * patches + i] = T{1};
          keep[b * frames * patches + i] = T{0};
        }
      }
    }
    Var<T> mv = tape.constant(std::move(m));
    x = add(mul(x, tape.constant(std::move(keep))), matmul(mv, ps.var(tape, "mask_token")));
  }
  std::vector<std::size_t> sidx(rows), tidx(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    sidx[r] = r % patches;
    tidx[r] = (r / patches) % frames;
  }
  Var<T> pos = add(gather_rows(ps.var(tape, "pos_spatial"), std::move(sidx)),
                   gather_rows(ps.var(tape, "pos_temporal"), std::move(tidx)));
  x = add(x, pos);
  Var<T> cls = gather_rows(ps.var(tape, "cls_token"), std::vector<std::size_t>(batch, 0));
  return {cls, x};
}

namespace detail {

template <typename T>
Var<T> norm(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return layer_norm(x, ps.var(tape, name + ".gain"), ps.var(tape, name + ".bias"));
}

template <typename T>
Var<T> dense(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return linear(x, ps.var(tape, name + ".weight"), ps.var(tape, name + ".bias"));
}

/// Multi-head self-attention within each of G groups of length L.
/// x: (G, L, D) -> (G*L, D). key_bias, when given, is (G,1,1,L) and added
/// to the attention logits.
template <typename T>
Var<T> attention(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, const Var<T>& x, std::size_t heads,
                 const Var<T>* key_bias) {
  const std::size_t G = x.dim(0), L = x.dim(1), D = x.dim(2);
  const std::size_t dh = D / heads;
  Var<T> qkv = dense(tape, ps, name + ".qkv", reshape(x, {G * L, D}));
  qkv = permute(reshape(qkv, {G, L, 3, heads, dh}), {2, 0, 3, 1, 4});  // (3, G, H, L, dh)
  Var<T> q = reshape(slice(qkv, 0, 0, 1), {G * heads, L, dh});
  Var<T> k = reshape(slice(qkv, 0, 1, 2), {G * heads, L, dh});
  Var<T> v = reshape(slice(qkv, 0, 2, 3), {G * heads, L, dh});
  Var<T> scores = scale(matmul(q, k, true), T{1} / std::sqrt(static_cast<T>(dh)));
  if (key_bias != nullptr) scores = reshape(add(reshape(scores, {G, heads, L, L}), *key_bias), {G * heads, L, L});
  Var<T> out = matmul(softmax(scores, -1), v);                          // (G*H, L, dh)
  out = reshape(permute(reshape(out, {G, heads, L, dh}), {0, 2, 1, 3}), {G * L, D});
  return dense(tape, ps, name + ".out", out);
}

template <typename T>
Var<T> mlp(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return dense(tape, ps, name + ".fc2", gelu(dense(tape, ps, name + ".fc1", x)));
}

}  // namespace detail

template <typename T>
struct VideoEncoding {
  Var<T> cls;              // (B, proj_dim), unit rows
  Var<T> patch_features;   // (B*M*N, D) final-layer token features
  Var<T> masked_features;  // (K, D) rows of patch_features at masked positions
  std::vector<std::size_t> masked_rows;
  std::vector<std::size_t> masked_per_clip;
};

/// Runs the video encoder on a patched batch; `masks` as for
/// apply_mask_and_positions.
template <typename T>
VideoEncoding<T> video_forward(Tape<T>& tape, ParamStore<T>& ps, const EncoderConfig& cfg, const VideoBatch<T>& vb,
                               const std::vector<MaskSpec>* masks) {
  const std::size_t B = vb.batch, M = vb.frames, N = vb.patches, D = cfg.embed_dim;
  if (N != cfg.patches_per_frame()) throw ContractError("batch patch count does not match encoder config");
  Var<T> tokens = embed_patches(tape, ps, vb.pixels);
  auto [cls, x] = apply_mask_and_positions(tape, ps, tokens, B, M, N, masks);

  std::vector<std::size_t> cls_per_frame(B * M);
  for (std::size_t r = 0; r < B * M; ++r) cls_per_frame[r] = r / M;

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = detail::block_name(i);
    // Temporal attention: groups are (clip, spatial index), length M.
    {
      Var<T> h = detail::norm(tape, ps, b + ".temporal_norm", x);
      h = reshape(permute(reshape(h, {B, M, N, D}), {0, 2, 1, 3}), {B * N, M, D});
      Var<T> a = detail::attention(tape, ps, b + ".temporal_attn", h, cfg.heads, static_cast<const Var<T>*>(nullptr));
      a = reshape(permute(reshape(a, {B, N, M, D}), {0, 2, 1, 3}), {B * M * N, D});
      x = add(x, a);
    }
    // Spatial attention: groups are (clip, frame), [CLS] + N tokens.
    {
      Var<T> hp = detail::norm(tape, ps, b + ".spatial_norm", x);
      Var<T> hc = detail::norm(tape, ps, b + ".spatial_norm", cls);
      Var<T> hc_rep = reshape(gather_rows(hc, cls_per_frame), {B * M, 1, D});
      Var<T> seq = concat(std::vector<Var<T>>{hc_rep, reshape(hp, {B * M, N, D})}, 1);
      Var<T> a = reshape(detail::attention(tape, ps, b + ".spatial_attn", seq, cfg.heads, static_cast<const Var<T>*>(nullptr)), {B * M, N + 1, D});
      Var<T> a_cls = mean(reshape(slice(a, 1, 0, 1), {B, M, D}), 1);
      Var<T> a_tok = reshape(slice(a, 1, 1, N + 1), {B * M * N, D});
      x = add(x, a_tok);
      cls = add(cls, a_cls);
    }
    // MLP over every token.
    {
      Var<T> all = concat(std::vector<Var<T>>{cls, x}, 0);
      all = add(all, detail::mlp(tape, ps, b + ".mlp", detail::norm(tape, ps, b + ".mlp_norm", all)));
      cls = slice(all, 0, 0, B);
      x = slice(all, 0, B, B + B * M * N);
    }
  }
  Var<T> all = detail::norm(tape, ps, "final_norm", concat(std::vector<Var<T>>{cls, x}, 0));
  cls = slice(all, 0, 0, B);
  x = slice(all, 0, B, B + B * M * N);

  VideoEncoding<T> enc;
  enc.cls = l2_normalize(detail::dense(tape, ps, "proj", cls));
  enc.patch_features = x;
  enc.masked_per_clip.assign(B, 0);
  if (masks != nullptr) {
    for (std::size_t bi = 0; bi < B; ++bi) {
      const MaskSpec& ms = (*masks)[bi];
      for (std::size_t j = 0; j < M * N; ++j) {
        if (ms.grid[j]) {
          enc.masked_rows.push_back(bi * M * N + j);
          ++enc.masked_per_clip[bi];
        }
      }
    }
  }
  enc.masked_features = gather_rows(x, enc.masked_rows);
  return enc;
}

template <typename T>
struct TextEncoding {
  Var<T> cls;  // (B, proj_dim), unit rows
};

/// Encodes B id sequences of a common padded length L <= text_max_len.
template <typename T>
TextEncoding<T> text_forward(Tape<T>& tape, ParamStore<T>& ps, const EncoderConfig& cfg,
                             const std::vector<std::vector<int>>& ids, int pad_id = 1) {
  if (ids.empty()) throw ContractError("empty text batch");
  const std::size_t B = ids.size(), L = ids.front().size(), D = cfg.embed_dim;
  if (L == 0 || L > cfg.text_max_len) throw ContractError("text length must be in [1, text_max_len]");
  std::vector<std::size_t> tok(B * L), pos(B * L);
  Tensor<T> bias({B, 1, 1, L}, T{0});
  for (std::size_t b = 0; b < B; ++b) {
    if (ids[b].size() != L) throw ContractError("text batch rows must share one padded length");
    for (std::size_t j = 0; j < L; ++j) {
      const int id = ids[b][j];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
      }
      tok[b * L + j] = static_cast<std::size_t>(id);
      pos[b * L + j] = j;
      if (id == pad_id) bias[b * L + j] = T(-1e9);
    }
  }
  Var<T> key_bias = tape.constant(std::move(bias));
  Var<T> x = add(gather_rows(ps.var(tape, "token_embed"), std::move(tok)),
                 gather_rows(ps.var(tape, "pos_embed"), std::move(pos)));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = detail::block_name(i);
    Var<T> h = reshape(detail::norm(tape, ps, b + ".attn_norm", x), {B, L, D});
    x = add(x, detail::attention(tape, ps, b + ".attn", h, cfg.heads, &key_bias));
    x = add(x, detail::mlp(tape, ps, b + ".mlp", detail::norm(tape, ps, b + ".mlp_norm", x)));
  }
  x = detail::norm(tape, ps, "final_norm", x);
  std::vector<std::size_t> first(B);
  for (std::size_t b = 0; b < B; ++b) first[b] = b * L;
  return {l2_normalize(detail::dense(tape, ps, "proj", gather_rows(x, std::move(first))))};
}

/// Dot product of two projected embeddings.
template <typename T>
T similarity(std::span<const T> v, std::span<const T> t) {
  if (v.size() != t.size()) throw DimensionError("similarity: embedding sizes differ");
  T s{0};
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * t[i];
  return s;
}

/// (Bv, P) x (Bt, P) -> (Bv, Bt) pairwise dot products.
template <typename T>
Var<T> similarity_matrix(const Var<T>& v, const Var<T>& t) {
  return matmul(v, t, true);
}

}  // namespace miles
