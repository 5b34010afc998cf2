#pragma once

// Pre-training and fine-tuning loops.
//
// One step: sample frames and a mask per clip, run the live video encoder on
// the masked clip, the snapshot encoder on the raw clip, the text encoder on
// the captions, then minimise NCE + MVM. The first `warmup_epochs` epochs
// train on the NCE term only; the MVM term is still evaluated and logged.
// Stages run in order; when a stage samples more frames than the temporal
// positional table covers, the table grows by zero rows.
//
// Every random draw comes from a stream keyed on (seed, step) or
// (seed, epoch), so a run resumed from an epoch checkpoint replays exactly.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/checkpoint.hpp"
#include "miles/config.hpp"
#include "miles/data.hpp"
#include "miles/encoders.hpp"
#include "miles/errors.hpp"
#include "miles/log.hpp"
#include "miles/masking.hpp"
#include "miles/objectives.hpp"
#include "miles/optim.hpp"
#include "miles/rng.hpp"
#include "miles/snapshot.hpp"

namespace miles {

inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamStep = 2;
inline constexpr std::uint64_t kStreamShuffle = 3;

struct LossRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::size_t stage = 0;
  double l_vanilla = 0.0;
  double l_mvm = 0.0;
  double l_total = 0.0;
};

inline nlohmann::ordered_json to_log_json(const LossRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["stage"] = r.stage;
  j["l_vanilla"] = r.l_vanilla;
  j["l_mvm"] = r.l_mvm;
  j["l_total"] = r.l_total;
  return j;
}

inline LossRecord loss_record_from_json(const nlohmann::json& j) {
  return LossRecord{j.at("step").get<std::int64_t>(), j.at("epoch").get<std::int64_t>(),
                    j.at("stage").get<std::size_t>(),  j.at("l_vanilla").get<double>(),
                    j.at("l_mvm").get<double>(),       j.at("l_total").get<double>()};
}

/// Clips with their captions already tokenized.
struct TrainData {
  std::vector<VideoClip> clips;
  std::vector<std::vector<int>> tokens;

  std::size_t size() const { return clips.size(); }
};

inline TrainData make_train_data(std::vector<VideoClip> clips, const CaptionVocab& vocab, std::size_t max_len) {
  TrainData d;
  d.tokens.reserve(clips.size());
  for (const auto& c : clips) d.tokens.push_back(tokenize_caption(c.caption, vocab, max_len));
  d.clips = std::move(clips);
  return d;
}

struct TrainState {
  EncoderConfig model;  // max_frames tracks the current temporal table
  ParamStore<float> video;
  ParamStore<float> text;
  SnapshotState<float> snapshot;
  ParamStore<float> previous;  // live encoder as of the previous step
  AdamState<float> adam;
  std::size_t stage = 0;           // stage of the next epoch
  std::size_t epoch_in_stage = 0;  // epochs of `stage` already run
  std::int64_t epoch = 0;          // epochs run in total
  std::int64_t step = 0;           // steps run in total
  std::int64_t snapshot_updates = 0;
  std::int64_t tube_masks_checked = 0;  // tube masks verified tube-valid in-run
  std::vector<LossRecord> history;
};

inline void add_pixel_head(ParamStore<float>& video, const EncoderConfig& model, Rng& rng) {
  if (video.contains("pixel_head.weight")) return;
  detail::add_linear(video, "pixel_head", model.embed_dim, model.patch_pixels(), model.init_std, rng);
}

inline TrainState init_train_state(const RunConfig& cfg) {
  validate(cfg.train);
  TrainState s;
  s.model = cfg.encoder;
  s.model.max_frames = cfg.train.stages.front().frames;
  Rng rng = make_rng(cfg.train.seed, {kStreamInit});
  s.video = init_video_params<float>(s.model, rng);
  s.text = init_text_params<float>(s.model, rng);
  if (cfg.train.use_mvm && cfg.train.mvm_target == "pixels") add_pixel_head(s.video, s.model, rng);
  s.snapshot = init_snapshot(s.video, cfg.train.lambda);
  s.previous = s.video.clone_values();
  return s;
}

/// Grows the temporal table of the live, snapshot and previous encoders (and
/// the matching Adam moments) to `frames` rows, filling with zeros.
inline void prepare_stage(TrainState& s, const StageConfig& stage) {
  if (stage.frames <= s.model.max_frames) return;
  expand_temporal_table(s.video, stage.frames);
  if (s.snapshot.initialized) expand_temporal_table(s.snapshot.params, stage.frames);
  if (s.previous.contains("pos_temporal")) expand_temporal_table(s.previous, stage.frames);
  for (auto* moments : {&s.adam.m, &s.adam.v}) {
    auto it = moments->find("video.pos_temporal");
    if (it == moments->end()) continue;
    const std::size_t D = it->second.dim(1);
    std::vector<float> data = it->second.vec();
    data.resize(stage.frames * D, 0.0f);
    it->second = Tensor<float>({stage.frames, D}, std::move(data));
  }
  s.model.max_frames = stage.frames;
}

namespace detail {

// Patch pixels normalized per patch, the usual pixel-regression target.
inline Tensor<float> pixel_targets(const VideoBatch<float>& vb, const std::vector<std::size_t>& rows) {
  const std::size_t W = vb.pixels.dim(1);
  Tensor<float> out({rows.size(), W});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const float* src = vb.pixels.raw() + rows[r] * W;
    double mean = 0.0, var = 0.0;
    for (std::size_t k = 0; k < W; ++k) mean += src[k];
    mean /= static_cast<double>(W);
    for (std::size_t k = 0; k < W; ++k) var += (src[k] - mean) * (src[k] - mean);
    var /= static_cast<double>(W);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (std::size_t k = 0; k < W; ++k) out[r * W + k] = static_cast<float>((src[k] - mean) * inv);
  }
  return out;
}

inline MvmOptions mvm_options(const TrainConfig& t) {
  return MvmOptions{parse_mvm_distance(t.mvm_distance), parse_reduction(t.mvm_token_reduction),
                    parse_reduction(t.mvm_batch_reduction)};
}

// MVM loss of an encoding of the masked batch, on the encoding's tape.
inline MvmLoss<float> mvm_term(Tape<float>& tape, TrainState& s, const TrainConfig& t, const VideoEncoding<float>& enc,
                               const VideoBatch<float>& vb) {
  if (t.mvm_target == "pixels") {
    Var<float> pred = dense(tape, s.video, "pixel_head", enc.masked_features);
    return mvm_loss(pred, pixel_targets(vb, enc.masked_rows), enc.masked_per_clip, mvm_options(t));
  }
  Tensor<float> targets = snapshot_targets(s.snapshot, s.model, vb, enc.masked_rows);
  return mvm_loss(enc.masked_features, targets, enc.masked_per_clip, mvm_options(t));
}

}  // namespace detail

inline bool warmup_active(const TrainState& s, const TrainConfig& t) {
  return s.epoch < static_cast<std::int64_t>(t.warmup_epochs);
}

/// One optimisation step over the clips `batch` (indices into `data`).
inline LossRecord train_step(TrainState& s, const RunConfig& cfg, const TrainData& data,
                             const std::vector<std::size_t>& batch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  if (s.stage >= cfg.train.stages.size()) throw StateError("train_step: no stage left to run");
  const TrainConfig& t = cfg.train;
  const StageConfig& st = t.stages[s.stage];
  if (s.model.max_frames < st.frames) throw StateError("train_step: temporal table not expanded for this stage");
  try {
    Rng rng = make_rng(t.seed, {kStreamStep, static_cast<std::uint64_t>(s.step)});
    std::vector<Tensor<float>> frames;
    std::vector<std::vector<int>> ids;
    frames.reserve(batch.size());
    for (auto i : batch) {
      if (i >= data.size()) throw ContractError("train_step: clip index out of range");
      frames.push_back(sample_frames(data.clips[i], st.frames, SampleMode::train, rng));
      ids.push_back(data.tokens[i]);
    }
    const VideoBatch<float> vb = make_video_batch<float>(frames, s.model.patch_size);
    const bool mvm = t.use_mvm;
    const bool warm = warmup_active(s, t);
    std::vector<MaskSpec> masks;
    if (mvm) {
      const MaskStrategy strategy = parse_mask_strategy(st.mask_strategy);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        masks.push_back(sample_mask(strategy, vb.frames, vb.patches, st.mask_ratio, rng, cfg.mask));
        if (is_tube(strategy)) {
          if (!masks.back().tube_valid()) throw StateError("train_step: sampled tube mask differs across frames");
          ++s.tube_masks_checked;
        }
      }
    }
    const SnapshotMode mode = parse_snapshot_mode(t.snapshot_mode);
    if (mvm && updates_per_iteration(mode)) {
      alternative_update(mode, s.snapshot, s.video, s.previous, s.epoch);
      s.previous = s.video.clone_values();
    }

    s.video.zero_grad();
    s.text.zero_grad();
    Tape<float> tape;
    Var<float> v_cls;
    MvmLoss<float> lm;
    bool mvm_in_graph = false;
    double l_mvm = 0.0;
    if (!mvm) {
      v_cls = video_forward(tape, s.video, s.model, vb, nullptr).cls;
    } else if (warm) {
      v_cls = video_forward(tape, s.video, s.model, vb, nullptr).cls;
      Tape<float> side(false);
      const VideoEncoding<float> enc = video_forward(side, s.video, s.model, vb, &masks);
      l_mvm = detail::mvm_term(side, s, t, enc, vb).loss.value().item();
    } else {
      const VideoEncoding<float> enc = video_forward(tape, s.video, s.model, vb, &masks);
      v_cls = t.contrastive_input == "raw" ? video_forward(tape, s.video, s.model, vb, nullptr).cls : enc.cls;
      lm = detail::mvm_term(tape, s, t, enc, vb);
      l_mvm = lm.loss.value().item();
      mvm_in_graph = true;
    }
    const TextEncoding<float> te = text_forward(tape, s.text, s.model, ids);
    Var<float> lv = contrastive_loss(v_cls, te.cls, static_cast<float>(t.tau));
    Var<float> total = mvm_in_graph ? total_loss(lv, lm.loss, false, static_cast<float>(t.mvm_weight)) : lv;

    LossRecord rec;
    rec.step = s.step;
    rec.epoch = s.epoch;
    rec.stage = s.stage;
    rec.l_vanilla = lv.value().item();
    rec.l_mvm = l_mvm;
    rec.l_total = total.value().item();
    tape.backward(total);

    clip_grad_norm<float>({&s.video, &s.text}, t.grad_clip);
    adam_begin_step(s.adam);
    adam_update(s.video, "video.", s.adam, st.lr);
    adam_update(s.text, "text.", s.adam, st.lr);
    ++s.step;
    s.history.push_back(rec);
    return rec;
  } catch (const NumericError& e) {
    throw NumericError("training failed at step " + std::to_string(s.step) + ": " + e.what());
  }
}

/// Closes epoch `s.epoch`: applies the epoch-level snapshot update (if the
/// mode has one) and advances the counters.
inline void epoch_boundary(TrainState& s, const TrainConfig& t) {
  const SnapshotMode mode = parse_snapshot_mode(t.snapshot_mode);
  if (t.use_mvm && !updates_per_iteration(mode)) {
    if (mode == SnapshotMode::epoch_ema) {
      ema_update(s.snapshot, s.video, s.epoch + 1);
    } else {
      alternative_update(mode, s.snapshot, s.video, s.previous, s.epoch + 1);
    }
    ++s.snapshot_updates;
  }
  ++s.epoch;
  ++s.epoch_in_stage;
}

/// Seeded permutation of the clip indices for one epoch.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {kStreamShuffle, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline Archive make_checkpoint(const TrainState& s, const RunConfig& cfg) {
  Archive a;
  nlohmann::json& h = a.header;
  h["format"] = "miles-train";
  h["config"] = nlohmann::json(cfg);
  h["model"] = nlohmann::json(s.model);
  h["state"] = {{"stage", s.stage},
                {"epoch_in_stage", s.epoch_in_stage},
                {"epoch", s.epoch},
                {"step", s.step},
                {"snapshot_updates", s.snapshot_updates},
                {"tube_masks_checked", s.tube_masks_checked},
                {"adam_step", s.adam.step}};
  h["snapshot"] = {{"initialized", s.snapshot.initialized},
                   {"lambda", s.snapshot.lambda},
                   {"epoch_of_last_update", s.snapshot.epoch_of_last_update}};
  // Every draw is keyed on these counters, so they are the whole RNG state.
  h["rng"] = {{"seed", cfg.train.seed}, {"next_step", s.step}, {"next_epoch", s.epoch}};
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history) hist.push_back(nlohmann::json(to_log_json(r)));
  h["history"] = std::move(hist);
  put_store(a, "video/", s.video);
  put_store(a, "text/", s.text);
  if (s.snapshot.initialized) put_store(a, "snapshot/", s.snapshot.params);
  put_store(a, "previous/", s.previous);
  put_tensors(a, "adam_m/", s.adam.m);
  put_tensors(a, "adam_v/", s.adam.v);
  return a;
}

inline RunConfig checkpoint_config(const Archive& a) {
  if (a.header.value("format", "") != "miles-train") throw StateError("not a training checkpoint");
  return run_config_from_json(a.header.at("config"));
}

inline TrainState state_from_checkpoint(const Archive& a) {
  if (a.header.value("format", "") != "miles-train") throw StateError("not a training checkpoint");
  try {
    TrainState s;
    const auto& h = a.header;
    s.model = h.at("model").get<EncoderConfig>();
    const auto& st = h.at("state");
    s.stage = st.at("stage").get<std::size_t>();
    s.epoch_in_stage = st.at("epoch_in_stage").get<std::size_t>();
    s.epoch = st.at("epoch").get<std::int64_t>();
    s.step = st.at("step").get<std::int64_t>();
    s.snapshot_updates = st.at("snapshot_updates").get<std::int64_t>();
    s.tube_masks_checked = st.at("tube_masks_checked").get<std::int64_t>();
    s.adam.step = st.at("adam_step").get<std::int64_t>();
    s.video = get_store(a, "video/");
    s.text = get_store(a, "text/");
    s.previous = get_store(a, "previous/");
    s.snapshot.initialized = h.at("snapshot").at("initialized").get<bool>();
    s.snapshot.lambda = h.at("snapshot").at("lambda").get<double>();
    s.snapshot.epoch_of_last_update = h.at("snapshot").at("epoch_of_last_update").get<std::int64_t>();
    if (s.snapshot.initialized) s.snapshot.params = get_store(a, "snapshot/");
    s.adam.m = get_tensors(a, "adam_m/");
    s.adam.v = get_tensors(a, "adam_v/");
    for (const auto& r : h.at("history")) s.history.push_back(loss_record_from_json(r));
    if (s.video.size() == 0 || s.text.size() == 0) throw StateError("checkpoint lacks encoder parameters");
    if (s.video.at("pos_temporal").value.dim(0) != s.model.max_frames) {
      throw StateError("checkpoint temporal table does not match its model header");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw StateError(std::string("malformed checkpoint header: ") + e.what());
  }
}

/// Throws StateError naming the first differing config path.
inline void require_same_config(const RunConfig& expected, const RunConfig& found) {
  const nlohmann::json a(expected), b(found);
  if (a == b) return;
  const auto patch = nlohmann::json::diff(a, b);
  std::string where = patch.empty() ? "?" : patch.front().value("path", "?");
  throw StateError("checkpoint was written with a different config (first difference at " + where + ")");
}

inline std::string epoch_checkpoint_name(std::int64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03lld.ckpt", static_cast<long long>(epoch));
  return buf;
}

// ---------------------------------------------------------------------------
// Curriculum.

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints or logs
  std::int64_t max_steps = -1;    // stop after this many steps of this call (dry runs)
  std::function<void(const LossRecord&, const TrainState&)> on_step;
  std::function<void(const TrainState&)> on_epoch;
};

namespace detail {

inline void write_log(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& r : history) os << to_log_json(r).dump() << '\n';
}

inline void append_log(const std::filesystem::path& path, const std::vector<LossRecord>& history, std::size_t from) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot write " + path.string());
  for (std::size_t i = from; i < history.size(); ++i) os << to_log_json(history[i]).dump() << '\n';
}

}  // namespace detail

/// Runs the remaining epochs of every stage from `s` onwards. With an output
/// directory, writes `log.jsonl` and a checkpoint after every epoch
/// (`checkpoints/epoch_NNN.ckpt`, plus `last.ckpt`).
inline TrainState run_curriculum(const RunConfig& cfg, const TrainData& data, TrainState s, const RunOptions& opt = {}) {
  validate(cfg.train);
  if (data.size() == 0) throw DataError("no training clips");
  const bool persist = !opt.out_dir.empty();
  const auto log_path = opt.out_dir / "log.jsonl";
  if (persist) {
    std::filesystem::create_directories(opt.out_dir / "checkpoints");
    detail::write_log(log_path, s.history);
  }
  std::int64_t steps_this_call = 0;
  const auto stop = [&] { return opt.max_steps >= 0 && steps_this_call >= opt.max_steps; };
  while (s.stage < cfg.train.stages.size()) {
    const StageConfig& st = cfg.train.stages[s.stage];
    if (s.epoch_in_stage >= st.epochs) {
      ++s.stage;
      s.epoch_in_stage = 0;
      continue;
    }
    prepare_stage(s, st);
    const std::size_t logged = s.history.size();
    const auto order = epoch_order(cfg.train.seed, s.epoch, data.size());
    for (std::size_t b = 0; b < order.size(); b += st.batch_size) {
      if (stop()) return s;
      const std::size_t e = std::min(order.size(), b + st.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(e));
      const LossRecord rec = train_step(s, cfg, data, batch);
      ++steps_this_call;
      log::debug("step " + std::to_string(rec.step) + " l_vanilla=" + std::to_string(rec.l_vanilla) +
                 " l_mvm=" + std::to_string(rec.l_mvm));
      if (opt.on_step) opt.on_step(rec, s);
    }
    epoch_boundary(s, cfg.train);
    const LossRecord& last = s.history.back();
    log::info("stage " + std::to_string(s.stage) + " epoch " + std::to_string(s.epoch) + " done: l_vanilla=" +
              std::to_string(last.l_vanilla) + " l_mvm=" + std::to_string(last.l_mvm));
    // Advance before saving so a checkpoint names the next epoch to run.
    if (s.epoch_in_stage >= st.epochs) {
      ++s.stage;
      s.epoch_in_stage = 0;
    }
    if (persist) {
      detail::append_log(log_path, s.history, logged);
      const Archive a = make_checkpoint(s, cfg);
      save_archive(opt.out_dir / "checkpoints" / epoch_checkpoint_name(s.epoch), a);
      save_archive(opt.out_dir / "checkpoints" / "last.ckpt", a);
    }
    if (opt.on_epoch) opt.on_epoch(s);
  }
  return s;
}

/// Continues a run from a checkpoint written by run_curriculum with the same
/// config.
inline TrainState resume_curriculum(const RunConfig& cfg, const TrainData& data, const Archive& ckpt,
                                    const RunOptions& opt = {}) {
  require_same_config(cfg, checkpoint_config(ckpt));
  return run_curriculum(cfg, data, state_from_checkpoint(ckpt), opt);
}

/// Fine-tuning: one stage (`cfg.train.stages` must hold exactly that stage),
/// no warm-up, fresh optimizer and snapshot from the pretrained encoders.
/// `use_mvm` toggles the MVM term.
inline TrainState finetune(const TrainState& pretrained, RunConfig cfg, const TrainData& data, bool use_mvm,
                           const RunOptions& opt = {}) {
  if (cfg.train.stages.size() != 1) throw ConfigError("fine-tuning runs exactly one stage");
  cfg.train.use_mvm = use_mvm;
  cfg.train.warmup_epochs = 0;
  validate(cfg.train);
  TrainState s;
  s.model = pretrained.model;
  s.video = pretrained.video.clone_values();
  s.text = pretrained.text.clone_values();
  if (use_mvm && cfg.train.mvm_target == "pixels") {
    Rng rng = make_rng(cfg.train.seed, {kStreamInit});
    add_pixel_head(s.video, s.model, rng);
  }
  s.snapshot = init_snapshot(s.video, cfg.train.lambda);
  s.previous = s.video.clone_values();
  return run_curriculum(cfg, data, std::move(s), opt);
}

}  // namespace miles
