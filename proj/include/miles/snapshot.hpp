#pragma once

// The snapshot video encoder: a gradient-free copy of the video encoder that
// is frozen within an epoch and blended towards the live encoder at epoch
// boundaries, theta_s <- lambda * theta_s + (1 - lambda) * theta_v.
// Its final-layer features on the unmasked video are the regression targets
// for the masked positions of the live encoder.

#include <cstdint>
#include <string>
#include <vector>

#include "miles/encoders.hpp"
#include "miles/errors.hpp"
#include "miles/params.hpp"

namespace miles {

enum class SnapshotMode {
  epoch_ema,           // previous epoch, with momentum (default)
  prev_epoch_plain,    // previous epoch, plain copy (lambda = 0)
  current_iter,        // copy of the live encoder at every step
  prev_iter,           // live encoder as of the previous step
  prev_iter_momentum,  // per-step EMA towards the previous step's encoder
};

inline const char* to_string(SnapshotMode m) {
  switch (m) {
    case SnapshotMode::epoch_ema: return "epoch_ema";
    case SnapshotMode::prev_epoch_plain: return "prev_epoch_plain";
    case SnapshotMode::current_iter: return "current_iter";
    case SnapshotMode::prev_iter: return "prev_iter";
    case SnapshotMode::prev_iter_momentum: return "prev_iter_momentum";
  }
  return "?";
}

inline SnapshotMode parse_snapshot_mode(const std::string& s) {
  for (auto m : {SnapshotMode::epoch_ema, SnapshotMode::prev_epoch_plain, SnapshotMode::current_iter,
                 SnapshotMode::prev_iter, SnapshotMode::prev_iter_momentum}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown snapshot update mode '" + s + "'");
}

inline bool updates_per_iteration(SnapshotMode m) {
  return m == SnapshotMode::current_iter || m == SnapshotMode::prev_iter || m == SnapshotMode::prev_iter_momentum;
}

template <typename T>
struct SnapshotState {
  ParamStore<T> params;
  std::int64_t epoch_of_last_update = 0;
  double lambda = 0.996;
  bool initialized = false;
};

template <typename T>
SnapshotState<T> init_snapshot(const ParamStore<T>& video, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("snapshot lambda must lie in [0, 1]");
  return SnapshotState<T>{video.clone_values(), 0, lambda, true};
}

/// Element-wise blend dst <- keep * dst + (1 - keep) * src over matching names.
template <typename T>
void blend_params(ParamStore<T>& dst, const ParamStore<T>& src, double keep) {
  if (!dst.same_layout(src)) throw ContractError("snapshot and video encoder parameter layouts differ");
  auto it = src.begin();
  for (auto& [name, p] : dst) {
    const Tensor<T>& s = it->second.value;
    if (keep == 0.0) {
      p.value = s;
    } else {
      // Increment form keeps dst == src a fixed point under rounding.
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double d = static_cast<double>(p.value[i]);
        p.value[i] = static_cast<T>(d + (1.0 - keep) * (static_cast<double>(s[i]) - d));
      }
    }
    p.zero_grad();
    ++it;
  }
}

/// Epoch-boundary update with the state's lambda; `k` is the epoch being entered.
template <typename T>
void ema_update(SnapshotState<T>& snap, const ParamStore<T>& video, std::int64_t k) {
  if (!snap.initialized) throw StateError("snapshot encoder is not initialized");
  blend_params(snap.params, video, snap.lambda);
  snap.epoch_of_last_update = k;
}

/// Update rules compared in the snapshot ablation. `current` is the live
/// encoder now; `previous` is the live encoder as of the previous step
/// (ignored by the epoch modes).
template <typename T>
void alternative_update(SnapshotMode mode, SnapshotState<T>& snap, const ParamStore<T>& current,
                        const ParamStore<T>& previous, std::int64_t k) {
  if (!snap.initialized) throw StateError("snapshot encoder is not initialized");
  switch (mode) {
    case SnapshotMode::epoch_ema:
      blend_params(snap.params, current, snap.lambda);
      break;
    case SnapshotMode::prev_epoch_plain:
    case SnapshotMode::current_iter:
      blend_params(snap.params, current, 0.0);
      break;
    case SnapshotMode::prev_iter:
      blend_params(snap.params, previous, 0.0);
      break;
    case SnapshotMode::prev_iter_momentum:
      blend_params(snap.params, previous, snap.lambda);
      break;
  }
  snap.epoch_of_last_update = k;
}

/// Final-layer features of the snapshot encoder on the unmasked batch,
/// gathered at the rows the student had masked. Evaluated on a
/// non-recording tape, so the result carries no gradient.
template <typename T>
Tensor<T> snapshot_targets(SnapshotState<T>& snap, const EncoderConfig& cfg, const VideoBatch<T>& vb,
                           const std::vector<std::size_t>& masked_rows) {
  if (!snap.initialized) throw StateError("snapshot encoder is not initialized");
  Tape<T> tape(false);
  VideoEncoding<T> enc = video_forward(tape, snap.params, cfg, vb, nullptr);
  const Tensor<T>& feats = enc.patch_features.value();
  const std::size_t D = feats.dim(1);
  Tensor<T> out({masked_rows.size(), D});
  for (std::size_t r = 0; r < masked_rows.size(); ++r) {
    if (masked_rows[r] >= feats.dim(0)) throw ContractError("masked row outside the batch");
    std::copy_n(feats.raw() + masked_rows[r] * D, D, out.raw() + r * D);
  }
  return out;
}

}  // namespace miles
