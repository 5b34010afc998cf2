#include <gtest/gtest.h>

#include <cmath>

#include "miles/gradcheck.hpp"
#include "miles/snapshot.hpp"

using namespace miles;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.max_frames = 4;
  c.proj_dim = 8;
  return c;
}

ParamStore<double> filled_like(const ParamStore<double>& ref, double v) {
  ParamStore<double> out = ref.clone_values();
  for (auto& [n, p] : out) {
    for (auto& x : p.value.data()) x = v;
  }
  return out;
}

Tensor<float> random_frames(std::size_t M, Rng& rng) {
  Tensor<float> f({M, 16, 16, 3});
  for (auto& v : f.data()) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return f;
}

class Snapshot : public ::testing::Test {
 protected:
  EncoderConfig c = small_config();
  Rng rng{21};
  ParamStore<double> video = init_video_params<double>(c, rng);
};

}  // namespace

TEST_F(Snapshot, InitCopiesTheVideoEncoder) {
  const auto snap = init_snapshot(video, 0.996);
  EXPECT_TRUE(snap.initialized);
  EXPECT_EQ(snap.epoch_of_last_update, 0);
  EXPECT_TRUE(snap.params.same_layout(video));
  for (const auto& [n, p] : snap.params) EXPECT_EQ(p.value.vec(), video.at(n).value.vec()) << n;
  EXPECT_THROW(init_snapshot(video, 1.5), ConfigError);
}

TEST_F(Snapshot, EmaOfZeroTowardsOne) {
  auto snap = init_snapshot(filled_like(video, 0.0), 0.996);
  ema_update(snap, filled_like(video, 1.0), 1);
  for (const auto& [n, p] : snap.params) {
    for (double x : p.value.data()) ASSERT_NEAR(x, 0.004, 1e-15);
  }
  EXPECT_EQ(snap.epoch_of_last_update, 1);
}

TEST_F(Snapshot, EmaFixedPoint) {
  auto snap = init_snapshot(video, 0.996);
  ema_update(snap, video, 1);
  for (const auto& [n, p] : snap.params) EXPECT_EQ(p.value.vec(), video.at(n).value.vec()) << n;
}

TEST_F(Snapshot, EmaMatchesClosedFormGeometricRecursion) {
  const double lambda = 0.996;
  const ParamStore<double> s0 = video.clone_values();
  Rng r2(22);
  const ParamStore<double> target = init_video_params<double>(c, r2);
  auto snap = init_snapshot(s0, lambda);
  for (std::int64_t k = 1; k <= 10; ++k) {
    ema_update(snap, target, k);
    const double lk = std::pow(lambda, static_cast<double>(k));
    for (const auto& [n, p] : snap.params) {
      const auto& v = target.at(n).value;
      const auto& init = s0.at(n).value;
      for (std::size_t i = 0; i < p.value.size(); ++i) ASSERT_NEAR(p.value[i], v[i] + lk * (init[i] - v[i]), 1e-6);
    }
  }
}

TEST_F(Snapshot, MismatchedLayoutIsContractError) {
  auto snap = init_snapshot(video, 0.996);
  EncoderConfig other = c;
  other.depth = 1;
  Rng r2(1);
  EXPECT_THROW(ema_update(snap, init_video_params<double>(other, r2), 1), ContractError);
  SnapshotState<double> empty;
  EXPECT_THROW(ema_update(empty, video, 1), StateError);
}

TEST_F(Snapshot, PrevEpochPlainIsEmaWithZeroLambda) {
  Rng r2(23);
  const auto target = init_video_params<double>(c, r2);
  auto a = init_snapshot(video, 0.996);
  alternative_update(SnapshotMode::prev_epoch_plain, a, target, video, 1);
  auto b = init_snapshot(video, 0.0);
  ema_update(b, target, 1);
  for (const auto& [n, p] : a.params) EXPECT_EQ(p.value.vec(), b.params.at(n).value.vec());
}

TEST_F(Snapshot, CurrentIterCopiesTheLiveEncoderBitwise) {
  Rng r2(24);
  const auto current = init_video_params<double>(c, r2);
  auto snap = init_snapshot(video, 0.996);
  alternative_update(SnapshotMode::current_iter, snap, current, video, 3);
  for (const auto& [n, p] : snap.params) EXPECT_EQ(p.value.vec(), current.at(n).value.vec());
  alternative_update(SnapshotMode::prev_iter, snap, current, video, 4);
  for (const auto& [n, p] : snap.params) EXPECT_EQ(p.value.vec(), video.at(n).value.vec());
}

TEST_F(Snapshot, PerIterationMomentumClosesTheGeometricFraction) {
  auto snap = init_snapshot(filled_like(video, 0.0), 0.996);
  const auto one = filled_like(video, 1.0);
  for (int i = 0; i < 250; ++i) alternative_update(SnapshotMode::prev_iter_momentum, snap, video, one, i);
  const double expected = 1.0 - std::pow(0.996, 250.0);
  EXPECT_NEAR(expected, 0.633, 5e-4);
  for (const auto& [n, p] : snap.params) {
    for (double x : p.value.data()) ASSERT_NEAR(x, expected, 1e-9);
  }
}

TEST_F(Snapshot, ModeNamesRoundTrip) {
  for (auto m : {SnapshotMode::epoch_ema, SnapshotMode::prev_epoch_plain, SnapshotMode::current_iter,
                 SnapshotMode::prev_iter, SnapshotMode::prev_iter_momentum}) {
    EXPECT_EQ(parse_snapshot_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_snapshot_mode("next_epoch"), ConfigError);
  EXPECT_FALSE(updates_per_iteration(SnapshotMode::epoch_ema));
  EXPECT_TRUE(updates_per_iteration(SnapshotMode::prev_iter));
}

TEST_F(Snapshot, EmptyMaskGivesNoTargets) {
  auto snap = init_snapshot(video, 0.996);
  const auto vb = make_video_batch<double>({random_frames(4, rng)}, 8);
  EXPECT_EQ(snapshot_targets(snap, c, vb, {}).dim(0), 0u);
  SnapshotState<double> empty;
  EXPECT_THROW(snapshot_targets(empty, c, vb, {}), StateError);
}

TEST_F(Snapshot, TargetsEqualVideoFeaturesWhenParamsMatch) {
  auto snap = init_snapshot(video, 0.996);
  const auto vb = make_video_batch<double>({random_frames(4, rng), random_frames(4, rng)}, 8);
  const std::vector<MaskSpec> none{MaskSpec::none(4, 4), MaskSpec::none(4, 4)};
  Tape<double> tape(false);
  const auto feats = video_forward(tape, video, c, vb, &none).patch_features.value();
  std::vector<std::size_t> all(32);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto t = snapshot_targets(snap, c, vb, all);
  EXPECT_LT(max_abs_diff(t, feats), 1e-6);
}

TEST_F(Snapshot, TargetsIgnoreTheStudentMaskAndAreFrozen) {
  auto snap = init_snapshot(video, 0.996);
  const auto vb = make_video_batch<double>({random_frames(4, rng)}, 8);
  const std::vector<std::size_t> rows{1, 5, 9, 13};
  const auto a = snapshot_targets(snap, c, vb, rows);
  // The live encoder changes; the snapshot does not until the next boundary.
  for (auto& [n, p] : video) {
    for (auto& x : p.value.data()) x += 0.01;
  }
  const auto b = snapshot_targets(snap, c, vb, rows);
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_THROW(snapshot_targets(snap, c, vb, {99}), ContractError);
}

TEST_F(Snapshot, IdenticalFramesGiveIdenticalPerFrameTargets) {
  for (auto& x : video.at("pos_temporal").value.data()) x = 0.0;
  auto snap = init_snapshot(video, 0.996);
  const auto one = random_frames(1, rng);
  Tensor<float> frames({4, 16, 16, 3});
  for (std::size_t t = 0; t < 4; ++t) std::copy_n(one.raw(), one.size(), frames.raw() + t * one.size());
  const auto mask = sample_mask(MaskStrategy::block_tube, 4, 4, 0.5, rng);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 16; ++i) {
    if (mask.grid[i]) rows.push_back(i);
  }
  const auto tgt = snapshot_targets(snap, c, make_video_batch<double>({frames}, 8), rows);
  const std::size_t per = rows.size() / 4;
  for (std::size_t k = per; k < rows.size(); ++k) {
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(tgt[k * 16 + j], tgt[(k % per) * 16 + j], 1e-5);
  }
}

TEST_F(Snapshot, BackwardThroughTheStudentNeverReachesTheSnapshot) {
  auto snap = init_snapshot(video, 0.996);
  const auto vb = make_video_batch<double>({random_frames(4, rng)}, 8);
  const std::vector<MaskSpec> masks{sample_mask(MaskStrategy::block_tube, 4, 4, 0.5, rng)};
  Tape<double> tape;
  const auto enc = video_forward(tape, video, c, vb, &masks);
  const auto tgt = snapshot_targets(snap, c, vb, enc.masked_rows);
  Var<double> diff = sub(enc.masked_features, tape.constant(tgt));
  tape.backward(sum(mul(diff, diff)));
  for (const auto& [n, p] : snap.params) {
    if (p.has_grad()) {
      for (double g : p.grad.data()) ASSERT_EQ(g, 0.0) << n;
    }
  }
  EXPECT_TRUE(video.at("mask_token").has_grad());
}

TEST_F(Snapshot, UpdatePreservesNamesAndShapes) {
  auto snap = init_snapshot(video, 0.996);
  Rng r2(25);
  ema_update(snap, init_video_params<double>(c, r2), 1);
  EXPECT_TRUE(snap.params.same_layout(video));
}
