#pragma once

// Spatio-temporal patch masks. The default is block-wise sampling on the
// patch grid of one frame, repeated over time ("tube"), so the same spatial
// patches are hidden in every frame.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "miles/errors.hpp"
#include "miles/rng.hpp"

namespace miles {

enum class MaskStrategy { block_tube, random_tube, random_per_frame, block_per_frame, frame_wise };

inline const char* to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::block_tube: return "block_tube";
    case MaskStrategy::random_tube: return "random_tube";
    case MaskStrategy::random_per_frame: return "random_per_frame";
    case MaskStrategy::block_per_frame: return "block_per_frame";
    case MaskStrategy::frame_wise: return "frame_wise";
  }
  return "?";
}

inline MaskStrategy parse_mask_strategy(const std::string& s) {
  for (auto m : {MaskStrategy::block_tube, MaskStrategy::random_tube, MaskStrategy::random_per_frame,
                 MaskStrategy::block_per_frame, MaskStrategy::frame_wise}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown masking strategy '" + s + "'");
}

inline bool is_tube(MaskStrategy s) { return s == MaskStrategy::block_tube || s == MaskStrategy::random_tube; }
inline bool is_block(MaskStrategy s) { return s == MaskStrategy::block_tube || s == MaskStrategy::block_per_frame; }

/// Block geometry for block-wise sampling.
struct BlockMaskConfig {
  double min_aspect = 0.5;
  double max_aspect = 2.0;
  std::size_t min_area = 4;
  double max_area_fraction = 0.25;  // of the frame's patch count
  std::size_t attempts_per_block = 10;
  std::size_t max_iterations = 10000;

  std::size_t max_area(std::size_t patches) const {
    return std::max(min_area, static_cast<std::size_t>(static_cast<double>(patches) * max_area_fraction));
  }
};

/// M x N boolean grid, true = masked; row t is frame t.
struct MaskSpec {
  std::size_t frames = 0;
  std::size_t patches = 0;
  std::vector<std::uint8_t> grid;
  MaskStrategy strategy = MaskStrategy::block_tube;
  double target_ratio = 0.0;

  bool masked(std::size_t t, std::size_t n) const { return grid[t * patches + n] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(grid.begin(), grid.end(), 1)); }
  double ratio() const { return static_cast<double>(count()) / static_cast<double>(frames * patches); }

  bool tube_valid() const {
    for (std::size_t t = 1; t < frames; ++t) {
      if (!std::equal(grid.begin(), grid.begin() + static_cast<std::ptrdiff_t>(patches),
                      grid.begin() + static_cast<std::ptrdiff_t>(t * patches))) {
        return false;
      }
    }
    return true;
  }

  static MaskSpec none(std::size_t frames, std::size_t patches) {
    return MaskSpec{frames, patches, std::vector<std::uint8_t>(frames * patches, 0), MaskStrategy::random_tube, 0.0};
  }

  /// One block of '#' (masked) / '.' rows per frame, frames separated by a blank line.
  std::string dump(std::size_t side) const {
    std::string out;
    for (std::size_t t = 0; t < frames; ++t) {
      if (t) out += '\n';
      for (std::size_t i = 0; i < patches; ++i) {
        out += masked(t, i) ? '#' : '.';
        if ((i + 1) % side == 0) out += '\n';
      }
    }
    return out;
  }
};

inline std::size_t masked_target(double ratio, std::size_t count) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(count) - 1e-9));
}

inline void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
}

/// Unions random rectangular blocks until at least ceil(ratio * side^2)
/// patches are masked. A block is preferred when it adds no more patches than
/// are still needed; if none of a round's candidates fits, the one adding the
/// fewest is placed anyway, so the result may overshoot by less than one block.
inline std::vector<std::uint8_t> sample_block_mask_2d(std::size_t side, double ratio, Rng& rng,
                                                      const BlockMaskConfig& cfg = {}) {
  if (side < 2) throw ConfigError("block masking needs a patch grid side >= 2");
  check_ratio(ratio);
  const std::size_t n = side * side;
  const std::size_t target = masked_target(ratio, n);
  const std::size_t max_area = cfg.max_area(n);
  const double log_lo = std::log(cfg.min_aspect);
  const double log_hi = std::log(cfg.max_aspect);
  std::vector<std::uint8_t> mask(n, 0);
  std::size_t count = 0;
  std::size_t iterations = 0;

  struct Block {
    std::size_t top = 0, left = 0, h = 0, w = 0, fresh = 0;
  };
  auto fresh_in = [&](const Block& b) {
    std::size_t f = 0;
    for (std::size_t i = b.top; i < b.top + b.h; ++i) {
      for (std::size_t j = b.left; j < b.left + b.w; ++j) f += mask[i * side + j] ? 0 : 1;
    }
    return f;
  };
  auto place = [&](const Block& b) {
    for (std::size_t i = b.top; i < b.top + b.h; ++i) {
      for (std::size_t j = b.left; j < b.left + b.w; ++j) mask[i * side + j] = 1;
    }
    count += b.fresh;
  };

  while (count < target) {
    if (++iterations > cfg.max_iterations) {
      throw SamplingError("block masking could not reach ratio " + std::to_string(ratio) + " within " +
                          std::to_string(cfg.max_iterations) + " rounds");
    }
    const std::size_t remaining = target - count;
    Block best;
    bool placed = false;
    for (std::size_t a = 0; a < cfg.attempts_per_block; ++a) {
      const double area = uniform(rng, static_cast<double>(cfg.min_area), static_cast<double>(max_area));
      const double aspect = std::exp(uniform(rng, log_lo, log_hi));
      Block b;
      b.h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
      b.w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
      if (b.h == 0 || b.w == 0 || b.h > side || b.w > side) continue;
      if (b.h * b.w < cfg.min_area || b.h * b.w > max_area) continue;
      b.top = uniform_index(rng, side - b.h + 1);
      b.left = uniform_index(rng, side - b.w + 1);
      b.fresh = fresh_in(b);
      if (b.fresh == 0) continue;
      if (b.fresh <= remaining) {
        place(b);
        placed = true;
        break;
      }
      if (best.fresh == 0 || b.fresh < best.fresh) best = b;
    }
    if (!placed && best.fresh > 0) place(best);
  }
  return mask;
}

/// Repeats a 2-D mask over M frames.
inline MaskSpec extend_tube(const std::vector<std::uint8_t>& mask2d, std::size_t frames,
                            MaskStrategy strategy = MaskStrategy::block_tube, double target_ratio = 0.0) {
  if (frames < 1) throw ContractError("extend_tube: frames must be >= 1");
  MaskSpec spec{frames, mask2d.size(), {}, strategy, target_ratio};
  spec.grid.reserve(frames * mask2d.size());
  for (std::size_t t = 0; t < frames; ++t) spec.grid.insert(spec.grid.end(), mask2d.begin(), mask2d.end());
  return spec;
}

inline std::vector<std::uint8_t> sample_random_mask_2d(std::size_t patches, double ratio, Rng& rng) {
  check_ratio(ratio);
  const std::size_t k = masked_target(ratio, patches);
  std::vector<std::size_t> order(patches);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + uniform_index(rng, patches - i)]);
  std::vector<std::uint8_t> mask(patches, 0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

inline std::size_t grid_side(std::size_t patches) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patches))));
  if (side * side != patches) throw ConfigError("block masking needs a square patch grid");
  return side;
}

inline MaskSpec sample_mask(MaskStrategy strategy, std::size_t frames, std::size_t patches, double ratio, Rng& rng,
                            const BlockMaskConfig& block = {}) {
  check_ratio(ratio);
  if (frames < 1 || patches < 1) throw ContractError("sample_mask: empty grid");
  switch (strategy) {
    case MaskStrategy::block_tube:
      return extend_tube(sample_block_mask_2d(grid_side(patches), ratio, rng, block), frames, strategy, ratio);
    case MaskStrategy::random_tube:
      return extend_tube(sample_random_mask_2d(patches, ratio, rng), frames, strategy, ratio);
    case MaskStrategy::random_per_frame:
    case MaskStrategy::block_per_frame: {
      MaskSpec spec{frames, patches, {}, strategy, ratio};
      for (std::size_t t = 0; t < frames; ++t) {
        const auto m = strategy == MaskStrategy::random_per_frame
                           ? sample_random_mask_2d(patches, ratio, rng)
                           : sample_block_mask_2d(grid_side(patches), ratio, rng, block);
        spec.grid.insert(spec.grid.end(), m.begin(), m.end());
      }
      return spec;
    }
    case MaskStrategy::frame_wise: {
      const std::size_t k = masked_target(ratio, frames);
      if (k < 1 || k > frames) throw ConfigError("frame-wise ratio selects no whole frame");
      MaskSpec spec = MaskSpec::none(frames, patches);
      spec.strategy = strategy;
      spec.target_ratio = ratio;
      std::vector<std::size_t> order(frames);
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + uniform_index(rng, frames - i)]);
      for (std::size_t i = 0; i < k; ++i) {
        std::fill_n(spec.grid.begin() + static_cast<std::ptrdiff_t>(order[i] * patches), patches, 1);
      }
      return spec;
    }
  }
  throw ConfigError("invalid masking strategy");
}

}  // namespace miles
