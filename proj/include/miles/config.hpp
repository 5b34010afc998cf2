#pragma once

// Run configuration: corpus, encoder, block-mask geometry, training schedule
// and evaluation settings in one JSON document. Any leaf can be overridden
// from the command line as a dot path, e.g. `train.tau=0.1` or
// `train.stages.1.epochs=2`.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/binio.hpp"
#include "miles/data.hpp"
#include "miles/encoders.hpp"
#include "miles/errors.hpp"
#include "miles/masking.hpp"
#include "miles/objectives.hpp"
#include "miles/snapshot.hpp"

namespace miles {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BlockMaskConfig, min_aspect, max_aspect, min_area, max_area_fraction,
                                                attempts_per_block, max_iterations)

struct StageConfig {
  std::size_t frames = 1;
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::string mask_strategy = "random_tube";
  double mask_ratio = 0.75;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StageConfig, frames, epochs, batch_size, lr, mask_strategy, mask_ratio)

// Reference schedule: 1 frame for 16 epochs (batch 2048, lr 1e-4), then 4
// frames for 4 epochs (batch 1024, lr 3e-5), from pretrained weights.
inline std::vector<StageConfig> default_stages() {
  return {StageConfig{1, 6, 32, 1e-3, "random_tube", 0.75}, StageConfig{4, 4, 16, 5e-4, "block_tube", 0.75}};
}

struct TrainConfig {
  std::vector<StageConfig> stages = default_stages();
  double lambda = 0.996;
  double tau = 0.05;
  std::uint64_t seed = 0;
  std::size_t warmup_epochs = 1;
  std::string snapshot_mode = "epoch_ema";
  bool use_mvm = true;
  std::string mvm_target = "features";  // features | pixels
  double mvm_weight = 1.0;
  std::string mvm_distance = "l2";
  std::string mvm_token_reduction = "mean";
  std::string mvm_batch_reduction = "sum";
  std::string contrastive_input = "raw";  // masked | raw: which student forward feeds the NCE after warm-up
  double grad_clip = 1.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, stages, lambda, tau, seed, warmup_epochs, snapshot_mode,
                                                use_mvm, mvm_target, mvm_weight, mvm_distance, mvm_token_reduction,
                                                mvm_batch_reduction, contrastive_input, grad_clip)

struct EvalConfig {
  std::size_t frames = 4;
  std::size_t batch_size = 32;
  std::string split = "test";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, frames, batch_size, split)

struct RunConfig {
  CorpusConfig data;
  EncoderConfig encoder;
  BlockMaskConfig mask;
  TrainConfig train;
  EvalConfig eval;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, data, encoder, mask, train, eval)

inline void validate(const TrainConfig& t) {
  if (t.stages.empty()) throw ConfigError("train.stages must not be empty");
  for (std::size_t i = 0; i < t.stages.size(); ++i) {
    const StageConfig& s = t.stages[i];
    const std::string at = "train.stages." + std::to_string(i) + ": ";
    if (s.frames == 0) throw ConfigError(at + "frames must be >= 1");
    if (i > 0 && s.frames < t.stages[i - 1].frames) throw ConfigError(at + "stages must have nondecreasing frames");
    if (s.batch_size == 0) throw ConfigError(at + "batch_size must be >= 1");
    if (!(s.lr > 0.0)) throw ConfigError(at + "lr must be positive");
    if (!(s.mask_ratio > 0.0 && s.mask_ratio < 1.0)) throw ConfigError(at + "mask_ratio must lie in (0, 1)");
    parse_mask_strategy(s.mask_strategy);
  }
  if (!(t.lambda >= 0.0 && t.lambda <= 1.0)) throw ConfigError("train.lambda must lie in [0, 1]");
  if (!(t.tau > 0.0)) throw ConfigError("train.tau must be positive");
  if (!(t.mvm_weight >= 0.0)) throw ConfigError("train.mvm_weight must be >= 0");
  if (!(t.grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  if (t.mvm_target != "features" && t.mvm_target != "pixels") {
    throw ConfigError("train.mvm_target must be 'features' or 'pixels'");
  }
  if (t.contrastive_input != "masked" && t.contrastive_input != "raw") {
    throw ConfigError("train.contrastive_input must be 'masked' or 'raw'");
  }
  parse_snapshot_mode(t.snapshot_mode);
  parse_mvm_distance(t.mvm_distance);
  parse_reduction(t.mvm_token_reduction);
  parse_reduction(t.mvm_batch_reduction);
}

inline void validate(const RunConfig& c) {
  validate_corpus_config(c.data);
  validate(c.encoder);
  validate(c.train);
  if (c.encoder.image_size != c.data.resolution || c.encoder.channels != c.data.channels ||
      c.encoder.patch_size != c.data.patch_size) {
    throw ConfigError("encoder image_size/channels/patch_size must match the corpus");
  }
  for (const auto& s : c.train.stages) {
    if (s.frames > c.data.frames) throw ConfigError("stage samples more frames than clips store");
  }
  if (c.eval.frames == 0 || c.eval.frames > c.data.frames) throw ConfigError("eval.frames must lie in [1, data.frames]");
  if (c.eval.batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
}

inline nlohmann::json to_json_value(const RunConfig& c) { return nlohmann::json(c); }

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

/// Applies `path=value` to a config document. The path must name an existing
/// leaf; the value is parsed as JSON when possible and taken as a string
/// otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_object()) {
      if (!node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
      node = &(*node)[key];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError("config path '" + path + "': '" + key + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("config path '" + path + "': index out of range");
      node = &(*node)[idx];
    } else {
      throw ConfigError("config path '" + path + "' descends into a scalar");
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  *node = value;
}

inline RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json(RunConfig{});
  if (!file.empty()) {
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(binio::read_file(file));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("cannot parse " + file.string() + ": " + e.what());
    }
    doc.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  validate(c);
  return c;
}

}  // namespace miles
