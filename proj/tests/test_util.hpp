#pragma once

// Tiny run configuration shared by the trainer-level tests.

#include <filesystem>
#include <string>

#include "miles/config.hpp"
#include "miles/trainer.hpp"

namespace miles::testing {

inline RunConfig tiny_run_config() {
  RunConfig c;
  c.data.train_size = 16;
  c.data.val_size = 8;
  c.data.test_size = 8;
  c.data.classes = 4;
  c.data.frames = 4;
  c.data.resolution = 16;
  c.encoder.image_size = 16;
  c.encoder.embed_dim = 16;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2;
  c.encoder.proj_dim = 8;
  c.train.stages = {StageConfig{1, 1, 8, 1e-3, "random_tube", 0.75}, StageConfig{2, 2, 8, 5e-4, "block_tube", 0.5}};
  c.eval.frames = 2;
  c.eval.batch_size = 8;
  return c;
}

inline TrainData tiny_train_data(const RunConfig& c) {
  return make_train_data(generate_split(c.data, 0), CaptionVocab{}, c.encoder.text_max_len);
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("miles_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace miles::testing
