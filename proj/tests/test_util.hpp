#pragma once

#include "tpf/data.hpp"
#include "tpf/model.hpp"
#include "tpf/train.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

namespace testutil {

/// A very small model for tests that train or run many forward passes.
inline tpf::ModelConfig tiny_model() {
  tpf::ModelConfig m;
  m.backbone.embed_dims = {8, 16, 16, 16};
  m.backbone.depths = {1, 1, 1, 1};
  m.backbone.heads = {1, 2, 2, 2};
  m.backbone.mlp_ratio = 2;
  m.decoder.seed_channels = 8;
  m.decoder.widths = {8, 8, 8, 8};
  m.decoder.se_reduction = 4;
  m.decoder.head_channels = 8;
  m.part2.width = 8;
  m.part2.up_width = 4;
  m.part2.post_blocks = 1;
  m.part2.se_reduction = 4;
  m.disc_base_width = 8;
  m.disc_max_width = 16;
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto dir = std::filesystem::temp_directory_path() /
             ("tpfnet_test_" + tag + "_" + std::to_string(rng() % 1000000000ULL));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Writes a small synthetic data set via datagen and returns its manifest path.
tpf::DatasetManifest make_dataset(const std::filesystem::path& dir, int64_t count, uint64_t seed, int64_t val = 0,
                                  int64_t test = 0);

/// A random batch with consistent fields, no files involved.
tpf::Batch random_batch(int64_t batch, uint64_t seed);

}  // namespace testutil
