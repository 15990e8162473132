#pragma once

#include "tpf/archive.hpp"
#include "tpf/generator_part1.hpp"
#include "tpf/generator_part2.hpp"

#include <torch/torch.h>

#include <map>
#include <string>

namespace tpf {

/// Everything that determines parameter layout.
struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  Part2Config part2;
  int64_t disc_base_width = 16;
  int64_t disc_max_width = 64;
  int64_t disc_patch_layers = 4;
  AblationFlags flags;

  void validate() const;
  Part1Config part1() const { return {backbone, decoder, flags}; }
  /// Stable "key=value" rendering stored in checkpoints.
  std::map<std::string, std::string> to_kv() const;
  /// Applies one key; returns false when the key is not a model key.
  bool set(const std::string& key, const std::string& value);
  bool operator==(const ModelConfig&) const = default;
};

/// Predictions of the full pipeline for one batch.
struct Prediction {
  Part1Output part1;
  torch::Tensor tfp512;
};

/// Both generators, as needed at inference time.
class TextEraser {
 public:
  explicit TextEraser(const ModelConfig& cfg);

  /// t256: [B,3,256,256]. Without part 2 the 512 output is the part-1 image
  /// upsampled bilinearly.
  Prediction predict(const torch::Tensor& t256);
  void eval();
  void train();

  /// Builds a model from a checkpoint written by the trainer.
  static TextEraser from_checkpoint(const Archive& archive);

  ModelConfig cfg;
  Part1Generator g1{nullptr};
  Part2Generator g2{nullptr};  // null without part 2
};

std::string join_ints(const std::array<int64_t, 4>& v);
std::array<int64_t, 4> parse_ints4(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
int64_t parse_int(const std::string& key, const std::string& value);
std::string format_real(double v);

}  // namespace tpf
