#pragma once

#include "tpf/encoder.hpp"
#include "tpf/nn_blocks.hpp"

#include <torch/torch.h>

#include <array>
#include <memory>

namespace tpf {

/// Branch-removal switches. no_part2 is handled by the trainer.
struct AblationFlags {
  bool no_highpass = false;
  bool no_seg = false;
  bool no_part2 = false;

  bool operator==(const AblationFlags&) const = default;
};

struct DecoderConfig {
  /// Branch width after seeding from the last pyramid stage.
  int64_t seed_channels = 32;
  /// Branch width produced by M1..M4.
  std::array<int64_t, 4> widths{32, 32, 16, 16};
  int64_t se_reduction = 4;
  /// Width of the transpose-convolution stage in each head.
  int64_t head_channels = 16;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

/// Per-branch activations at the current decoder scale. b1 = high-pass,
/// b2 = segmentation, b3 = text-free. Removed branches stay undefined.
struct DecoderState {
  torch::Tensor b1, b2, b3;
};

/// Predictions of the part-1 generator. hp256/sp256 are undefined when the
/// corresponding branch is ablated.
struct Part1Output {
  torch::Tensor hp256;
  torch::Tensor sp256;
  torch::Tensor tfp256;
};

/// One decoder module "M": per branch upsample x2, concat skip, 1x1 fuse,
/// Q-block; then the text-free branch is gated by the attention block.
class MModuleImpl : public torch::nn::Module {
 public:
  MModuleImpl(int64_t in_channels, int64_t skip_channels, int64_t out_channels, int64_t se_reduction,
              const AblationFlags& flags);
  DecoderState forward(const DecoderState& state, const torch::Tensor& skip);

  /// Upsample + skip fusion + Q-block for one branch (0, 1 or 2).
  torch::Tensor branch(int index, const torch::Tensor& x, const torch::Tensor& skip);

  std::array<torch::nn::Conv2d, 3> fuse{nullptr, nullptr, nullptr};
  std::array<QBlock, 3> qblocks{nullptr, nullptr, nullptr};
  AttentionFuse attention{nullptr};
  int64_t in_channels, skip_channels, out_channels;
  AblationFlags flags;
};
TORCH_MODULE(MModule);

/// Transpose-conv x2 upsample, GELU, 1x1 conv to `out_channels`, sigmoid.
class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(int64_t in_channels, int64_t mid_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ConvTranspose2d up{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(Head);

struct Part1Config {
  BackboneConfig backbone;
  DecoderConfig decoder;
  AblationFlags flags;
};

/// Feature-synthesis generator: encoder + three-branch decoder + heads.
class Part1GeneratorImpl : public torch::nn::Module {
 public:
  explicit Part1GeneratorImpl(const Part1Config& cfg);
  /// t256: [B,3,256,256] in [0,1].
  Part1Output forward(const torch::Tensor& t256);

  std::shared_ptr<BackboneImpl> encoder;
  std::array<torch::nn::Conv2d, 3> seed{nullptr, nullptr, nullptr};
  std::array<MModule, 4> modules{nullptr, nullptr, nullptr, nullptr};
  std::array<Head, 3> heads{nullptr, nullptr, nullptr};
  Part1Config cfg;
};
TORCH_MODULE(Part1Generator);

/// Mask-conditioned patch discriminator: scores cat(mask, image).
class Part1DiscriminatorImpl : public torch::nn::Module {
 public:
  Part1DiscriminatorImpl(int64_t base_width = 16, int64_t max_width = 64, int64_t patch_layers = 4);
  torch::Tensor forward(const torch::Tensor& mask, const torch::Tensor& image);

  PatchDiscriminator net{nullptr};
};
TORCH_MODULE(Part1Discriminator);

}  // namespace tpf
