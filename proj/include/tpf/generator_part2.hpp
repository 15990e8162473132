#pragma once

#include "tpf/nn_blocks.hpp"

#include <torch/torch.h>

namespace tpf {

struct Part2Config {
  /// Width of the three ConvBlocks at input resolution.
  int64_t width = 16;
  /// Width after the transpose-convolution upsample.
  int64_t up_width = 8;
  /// ConvBlocks after upsampling.
  int64_t post_blocks = 2;
  int64_t se_reduction = 4;

  void validate() const;
  bool operator==(const Part2Config&) const = default;
};

/// Outputs of the image generator for both conditioning variants.
struct Part2Output {
  torch::Tensor tfp512;    // from (Sp256, TFp256)
  torch::Tensor tfp512_o;  // from (Sg256, TFg256)
};

/// Image generator: cat(seg, tf) -> ConvBlock x3, SE gate of block 1 applied
/// to block 3, residual skip from block 1, transpose-conv x2, concat with the
/// bilinearly upsampled input, ConvBlocks, 1x1 conv, sigmoid.
class Part2GeneratorImpl : public torch::nn::Module {
 public:
  explicit Part2GeneratorImpl(const Part2Config& cfg = {});
  torch::Tensor forward(const torch::Tensor& seg, const torch::Tensor& tf);

  ConvBlock block1{nullptr}, block2{nullptr}, block3{nullptr};
  SEBlock se{nullptr};
  torch::nn::ConvTranspose2d up{nullptr};
  torch::nn::Sequential post{nullptr};
  torch::nn::Conv2d out{nullptr};
  Part2Config cfg;
};
TORCH_MODULE(Part2Generator);

/// Reference-conditioned patch discriminator: scores cat(candidate, reference).
class Part2DiscriminatorImpl : public torch::nn::Module {
 public:
  Part2DiscriminatorImpl(int64_t base_width = 16, int64_t max_width = 64, int64_t patch_layers = 4);
  torch::Tensor forward(const torch::Tensor& candidate, const torch::Tensor& reference);

  PatchDiscriminator net{nullptr};
};
TORCH_MODULE(Part2Discriminator);

}  // namespace tpf
