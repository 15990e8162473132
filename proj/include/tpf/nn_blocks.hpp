#pragma once

#include <torch/torch.h>

#include <utility>

namespace tpf {

/// Channel layout of a block. `se_reduction` must divide `out_channels`.
struct BlockConfig {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  int64_t se_reduction = 16;
  /// Feature convolutions in a patch discriminator (the last one has stride 1).
  int64_t patch_layers = 4;
  /// Width of the first discriminator layer; doubles per layer up to `max_width`.
  int64_t base_width = 64;
  int64_t max_width = 512;

  void validate() const;
};

/// 3x3 convolution -> batch norm -> GELU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  int64_t in_channels;
};
TORCH_MODULE(ConvBlock);

/// Squeeze-and-excitation channel gate.
class SEBlockImpl : public torch::nn::Module {
 public:
  SEBlockImpl(int64_t channels, int64_t reduction);
  /// Per-channel gate in (0,1), shape [B, C].
  torch::Tensor gate(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SEBlock);

/// Two-route decoder unit: (1x1 conv, BN, SE) + (ConvBlock, ConvBlock), summed.
class QBlockImpl : public torch::nn::Module {
 public:
  explicit QBlockImpl(const BlockConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor shortcut_route(const torch::Tensor& x);
  torch::Tensor conv_route(const torch::Tensor& x);

  torch::nn::Conv2d proj{nullptr};
  torch::nn::BatchNorm2d proj_bn{nullptr};
  SEBlock se{nullptr};
  ConvBlock conv1{nullptr}, conv2{nullptr};
  BlockConfig cfg;
};
TORCH_MODULE(QBlock);

/// Gates the text-free branch with a sigmoid map computed from the two
/// auxiliary branches: sigmoid(conv1x1(cat(f1, f2))) * f3.
///
/// `aux_inputs` is the number of auxiliary branch maps concatenated (0-2);
/// with zero the block passes f3 through unchanged.
class AttentionFuseImpl : public torch::nn::Module {
 public:
  AttentionFuseImpl(int64_t aux_channels, int64_t out_channels, int64_t aux_inputs = 2);
  torch::Tensor attention_map(const std::vector<torch::Tensor>& aux);
  torch::Tensor forward(const std::vector<torch::Tensor>& aux, const torch::Tensor& f3);
  torch::Tensor forward(const torch::Tensor& f1, const torch::Tensor& f2, const torch::Tensor& f3);

  torch::nn::Conv2d conv{nullptr};
  int64_t aux_channels;
  int64_t out_channels;
  int64_t aux_inputs;
};
TORCH_MODULE(AttentionFuse);

/// PatchGAN: (patch_layers - 1) stride-2 4x4 convs, one stride-1 4x4 conv,
/// then a stride-1 4x4 conv to a single logit channel. LeakyReLU(0.2);
/// instance norm on every feature layer except the first. Raw logits.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const BlockConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  /// Logit-map extent for a square or rectangular input extent.
  static int64_t output_extent(int64_t input_extent, int64_t patch_layers);

  torch::nn::Sequential body{nullptr};
  BlockConfig cfg;
};
TORCH_MODULE(PatchDiscriminator);

}  // namespace tpf
