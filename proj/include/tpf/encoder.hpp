#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <memory>
#include <string>

namespace tpf {

/// Four feature maps at strides 4, 8, 16 and 32.
using FeaturePyramid = std::array<torch::Tensor, 4>;

enum class BackboneVariant { Pvt, Cnn };

std::string to_string(BackboneVariant v);
BackboneVariant parse_backbone_variant(const std::string& s);

struct BackboneConfig {
  std::array<int64_t, 4> embed_dims{32, 64, 128, 256};
  std::array<int64_t, 4> depths{2, 2, 2, 2};
  std::array<int64_t, 4> heads{1, 2, 4, 8};
  std::array<int64_t, 4> sr_ratios{8, 4, 2, 1};
  int64_t mlp_ratio = 4;
  /// Input extent the learned position embeddings are laid out for.
  int64_t reference_size = 256;
  BackboneVariant variant = BackboneVariant::Pvt;

  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Anything that turns [B,3,H,W] into a four-stage pyramid.
class BackboneImpl : public torch::nn::Module {
 public:
  virtual FeaturePyramid forward(const torch::Tensor& image) = 0;
  virtual std::array<int64_t, 4> stage_channels() const = 0;
};

/// Multi-head attention whose keys and values come from the token grid
/// average-pooled by `sr_ratio` (followed by LayerNorm when pooling is active).
class SpatialReductionAttentionImpl : public torch::nn::Module {
 public:
  SpatialReductionAttentionImpl(int64_t dim, int64_t heads, int64_t sr_ratio);

  /// tokens: [B, H*W, C]. Returns [B, H*W, C].
  torch::Tensor forward(const torch::Tensor& tokens, int64_t height, int64_t width);
  /// Same as forward, also returning the attention weights [B, heads, N, M].
  std::pair<torch::Tensor, torch::Tensor> forward_with_weights(const torch::Tensor& tokens, int64_t height,
                                                               int64_t width);
  /// Key/value tokens after spatial reduction, [B, M, C].
  torch::Tensor reduce(const torch::Tensor& tokens, int64_t height, int64_t width);

  torch::nn::Linear q{nullptr}, kv{nullptr}, proj{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  int64_t dim, heads, sr_ratio;
};
TORCH_MODULE(SpatialReductionAttention);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, int64_t sr_ratio, int64_t mlp_ratio);
  torch::Tensor forward(const torch::Tensor& tokens, int64_t height, int64_t width);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  SpatialReductionAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Pyramidal vision transformer: per stage a strided patch embedding,
/// interpolated learned position embeddings, and a stack of transformer
/// blocks with spatial-reduction attention.
class PyramidVisionTransformerImpl : public BackboneImpl {
 public:
  explicit PyramidVisionTransformerImpl(const BackboneConfig& cfg);
  FeaturePyramid forward(const torch::Tensor& image) override;
  std::array<int64_t, 4> stage_channels() const override { return cfg.embed_dims; }

  std::array<torch::nn::Conv2d, 4> patch_embed{nullptr, nullptr, nullptr, nullptr};
  std::array<torch::nn::LayerNorm, 4> embed_norm{nullptr, nullptr, nullptr, nullptr};
  std::array<torch::Tensor, 4> pos_embed;
  std::array<torch::nn::ModuleList, 4> blocks{nullptr, nullptr, nullptr, nullptr};
  std::array<torch::nn::LayerNorm, 4> out_norm{nullptr, nullptr, nullptr, nullptr};
  BackboneConfig cfg;
};

/// Small convolutional plug-in backbone with the same pyramid contract.
class ConvBackboneImpl : public BackboneImpl {
 public:
  explicit ConvBackboneImpl(const BackboneConfig& cfg);
  FeaturePyramid forward(const torch::Tensor& image) override;
  std::array<int64_t, 4> stage_channels() const override { return cfg.embed_dims; }

  std::array<torch::nn::Sequential, 4> stages{nullptr, nullptr, nullptr, nullptr};
  BackboneConfig cfg;
};

std::shared_ptr<BackboneImpl> make_backbone(const BackboneConfig& cfg);

/// Checks [B,3,H,W] with H and W divisible by 32.
void check_backbone_input(const torch::Tensor& image);

/// Replaces backbone parameters from a parameter file. Fails without
/// modifying the backbone if the file is missing or any entry mismatches.
void load_pretrained(BackboneImpl& backbone, const std::filesystem::path& path);

}  // namespace tpf
