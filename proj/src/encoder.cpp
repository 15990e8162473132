#include "tpf/encoder.hpp"

#include "tpf/archive.hpp"
#include "tpf/common.hpp"
#include "tpf/nn_blocks.hpp"

#include <cmath>

namespace tpf {

namespace nnf = torch::nn::functional;

std::string to_string(BackboneVariant v) { return v == BackboneVariant::Pvt ? "pvt" : "cnn"; }

BackboneVariant parse_backbone_variant(const std::string& s) {
  if (s == "pvt") return BackboneVariant::Pvt;
  if (s == "cnn") return BackboneVariant::Cnn;
  throw ConfigError("unknown backbone variant '" + s + "' (expected pvt or cnn)");
}

void BackboneConfig::validate() const {
  for (size_t i = 0; i < 4; ++i) {
    require(embed_dims[i] >= 1 && heads[i] >= 1 && depths[i] >= 0, "BackboneConfig: non-positive size in stage " +
                                                                      std::to_string(i + 1));
    require(embed_dims[i] % heads[i] == 0, "BackboneConfig: embed_dims[" + std::to_string(i) + "]=" +
                                               std::to_string(embed_dims[i]) + " not divisible by heads " +
                                               std::to_string(heads[i]));
    require(sr_ratios[i] >= 1, "BackboneConfig: sr_ratios must be positive");
  }
  require(mlp_ratio >= 1, "BackboneConfig: mlp_ratio must be positive");
  require(reference_size >= 32 && reference_size % 32 == 0, "BackboneConfig: reference_size must be a multiple of 32");
}

void check_backbone_input(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3)
    throw ConfigError("encode: expected [B,3,H,W], got " + shape_str(image.sizes()));
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0 || image.size(2) == 0 || image.size(3) == 0)
    throw ConfigError("encode: spatial extents must be positive multiples of 32, got " + shape_str(image.sizes()));
}

namespace {

void init_linear(torch::nn::Linear& l) {
  torch::NoGradGuard g;
  l->weight.normal_(0.0, 0.02);
  if (l->bias.defined()) l->bias.zero_();
}

torch::Tensor to_tokens(const torch::Tensor& map) { return map.flatten(2).transpose(1, 2); }

torch::Tensor to_map(const torch::Tensor& tokens, int64_t h, int64_t w) {
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), h, w});
}

}  // namespace

SpatialReductionAttentionImpl::SpatialReductionAttentionImpl(int64_t d, int64_t h, int64_t sr)
    : dim(d), heads(h), sr_ratio(sr) {
  require(d % h == 0, "sra_attention: dimension " + std::to_string(d) + " not divisible by heads " + std::to_string(h));
  require(sr >= 1, "sra_attention: sr_ratio must be positive");
  q = register_module("q", torch::nn::Linear(d, d));
  kv = register_module("kv", torch::nn::Linear(d, 2 * d));
  proj = register_module("proj", torch::nn::Linear(d, d));
  init_linear(q);
  init_linear(kv);
  init_linear(proj);
  if (sr > 1) norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor SpatialReductionAttentionImpl::reduce(const torch::Tensor& tokens, int64_t height, int64_t width) {
  if (tokens.dim() != 3 || tokens.size(2) != dim)
    throw ConfigError("sra_attention: expected [B,N," + std::to_string(dim) + "] tokens, got " +
                      shape_str(tokens.sizes()));
  if (height < 1 || width < 1 || tokens.size(1) != height * width)
    throw ConfigError("sra_attention: " + std::to_string(tokens.size(1)) + " tokens do not form a " +
                      std::to_string(height) + "x" + std::to_string(width) + " grid");
  if (sr_ratio == 1) return tokens;
  auto grid = to_map(tokens, height, width);
  const int64_t rh = std::max<int64_t>(1, height / sr_ratio);
  const int64_t rw = std::max<int64_t>(1, width / sr_ratio);
  auto pooled = nnf::adaptive_avg_pool2d(grid, nnf::AdaptiveAvgPool2dFuncOptions({rh, rw}));
  return norm(to_tokens(pooled));
}

std::pair<torch::Tensor, torch::Tensor> SpatialReductionAttentionImpl::forward_with_weights(
    const torch::Tensor& tokens, int64_t height, int64_t width) {
  auto reduced = reduce(tokens, height, width);
  const int64_t b = tokens.size(0), n = tokens.size(1), m = reduced.size(1);
  const int64_t hd = dim / heads;
  auto query = q(tokens).reshape({b, n, heads, hd}).permute({0, 2, 1, 3});
  auto keyval = kv(reduced).reshape({b, m, 2, heads, hd}).permute({2, 0, 3, 1, 4});
  auto key = keyval[0];
  auto value = keyval[1];
  auto weights = torch::softmax(torch::matmul(query, key.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  auto out = torch::matmul(weights, value).permute({0, 2, 1, 3}).reshape({b, n, dim});
  return {proj(out), weights};
}

torch::Tensor SpatialReductionAttentionImpl::forward(const torch::Tensor& tokens, int64_t height, int64_t width) {
  return forward_with_weights(tokens, height, width).first;
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t sr_ratio, int64_t mlp_ratio) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", SpatialReductionAttention(dim, heads, sr_ratio));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
  fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
  init_linear(fc1);
  init_linear(fc2);
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& tokens, int64_t height, int64_t width) {
  auto x = tokens + attn(norm1(tokens), height, width);
  return x + fc2(torch::gelu(fc1(norm2(x))));
}

PyramidVisionTransformerImpl::PyramidVisionTransformerImpl(const BackboneConfig& c) : cfg(c) {
  cfg.validate();
  int64_t in = 3;
  int64_t stride = 1;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t patch = i == 0 ? 4 : 2;
    stride *= patch;
    const auto dim = cfg.embed_dims[i];
    const auto tag = std::to_string(i + 1);
    patch_embed[i] = register_module("patch_embed" + tag,
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(in, dim, patch).stride(patch)));
    embed_norm[i] = register_module("embed_norm" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    const int64_t grid = cfg.reference_size / stride;
    pos_embed[i] = register_parameter("pos_embed" + tag, torch::randn({1, dim, grid, grid}) * 0.02);
    blocks[i] = register_module("blocks" + tag, torch::nn::ModuleList());
    for (int64_t d = 0; d < cfg.depths[i]; ++d)
      blocks[i]->push_back(TransformerBlock(dim, cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio));
    out_norm[i] = register_module("out_norm" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    in = dim;
  }
}

FeaturePyramid PyramidVisionTransformerImpl::forward(const torch::Tensor& image) {
  check_backbone_input(image);
  FeaturePyramid out;
  auto x = image;
  for (size_t i = 0; i < 4; ++i) {
    auto map = patch_embed[i](x);
    const int64_t h = map.size(2), w = map.size(3);
    auto pos = pos_embed[i];
    if (pos.size(2) != h || pos.size(3) != w) {
      pos = nnf::interpolate(pos, nnf::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{h, w})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
    }
    auto tokens = embed_norm[i](to_tokens(map)) + to_tokens(pos);
    for (const auto& blk : *blocks[i]) tokens = blk->as<TransformerBlock>()->forward(tokens, h, w);
    x = to_map(out_norm[i](tokens), h, w);
    out[i] = guard_finite(x, "encoder stage");
  }
  return out;
}

ConvBackboneImpl::ConvBackboneImpl(const BackboneConfig& c) : cfg(c) {
  cfg.validate();
  int64_t in = 3;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t patch = i == 0 ? 4 : 2;
    const auto dim = cfg.embed_dims[i];
    stages[i] = register_module(
        "stage" + std::to_string(i + 1),
        torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, dim, patch).stride(patch)),
                              torch::nn::BatchNorm2d(dim), torch::nn::GELU(), ConvBlock(dim, dim)));
    in = dim;
  }
}

FeaturePyramid ConvBackboneImpl::forward(const torch::Tensor& image) {
  check_backbone_input(image);
  FeaturePyramid out;
  auto x = image;
  for (size_t i = 0; i < 4; ++i) {
    x = stages[i]->forward(x);
    out[i] = guard_finite(x, "encoder stage");
  }
  return out;
}

std::shared_ptr<BackboneImpl> make_backbone(const BackboneConfig& cfg) {
  if (cfg.variant == BackboneVariant::Pvt) return std::make_shared<PyramidVisionTransformerImpl>(cfg);
  return std::make_shared<ConvBackboneImpl>(cfg);
}

void load_pretrained(BackboneImpl& backbone, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("pretrained weights not found: '" + path.string() + "'");
  auto archive = Archive::load(path);
  import_module(backbone, archive);
}

}  // namespace tpf
