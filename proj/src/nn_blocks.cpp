#include "tpf/nn_blocks.hpp"

#include "tpf/common.hpp"

namespace tpf {

namespace nnf = torch::nn::functional;

namespace {

void check_channels(const torch::Tensor& x, int64_t expected, const char* block) {
  if (x.dim() != 4 || x.size(1) != expected)
    throw ConfigError(std::string(block) + ": expected [B," + std::to_string(expected) + ",H,W] input, got " +
                      shape_str(x.sizes()));
}

int64_t conv_out(int64_t n, int64_t kernel, int64_t stride, int64_t pad) {
  const int64_t span = n + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

}  // namespace

void BlockConfig::validate() const {
  require(in_channels >= 1 && out_channels >= 1, "BlockConfig: channel counts must be positive");
  require(se_reduction >= 1 && out_channels % se_reduction == 0,
          "BlockConfig: se_reduction " + std::to_string(se_reduction) + " does not divide out_channels " +
              std::to_string(out_channels));
  require(patch_layers >= 1, "BlockConfig: patch_layers must be >= 1");
  require(base_width >= 1 && max_width >= base_width, "BlockConfig: invalid discriminator widths");
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out) : in_channels(in) {
  require(in >= 1 && out >= 1, "ConvBlock: channel counts must be positive");
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  check_channels(x, in_channels, "conv_block");
  return guard_finite(torch::gelu(bn(conv(x))), "conv_block");
}

SEBlockImpl::SEBlockImpl(int64_t channels, int64_t reduction) {
  require(reduction >= 1 && channels % reduction == 0,
          "SEBlock: reduction " + std::to_string(reduction) + " does not divide " + std::to_string(channels));
  fc1 = register_module("fc1", torch::nn::Linear(channels, channels / reduction));
  fc2 = register_module("fc2", torch::nn::Linear(channels / reduction, channels));
}

torch::Tensor SEBlockImpl::gate(const torch::Tensor& x) {
  check_channels(x, fc1->options.in_features(), "se_block");
  auto pooled = x.mean({2, 3});
  return torch::sigmoid(fc2(torch::relu(fc1(pooled))));
}

torch::Tensor SEBlockImpl::forward(const torch::Tensor& x) {
  auto g = gate(x);
  return x * g.unsqueeze(-1).unsqueeze(-1);
}

QBlockImpl::QBlockImpl(const BlockConfig& c) : cfg(c) {
  cfg.validate();
  proj = register_module(
      "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.in_channels, cfg.out_channels, 1).bias(false)));
  proj_bn = register_module("proj_bn", torch::nn::BatchNorm2d(cfg.out_channels));
  se = register_module("se", SEBlock(cfg.out_channels, cfg.se_reduction));
  conv1 = register_module("conv1", ConvBlock(cfg.in_channels, cfg.out_channels));
  conv2 = register_module("conv2", ConvBlock(cfg.out_channels, cfg.out_channels));
}

torch::Tensor QBlockImpl::shortcut_route(const torch::Tensor& x) { return se(proj_bn(proj(x))); }

torch::Tensor QBlockImpl::conv_route(const torch::Tensor& x) { return conv2(conv1(x)); }

torch::Tensor QBlockImpl::forward(const torch::Tensor& x) {
  check_channels(x, cfg.in_channels, "q_block");
  auto r1 = shortcut_route(x);
  auto r2 = conv_route(x);
  TORCH_INTERNAL_ASSERT(r1.sizes() == r2.sizes(), "q_block routes disagree: ", r1.sizes(), " vs ", r2.sizes());
  return guard_finite(r1 + r2, "q_block");
}

AttentionFuseImpl::AttentionFuseImpl(int64_t aux_ch, int64_t out_ch, int64_t n_aux)
    : aux_channels(aux_ch), out_channels(out_ch), aux_inputs(n_aux) {
  require(n_aux >= 0 && n_aux <= 2, "AttentionFuse: aux_inputs must be 0, 1 or 2");
  if (aux_inputs > 0) {
    conv = register_module("conv",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(aux_inputs * aux_channels, out_channels, 1)));
  }
}

torch::Tensor AttentionFuseImpl::attention_map(const std::vector<torch::Tensor>& aux) {
  require(static_cast<int64_t>(aux.size()) == aux_inputs && aux_inputs > 0,
          "attention_fuse: expected " + std::to_string(aux_inputs) + " auxiliary maps");
  for (const auto& a : aux) {
    check_channels(a, aux_channels, "attention_fuse");
    if (a.sizes() != aux.front().sizes())
      throw ConfigError("attention_fuse: auxiliary maps disagree: " + shape_str(a.sizes()) + " vs " +
                        shape_str(aux.front().sizes()));
  }
  return torch::sigmoid(conv(torch::cat(aux, 1)));
}

torch::Tensor AttentionFuseImpl::forward(const std::vector<torch::Tensor>& aux, const torch::Tensor& f3) {
  check_channels(f3, out_channels, "attention_fuse");
  if (aux_inputs == 0) return f3;
  for (const auto& a : aux) {
    if (a.dim() != 4 || a.size(0) != f3.size(0) || a.size(2) != f3.size(2) || a.size(3) != f3.size(3))
      throw ConfigError("attention_fuse: spatial mismatch " + shape_str(a.sizes()) + " vs " + shape_str(f3.sizes()));
  }
  return guard_finite(attention_map(aux) * f3, "attention_fuse");
}

torch::Tensor AttentionFuseImpl::forward(const torch::Tensor& f1, const torch::Tensor& f2, const torch::Tensor& f3) {
  return forward(std::vector<torch::Tensor>{f1, f2}, f3);
}

int64_t PatchDiscriminatorImpl::output_extent(int64_t n, int64_t layers) {
  for (int64_t i = 0; i + 1 < layers; ++i) n = conv_out(n, 4, 2, 1);
  n = conv_out(n, 4, 1, 1);
  return conv_out(n, 4, 1, 1);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const BlockConfig& c) : cfg(c) {
  cfg.validate();
  body = torch::nn::Sequential();
  int64_t in = cfg.in_channels;
  int64_t width = cfg.base_width;
  for (int64_t i = 0; i < cfg.patch_layers; ++i) {
    const int64_t stride = (i + 1 < cfg.patch_layers) ? 2 : 1;
    body->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, width, 4).stride(stride).padding(1)));
    if (i > 0) body->push_back(torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(width)));
    body->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    in = width;
    width = std::min(width * 2, cfg.max_width);
  }
  body->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 1, 4).stride(1).padding(1)));
  register_module("body", body);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) {
  check_channels(x, cfg.in_channels, "patch_discriminator");
  const auto oh = output_extent(x.size(2), cfg.patch_layers);
  const auto ow = output_extent(x.size(3), cfg.patch_layers);
  if (oh < 2 || ow < 2)
    throw ConfigError("patch_discriminator: input " + shape_str(x.sizes()) + " too small for " +
                      std::to_string(cfg.patch_layers) + " layers");
  return guard_finite(body->forward(x), "patch_discriminator");
}

}  // namespace tpf
