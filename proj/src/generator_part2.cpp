#include "tpf/generator_part2.hpp"

#include "tpf/common.hpp"

namespace tpf {

namespace nnf = torch::nn::functional;

namespace {
constexpr double kSkipEps = 1e-3;
}

void Part2Config::validate() const {
  require(width >= 1 && up_width >= 1, "Part2Config: widths must be positive");
  require(post_blocks >= 1, "Part2Config: post_blocks must be >= 1");
  require(se_reduction >= 1 && width % se_reduction == 0,
          "Part2Config: se_reduction " + std::to_string(se_reduction) + " does not divide width " +
              std::to_string(width));
}

Part2GeneratorImpl::Part2GeneratorImpl(const Part2Config& c) : cfg(c) {
  cfg.validate();
  block1 = register_module("block1", ConvBlock(4, cfg.width));
  block2 = register_module("block2", ConvBlock(cfg.width, cfg.width));
  block3 = register_module("block3", ConvBlock(cfg.width, cfg.width));
  se = register_module("se", SEBlock(cfg.width, cfg.se_reduction));
  up = register_module("up", torch::nn::ConvTranspose2d(
                                 torch::nn::ConvTranspose2dOptions(cfg.width, cfg.up_width, 4).stride(2).padding(1)));
  post = torch::nn::Sequential();
  for (int64_t i = 0; i < cfg.post_blocks; ++i) post->push_back(ConvBlock(i == 0 ? cfg.up_width + 4 : cfg.up_width, cfg.up_width));
  register_module("post", post);
  out = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.up_width, 3, 1)));
  // starts close to bilinear upsampling of the conditioning image
  torch::NoGradGuard ng;
  out->weight.mul_(0.1);
  out->bias.zero_();
}

torch::Tensor Part2GeneratorImpl::forward(const torch::Tensor& seg, const torch::Tensor& tf) {
  if (seg.dim() != 4 || tf.dim() != 4 || seg.size(1) != 1 || tf.size(1) != 3 || seg.size(0) != tf.size(0) ||
      seg.size(2) != tf.size(2) || seg.size(3) != tf.size(3))
    throw ConfigError("g2_forward: segmentation " + shape_str(seg.sizes()) + " and image " + shape_str(tf.sizes()) +
                      " disagree");
  auto x = torch::cat({seg, tf}, 1);
  auto h1 = block1(x);
  auto h3 = block3(block2(h1));
  auto h = h3 * se->gate(h1).unsqueeze(-1).unsqueeze(-1) + h1;
  auto u = up(h);
  auto skip = nnf::interpolate(x, nnf::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{u.size(2), u.size(3)})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
  auto y = post->forward(torch::cat({u, skip}, 1));
  auto base = torch::logit(skip.narrow(1, 1, 3), kSkipEps);
  return guard_finite(torch::sigmoid(out(y) + base), "g2_forward");
}

Part2DiscriminatorImpl::Part2DiscriminatorImpl(int64_t base_width, int64_t max_width, int64_t patch_layers) {
  BlockConfig c;
  c.in_channels = 6;
  c.out_channels = 1;
  c.se_reduction = 1;
  c.patch_layers = patch_layers;
  c.base_width = base_width;
  c.max_width = max_width;
  net = register_module("net", PatchDiscriminator(c));
}

torch::Tensor Part2DiscriminatorImpl::forward(const torch::Tensor& candidate, const torch::Tensor& reference) {
  if (candidate.dim() != 4 || candidate.sizes() != reference.sizes() || candidate.size(1) != 3)
    throw ConfigError("d2_forward: candidate " + shape_str(candidate.sizes()) + " and reference " +
                      shape_str(reference.sizes()) + " disagree");
  return net(torch::cat({candidate, reference}, 1));
}

}  // namespace tpf
