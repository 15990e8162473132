#include "tpf/generator_part1.hpp"

#include "tpf/common.hpp"

namespace tpf {

namespace nnf = torch::nn::functional;

namespace {

torch::Tensor upsample2x(const torch::Tensor& x) {
  return nnf::interpolate(x, nnf::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

torch::Tensor resize_to(const torch::Tensor& x, int64_t h, int64_t w) {
  if (x.size(2) == h && x.size(3) == w) return x;
  return nnf::interpolate(x, nnf::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{h, w})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

bool branch_active(int index, const AblationFlags& f) {
  if (index == 0) return !f.no_highpass;
  if (index == 1) return !f.no_seg;
  return true;
}

}  // namespace

void DecoderConfig::validate() const {
  require(seed_channels >= 1, "DecoderConfig: seed_channels must be positive");
  for (auto w : widths) {
    require(w >= 1 && w % se_reduction == 0,
            "DecoderConfig: width " + std::to_string(w) + " not divisible by se_reduction " +
                std::to_string(se_reduction));
  }
  require(head_channels >= 1, "DecoderConfig: head_channels must be positive");
}

MModuleImpl::MModuleImpl(int64_t in, int64_t skip, int64_t out, int64_t se_reduction, const AblationFlags& f)
    : in_channels(in), skip_channels(skip), out_channels(out), flags(f) {
  BlockConfig qcfg;
  qcfg.in_channels = out;
  qcfg.out_channels = out;
  qcfg.se_reduction = se_reduction;
  int64_t aux = 0;
  for (int i = 0; i < 3; ++i) {
    if (!branch_active(i, flags)) continue;
    if (i < 2) ++aux;
    const auto tag = std::to_string(i + 1);
    fuse[i] = register_module("fuse" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(in + skip, out, 1)));
    qblocks[i] = register_module("q" + tag, QBlock(qcfg));
  }
  attention = register_module("attention", AttentionFuse(out, out, aux));
}

torch::Tensor MModuleImpl::branch(int index, const torch::Tensor& x, const torch::Tensor& skip) {
  auto up = upsample2x(x);
  return qblocks[index](fuse[index](torch::cat({up, skip}, 1)));
}

DecoderState MModuleImpl::forward(const DecoderState& state, const torch::Tensor& skip) {
  const auto& ref = state.b3;
  if (!ref.defined() || ref.dim() != 4 || ref.size(1) != in_channels)
    throw ConfigError("m_module: expected text-free branch with " + std::to_string(in_channels) + " channels");
  if (skip.dim() != 4 || skip.size(0) != ref.size(0) || skip.size(1) != skip_channels ||
      skip.size(2) != 2 * ref.size(2) || skip.size(3) != 2 * ref.size(3))
    throw ConfigError("m_module: skip " + shape_str(skip.sizes()) + " does not match target scale of state " +
                      shape_str(ref.sizes()));
  DecoderState next;
  std::vector<torch::Tensor> aux;
  if (branch_active(0, flags)) {
    next.b1 = branch(0, state.b1, skip);
    aux.push_back(next.b1);
  }
  if (branch_active(1, flags)) {
    next.b2 = branch(1, state.b2, skip);
    aux.push_back(next.b2);
  }
  next.b3 = attention->forward(aux, branch(2, state.b3, skip));
  return next;
}

HeadImpl::HeadImpl(int64_t in, int64_t mid, int64_t out_ch) {
  up = register_module("up",
                       torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, mid, 4).stride(2).padding(1)));
  out = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, out_ch, 1)));
}

torch::Tensor HeadImpl::forward(const torch::Tensor& x) { return torch::sigmoid(out(torch::gelu(up(x)))); }

Part1GeneratorImpl::Part1GeneratorImpl(const Part1Config& c) : cfg(c) {
  cfg.backbone.validate();
  cfg.decoder.validate();
  encoder = register_module("encoder", make_backbone(cfg.backbone));
  const auto ch = encoder->stage_channels();
  const auto& dec = cfg.decoder;
  const std::array<int64_t, 3> head_out{1, 1, 3};
  for (int i = 0; i < 3; ++i) {
    if (!branch_active(i, cfg.flags)) continue;
    const auto tag = std::to_string(i + 1);
    seed[i] = register_module("seed" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(ch[3], dec.seed_channels, 1)));
    heads[i] = register_module("head" + tag, Head(dec.widths[3], dec.head_channels, head_out[i]));
  }
  const std::array<int64_t, 4> skip_ch{ch[2], ch[1], ch[0], ch[0]};
  int64_t in = dec.seed_channels;
  for (size_t m = 0; m < 4; ++m) {
    modules[m] = register_module("m" + std::to_string(m + 1),
                                 MModule(in, skip_ch[m], dec.widths[m], dec.se_reduction, cfg.flags));
    in = dec.widths[m];
  }
}

Part1Output Part1GeneratorImpl::forward(const torch::Tensor& t256) {
  if (t256.dim() != 4 || t256.size(1) != 3 || t256.size(2) != 256 || t256.size(3) != 256)
    throw ConfigError("g1_forward: expected [B,3,256,256], got " + shape_str(t256.sizes()));
  const auto opts = t256.options();
  auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
  auto stdev = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
  auto pyramid = encoder->forward((t256 - mean) / stdev);

  DecoderState state;
  if (seed[0]) state.b1 = seed[0](pyramid[3]);
  if (seed[1]) state.b2 = seed[1](pyramid[3]);
  state.b3 = seed[2](pyramid[3]);

  const std::array<torch::Tensor, 3> skips{pyramid[2], pyramid[1], pyramid[0]};
  for (size_t m = 0; m < 3; ++m) state = modules[m]->forward(state, skips[m]);
  const auto& s1 = pyramid[0];
  state = modules[3]->forward(state, resize_to(s1, 2 * s1.size(2), 2 * s1.size(3)));

  Part1Output out;
  if (heads[0]) out.hp256 = guard_finite(heads[0](state.b1), "high-pass head");
  if (heads[1]) out.sp256 = guard_finite(heads[1](state.b2), "segmentation head");
  out.tfp256 = guard_finite(heads[2](state.b3), "text-free head");
  return out;
}

Part1DiscriminatorImpl::Part1DiscriminatorImpl(int64_t base_width, int64_t max_width, int64_t patch_layers) {
  BlockConfig c;
  c.in_channels = 4;
  c.out_channels = 1;
  c.se_reduction = 1;
  c.patch_layers = patch_layers;
  c.base_width = base_width;
  c.max_width = max_width;
  net = register_module("net", PatchDiscriminator(c));
}

torch::Tensor Part1DiscriminatorImpl::forward(const torch::Tensor& mask, const torch::Tensor& image) {
  if (mask.dim() != 4 || image.dim() != 4 || mask.size(1) != 1 || image.size(1) != 3 ||
      mask.size(0) != image.size(0) || mask.size(2) != image.size(2) || mask.size(3) != image.size(3))
    throw ConfigError("d1_forward: mask " + shape_str(mask.sizes()) + " and image " + shape_str(image.sizes()) +
                      " disagree");
  return net(torch::cat({mask, image}, 1));
}

}  // namespace tpf
