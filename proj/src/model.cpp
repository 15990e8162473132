#include "tpf/model.hpp"

#include "tpf/common.hpp"
#include "tpf/data.hpp"

#include <charconv>
#include <sstream>

namespace tpf {

std::string join_ints(const std::array<int64_t, 4>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

int64_t parse_int(const std::string& key, const std::string& value) {
  int64_t v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size() || value.empty())
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  double v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size() || value.empty())
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::array<int64_t, 4> parse_ints4(const std::string& key, const std::string& value) {
  std::array<int64_t, 4> out{};
  std::stringstream ss(value);
  std::string item;
  size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n >= 4) throw ConfigError("config key '" + key + "': expected 4 comma-separated integers");
    out[n++] = parse_int(key, item);
  }
  if (n != 4) throw ConfigError("config key '" + key + "': expected 4 comma-separated integers");
  return out;
}

void ModelConfig::validate() const {
  backbone.validate();
  decoder.validate();
  part2.validate();
  require(disc_base_width >= 1 && disc_max_width >= disc_base_width, "disc widths invalid");
  require(disc_patch_layers >= 1, "disc.patch_layers must be >= 1");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {
      {"backbone", to_string(backbone.variant)},
      {"embed_dims", join_ints(backbone.embed_dims)},
      {"depths", join_ints(backbone.depths)},
      {"heads", join_ints(backbone.heads)},
      {"sr_ratios", join_ints(backbone.sr_ratios)},
      {"mlp_ratio", std::to_string(backbone.mlp_ratio)},
      {"reference_size", std::to_string(backbone.reference_size)},
      {"decoder.seed_channels", std::to_string(decoder.seed_channels)},
      {"decoder.widths", join_ints(decoder.widths)},
      {"decoder.se_reduction", std::to_string(decoder.se_reduction)},
      {"decoder.head_channels", std::to_string(decoder.head_channels)},
      {"part2.width", std::to_string(part2.width)},
      {"part2.up_width", std::to_string(part2.up_width)},
      {"part2.post_blocks", std::to_string(part2.post_blocks)},
      {"part2.se_reduction", std::to_string(part2.se_reduction)},
      {"disc.base_width", std::to_string(disc_base_width)},
      {"disc.max_width", std::to_string(disc_max_width)},
      {"disc.patch_layers", std::to_string(disc_patch_layers)},
      {"no_highpass", flags.no_highpass ? "true" : "false"},
      {"no_seg", flags.no_seg ? "true" : "false"},
      {"no_part2", flags.no_part2 ? "true" : "false"},
  };
}

bool ModelConfig::set(const std::string& key, const std::string& v) {
  if (key == "backbone") backbone.variant = parse_backbone_variant(v);
  else if (key == "embed_dims") backbone.embed_dims = parse_ints4(key, v);
  else if (key == "depths") backbone.depths = parse_ints4(key, v);
  else if (key == "heads") backbone.heads = parse_ints4(key, v);
  else if (key == "sr_ratios") backbone.sr_ratios = parse_ints4(key, v);
  else if (key == "mlp_ratio") backbone.mlp_ratio = parse_int(key, v);
  else if (key == "reference_size") backbone.reference_size = parse_int(key, v);
  else if (key == "decoder.seed_channels") decoder.seed_channels = parse_int(key, v);
  else if (key == "decoder.widths") decoder.widths = parse_ints4(key, v);
  else if (key == "decoder.se_reduction") decoder.se_reduction = parse_int(key, v);
  else if (key == "decoder.head_channels") decoder.head_channels = parse_int(key, v);
  else if (key == "part2.width") part2.width = parse_int(key, v);
  else if (key == "part2.up_width") part2.up_width = parse_int(key, v);
  else if (key == "part2.post_blocks") part2.post_blocks = parse_int(key, v);
  else if (key == "part2.se_reduction") part2.se_reduction = parse_int(key, v);
  else if (key == "disc.base_width") disc_base_width = parse_int(key, v);
  else if (key == "disc.max_width") disc_max_width = parse_int(key, v);
  else if (key == "disc.patch_layers") disc_patch_layers = parse_int(key, v);
  else if (key == "no_highpass") flags.no_highpass = parse_bool(key, v);
  else if (key == "no_seg") flags.no_seg = parse_bool(key, v);
  else if (key == "no_part2") flags.no_part2 = parse_bool(key, v);
  else return false;
  return true;
}

TextEraser::TextEraser(const ModelConfig& c) : cfg(c) {
  cfg.validate();
  g1 = Part1Generator(cfg.part1());
  if (!cfg.flags.no_part2) g2 = Part2Generator(cfg.part2);
}

Prediction TextEraser::predict(const torch::Tensor& t256) {
  Prediction p;
  p.part1 = g1(t256);
  if (g2) {
    auto seg = p.part1.sp256.defined() ? p.part1.sp256 : torch::zeros_like(p.part1.tfp256.narrow(1, 0, 1));
    p.tfp512 = g2(seg, p.part1.tfp256);
  } else {
    p.tfp512 = resize_bilinear(p.part1.tfp256, 2 * t256.size(2), 2 * t256.size(3)).clamp(0, 1);
  }
  return p;
}

void TextEraser::eval() {
  g1->eval();
  if (g2) g2->eval();
}

void TextEraser::train() {
  g1->train();
  if (g2) g2->train();
}

TextEraser TextEraser::from_checkpoint(const Archive& archive) {
  ModelConfig cfg;
  for (const auto& [key, value] : archive.metadata()) {
    if (key.rfind("model.", 0) == 0) {
      if (!cfg.set(key.substr(6), value)) throw IncompatibleError("checkpoint has unknown model key '" + key + "'");
    }
  }
  TextEraser m(cfg);
  import_module(*m.g1, archive, "g1.");
  if (m.g2) import_module(*m.g2, archive, "g2.");
  return m;
}

}  // namespace tpf
