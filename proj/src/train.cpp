#include "tpf/train.hpp"

#include "tpf/common.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace tpf {

namespace fs = std::filesystem;

double cosine_lr(int64_t step, int64_t total_steps, double lr0, double lr_min) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::AdamW: return "adamw";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::RMSprop: return "rmsprop";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "rmsprop") return OptimizerKind::RMSprop;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw, adam or rmsprop)");
}

// ---------------------------------------------------------------------------
// TrainConfig

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TrainConfig TrainConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void TrainConfig::set(const std::string& key, const std::string& v) {
  if (model.set(key, v)) return;
  if (key == "lr0") lr0 = parse_real(key, v);
  else if (key == "lr_min") lr_min = parse_real(key, v);
  else if (key == "batch_size") batch_size = parse_int(key, v);
  else if (key == "total_steps") total_steps = parse_int(key, v);
  else if (key == "seed") {
    auto s = parse_int(key, v);
    if (s < 0) throw ConfigError("config key 'seed': must be non-negative");
    seed = static_cast<uint64_t>(s);
  } else if (key == "checkpoint_every") checkpoint_every = parse_int(key, v);
  else if (key == "eval_every") eval_every = parse_int(key, v);
  else if (key == "manifest") manifest = v;
  else if (key == "out_dir") out_dir = v;
  else if (key == "pretrained_backbone") pretrained_backbone = v;
  else if (key == "weights.h") weights.h = parse_real(key, v);
  else if (key == "weights.s") weights.s = parse_real(key, v);
  else if (key == "weights.tf") weights.tf = parse_real(key, v);
  else if (key == "weights.gan1") weights.gan1 = parse_real(key, v);
  else if (key == "weights.g2_adv") weights.g2_adv = parse_real(key, v);
  else if (key == "weights.g2_l1_pred") weights.g2_l1_pred = parse_real(key, v);
  else if (key == "weights.g2_l1_gtcond") weights.g2_l1_gtcond = parse_real(key, v);
  else if (key == "optim.generators") optim.generators = parse_optimizer_kind(v);
  else if (key == "optim.d1") optim.d1 = parse_optimizer_kind(v);
  else if (key == "optim.d2") optim.d2 = parse_optimizer_kind(v);
  else if (key == "optim.adamw_beta1") optim.adamw_beta1 = parse_real(key, v);
  else if (key == "optim.adamw_beta2") optim.adamw_beta2 = parse_real(key, v);
  else if (key == "optim.adamw_weight_decay") optim.adamw_weight_decay = parse_real(key, v);
  else if (key == "optim.rmsprop_alpha") optim.rmsprop_alpha = parse_real(key, v);
  else if (key == "optim.adam_beta1") optim.adam_beta1 = parse_real(key, v);
  else if (key == "optim.adam_beta2") optim.adam_beta2 = parse_real(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::set_override(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  auto kv = model.to_kv();
  kv["lr0"] = format_real(lr0);
  kv["lr_min"] = format_real(lr_min);
  kv["batch_size"] = std::to_string(batch_size);
  kv["total_steps"] = std::to_string(total_steps);
  kv["seed"] = std::to_string(seed);
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  kv["eval_every"] = std::to_string(eval_every);
  kv["manifest"] = manifest;
  kv["out_dir"] = out_dir;
  kv["pretrained_backbone"] = pretrained_backbone;
  kv["weights.h"] = format_real(weights.h);
  kv["weights.s"] = format_real(weights.s);
  kv["weights.tf"] = format_real(weights.tf);
  kv["weights.gan1"] = format_real(weights.gan1);
  kv["weights.g2_adv"] = format_real(weights.g2_adv);
  kv["weights.g2_l1_pred"] = format_real(weights.g2_l1_pred);
  kv["weights.g2_l1_gtcond"] = format_real(weights.g2_l1_gtcond);
  kv["optim.generators"] = to_string(optim.generators);
  kv["optim.d1"] = to_string(optim.d1);
  kv["optim.d2"] = to_string(optim.d2);
  kv["optim.adamw_beta1"] = format_real(optim.adamw_beta1);
  kv["optim.adamw_beta2"] = format_real(optim.adamw_beta2);
  kv["optim.adamw_weight_decay"] = format_real(optim.adamw_weight_decay);
  kv["optim.rmsprop_alpha"] = format_real(optim.rmsprop_alpha);
  kv["optim.adam_beta1"] = format_real(optim.adam_beta1);
  kv["optim.adam_beta2"] = format_real(optim.adam_beta2);
  return kv;
}

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  require(std::isfinite(lr0) && lr0 > 0, "lr0 must be positive");
  require(std::isfinite(lr_min) && lr_min >= 0 && lr_min <= lr0, "lr_min must lie in [0, lr0]");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(total_steps >= 1, "total_steps must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(eval_every >= 0, "eval_every must be >= 0");
  for (double b : {optim.adamw_beta1, optim.adamw_beta2, optim.adam_beta1, optim.adam_beta2, optim.rmsprop_alpha})
    require(b >= 0 && b < 1, "optimizer betas/alpha must lie in [0, 1)");
  require(optim.adamw_weight_decay >= 0, "optim.adamw_weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------
// Optimisers

namespace {

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::unique_ptr<torch::optim::Optimizer> make_optimizer(OptimizerKind kind, std::vector<torch::Tensor> params,
                                                        double lr, const OptimizerSettings& s) {
  switch (kind) {
    case OptimizerKind::AdamW:
      return std::make_unique<torch::optim::AdamW>(
          std::move(params), torch::optim::AdamWOptions(lr)
                                 .betas({s.adamw_beta1, s.adamw_beta2})
                                 .weight_decay(s.adamw_weight_decay));
    case OptimizerKind::Adam:
      return std::make_unique<torch::optim::Adam>(
          std::move(params), torch::optim::AdamOptions(lr).betas({s.adam_beta1, s.adam_beta2}));
    case OptimizerKind::RMSprop:
      return std::make_unique<torch::optim::RMSprop>(std::move(params),
                                                     torch::optim::RMSpropOptions(lr).alpha(s.rmsprop_alpha));
  }
  throw ConfigError("unknown optimizer kind");
}

std::vector<torch::Tensor> all_params(const torch::optim::Optimizer& opt) {
  std::vector<torch::Tensor> out;
  for (const auto& g : opt.param_groups())
    for (const auto& p : g.params()) out.push_back(p);
  return out;
}

void put_opt_tensor(Archive& a, const std::string& name, const torch::Tensor& t) {
  if (t.defined()) a.put(name, t);
}

torch::Tensor step_tensor(int64_t step) { return torch::tensor({step}, torch::kInt64); }

void export_optimizer(const torch::optim::Optimizer& opt, OptimizerKind kind, Archive& a, const std::string& prefix) {
  auto params = all_params(opt);
  const auto& state = opt.state();
  for (size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    std::string base = prefix + std::to_string(i) + ".";
    switch (kind) {
      case OptimizerKind::AdamW: {
        const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
        a.put(base + "step", step_tensor(s.step()));
        put_opt_tensor(a, base + "exp_avg", s.exp_avg());
        put_opt_tensor(a, base + "exp_avg_sq", s.exp_avg_sq());
        put_opt_tensor(a, base + "max_exp_avg_sq", s.max_exp_avg_sq());
        break;
      }
      case OptimizerKind::Adam: {
        const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
        a.put(base + "step", step_tensor(s.step()));
        put_opt_tensor(a, base + "exp_avg", s.exp_avg());
        put_opt_tensor(a, base + "exp_avg_sq", s.exp_avg_sq());
        put_opt_tensor(a, base + "max_exp_avg_sq", s.max_exp_avg_sq());
        break;
      }
      case OptimizerKind::RMSprop: {
        const auto& s = static_cast<const torch::optim::RMSpropParamState&>(*it->second);
        a.put(base + "step", step_tensor(s.step()));
        put_opt_tensor(a, base + "square_avg", s.square_avg());
        put_opt_tensor(a, base + "momentum_buffer", s.momentum_buffer());
        put_opt_tensor(a, base + "grad_avg", s.grad_avg());
        break;
      }
    }
  }
}

torch::Tensor opt_get(const Archive& a, const std::string& name, const torch::Tensor& param) {
  if (!a.contains(name)) return {};
  const auto& t = a.get(name);
  if (t.sizes() != param.sizes())
    throw IncompatibleError("optimizer state '" + name + "' has shape " + shape_str(t.sizes()) + ", expected " +
                            shape_str(param.sizes()));
  return t.to(param.dtype()).clone();
}

void import_optimizer(torch::optim::Optimizer& opt, OptimizerKind kind, const Archive& a, const std::string& prefix) {
  auto params = all_params(opt);
  auto& state = opt.state();
  state.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    std::string base = prefix + std::to_string(i) + ".";
    if (!a.contains(base + "step")) continue;
    int64_t step = a.get(base + "step").item<int64_t>();
    const auto& p = params[i];
    void* key = p.unsafeGetTensorImpl();
    switch (kind) {
      case OptimizerKind::AdamW: {
        auto s = std::make_unique<torch::optim::AdamWParamState>();
        s->step(step);
        s->exp_avg(opt_get(a, base + "exp_avg", p));
        s->exp_avg_sq(opt_get(a, base + "exp_avg_sq", p));
        s->max_exp_avg_sq(opt_get(a, base + "max_exp_avg_sq", p));
        state[key] = std::move(s);
        break;
      }
      case OptimizerKind::Adam: {
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(step);
        s->exp_avg(opt_get(a, base + "exp_avg", p));
        s->exp_avg_sq(opt_get(a, base + "exp_avg_sq", p));
        s->max_exp_avg_sq(opt_get(a, base + "max_exp_avg_sq", p));
        state[key] = std::move(s);
        break;
      }
      case OptimizerKind::RMSprop: {
        auto s = std::make_unique<torch::optim::RMSpropParamState>();
        s->step(step);
        s->square_avg(opt_get(a, base + "square_avg", p));
        s->momentum_buffer(opt_get(a, base + "momentum_buffer", p));
        s->grad_avg(opt_get(a, base + "grad_avg", p));
        state[key] = std::move(s);
        break;
      }
    }
  }
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

double scalar(const torch::Tensor& t, const char* name) {
  double v = t.item<double>();
  if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + name);
  return v;
}

TextEraser seeded_model(const TrainConfig& cfg) {
  cfg.validate();
  torch::manual_seed(cfg.seed);
  return TextEraser(cfg.model);
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& cfg)
    : model(seeded_model(cfg)),
      kind_g(cfg.optim.generators),
      kind_d1(cfg.optim.d1),
      kind_d2(cfg.optim.d2),
      cfg_(cfg) {
  const auto& mc = cfg_.model;
  d1 = Part1Discriminator(mc.disc_base_width, mc.disc_max_width, mc.disc_patch_layers);
  if (!mc.flags.no_part2) d2 = Part2Discriminator(mc.disc_base_width, mc.disc_max_width, mc.disc_patch_layers);
  if (!cfg_.pretrained_backbone.empty()) load_pretrained(*model.g1->encoder, cfg_.pretrained_backbone);

  double lr = cosine_lr(0, cfg_.total_steps, cfg_.lr0, cfg_.lr_min);
  opt_g = make_optimizer(kind_g, generator_parameters(), lr, cfg_.optim);
  opt_d1 = make_optimizer(kind_d1, d1->parameters(), lr, cfg_.optim);
  if (d2) opt_d2 = make_optimizer(kind_d2, d2->parameters(), lr, cfg_.optim);
}

std::vector<torch::Tensor> Trainer::generator_parameters() const {
  auto p = model.g1->parameters();
  if (model.g2) {
    auto q = model.g2->parameters();
    p.insert(p.end(), q.begin(), q.end());
  }
  return p;
}

double Trainer::current_lr() const {
  return cosine_lr(std::min(step_, cfg_.total_steps), cfg_.total_steps, cfg_.lr0, cfg_.lr_min);
}

void Trainer::set_lr(double lr) {
  for (auto* opt : {opt_g.get(), opt_d1.get(), opt_d2.get()}) {
    if (!opt) continue;
    for (auto& g : opt->param_groups()) g.options().set_lr(lr);
  }
}

LossReport Trainer::run_step(const Batch& batch, double lr) {
  set_lr(lr);
  model.train();
  d1->train();
  if (d2) d2->train();
  const auto& flags = cfg_.model.flags;
  const auto& w = cfg_.weights;
  LossReport r;

  auto p1 = model.g1(batch.t256);
  auto zero_mask = torch::zeros_like(batch.sg256);
  auto seg_real = flags.no_seg ? zero_mask : batch.sg256;
  auto seg_fake = flags.no_seg ? zero_mask : p1.sp256;

  torch::Tensor tfp512, tfp512_o;
  if (model.g2) {
    tfp512 = model.g2(seg_fake, p1.tfp256);
    tfp512_o = model.g2(seg_real, batch.tfg256);
  }

  // Discriminator updates on detached generator outputs.
  set_requires_grad(*d1, true);
  {
    auto real = d1(seg_real, batch.tfg256);
    auto fake = d1(seg_fake.detach(), p1.tfp256.detach());
    auto d_loss = logistic_terms(real, fake).d_term;
    r.gan_d1 = scalar(d_loss, "D1 loss");
    opt_d1->zero_grad();
    d_loss.backward();
    opt_d1->step();
  }
  if (d2) {
    set_requires_grad(*d2, true);
    auto ref = batch.tfg512;
    auto real = d2(ref, ref);
    auto fake_pred = d2(tfp512.detach(), ref);
    auto fake_gt = d2(tfp512_o.detach(), ref);
    auto d_loss = g2_discriminator_term(real, fake_pred, fake_gt);
    r.d2_loss = scalar(d_loss, "D2 loss");
    opt_d2->zero_grad();
    d_loss.backward();
    opt_d2->step();
  }

  // Generator update against the freshly updated, frozen discriminators.
  set_requires_grad(*d1, false);
  if (d2) set_requires_grad(*d2, false);
  G1Terms g1t;
  g1t.gan_g1 = torch::nn::functional::softplus(-d1(seg_fake, p1.tfp256)).mean();
  if (!flags.no_highpass) g1t.h = h_loss(batch.hg256, p1.hp256);
  if (!flags.no_seg) g1t.s = s_loss(batch.sg256, p1.sp256);
  g1t.tf = tf_loss(batch.tfg256, p1.tfp256);
  auto total = g1_total(g1t, w);
  r.gan_g1 = scalar(g1t.gan_g1, "G1 adversarial loss");
  if (g1t.h.defined()) r.h_loss = scalar(g1t.h, "high-pass loss");
  if (g1t.s.defined()) r.s_loss = scalar(g1t.s, "segmentation loss");
  r.tf_loss = scalar(g1t.tf, "text-free loss");
  r.g1_total = scalar(total, "G1 total");
  if (d2) {
    auto ref = batch.tfg512;
    auto g2t = g2_generator_terms(d2(tfp512, ref), d2(tfp512_o, ref), tfp512, tfp512_o, batch.tfg512, w);
    r.g2_adv = scalar(g2t.adv, "G2 adversarial loss");
    r.g2_l1_pred = scalar(g2t.l1_pred, "G2 L1 loss");
    r.g2_l1_gtcond = scalar(g2t.l1_gtcond, "G2 L1 loss (ground-truth conditioning)");
    r.g2_total = scalar(g2t.g_total, "G2 total");
    total = total + g2t.g_total;
  }
  opt_g->zero_grad();
  total.backward();
  opt_g->step();
  set_requires_grad(*d1, true);
  if (d2) set_requires_grad(*d2, true);
  return r;
}

std::optional<LossReport> Trainer::train_step(const Batch& batch) {
  if (batch.size() == 0) throw DataError("empty batch");
  const double lr = current_lr();
  Archive snapshot = to_archive();
  try {
    auto r = run_step(batch, lr);
    ++step_;
    consecutive_aborts_ = 0;
    return r;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "warning: step " << step_ << " aborted (" << e.what() << "); state rolled back\n";
  } catch (const TrainingError& e) {
    std::cerr << "warning: step " << step_ << " aborted (" << e.what() << "); state rolled back\n";
  }
  const int64_t failed = step_;
  set_requires_grad(*d1, true);
  if (d2) set_requires_grad(*d2, true);
  load_archive(snapshot);
  step_ = failed + 1;
  ++aborted_total_;
  if (++consecutive_aborts_ >= 3)
    throw TrainingError("three consecutive steps produced non-finite values (last at step " + std::to_string(failed) +
                        ")");
  return std::nullopt;
}

Archive Trainer::to_archive() const {
  Archive a;
  a.set_meta("format", "tpfnet-checkpoint");
  const auto mk = cfg_.model.to_kv();
  for (const auto& [k, v] : cfg_.to_kv()) {
    a.set_meta((mk.count(k) ? "model." : "train.") + k, v);
  }
  a.set_meta("step", std::to_string(step_));
  a.set_meta("aborted_steps", std::to_string(aborted_total_));
  a.set_meta("best_val_psnr", format_real(best_val_psnr));
  a.set_meta("optim.kind.g", to_string(kind_g));
  a.set_meta("optim.kind.d1", to_string(kind_d1));
  a.set_meta("optim.kind.d2", to_string(kind_d2));

  export_module(*model.g1, a, "g1.");
  if (model.g2) export_module(*model.g2, a, "g2.");
  export_module(*d1, a, "d1.");
  if (d2) export_module(*d2, a, "d2.");
  export_optimizer(*opt_g, kind_g, a, "opt.g.");
  export_optimizer(*opt_d1, kind_d1, a, "opt.d1.");
  if (opt_d2) export_optimizer(*opt_d2, kind_d2, a, "opt.d2.");

  auto gen = at::detail::getDefaultCPUGenerator();
  torch::Tensor rng;
  {
    std::lock_guard<std::mutex> lock(gen.mutex());
    rng = gen.get_state();
  }
  a.put("rng.cpu", rng);
  return a;
}

void Trainer::load_archive(const Archive& a) {
  if (!a.has_meta("format") || a.meta("format") != "tpfnet-checkpoint")
    throw IncompatibleError("archive is not a training checkpoint");
  for (const auto& [k, v] : cfg_.model.to_kv()) {
    std::string key = "model." + k;
    if (!a.has_meta(key)) throw IncompatibleError("checkpoint lacks model key '" + k + "'");
    if (a.meta(key) != v)
      throw IncompatibleError("checkpoint model key '" + k + "' is '" + a.meta(key) + "', configuration has '" + v +
                              "'");
  }
  for (const auto& [key, kind] : {std::pair{"optim.kind.g", kind_g}, {"optim.kind.d1", kind_d1},
                                  {"optim.kind.d2", kind_d2}}) {
    if (a.has_meta(key) && a.meta(key) != to_string(kind))
      throw IncompatibleError(std::string("checkpoint ") + key + " is '" + a.meta(key) + "', configuration has '" +
                              to_string(kind) + "'");
  }
  const Archive before = to_archive();
  auto restore = [&](const Archive& src) {
    import_module(*model.g1, src, "g1.");
    if (model.g2) import_module(*model.g2, src, "g2.");
    import_module(*d1, src, "d1.");
    if (d2) import_module(*d2, src, "d2.");
    import_optimizer(*opt_g, kind_g, src, "opt.g.");
    import_optimizer(*opt_d1, kind_d1, src, "opt.d1.");
    if (opt_d2) import_optimizer(*opt_d2, kind_d2, src, "opt.d2.");
  };
  try {
    restore(a);
  } catch (...) {
    restore(before);
    throw;
  }

  step_ = parse_int("step", a.meta("step"));
  aborted_total_ = a.has_meta("aborted_steps") ? parse_int("aborted_steps", a.meta("aborted_steps")) : 0;
  best_val_psnr = a.has_meta("best_val_psnr") ? parse_real("best_val_psnr", a.meta("best_val_psnr")) : -1.0;
  if (a.contains("rng.cpu")) {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    gen.set_state(a.get("rng.cpu"));
  }
}

void Trainer::save_checkpoint(const fs::path& path) const { to_archive().save(path); }

void Trainer::load_checkpoint(const fs::path& path) {
  consecutive_aborts_ = 0;
  load_archive(Archive::load(path));
}

// ---------------------------------------------------------------------------
// fit

namespace {

class JsonLog {
 public:
  explicit JsonLog(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open log " + path.string());
  }
  void write(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::string checkpoint_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "checkpoint_%08lld.tpf", static_cast<long long>(step));
  return buf;
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const fs::path& resume) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("no manifest configured (set 'manifest')");
  auto manifest = DatasetManifest::read(cfg.manifest);
  manifest.validate();
  DataLoader loader(manifest, Split::Train, cfg.batch_size, cfg.seed);
  if (loader.num_samples() == 0) throw DataError("manifest has no training records");
  const bool has_val = !manifest.split(Split::Val).empty();

  fs::path out(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());

  FitResult result;
  result.log = out / "train_log.jsonl";
  JsonLog log(result.log);

  Trainer trainer(cfg);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    log.write({{"type", "resume"}, {"checkpoint", resume.string()}, {"step", trainer.step()}});
  }
  if (cfg.model.flags.no_seg)
    log.write({{"type", "note"},
               {"message", "no_seg: segmentation branch removed; D1 and part 2 are conditioned on an all-zero mask"}});
  if (cfg.model.flags.no_highpass)
    log.write({{"type", "note"}, {"message", "no_highpass: high-pass branch and its loss removed"}});
  if (cfg.model.flags.no_part2)
    log.write({{"type", "note"}, {"message", "no_part2: output is the part-1 image upsampled bilinearly"}});

  fs::path last_good = resume;
  auto save = [&](const fs::path& path) {
    try {
      trainer.save_checkpoint(path);
    } catch (const IoError& e) {
      throw TrainingError(std::string("checkpoint write failed at step ") + std::to_string(trainer.step()) + ": " +
                          e.what() + " (last good checkpoint: " + (last_good.empty() ? "none" : last_good.string()) +
                          ")");
    }
    last_good = path;
    result.checkpoints.push_back(path);
  };

  while (trainer.step() < cfg.total_steps) {
    const int64_t s = trainer.step();
    const double lr = trainer.current_lr();
    auto batch = loader.batch_for_step(s);
    auto report = trainer.train_step(batch);
    ++result.steps_run;
    nlohmann::json rec{{"type", report ? "step" : "aborted"}, {"step", s}, {"lr", lr}};
    if (report) {
      rec.update(report->to_json());
      result.last = report;
    }
    log.write(rec);

    const int64_t done = trainer.step();
    if (cfg.eval_every > 0 && has_val && done % cfg.eval_every == 0) {
      EvalOptions eo;
      eo.split = Split::Val;
      auto m = evaluate(trainer.model, manifest, eo);
      nlohmann::json ev{{"type", "eval"}, {"step", done}};
      ev.update(m.to_json());
      log.write(ev);
      if (m.psnr > trainer.best_val_psnr) {
        trainer.best_val_psnr = m.psnr;
        save(out / "best.tpf");
      }
    }
    if ((cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.total_steps)
      save(out / checkpoint_name(done));
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

MetricsReport evaluate(TextEraser& model, const DatasetManifest& manifest, const EvalOptions& options) {
  DataLoader loader(manifest, options.split, 1, 0, false);
  if (loader.num_samples() == 0) throw DataError("split '" + to_string(options.split) + "' has no records");
  model.eval();
  torch::NoGradGuard ng;

  MetricsReport rep;
  std::vector<torch::Tensor> outputs;
  std::vector<std::vector<Box>> gt;
  double psnr_sum = 0, ssim_sum = 0, mse_sum = 0;
  for (int64_t i = 0; i < loader.num_samples(); ++i) {
    const auto& s = loader.sample(i);
    torch::Tensor out;
    if (options.identity) {
      out = s.tfg512;
    } else {
      out = quantize8(model.predict(s.t256.unsqueeze(0)).tfp512[0].clamp(0, 1));
    }
    double m = mse(out, s.tfg512);
    mse_sum += m;
    psnr_sum += psnr_from_mse(m);
    ssim_sum += ssim(out, s.tfg512);
    if (options.detector != DetectorChoice::None) {
      outputs.push_back(out);
      gt.push_back(s.boxes);
    }
  }
  const auto n = static_cast<double>(loader.num_samples());
  rep.images = loader.num_samples();
  rep.psnr = psnr_sum / n;
  rep.ssim = ssim_sum / n;
  rep.mse = mse_sum / n;

  if (options.detector != DetectorChoice::None) {
    Detector det;
    if (options.detector == DetectorChoice::Builtin) {
      det = builtin_detect;
    } else {
      std::vector<std::string> ids;
      for (int64_t i = 0; i < loader.num_samples(); ++i) ids.push_back(loader.sample(i).id);
      auto next = std::make_shared<size_t>(0);
      det = [ids, next, dir = options.box_dir](const torch::Tensor&) {
        auto stem = fs::path(ids.at((*next)++)).stem().string();
        return read_boxes(dir / (stem + ".txt"));
      };
    }
    auto scores = detector_eval(outputs, gt, det);
    rep.has_detection = true;
    rep.precision = scores.precision;
    rep.recall = scores.recall;
    rep.f1 = scores.f1;
    rep.detector_failures = scores.failures;
  }
  return rep;
}

MetricsReport evaluate(const fs::path& checkpoint, const DatasetManifest& manifest, const EvalOptions& options) {
  auto archive = Archive::load(checkpoint);
  if (options.expected_model) {
    for (const auto& [k, v] : options.expected_model->to_kv()) {
      std::string key = "model." + k;
      if (!archive.has_meta(key) || archive.meta(key) != v)
        throw IncompatibleError("checkpoint model key '" + k + "' is '" +
                                (archive.has_meta(key) ? archive.meta(key) : std::string("<missing>")) +
                                "', expected '" + v + "'");
    }
  }
  auto model = TextEraser::from_checkpoint(archive);
  return evaluate(model, manifest, options);
}

}  // namespace tpf
