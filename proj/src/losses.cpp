#include "tpf/losses.hpp"

#include "tpf/common.hpp"
#include "tpf/metrics.hpp"

#include <cmath>

namespace tpf {

namespace nnf = torch::nn::functional;

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.sizes() != b.sizes())
    throw ConfigError(std::string(op) + ": extent mismatch " + (a.defined() ? shape_str(a.sizes()) : "[]") + " vs " +
                      (b.defined() ? shape_str(b.sizes()) : "[]"));
}

void put(nlohmann::json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

void get(const nlohmann::json& j, const char* key, std::optional<double>& v) {
  if (j.contains(key)) v = j.at(key).get<double>();
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {h, s, tf, gan1, g2_adv, g2_l1_pred, g2_l1_gtcond})
    require(w >= 0.0 && std::isfinite(w), "LossWeights: weights must be finite and non-negative");
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  put(j, "h_loss", h_loss);
  put(j, "s_loss", s_loss);
  put(j, "tf_loss", tf_loss);
  put(j, "gan_g1", gan_g1);
  put(j, "gan_d1", gan_d1);
  put(j, "g1_total", g1_total);
  put(j, "g2_adv", g2_adv);
  put(j, "g2_l1_pred", g2_l1_pred);
  put(j, "g2_l1_gtcond", g2_l1_gtcond);
  put(j, "g2_total", g2_total);
  put(j, "d2_loss", d2_loss);
  return j;
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  get(j, "h_loss", r.h_loss);
  get(j, "s_loss", r.s_loss);
  get(j, "tf_loss", r.tf_loss);
  get(j, "gan_g1", r.gan_g1);
  get(j, "gan_d1", r.gan_d1);
  get(j, "g1_total", r.g1_total);
  get(j, "g2_adv", r.g2_adv);
  get(j, "g2_l1_pred", r.g2_l1_pred);
  get(j, "g2_l1_gtcond", r.g2_l1_gtcond);
  get(j, "g2_total", r.g2_total);
  get(j, "d2_loss", r.d2_loss);
  return r;
}

bool LossReport::all_finite() const {
  for (const auto* v : {&h_loss, &s_loss, &tf_loss, &gan_g1, &gan_d1, &g1_total, &g2_adv, &g2_l1_pred, &g2_l1_gtcond,
                        &g2_total, &d2_loss})
    if (*v && !std::isfinite(**v)) return false;
  return true;
}

torch::Tensor h_loss(const torch::Tensor& hg, const torch::Tensor& hp) {
  check_pair(hg, hp, "h_loss");
  return (hg - hp).abs().mean();
}

SegLossTerms s_loss_terms(const torch::Tensor& sg, const torch::Tensor& sp) {
  check_pair(sg, sp, "s_loss");
  {
    torch::NoGradGuard ng;
    if ((sp < 0).any().item<bool>() || (sp > 1).any().item<bool>())
      throw ConfigError("s_loss: predicted mask has values outside [0,1]");
  }
  SegLossTerms t;
  t.l1 = (sg - sp).abs().mean();
  auto p = sp.clamp(kProbEps, 1.0 - kProbEps);
  t.bce = -(sg * torch::log(p) + (1.0 - sg) * torch::log(1.0 - p)).mean();
  auto inter = (sg * sp).sum();
  auto denom = (sg * sg).sum() + (sp * sp).sum();
  t.dice = 1.0 - (2.0 * inter + kDiceEps) / (denom + kDiceEps);
  t.total = t.l1 + t.bce + t.dice;
  return t;
}

torch::Tensor s_loss(const torch::Tensor& sg, const torch::Tensor& sp) { return s_loss_terms(sg, sp).total; }

torch::Tensor tf_loss(const torch::Tensor& tfg, const torch::Tensor& tfp) {
  check_pair(tfg, tfp, "tf_loss");
  return (tfg - tfp).abs().mean() + (1.0 - ssim_tensor(tfp, tfg));
}

AdversarialTerms logistic_terms(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  AdversarialTerms t;
  t.d_term = nnf::softplus(-real_logits).mean() + nnf::softplus(fake_logits).mean();
  t.g_term = nnf::softplus(-fake_logits).mean();
  return t;
}

AdversarialTerms gan_loss_part1(Part1Discriminator& d1, const torch::Tensor& sg, const torch::Tensor& tfg,
                                const torch::Tensor& sp, const torch::Tensor& tfp) {
  auto real = d1(sg.detach(), tfg.detach());
  auto fake = d1(sp, tfp);
  return logistic_terms(real, fake);
}

torch::Tensor g1_total(const G1Terms& terms, const LossWeights& w) {
  torch::Tensor total;
  auto add = [&](const torch::Tensor& t, double weight) {
    if (!t.defined()) return;
    auto v = t * weight;
    total = total.defined() ? total + v : v;
  };
  add(terms.gan_g1, w.gan1);
  add(terms.h, w.h);
  add(terms.s, w.s);
  add(terms.tf, w.tf);
  if (!total.defined()) throw ConfigError("g1_total: no loss terms");
  return total;
}

G2Terms g2_generator_terms(const torch::Tensor& fake_pred_logits, const torch::Tensor& fake_gt_logits,
                           const torch::Tensor& tfp512, const torch::Tensor& tfp512_o, const torch::Tensor& tfg512,
                           const LossWeights& w) {
  check_pair(tfg512, tfp512, "g2_total");
  check_pair(tfg512, tfp512_o, "g2_total");
  G2Terms t;
  t.adv = nnf::softplus(-fake_pred_logits).mean() + nnf::softplus(-fake_gt_logits).mean();
  t.l1_pred = (tfg512 - tfp512).abs().mean();
  t.l1_gtcond = (tfg512 - tfp512_o).abs().mean();
  t.g_total = w.g2_adv * t.adv + w.g2_l1_pred * t.l1_pred + w.g2_l1_gtcond * t.l1_gtcond;
  return t;
}

torch::Tensor g2_discriminator_term(const torch::Tensor& real_logits, const torch::Tensor& fake_pred_logits,
                                    const torch::Tensor& fake_gt_logits) {
  return nnf::softplus(-real_logits).mean() +
         0.5 * (nnf::softplus(fake_pred_logits).mean() + nnf::softplus(fake_gt_logits).mean());
}

G2Terms g2_terms_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_pred_logits,
                             const torch::Tensor& fake_gt_logits, const torch::Tensor& tfp512,
                             const torch::Tensor& tfp512_o, const torch::Tensor& tfg512, const LossWeights& w) {
  auto t = g2_generator_terms(fake_pred_logits, fake_gt_logits, tfp512, tfp512_o, tfg512, w);
  t.d_term = g2_discriminator_term(real_logits, fake_pred_logits, fake_gt_logits);
  return t;
}

G2Terms g2_total(Part2Discriminator& d2, const torch::Tensor& tfp512, const torch::Tensor& tfp512_o,
                 const torch::Tensor& tfg512, const LossWeights& w) {
  auto ref = tfg512.detach();
  auto real = d2(ref, ref);
  auto fake_pred = d2(tfp512, ref);
  auto fake_gt = d2(tfp512_o, ref);
  return g2_terms_from_logits(real, fake_pred, fake_gt, tfp512, tfp512_o, tfg512, w);
}

}  // namespace tpf
