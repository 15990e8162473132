#pragma once

#include "tpf/generator_part1.hpp"
#include "tpf/generator_part2.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <optional>

namespace tpf {

/// Multipliers for every loss term. The defaults sum terms unweighted.
struct LossWeights {
  double h = 1.0;
  double s = 1.0;
  double tf = 1.0;
  double gan1 = 1.0;
  double g2_adv = 1.0;
  double g2_l1_pred = 1.0;
  double g2_l1_gtcond = 1.0;

  void validate() const;
};

/// Scalar breakdown of one training step. Fields of removed branches stay empty.
struct LossReport {
  std::optional<double> h_loss, s_loss, tf_loss, gan_g1, gan_d1, g1_total;
  std::optional<double> g2_adv, g2_l1_pred, g2_l1_gtcond, g2_total, d2_loss;

  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
  bool all_finite() const;
};

/// Probability clamp used by the cross-entropy term.
inline constexpr double kProbEps = 1e-7;
/// Smoothing added to the Dice numerator and denominator.
inline constexpr double kDiceEps = 1e-7;

/// Mean absolute difference between high-pass target and prediction.
torch::Tensor h_loss(const torch::Tensor& hg, const torch::Tensor& hp);

struct SegLossTerms {
  torch::Tensor l1, bce, dice, total;
};
SegLossTerms s_loss_terms(const torch::Tensor& sg, const torch::Tensor& sp);
/// L1 + binary cross-entropy + (1 - Dice).
torch::Tensor s_loss(const torch::Tensor& sg, const torch::Tensor& sp);

/// L1 + (1 - SSIM).
torch::Tensor tf_loss(const torch::Tensor& tfg, const torch::Tensor& tfp);

struct AdversarialTerms {
  torch::Tensor g_term;  // generator, non-saturating
  torch::Tensor d_term;  // discriminator
};

/// Logistic GAN terms from raw logits:
/// d = mean softplus(-real) + mean softplus(fake), g = mean softplus(-fake).
AdversarialTerms logistic_terms(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// Mask-conditioned part-1 adversarial terms.
AdversarialTerms gan_loss_part1(Part1Discriminator& d1, const torch::Tensor& sg, const torch::Tensor& tfg,
                                const torch::Tensor& sp, const torch::Tensor& tfp);

struct G1Terms {
  torch::Tensor gan_g1, h, s, tf;  // undefined terms are skipped
};
/// Weighted sum of the part-1 generator terms that are defined.
torch::Tensor g1_total(const G1Terms& terms, const LossWeights& w);

struct G2Terms {
  torch::Tensor adv, l1_pred, l1_gtcond;
  torch::Tensor g_total;
  torch::Tensor d_term;
};
/// Part-2 terms. D2 sees (TFg512, TFg512) as real and (TFp512, TFg512),
/// (TFp512_o, TFg512) as fakes; the generator's adversarial term is the sum
/// of the non-saturating terms of both fakes, and the discriminator term
/// averages the two fake terms.
/// Generator side only: adv, l1_pred, l1_gtcond and g_total.
G2Terms g2_generator_terms(const torch::Tensor& fake_pred_logits, const torch::Tensor& fake_gt_logits,
                           const torch::Tensor& tfp512, const torch::Tensor& tfp512_o, const torch::Tensor& tfg512,
                           const LossWeights& w);
/// softplus(-real) + (softplus(fake_pred) + softplus(fake_gt)) / 2, all means.
torch::Tensor g2_discriminator_term(const torch::Tensor& real_logits, const torch::Tensor& fake_pred_logits,
                                    const torch::Tensor& fake_gt_logits);
G2Terms g2_terms_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_pred_logits,
                             const torch::Tensor& fake_gt_logits, const torch::Tensor& tfp512,
                             const torch::Tensor& tfp512_o, const torch::Tensor& tfg512, const LossWeights& w);
G2Terms g2_total(Part2Discriminator& d2, const torch::Tensor& tfp512, const torch::Tensor& tfp512_o,
                 const torch::Tensor& tfg512, const LossWeights& w);

}  // namespace tpf
