#include "oracles.hpp"

#include "tpf/common.hpp"
#include "tpf/losses.hpp"
#include "tpf/metrics.hpp"

#include "doctest_torch.hpp"

#include <cmath>

using namespace tpf;

namespace {

torch::Tensor d64(std::initializer_list<double> v, std::vector<int64_t> shape) {
  return torch::tensor(std::vector<double>(v), torch::kFloat64).view(shape);
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double mean_of(const torch::Tensor& t, double (*f)(double)) {
  auto v = oracle::f64(t).flatten();
  double s = 0;
  for (int64_t i = 0; i < v.numel(); ++i) s += f(v[i].item<double>());
  return s / static_cast<double>(v.numel());
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("high-pass loss identities") {
    auto x = torch::rand({2, 1, 8, 8});
    CHECK(h_loss(x, x).item<double>() == 0.0);
    CHECK(h_loss(torch::zeros({1, 1, 4, 4}), torch::ones({1, 1, 4, 4})).item<double>() == doctest::Approx(1.0));
  }

  TEST_CASE("high-pass loss equals hand-summed mean absolute difference") {
    auto hg = d64({0.1, 0.7, 0.3, 0.9}, {1, 1, 2, 2});
    auto hp = d64({0.4, 0.2, 0.3, 1.0}, {1, 1, 2, 2});
    CHECK(h_loss(hg, hp).item<double>() == doctest::Approx((0.3 + 0.5 + 0.0 + 0.1) / 4).epsilon(1e-12));
  }

  TEST_CASE("segmentation loss vanishes on equal binary masks") {
    auto m = (torch::rand({2, 1, 16, 16}) > 0.5).to(torch::kFloat64);
    auto t = s_loss_terms(m, m);
    CHECK(t.l1.item<double>() == 0.0);
    CHECK(t.dice.item<double>() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(t.total.item<double>() < 1e-5);
  }

  TEST_CASE("segmentation loss closed form on four pixels") {
    auto sg = torch::ones({1, 1, 2, 2}, torch::kFloat64);
    auto sp = torch::full({1, 1, 2, 2}, 0.5, torch::kFloat64);
    auto t = s_loss_terms(sg, sp);
    CHECK(t.l1.item<double>() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.bce.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // 1 - 2*2/(4+1), smoothing terms of order 1e-7
    CHECK(t.dice.item<double>() == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(t.total.item<double>() == doctest::Approx(0.5 + std::log(2.0) + 0.2).epsilon(1e-6));
  }

  TEST_CASE("segmentation loss on an empty mask tends to zero") {
    auto sg = torch::zeros({1, 1, 4, 4}, torch::kFloat64);
    auto sp = torch::zeros({1, 1, 4, 4}, torch::kFloat64);
    auto t = s_loss_terms(sg, sp);
    CHECK(std::isfinite(t.total.item<double>()));
    CHECK(t.dice.item<double>() == doctest::Approx(0.0));
    CHECK(t.total.item<double>() < 1e-5);
  }

  TEST_CASE("segmentation loss rejects probabilities outside [0,1] and extent mismatch") {
    auto sg = torch::zeros({1, 1, 4, 4});
    CHECK_THROWS_AS(s_loss(sg, torch::full({1, 1, 4, 4}, 1.5)), ConfigError);
    CHECK_THROWS_AS(s_loss(sg, torch::zeros({1, 1, 4, 5})), ConfigError);
  }

  TEST_CASE("text-free loss identities") {
    auto x = torch::rand({2, 3, 16, 16});
    CHECK(tf_loss(x, x).item<double>() <= 1e-6);
    auto zero = torch::zeros({1, 3, 8, 8}, torch::kFloat64), one = torch::ones({1, 3, 8, 8}, torch::kFloat64);
    // constant images: zero variance everywhere, SSIM = C1 / (1 + C1)
    const double ssim_const = kSsimC1 / (1.0 + kSsimC1);
    CHECK(ssim(one, zero) == doctest::Approx(ssim_const).epsilon(1e-9));
    CHECK(ssim(one, zero) == doctest::Approx(oracle::ssim(one[0], zero[0])).epsilon(1e-9));
    CHECK(tf_loss(zero, one).item<double>() == doctest::Approx(1.0 + 1.0 - ssim_const).epsilon(1e-9));
  }

  TEST_CASE("SSIM term is invariant to a joint circular shift away from borders") {
    torch::manual_seed(11);
    auto a = torch::zeros({1, 1, 40, 40}, torch::kFloat64), b = torch::zeros({1, 1, 40, 40}, torch::kFloat64);
    a.narrow(2, 14, 8).narrow(3, 14, 8).copy_(torch::rand({8, 8}, torch::kFloat64));
    b.narrow(2, 14, 8).narrow(3, 14, 8).copy_(torch::rand({8, 8}, torch::kFloat64));
    const double base = ssim(a, b);
    const double moved = ssim(a.roll({3, -2}, {2, 3}), b.roll({3, -2}, {2, 3}));
    CHECK(moved == doctest::Approx(base).epsilon(1e-12));
  }

  TEST_CASE("logistic terms with uninformative discriminator") {
    auto zeros = torch::zeros({1, 1, 30, 30});
    auto t = logistic_terms(zeros, zeros);
    CHECK(t.d_term.item<double>() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
    CHECK(t.g_term.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  TEST_CASE("logistic terms with a confident correct discriminator") {
    auto t = logistic_terms(torch::full({1, 1, 4, 4}, 60.0), torch::full({1, 1, 4, 4}, -60.0));
    CHECK(t.d_term.item<double>() < 1e-20);
  }

  TEST_CASE("logistic terms match scalar sigmoid/log recomputation") {
    torch::manual_seed(12);
    auto real = torch::randn({2, 1, 3, 3}, torch::kFloat64) * 3, fake = torch::randn({2, 1, 3, 3}, torch::kFloat64) * 3;
    auto t = logistic_terms(real, fake);
    auto neg_log_sig = [](double x) { return -std::log(oracle::sigmoid(x)); };
    auto neg_log_one_minus = [](double x) { return -std::log(1 - oracle::sigmoid(x)); };
    CHECK(t.d_term.item<double>() ==
          doctest::Approx(mean_of(real, neg_log_sig) + mean_of(fake, neg_log_one_minus)).epsilon(1e-10));
    CHECK(t.g_term.item<double>() == doctest::Approx(mean_of(fake, neg_log_sig)).epsilon(1e-10));
  }

  TEST_CASE("part-1 total weighting") {
    auto z = torch::zeros({});
    G1Terms terms{z, z, z, z};
    LossWeights w;
    CHECK(g1_total(terms, w).item<double>() == 0.0);
    G1Terms t2{torch::tensor(0.1), torch::tensor(0.2), torch::tensor(0.3), torch::tensor(0.4)};
    CHECK(g1_total(t2, w).item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    LossWeights only_tf;
    only_tf.gan1 = only_tf.h = only_tf.s = 0;
    CHECK(g1_total(t2, only_tf).item<double>() == doctest::Approx(0.4).epsilon(1e-6));
    G1Terms partial{torch::tensor(0.1), {}, {}, torch::tensor(0.4)};
    CHECK(g1_total(partial, w).item<double>() == doctest::Approx(0.5).epsilon(1e-6));
    CHECK_THROWS_AS(g1_total(G1Terms{}, w), ConfigError);
  }

  TEST_CASE("part-2 terms: identities and uninformative discriminator") {
    auto x = torch::rand({1, 3, 16, 16});
    auto zeros = torch::zeros({1, 1, 4, 4});
    auto t = g2_terms_from_logits(zeros, zeros, zeros, x, x, x, LossWeights{});
    CHECK(t.l1_pred.item<double>() == 0.0);
    CHECK(t.l1_gtcond.item<double>() == 0.0);
    CHECK(t.adv.item<double>() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
    CHECK(t.d_term.item<double>() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  }

  TEST_CASE("part-2 terms match scalar recomputation") {
    torch::manual_seed(13);
    auto real = torch::randn({1, 1, 3, 3}, torch::kFloat64), fp = torch::randn({1, 1, 3, 3}, torch::kFloat64);
    auto fo = torch::randn({1, 1, 3, 3}, torch::kFloat64);
    auto a = torch::rand({1, 3, 4, 4}, torch::kFloat64), b = torch::rand({1, 3, 4, 4}, torch::kFloat64);
    auto g = torch::rand({1, 3, 4, 4}, torch::kFloat64);
    LossWeights w;
    w.g2_adv = 0.5;
    w.g2_l1_pred = 2.0;
    w.g2_l1_gtcond = 3.0;
    auto t = g2_terms_from_logits(real, fp, fo, a, b, g, w);
    auto sp_neg = [](double x) { return softplus(-x); };
    auto sp_pos = [](double x) { return softplus(x); };
    const double adv = mean_of(fp, sp_neg) + mean_of(fo, sp_neg);
    const double l1p = oracle::f64(a - g).abs().mean().item<double>();
    const double l1o = oracle::f64(b - g).abs().mean().item<double>();
    CHECK(t.adv.item<double>() == doctest::Approx(adv).epsilon(1e-10));
    CHECK(t.g_total.item<double>() == doctest::Approx(0.5 * adv + 2 * l1p + 3 * l1o).epsilon(1e-10));
    CHECK(t.d_term.item<double>() ==
          doctest::Approx(mean_of(real, sp_neg) + 0.5 * (mean_of(fp, sp_pos) + mean_of(fo, sp_pos))).epsilon(1e-10));
  }

  TEST_CASE("loss report serialisation omits removed terms") {
    LossReport r;
    r.tf_loss = 0.25;
    r.gan_g1 = 1.5;
    auto j = r.to_json();
    CHECK(j.size() == 2);
    CHECK_FALSE(j.contains("s_loss"));
    auto back = LossReport::from_json(j);
    CHECK(*back.tf_loss == 0.25);
    CHECK_FALSE(back.h_loss.has_value());
    CHECK(r.all_finite());
    r.h_loss = std::nan("");
    CHECK_FALSE(r.all_finite());
  }

  TEST_CASE("negative weights are rejected") {
    LossWeights w;
    w.tf = -1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
  }
}
