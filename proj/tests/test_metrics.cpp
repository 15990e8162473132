#include "oracles.hpp"
#include "test_util.hpp"

#include "tpf/common.hpp"
#include "tpf/data.hpp"
#include "tpf/metrics.hpp"

#include "doctest_torch.hpp"

#include <stdexcept>

using namespace tpf;

TEST_SUITE("metrics") {
  TEST_CASE("identical images") {
    auto x = torch::rand({3, 32, 32});
    CHECK(mse(x, x) == 0.0);
    CHECK(psnr(x, x) == kPsnrCap);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("mse of 0.01 is 20 dB") {
    auto a = torch::full({3, 8, 8}, 0.5, torch::kFloat64);
    auto b = a + 0.1;
    CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-10));
  }

  TEST_CASE("checkerboard against its inverse is anticorrelated") {
    auto idx = torch::arange(16);
    auto board = ((idx.view({16, 1}) + idx.view({1, 16})) % 2).to(torch::kFloat64).unsqueeze(0);
    auto inv = 1.0 - board;
    const double s = ssim(board, inv);
    CHECK(s < 0.0);
    CHECK(s == doctest::Approx(oracle::ssim(board, inv)).epsilon(1e-9));
  }

  TEST_CASE("metrics match sliding-window and formula oracles on random images") {
    torch::manual_seed(14);
    for (int i = 0; i < 5; ++i) {
      auto a = torch::rand({3, 13, 17}, torch::kFloat64), b = torch::rand({3, 13, 17}, torch::kFloat64);
      CHECK(std::abs(ssim(a, b) - oracle::ssim(a, b)) <= 1e-6);
      const double m = oracle::mse(a, b);
      CHECK(std::abs(mse(a, b) - m) <= 1e-12);
      CHECK(std::abs(psnr(a, b) - 10 * std::log10(1 / m)) <= 1e-9);
    }
  }

  TEST_CASE("metrics reject extent mismatch") {
    CHECK_THROWS_AS(mse(torch::rand({3, 4, 4}), torch::rand({3, 4, 5})), ConfigError);
    CHECK_THROWS_AS(ssim(torch::rand({3, 4, 4}), torch::rand({1, 4, 4})), ConfigError);
  }

  TEST_CASE("box overlap") {
    Box a{0, 0, 10, 10}, b{5, 0, 15, 10};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, b) == doctest::Approx(50.0 / 150.0));
    CHECK(iou(a, Box{20, 20, 30, 30}) == 0.0);
  }

  TEST_CASE("detector scoring counts") {
    std::vector<std::vector<Box>> gt{{{0, 0, 10, 10}, {20, 20, 30, 30}}, {{0, 0, 10, 10}, {40, 40, 60, 50}}};
    auto none = match_detections({{}, {}}, gt);
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    auto all = match_detections(gt, gt);
    CHECK(all.precision == 100.0);
    CHECK(all.recall == 100.0);
    // 2 detections, one overlapping a ground-truth box, 4 ground-truth boxes
    auto some = match_detections({{{1, 0, 10, 10}}, {{100, 100, 120, 110}}}, gt);
    CHECK(some.true_positives == 1);
    CHECK(some.precision == doctest::Approx(50.0));
    CHECK(some.recall == doctest::Approx(25.0));
    CHECK(some.f1 == doctest::Approx(100.0 / 3.0).epsilon(1e-9));
  }

  TEST_CASE("one detection cannot match two ground-truth boxes") {
    std::vector<std::vector<Box>> gt{{{0, 0, 10, 10}, {0, 0, 10, 10}}};
    auto s = match_detections({{{0, 0, 10, 10}}}, gt);
    CHECK(s.true_positives == 1);
    CHECK(s.recall == doctest::Approx(50.0));
  }

  TEST_CASE("detector failures are skipped and counted") {
    std::vector<torch::Tensor> images{torch::zeros({3, 8, 8}), torch::ones({3, 8, 8})};
    std::vector<std::vector<Box>> gt{{{0, 0, 4, 4}}, {{0, 0, 4, 4}}};
    Detector flaky = [](const torch::Tensor& img) -> std::vector<Box> {
      if (img.max().item<double>() > 0.5) throw std::runtime_error("boom");
      return {{0, 0, 4, 4}};
    };
    auto s = detector_eval(images, gt, flaky);
    CHECK(s.failures == 1);
    CHECK(s.evaluated == 1);
    CHECK(s.precision == 100.0);
  }

  TEST_CASE("box files round trip") {
    auto dir = testutil::temp_dir("boxes");
    std::vector<Box> boxes{{1.5, 2, 30, 40, 0.9}, {0, 0, 512, 512, 1}};
    write_boxes(dir / "a.txt", boxes);
    CHECK((read_boxes(dir / "a.txt") == boxes));
    CHECK_THROWS(read_boxes(dir / "missing.txt"));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("built-in detector finds rendered text and ignores smooth backgrounds") {
    std::mt19937_64 rng(3);
    auto bg = procedural_background(512, rng);
    CHECK(builtin_detect(bg).empty());
    TextSpec spec;
    spec.min_strings = spec.max_strings = 3;
    spec.min_size = 32;
    spec.max_size = 48;
    spec.max_rotation_deg = 0;
    auto synth = synth_render(bg, spec, rng);
    auto found = builtin_detect(synth.input);
    CHECK_FALSE(found.empty());
    auto scores = match_detections({found}, {synth.boxes});
    CHECK(scores.true_positives >= 1);
  }

  TEST_CASE("metrics report renders both formats") {
    MetricsReport r;
    r.psnr = 30;
    r.ssim = 0.9;
    r.images = 2;
    CHECK(r.to_text().find("psnr") != std::string::npos);
    CHECK(r.to_json()["images"] == 2);
  }
}
