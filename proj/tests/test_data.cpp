#include "oracles.hpp"
#include "test_util.hpp"

#include "tpf/common.hpp"
#include "tpf/data.hpp"

#include "doctest_torch.hpp"

#include <fstream>
#include <set>

using namespace tpf;

namespace {

torch::Tensor dilate3(const torch::Tensor& mask) {
  return torch::max_pool2d(mask.unsqueeze(0), 3, 1, 1).squeeze(0);
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("high-pass of a constant image is zero") {
    CHECK(laplacian_highpass(torch::full({3, 12, 9}, 0.4)).abs().max().item<double>() < 1e-6);
  }

  TEST_CASE("high-pass of a single bright pixel") {
    auto img = torch::zeros({3, 7, 7});
    img.select(1, 3).select(1, 3).fill_(1.0);
    auto h = laplacian_highpass(img)[0];
    // luma 1 at the centre: |-4| clips to 1, each 4-neighbour sees +1
    CHECK(h[3][3].item<double>() == doctest::Approx(1.0));
    for (auto [y, x] : {std::pair{2, 3}, {4, 3}, {3, 2}, {3, 4}}) CHECK(h[y][x].item<double>() == doctest::Approx(1.0));
    CHECK(h.sum().item<double>() == doctest::Approx(5.0));
  }

  TEST_CASE("high-pass matches the stencil oracle on random images") {
    torch::manual_seed(21);
    for (int i = 0; i < 20; ++i) {
      auto img = torch::rand({3, 16, 16});
      CHECK(oracle::max_abs_diff(laplacian_highpass(img), oracle::laplacian(img)) <= 1e-6);
    }
    auto batch = torch::rand({2, 3, 8, 8});
    CHECK(laplacian_highpass(batch).sizes() == torch::IntArrayRef({2, 1, 8, 8}));
  }

  TEST_CASE("area resize by two is the 2x2 block mean") {
    torch::manual_seed(22);
    auto img = torch::rand({3, 8, 6}, torch::kFloat64);
    auto small = oracle::f64(resize_area(img, 4, 3));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 3; ++x) {
          double s = 0;
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx) s += img[c][2 * y + dy][2 * x + dx].item<double>();
          CHECK(small[c][y][x].item<double>() == doctest::Approx(s / 4).epsilon(1e-6));
        }
  }

  TEST_CASE("mask downsampling is a 2x2 maximum") {
    torch::manual_seed(23);
    auto m = (torch::rand({1, 512, 512}) > 0.97).to(torch::kFloat32);
    auto d = downsample_mask(m);
    REQUIRE(d.sizes() == torch::IntArrayRef({1, 256, 256}));
    auto ma = m.accessor<float, 3>();
    auto da = d.accessor<float, 3>();
    int64_t mismatches = 0;
    for (int64_t y = 0; y < 256; ++y)
      for (int64_t x = 0; x < 256; ++x) {
        const float want = std::max({ma[0][2 * y][2 * x], ma[0][2 * y + 1][2 * x], ma[0][2 * y][2 * x + 1],
                                     ma[0][2 * y + 1][2 * x + 1]});
        mismatches += da[0][y][x] != want;
      }
    CHECK(mismatches == 0);
    CHECK(downsample_mask(torch::ones({1, 512, 512})).min().item<double>() == 1.0);
    CHECK(downsample_mask(torch::zeros({1, 512, 512})).max().item<double>() == 0.0);
  }

  TEST_CASE("box rasterisation uses pixel centres") {
    auto m = rasterize_boxes({{0, 0, 2, 3}}, 8, 8, 8);
    CHECK(m.sum().item<double>() == 6.0);
    CHECK(m[0][2][1].item<double>() == 1.0);
    CHECK(m[0][3][1].item<double>() == 0.0);
    // half-scale target: [0,4)x[0,4) in 8-space covers [0,2)x[0,2)
    CHECK(rasterize_boxes({{0, 0, 4, 4}}, 4, 4, 8).sum().item<double>() == 4.0);
  }

  TEST_CASE("quantisation is idempotent and survives a PNG round trip") {
    auto dir = testutil::temp_dir("img");
    auto img = quantize8(torch::rand({3, 20, 30}));
    CHECK(torch::equal(quantize8(img), img));
    write_image(dir / "a.png", img);
    auto back = read_image(dir / "a.png");
    CHECK(oracle::max_abs_diff(back, img) < 1e-6);
    CHECK_THROWS_AS(read_image(dir / "missing.png"), DataError);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("synthetic text changes pixels only near the mask") {
    TextSpec spec;
    spec.max_strings = 4;
    for (uint64_t seed : {1, 2, 3}) {
      std::mt19937_64 rng(seed);
      auto bg = procedural_background(600, rng);
      auto r = synth_render(bg, spec, rng);
      auto outside = dilate3(r.mask) == 0;
      auto diff = (r.input - r.textfree).abs().amax(0, true);
      CHECK(diff.masked_select(outside).max().item<double>() == 0.0);
      CHECK(torch::equal(r.mask, (r.alpha > 0.5).to(r.mask.dtype())));
      CHECK(r.mask.sum().item<double>() > 0);
      CHECK_FALSE(r.boxes.empty());
    }
  }

  TEST_CASE("zero strings give identical input and text-free images") {
    TextSpec spec;
    spec.min_strings = spec.max_strings = 0;
    std::mt19937_64 rng(4);
    auto r = synth_render(procedural_background(512, rng), spec, rng);
    CHECK(torch::equal(r.input, r.textfree));
    CHECK(r.mask.sum().item<double>() == 0.0);
    CHECK(r.boxes.empty());
  }

  TEST_CASE("rendering is deterministic in the generator state") {
    TextSpec spec;
    std::mt19937_64 a(5), b(5);
    auto bg = procedural_background(512, a);
    CHECK(torch::equal(bg, procedural_background(512, b)));
    auto ra = synth_render(bg, spec, a), rb = synth_render(bg, spec, b);
    CHECK(torch::equal(ra.input, rb.input));
    CHECK(torch::equal(ra.mask, rb.mask));
    CHECK((ra.boxes == rb.boxes));
  }

  TEST_CASE("text spec overrides") {
    TextSpec spec;
    spec.set("max_strings", "3");
    CHECK(spec.max_strings == 3);
    CHECK_THROWS_WITH_AS(spec.set("colour", "red"), doctest::Contains("colour"), ConfigError);
    CHECK_THROWS_AS(spec.set("min_size", "big"), ConfigError);
    spec.min_size = 80;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }

  TEST_CASE("manifest text round trip") {
    DatasetManifest m;
    m.seed = 99;
    m.records.push_back({Split::Train, "input/a.png", "textfree/a.png", "mask/a.png", {}});
    m.records.push_back({Split::Test, "input/b.png", "textfree/b.png", "", {{1, 2, 30, 40}, {5, 5, 6, 7}}});
    auto back = DatasetManifest::parse(m.to_text(), "/data");
    CHECK(back.seed == 99);
    REQUIRE(back.records.size() == 2);
    CHECK((back.records[1].boxes == m.records[1].boxes));
    CHECK(back.records[1].mask.empty());
    CHECK(back.records[0].split == Split::Train);
    CHECK(back.resolve("input/a.png") == std::filesystem::path("/data/input/a.png"));
    CHECK(back.split(Split::Test).size() == 1);
    CHECK_THROWS_AS(DatasetManifest::parse("train\tonly-two-fields\n", "/"), DataError);
  }

  TEST_CASE("published split lists reassign and drop records") {
    DatasetManifest m;
    for (int i = 0; i < 6; ++i)
      m.records.push_back({Split::Train, "input/" + std::to_string(i) + ".png", "tf/x.png", "", {}});
    auto out = apply_split_lists(m, {"0.png", "2.png", "3.png"}, {"5.png"});
    CHECK(out.split(Split::Train).size() == 3);
    CHECK(out.split(Split::Test).size() == 1);
    CHECK(out.records.size() == 4);
    CHECK_THROWS_AS(apply_split_lists(m, {"1.png"}, {"1.png"}), DataError);
  }

  TEST_CASE("validation names missing files and split leaks") {
    auto dir = testutil::temp_dir("val");
    auto m = testutil::make_dataset(dir, 2, 3);
    CHECK_NOTHROW(m.validate());
    auto leak = m;
    leak.records.push_back(m.records[0]);
    leak.records.back().split = Split::Test;
    CHECK_THROWS_AS(leak.validate(), DataError);
    auto missing = m;
    missing.records[0].textfree = "nope.png";
    CHECK_THROWS_WITH_AS(missing.validate(), doctest::Contains("nope.png"), DataError);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("derived sample fields") {
    auto dir = testutil::temp_dir("sample");
    auto m = testutil::make_dataset(dir, 2, 4);
    for (const auto& r : m.records) {
      auto s = make_sample(r, m);
      CHECK_NOTHROW(check_sample(s));
      CHECK(torch::equal(s.sg256, downsample_mask(read_mask(m.resolve(r.mask)))));
      CHECK(oracle::max_abs_diff(s.hg256, oracle::laplacian(s.tfg256)) <= 1e-6);
      CHECK(oracle::max_abs_diff(s.t256, resize_area(s.t512, 256, 256)) == 0.0);
      // dropping the mask file falls back to rasterised boxes, which contain the glyph mask
      auto by_box = r;
      by_box.mask.clear();
      auto sb = make_sample(by_box, m);
      CHECK((s.sg256 * (1 - sb.sg256)).sum().item<double>() == 0.0);
    }
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("non-512 images are resized") {
    auto dir = testutil::temp_dir("resize");
    write_image(dir / "in.png", torch::rand({3, 300, 400}));
    write_image(dir / "tf.png", torch::rand({3, 300, 400}));
    DatasetManifest m;
    m.base_dir = dir;
    m.records.push_back({Split::Train, "in.png", "tf.png", "", {}});
    auto s = make_sample(m.records[0], m);
    CHECK(s.t512.sizes() == torch::IntArrayRef({3, 512, 512}));
    CHECK(s.sg256.sum().item<double>() == 0.0);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("batching covers every sample once per epoch") {
    auto dir = testutil::temp_dir("loader");
    auto m = testutil::make_dataset(dir, 10, 5);
    DataLoader loader(m, Split::Train, 4, 17);
    REQUIRE(loader.num_samples() == 10);
    CHECK(loader.batches_per_epoch() == 3);
    std::vector<int64_t> sizes;
    std::multiset<std::string> seen;
    for (int64_t i = 0; i < 3; ++i) {
      auto b = loader.batch(0, i);
      sizes.push_back(b.size());
      seen.insert(b.ids.begin(), b.ids.end());
      CHECK(b.t256.sizes() == torch::IntArrayRef({b.size(), 3, 256, 256}));
    }
    CHECK(sizes == std::vector<int64_t>{4, 4, 2});
    CHECK(seen.size() == 10);
    CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == 10);

    DataLoader again(m, Split::Train, 4, 17);
    for (int64_t e = 0; e < 3; ++e) CHECK(again.epoch_order(e) == loader.epoch_order(e));
    CHECK(loader.epoch_order(0) != loader.epoch_order(1));
    CHECK(loader.batch_for_step(4).ids == loader.batch(1, 1).ids);
    DataLoader plain(m, Split::Train, 4, 17, false);
    CHECK(plain.epoch_order(3) == std::vector<int64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("loader skips unreadable records up to the limit") {
    auto dir = testutil::temp_dir("skip");
    auto m = testutil::make_dataset(dir, 3, 6);
    std::ofstream(dir / "corrupt.png") << "not an image";
    auto bad = m.records[0];
    bad.input = "corrupt.png";
    m.records.push_back(bad);
    CHECK_THROWS_AS(DataLoader(m, Split::Train, 2, 0), DataError);
    std::filesystem::remove_all(dir);
  }
}
