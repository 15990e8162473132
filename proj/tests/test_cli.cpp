#include "test_util.hpp"

#include "tpf/cli.hpp"
#include "tpf/common.hpp"
#include "tpf/data.hpp"

#include "doctest_torch.hpp"
#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

using namespace tpf;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

/// Config file for the tiny test model.
fs::path write_tiny_config(const fs::path& dir, int64_t steps) {
  auto path = dir / "tiny.cfg";
  std::ofstream f(path);
  for (const auto& [k, v] : testutil::tiny_model().to_kv()) f << k << " = " << v << "\n";
  f << "batch_size = 1\ntotal_steps = " << steps << "\ncheckpoint_every = 0\nlr0 = 0.001\n";
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("datagen is byte-identical for identical options") {
    auto a = testutil::temp_dir("dg"), b = testutil::temp_dir("dg");
    for (const auto& d : {a, b}) {
      auto r = cli({"datagen", "--procedural", "3", "--out", d.string(), "--count", "8", "--seed", "7",
                    "--force", "--set", "max_strings=3"});
      REQUIRE(r.code == kExitOk);
    }
    CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
    auto m = DatasetManifest::read(a / "manifest.txt");
    REQUIRE(m.records.size() == 8);
    for (const auto& r : m.records) {
      CHECK(slurp(a / r.input) == slurp(b / r.input));
      CHECK(slurp(a / r.textfree) == slurp(b / r.textfree));
      CHECK(slurp(a / r.mask) == slurp(b / r.mask));
    }
    auto audit = cli({"audit", "--manifest", (a / "manifest.txt").string(), "--synthetic"});
    CHECK(audit.code == kExitOk);
    CHECK(audit.out.find("0 problems") != std::string::npos);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("datagen with count 0 writes an empty manifest") {
    auto d = testutil::temp_dir("dg0");
    auto r = cli({"datagen", "--procedural", "1", "--out", d.string(), "--count", "0", "--force"});
    CHECK(r.code == kExitOk);
    CHECK(DatasetManifest::read(d / "manifest.txt").records.empty());
    fs::remove_all(d);
  }

  TEST_CASE("datagen refuses a non-empty directory without --force") {
    auto d = testutil::temp_dir("dgf");
    std::ofstream(d / "keep.txt") << "x";
    auto r = cli({"datagen", "--procedural", "1", "--out", d.string(), "--count", "1"});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("--force") != std::string::npos);
    CHECK(fs::exists(d / "keep.txt"));
    fs::remove_all(d);
  }

  TEST_CASE("audit reports tampered synthetic data") {
    auto d = testutil::temp_dir("audit");
    auto m = testutil::make_dataset(d, 1, 9);
    auto tf = read_image(d / m.records[0].textfree);
    tf.select(1, 0).select(1, 0).fill_(tf[0][0][0].item<double>() > 0.5 ? 0.0 : 1.0);
    write_image(d / m.records[0].textfree, tf);
    CHECK_FALSE(audit_manifest(m, true).empty());
    CHECK(audit_manifest(m, false).empty());
    auto r = cli({"audit", "--manifest", (d / "manifest.txt").string(), "--synthetic"});
    CHECK(r.code == kExitData);
    fs::remove_all(d);
  }

  TEST_CASE("usage errors") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"train", "--set", "bogus=1"}).code == kExitUsage);
    auto r = cli({"train", "--set", "bogus=1"});
    CHECK(r.err.find("bogus") != std::string::npos);
    CHECK(cli({"eval", "--manifest", "/nonexistent/manifest.txt", "--identity"}).code == kExitData);
    CHECK(cli({"--help"}).code == kExitOk);
  }

  TEST_CASE("train, eval and infer end to end") {
    auto d = testutil::temp_dir("e2e");
    testutil::make_dataset(d / "data", 3, 10, 0, 1);
    auto cfg = write_tiny_config(d, 2);
    const auto manifest = (d / "data" / "manifest.txt").string();
    auto t = cli({"train", "--config", cfg.string(), "--manifest", manifest, "--out", (d / "run").string()});
    REQUIRE(t.code == kExitOk);
    const auto ckpt = d / "run" / "checkpoint_00000002.tpf";
    REQUIRE(fs::exists(ckpt));

    // a second run into the same directory needs --force
    auto again = cli({"train", "--config", cfg.string(), "--manifest", manifest, "--out", (d / "run").string()});
    CHECK(again.code == kExitUsage);

    auto e = cli({"eval", "--checkpoint", ckpt.string(), "--manifest", manifest, "--out", (d / "eval").string(),
                  "--detector", "builtin"});
    REQUIRE(e.code == kExitOk);
    auto j = nlohmann::json::parse(slurp(d / "eval" / "metrics.json"));
    CHECK(j["images"] == 1);
    CHECK(j.contains("psnr_db"));
    CHECK(j.contains("detector_f1_pct"));

    auto mismatch = cli({"eval", "--checkpoint", ckpt.string(), "--manifest", manifest, "--config", cfg.string(),
                         "--set", "no_part2=true"});
    CHECK(mismatch.code == kExitData);
    CHECK(mismatch.err.find("no_part2") != std::string::npos);

    auto ident = cli({"eval", "--identity", "--manifest", manifest});
    CHECK(ident.code == kExitOk);

    fs::create_directories(d / "in");
    write_image(d / "in" / "a.png", torch::rand({3, 512, 512}));
    write_image(d / "in" / "b.png", torch::rand({3, 300, 200}));
    auto inf = cli({"infer", "--checkpoint", ckpt.string(), "--input", (d / "in").string(), "--out",
                    (d / "out").string(), "--dump-intermediates"});
    REQUIRE(inf.code == kExitOk);
    CHECK(read_image(d / "out" / "a.png").sizes() == torch::IntArrayRef({3, 512, 512}));
    CHECK(read_image(d / "out" / "b.png").sizes() == torch::IntArrayRef({3, 300, 200}));
    CHECK(inf.out.find("resized") != std::string::npos);
    for (const char* s : {"a_sp256.png", "a_sp256_soft.png", "a_hp256.png", "a_tfp256.png"})
      CHECK(fs::exists(d / "out" / s));
    auto mask = read_mask(d / "out" / "a_sp256.png");
    CHECK(mask.sizes() == torch::IntArrayRef({1, 256, 256}));

    auto refuse = cli({"infer", "--checkpoint", ckpt.string(), "--input", (d / "in").string(), "--out",
                       (d / "out").string()});
    CHECK(refuse.code == kExitUsage);

    std::ofstream(d / "in" / "broken.png") << "garbage";
    auto partial = cli({"infer", "--checkpoint", ckpt.string(), "--input", (d / "in").string(), "--out",
                        (d / "out2").string()});
    CHECK(partial.code == kExitData);
    CHECK(fs::exists(d / "out2" / "a.png"));
    fs::remove_all(d);
  }
}
