#include "test_util.hpp"

#include "tpf/cli.hpp"

namespace testutil {

tpf::DatasetManifest make_dataset(const std::filesystem::path& dir, int64_t count, uint64_t seed, int64_t val,
                                  int64_t test) {
  tpf::DatagenOptions o;
  o.procedural = 3;
  o.out = dir;
  o.count = count;
  o.seed = seed;
  o.val = val;
  o.test = test;
  o.overrides = {"max_strings=3", "min_size=20", "max_size=48"};
  o.force = true;
  tpf::cmd_datagen(o);
  return tpf::DatasetManifest::read(dir / "manifest.txt");
}

tpf::Batch random_batch(int64_t batch, uint64_t seed) {
  torch::manual_seed(seed);
  tpf::Batch b;
  b.tfg512 = torch::rand({batch, 3, 512, 512});
  auto mask512 = (torch::rand({batch, 1, 512, 512}) > 0.8).to(torch::kFloat32);
  b.t512 = b.tfg512 * (1 - mask512) + mask512 * torch::rand({batch, 3, 1, 1});
  b.t256 = tpf::resize_area(b.t512, 256, 256);
  b.tfg256 = tpf::resize_area(b.tfg512, 256, 256);
  b.sg256 = torch::max_pool2d(mask512, 2);
  b.hg256 = tpf::laplacian_highpass(b.tfg256);
  b.boxes.resize(static_cast<size_t>(batch));
  for (int64_t i = 0; i < batch; ++i) b.ids.push_back("r" + std::to_string(i));
  return b;
}

}  // namespace testutil
