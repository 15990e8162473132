#include "tpf/cli.hpp"

#include "tpf/common.hpp"
#include "tpf/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>

namespace tpf {

namespace fs = std::filesystem;

namespace {

constexpr int64_t kProceduralSize = 640;

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

bool dir_has_entries(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

std::string record_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld.png", static_cast<long long>(i));
  return buf;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

DatasetManifest cmd_datagen(const DatagenOptions& o) {
  if (o.count < 0) throw ConfigError("count must be non-negative");
  if (o.val < 0 || o.test < 0 || o.val + o.test > o.count)
    throw ConfigError("val + test must lie in [0, count]");
  if (o.out.empty()) throw ConfigError("no output directory given");
  if (dir_has_entries(o.out) && !o.force)
    throw ConfigError("output directory " + o.out.string() + " is not empty (use --force to overwrite)");

  TextSpec spec;
  for (const auto& kv : o.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
    spec.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  spec.validate();

  std::vector<fs::path> files;
  std::vector<torch::Tensor> generated;
  std::mt19937_64 rng(o.seed);
  if (!o.backgrounds.empty()) {
    if (!fs::is_directory(o.backgrounds)) throw DataError("backgrounds directory " + o.backgrounds.string() + " not found");
    files = list_images(o.backgrounds);
    if (files.empty()) throw DataError("backgrounds directory " + o.backgrounds.string() + " has no images");
  } else if (o.procedural > 0) {
    for (int64_t i = 0; i < o.procedural; ++i) generated.push_back(procedural_background(kProceduralSize, rng));
  } else {
    throw DataError("no backgrounds: give a backgrounds directory or a procedural count");
  }
  if (o.count > 0) spec.fonts = find_fonts(spec);

  make_dirs(o.out / "input");
  make_dirs(o.out / "textfree");
  make_dirs(o.out / "mask");

  DatasetManifest manifest;
  manifest.seed = o.seed;
  manifest.base_dir = o.out;
  const int64_t n_bg = files.empty() ? static_cast<int64_t>(generated.size()) : static_cast<int64_t>(files.size());
  for (int64_t i = 0; i < o.count; ++i) {
    const auto pick = static_cast<size_t>(uniform_int(rng, 0, n_bg - 1));
    torch::Tensor bg;
    if (files.empty()) {
      bg = generated[pick];
    } else {
      bg = read_image(files[pick]);
      const auto h = bg.size(1), w = bg.size(2);
      if (h < kFullSize || w < kFullSize) {
        const double scale = static_cast<double>(kFullSize) / static_cast<double>(std::min(h, w));
        const auto nh = std::max<int64_t>(kFullSize, static_cast<int64_t>(std::ceil(h * scale)));
        const auto nw = std::max<int64_t>(kFullSize, static_cast<int64_t>(std::ceil(w * scale)));
        std::cerr << "datagen: background " << files[pick].filename().string() << " is " << w << "x" << h
                  << ", upscaled to " << nw << "x" << nh << "\n";
        bg = resize_bilinear(bg, nh, nw).clamp(0, 1);
      }
    }
    auto synth = synth_render(bg, spec, rng);
    const auto name = record_name(i);
    write_image(o.out / "input" / name, synth.input);
    write_image(o.out / "textfree" / name, synth.textfree);
    write_image(o.out / "mask" / name, synth.mask);

    ManifestRecord rec;
    const int64_t tail = o.count - i;  // records left including this one
    if (tail <= o.test) rec.split = Split::Test;
    else if (tail <= o.test + o.val) rec.split = Split::Val;
    rec.input = "input/" + name;
    rec.textfree = "textfree/" + name;
    rec.mask = "mask/" + name;
    rec.boxes = synth.boxes;
    manifest.records.push_back(rec);
  }
  manifest.write(o.out / "manifest.txt");
  return manifest;
}

std::vector<std::string> audit_manifest(const DatasetManifest& manifest, bool synthetic) {
  std::vector<std::string> problems;
  for (const auto& rec : manifest.records) {
    try {
      auto s = make_sample(rec, manifest);
      check_sample(s);
      if (synthetic) {
        auto mask = read_mask(manifest.resolve(rec.mask));
        auto grown = torch::max_pool2d(mask.unsqueeze(0), 3, 1, 1)[0];
        auto outside = (grown < 0.5).expand_as(s.t512);
        auto diff = (s.t512 - s.tfg512).abs().masked_select(outside);
        if (diff.numel() > 0 && diff.max().item<double>() > 0)
          problems.push_back(rec.input + ": input differs from text-free outside the mask");
      }
    } catch (const std::exception& e) {
      problems.push_back(rec.input + ": " + e.what());
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IncompatibleError& e) {
    err << "error: incompatible: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    err << "error: data: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    err << "error: io: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainingError& e) {
    err << "error: training: " << e.what() << "\n";
    return kExitTraining;
  } catch (const c10::Error& e) {
    err << "error: tensor: " << e.what_without_backtrace() << "\n";
    return kExitTraining;
  }
}

struct TrainArgs {
  std::string config, manifest, out, resume;
  std::vector<std::string> overrides;
  int64_t seed = -1;
  bool force = false, no_highpass = false, no_seg = false, no_part2 = false;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_file(a.config);
  for (const auto& kv : a.overrides) cfg.set_override(kv);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.no_highpass) cfg.model.flags.no_highpass = true;
  if (a.no_seg) cfg.model.flags.no_seg = true;
  if (a.no_part2) cfg.model.flags.no_part2 = true;
  cfg.validate();

  const fs::path log = fs::path(cfg.out_dir) / "train_log.jsonl";
  if (a.resume.empty() && fs::exists(log)) {
    if (!a.force) throw ConfigError("output directory " + cfg.out_dir + " already holds a run (use --force or --resume)");
    fs::remove(log);
  }
  auto res = fit(cfg, a.resume);
  out << "trained " << res.steps_run << " steps";
  if (!res.checkpoints.empty()) out << "; last checkpoint " << res.checkpoints.back().string();
  out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, manifest, split = "test", detector = "none", box_dir, out, config;
  std::vector<std::string> overrides;
  bool identity = false, force = false;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  auto manifest = DatasetManifest::read(a.manifest);
  EvalOptions eo;
  eo.split = parse_split(a.split);
  eo.identity = a.identity;
  if (a.detector == "none") eo.detector = DetectorChoice::None;
  else if (a.detector == "builtin") eo.detector = DetectorChoice::Builtin;
  else if (a.detector == "boxes") eo.detector = DetectorChoice::BoxFiles;
  else throw ConfigError("unknown detector '" + a.detector + "' (expected none, builtin or boxes)");
  if (eo.detector == DetectorChoice::BoxFiles) {
    if (a.box_dir.empty()) throw ConfigError("--detector boxes needs --box-dir");
    eo.box_dir = a.box_dir;
  }
  if (!a.config.empty() || !a.overrides.empty()) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_file(a.config);
    for (const auto& kv : a.overrides) cfg.set_override(kv);
    eo.expected_model = cfg.model;
  }
  if (!a.out.empty()) {
    for (const char* f : {"metrics.txt", "metrics.json"})
      if (fs::exists(fs::path(a.out) / f) && !a.force)
        throw ConfigError((fs::path(a.out) / f).string() + " exists (use --force to overwrite)");
  }

  MetricsReport rep;
  if (!a.checkpoint.empty()) {
    rep = evaluate(a.checkpoint, manifest, eo);
  } else if (a.identity) {
    TextEraser unused(ModelConfig{});
    rep = evaluate(unused, manifest, eo);
  } else {
    throw ConfigError("eval needs --checkpoint (or --identity)");
  }
  out << rep.to_text();
  if (!a.out.empty()) {
    make_dirs(a.out);
    std::ofstream txt(fs::path(a.out) / "metrics.txt");
    txt << rep.to_text();
    std::ofstream js(fs::path(a.out) / "metrics.json");
    js << rep.to_json().dump(2) << "\n";
    if (!txt || !js) throw IoError("cannot write reports into " + a.out);
  }
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint, input, out;
  bool dump = false, force = false;
};

int run_infer(const InferArgs& a, std::ostream& out, std::ostream& err) {
  auto model = TextEraser::from_checkpoint(Archive::load(a.checkpoint));
  model.eval();
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) inputs = list_images(a.input);
  else inputs.push_back(a.input);
  if (inputs.empty()) throw DataError("no input images in " + a.input);

  const fs::path dir(a.out);
  auto targets = [&](const fs::path& in) {
    const auto stem = in.stem().string();
    std::vector<fs::path> t{dir / (stem + ".png")};
    if (a.dump)
      for (const char* suffix : {"_sp256.png", "_sp256_soft.png", "_hp256.png", "_tfp256.png"})
        t.push_back(dir / (stem + suffix));
    return t;
  };
  if (!a.force)
    for (const auto& in : inputs)
      for (const auto& t : targets(in))
        if (fs::exists(t)) throw ConfigError(t.string() + " exists (use --force to overwrite)");
  make_dirs(dir);

  torch::NoGradGuard ng;
  int failures = 0;
  for (const auto& in : inputs) {
    try {
      auto img = read_image(in);
      const auto h = img.size(1), w = img.size(2);
      if (h != kFullSize || w != kFullSize) {
        out << in.filename().string() << ": " << w << "x" << h << " resized to 512x512 and back\n";
        img = resize_bilinear(img, kFullSize, kFullSize).clamp(0, 1);
      }
      auto t256 = resize_area(img, kHalfSize, kHalfSize).unsqueeze(0);
      auto pred = model.predict(t256);
      auto result = pred.tfp512[0];
      if (h != kFullSize || w != kFullSize) result = resize_bilinear(result, h, w).clamp(0, 1);
      auto t = targets(in);
      write_image(t[0], result);
      if (a.dump) {
        const auto& p1 = pred.part1;
        if (p1.sp256.defined()) {
          write_image(t[1], (p1.sp256[0] >= 0.5).to(torch::kFloat32));
          write_image(t[2], p1.sp256[0]);
        }
        if (p1.hp256.defined()) write_image(t[3], p1.hp256[0]);
        write_image(t[4], p1.tfp256[0]);
      }
      out << in.filename().string() << " -> " << t[0].string() << "\n";
    } catch (const std::exception& e) {
      err << "error: " << in.string() << ": " << e.what() << "\n";
      ++failures;
    }
  }
  return failures ? kExitData : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tpfnet: two-part text erasure"};
  app.require_subcommand(1);

  DatagenOptions dg;
  int64_t dg_seed = 0;
  auto* datagen = app.add_subcommand("datagen", "Render synthetic text over backgrounds");
  datagen->add_option("--backgrounds", dg.backgrounds, "Directory of background images");
  datagen->add_option("--procedural", dg.procedural, "Generate this many smooth backgrounds instead");
  datagen->add_option("--out", dg.out, "Output directory")->required();
  datagen->add_option("--count", dg.count, "Number of samples")->required();
  datagen->add_option("--seed", dg_seed, "Random seed");
  datagen->add_option("--val", dg.val, "Records assigned to the validation split");
  datagen->add_option("--test", dg.test, "Records assigned to the test split");
  datagen->add_option("--set", dg.overrides, "Text rendering override key=value");
  datagen->add_flag("--force", dg.force, "Overwrite a non-empty output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Key-value config file");
  train->add_option("--set", ta.overrides, "Config override key=value");
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--manifest", ta.manifest, "Dataset manifest");
  train->add_option("--out", ta.out, "Run directory");
  train->add_option("--resume", ta.resume, "Checkpoint to resume from");
  train->add_flag("--force", ta.force, "Replace an existing run log");
  train->add_flag("--no-highpass", ta.no_highpass, "Remove the high-pass branch");
  train->add_flag("--no-seg", ta.no_seg, "Remove the segmentation branch");
  train->add_flag("--no-part2", ta.no_part2, "Remove the refinement stage");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a manifest split");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
  eval->add_option("--manifest", ea.manifest, "Dataset manifest")->required();
  eval->add_option("--split", ea.split, "train, val or test");
  eval->add_option("--detector", ea.detector, "none, builtin or boxes");
  eval->add_option("--box-dir", ea.box_dir, "Directory of <stem>.txt detections");
  eval->add_option("--out", ea.out, "Directory for metrics.txt and metrics.json");
  eval->add_option("--config", ea.config, "Expected model configuration");
  eval->add_option("--set", ea.overrides, "Expected model override key=value");
  eval->add_flag("--identity", ea.identity, "Score ground truth against itself");
  eval->add_flag("--force", ea.force, "Overwrite existing reports");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Erase text from images");
  infer->add_option("--checkpoint", ia.checkpoint, "Checkpoint file")->required();
  infer->add_option("--input", ia.input, "Image file or directory")->required();
  infer->add_option("--out", ia.out, "Output directory")->required();
  infer->add_flag("--dump-intermediates", ia.dump, "Also write part-1 predictions");
  infer->add_flag("--force", ia.force, "Overwrite existing outputs");

  std::string audit_manifest_path;
  bool audit_synthetic = false;
  auto* audit = app.add_subcommand("audit", "Check every record of a manifest");
  audit->add_option("--manifest", audit_manifest_path, "Dataset manifest")->required();
  audit->add_flag("--synthetic", audit_synthetic, "Also check input == text-free outside the mask");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (datagen->parsed()) {
    return guarded(err, [&] {
      if (dg_seed < 0) throw ConfigError("seed must be non-negative");
      dg.seed = static_cast<uint64_t>(dg_seed);
      auto m = cmd_datagen(dg);
      out << "wrote " << m.records.size() << " records to " << (dg.out / "manifest.txt").string() << "\n";
      return static_cast<int>(kExitOk);
    });
  }
  if (train->parsed()) return guarded(err, [&] { return run_train(ta, out); });
  if (eval->parsed()) return guarded(err, [&] { return run_eval(ea, out); });
  if (infer->parsed()) return guarded(err, [&] { return run_infer(ia, out, err); });
  if (audit->parsed()) {
    return guarded(err, [&] {
      auto manifest = DatasetManifest::read(audit_manifest_path);
      auto problems = audit_manifest(manifest, audit_synthetic);
      for (const auto& p : problems) err << p << "\n";
      out << manifest.records.size() << " records, " << problems.size() << " problems\n";
      return static_cast<int>(problems.empty() ? kExitOk : kExitData);
    });
  }
  return kExitUsage;
}

}  // namespace tpf
