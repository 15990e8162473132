#include "tpf/data.hpp"

#include "tpf/common.hpp"

#include <opencv2/freetype.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

namespace tpf {

namespace nnf = torch::nn::functional;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Images

namespace {

torch::Tensor mat_to_tensor(const cv::Mat& m) {
  // m: 8-bit, 1 or 3 channels (RGB order for 3).
  auto t = torch::from_blob(m.data, {m.rows, m.cols, m.channels()}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

cv::Mat tensor_to_mat(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kFloat32).clamp(0, 1).mul(255.0).round().to(torch::kUInt8);
  t = t.permute({1, 2, 0}).contiguous();
  const int c = static_cast<int>(t.size(2));
  cv::Mat m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_8UC(c));
  std::memcpy(m.data, t.data_ptr<uint8_t>(), t.numel());
  return m;
}

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor restore_rank(const torch::Tensor& y, const torch::Tensor& like) { return like.dim() == 3 ? y.squeeze(0) : y; }

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& context) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError(context + ": bad number '" + s + "'");
  return v;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

torch::Tensor read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image '" + path.string() + "'");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return mat_to_tensor(rgb);
}

torch::Tensor read_mask(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read mask '" + path.string() + "'");
  return (mat_to_tensor(m) >= (127.5 / 255.0)).to(torch::kFloat32);
}

void write_image(const fs::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1))
    throw ConfigError("write_image: expected [3,H,W] or [1,H,W], got " + shape_str(image.sizes()));
  cv::Mat m = tensor_to_mat(image);
  if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write image '" + path.string() + "': " + e.what());
  }
  if (!ok) throw IoError("cannot write image '" + path.string() + "'");
}

torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width) {
  auto x = as_batch(image);
  if (x.size(2) == height && x.size(3) == width) return image;
  const bool down = height < x.size(2) || width < x.size(3);
  auto y = nnf::interpolate(x, nnf::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kBilinear)
                                   .align_corners(false)
                                   .antialias(down));
  return restore_rank(y, image);
}

torch::Tensor resize_area(const torch::Tensor& image, int64_t height, int64_t width) {
  auto x = as_batch(image);
  if (x.size(2) == height && x.size(3) == width) return image;
  auto y = nnf::adaptive_avg_pool2d(x, nnf::AdaptiveAvgPool2dFuncOptions({height, width}));
  return restore_rank(y, image);
}

torch::Tensor quantize8(const torch::Tensor& image) { return image.clamp(0, 1).mul(255.0).round().div(255.0); }

torch::Tensor laplacian_highpass(const torch::Tensor& image) {
  auto x = as_batch(image);
  if (x.dim() != 4 || x.size(1) != 3)
    throw ConfigError("laplacian_highpass: expected [3,H,W] or [B,3,H,W], got " + shape_str(image.sizes()));
  auto gray = 0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2);
  gray = gray.unsqueeze(1);
  auto padded = nnf::pad(gray, nnf::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto kernel = torch::tensor({0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0}, x.options()).view({1, 1, 3, 3});
  auto y = nnf::conv2d(padded, kernel).abs().clamp(0.0, 1.0);
  return restore_rank(y, image);
}

torch::Tensor rasterize_boxes(const std::vector<Box>& boxes, int64_t height, int64_t width, int64_t box_space) {
  auto mask = torch::zeros({1, height, width});
  auto acc = mask.accessor<float, 3>();
  const double sy = static_cast<double>(box_space) / height;
  const double sx = static_cast<double>(box_space) / width;
  for (const auto& b : boxes) {
    for (int64_t y = 0; y < height; ++y) {
      const double cy = (y + 0.5) * sy;
      if (cy < b.y_min || cy >= b.y_max) continue;
      for (int64_t x = 0; x < width; ++x) {
        const double cx = (x + 0.5) * sx;
        if (cx >= b.x_min && cx < b.x_max) acc[0][y][x] = 1.0f;
      }
    }
  }
  return mask;
}

torch::Tensor downsample_mask(const torch::Tensor& mask512) {
  auto x = as_batch(mask512);
  auto y = nnf::adaptive_max_pool2d(x, nnf::AdaptiveMaxPool2dFuncOptions({kHalfSize, kHalfSize}));
  return restore_rank(y, mask512);
}

// ---------------------------------------------------------------------------
// Samples and manifests

void check_sample(const TrainingSample& s) {
  auto expect = [&](const torch::Tensor& t, std::vector<int64_t> shape, const char* name) {
    if (!t.defined() || t.sizes() != torch::IntArrayRef(shape))
      throw DataError("sample " + s.id + ": " + name + " has shape " + (t.defined() ? shape_str(t.sizes()) : "[]"));
    if (!torch::isfinite(t).all().item<bool>()) throw DataError("sample " + s.id + ": " + name + " not finite");
    if ((t < 0).any().item<bool>() || (t > 1).any().item<bool>())
      throw DataError("sample " + s.id + ": " + name + " outside [0,1]");
  };
  expect(s.t512, {3, kFullSize, kFullSize}, "t512");
  expect(s.tfg512, {3, kFullSize, kFullSize}, "tfg512");
  expect(s.t256, {3, kHalfSize, kHalfSize}, "t256");
  expect(s.tfg256, {3, kHalfSize, kHalfSize}, "tfg256");
  expect(s.sg256, {1, kHalfSize, kHalfSize}, "sg256");
  expect(s.hg256, {1, kHalfSize, kHalfSize}, "hg256");
  if (!((s.sg256 == 0) | (s.sg256 == 1)).all().item<bool>()) throw DataError("sample " + s.id + ": sg256 not binary");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "'");
}

DatasetManifest DatasetManifest::parse(const std::string& text, const fs::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      if (ls >> key && key == "seed") {
        if (!(ls >> m.seed)) throw DataError("manifest line " + std::to_string(lineno) + ": bad seed");
      }
      continue;
    }
    const auto ctx = "manifest line " + std::to_string(lineno);
    auto f = split_on(line, '\t');
    if (f.size() != 5) throw DataError(ctx + ": expected 5 tab-separated fields, got " + std::to_string(f.size()));
    ManifestRecord r;
    r.split = parse_split(f[0]);
    r.input = f[1];
    r.textfree = f[2];
    if (r.input.empty() || r.textfree.empty()) throw DataError(ctx + ": empty path");
    if (f[3] != "-") r.mask = f[3];
    if (f[4] != "-" && !f[4].empty()) {
      for (const auto& item : split_on(f[4], ';')) {
        auto c = split_on(item, ',');
        if (c.size() != 4) throw DataError(ctx + ": box '" + item + "' needs 4 coordinates");
        r.boxes.push_back({parse_double(c[0], ctx), parse_double(c[1], ctx), parse_double(c[2], ctx),
                           parse_double(c[3], ctx), 1.0});
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest DatasetManifest::read(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  auto base = path.parent_path();
  return parse(ss.str(), base.empty() ? fs::path(".") : base);
}

std::string DatasetManifest::to_text() const {
  std::ostringstream os;
  os << "# tpfnet manifest v1\n";
  os << "# seed " << seed << '\n';
  for (const auto& r : records) {
    os << to_string(r.split) << '\t' << r.input << '\t' << r.textfree << '\t' << (r.mask.empty() ? "-" : r.mask) << '\t';
    if (r.boxes.empty()) {
      os << '-';
    } else {
      for (size_t i = 0; i < r.boxes.size(); ++i) {
        const auto& b = r.boxes[i];
        if (i) os << ';';
        os << format_double(b.x_min) << ',' << format_double(b.y_min) << ',' << format_double(b.x_max) << ','
           << format_double(b.y_max);
      }
    }
    os << '\n';
  }
  return os.str();
}

void DatasetManifest::write(const fs::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest '" + path.string() + "'");
  f << to_text();
  if (!f) throw IoError("write failed for manifest '" + path.string() + "'");
}

fs::path DatasetManifest::resolve(const std::string& rel) const {
  fs::path p(rel);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<ManifestRecord> DatasetManifest::split(Split s) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

void DatasetManifest::validate() const {
  std::map<std::string, Split> seen;
  for (const auto& r : records) {
    for (const auto* p : {&r.input, &r.textfree, &r.mask}) {
      if (!p->empty() && !fs::exists(resolve(*p))) throw DataError("manifest references missing file '" + *p + "'");
    }
    auto [it, inserted] = seen.emplace(r.input, r.split);
    if (!inserted && it->second != r.split)
      throw DataError("input '" + r.input + "' appears in splits " + to_string(it->second) + " and " +
                      to_string(r.split));
  }
}

std::vector<std::string> read_name_list(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read split list '" + path.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

DatasetManifest apply_split_lists(const DatasetManifest& manifest, const std::vector<std::string>& train_names,
                                  const std::vector<std::string>& test_names) {
  const std::set<std::string> train(train_names.begin(), train_names.end());
  const std::set<std::string> test(test_names.begin(), test_names.end());
  for (const auto& n : train)
    if (test.count(n)) throw DataError("split lists overlap on '" + n + "'");
  DatasetManifest out = manifest;
  out.records.clear();
  for (auto r : manifest.records) {
    const auto name = fs::path(r.input).filename().string();
    if (train.count(name)) {
      r.split = Split::Train;
    } else if (test.count(name)) {
      r.split = Split::Test;
    } else {
      continue;
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

namespace {

std::vector<Box> boxes_from_mask(const torch::Tensor& mask512) {
  auto m = (mask512[0] > 0.5).to(torch::kUInt8).mul(255).contiguous();
  cv::Mat mat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<uint8_t>());
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(mat, labels, stats, centroids, 8, CV_32S);
  std::vector<Box> out;
  for (int i = 1; i < n; ++i) {
    const double x = stats.at<int>(i, cv::CC_STAT_LEFT), y = stats.at<int>(i, cv::CC_STAT_TOP);
    out.push_back({x, y, x + stats.at<int>(i, cv::CC_STAT_WIDTH), y + stats.at<int>(i, cv::CC_STAT_HEIGHT), 1.0});
  }
  return out;
}

torch::Tensor to_full_size(const torch::Tensor& img, const std::string& what) {
  if (img.size(1) == kFullSize && img.size(2) == kFullSize) return img;
  std::cerr << "warning: " << what << " is " << img.size(2) << "x" << img.size(1)
            << ", resizing bilinearly to 512x512\n";
  return resize_bilinear(img, kFullSize, kFullSize).clamp(0, 1);
}

}  // namespace

TrainingSample make_sample(const ManifestRecord& record, const DatasetManifest& manifest) {
  TrainingSample s;
  s.id = record.input;
  const auto input_path = manifest.resolve(record.input);
  const auto tf_path = manifest.resolve(record.textfree);
  if (!fs::exists(input_path)) throw DataError("missing input image '" + input_path.string() + "'");
  if (!fs::exists(tf_path)) throw DataError("missing text-free image '" + tf_path.string() + "'");
  s.t512 = to_full_size(read_image(input_path), input_path.string());
  s.tfg512 = to_full_size(read_image(tf_path), tf_path.string());

  torch::Tensor mask512;
  if (!record.mask.empty()) {
    const auto mask_path = manifest.resolve(record.mask);
    if (!fs::exists(mask_path)) throw DataError("missing mask '" + mask_path.string() + "'");
    mask512 = read_mask(mask_path);
    if (mask512.size(1) != kFullSize || mask512.size(2) != kFullSize)
      mask512 = (resize_bilinear(mask512, kFullSize, kFullSize) >= 0.5).to(torch::kFloat32);
  } else {
    mask512 = rasterize_boxes(record.boxes, kFullSize, kFullSize, kFullSize);
  }
  s.boxes = record.boxes.empty() && !record.mask.empty() ? boxes_from_mask(mask512) : record.boxes;

  s.t256 = resize_area(s.t512, kHalfSize, kHalfSize);
  s.tfg256 = resize_area(s.tfg512, kHalfSize, kHalfSize);
  s.sg256 = downsample_mask(mask512);
  s.hg256 = laplacian_highpass(s.tfg256);
  return s;
}

// ---------------------------------------------------------------------------
// Batching

Batch collate(const std::vector<const TrainingSample*>& samples) {
  if (samples.empty()) throw DataError("collate: empty batch");
  Batch b;
  auto stack = [&](auto member) {
    std::vector<torch::Tensor> v;
    v.reserve(samples.size());
    for (const auto* s : samples) v.push_back(s->*member);
    return torch::stack(v);
  };
  b.t512 = stack(&TrainingSample::t512);
  b.t256 = stack(&TrainingSample::t256);
  b.tfg512 = stack(&TrainingSample::tfg512);
  b.tfg256 = stack(&TrainingSample::tfg256);
  b.sg256 = stack(&TrainingSample::sg256);
  b.hg256 = stack(&TrainingSample::hg256);
  for (const auto* s : samples) {
    b.boxes.push_back(s->boxes);
    b.ids.push_back(s->id);
  }
  return b;
}

DataLoader::DataLoader(const DatasetManifest& manifest, Split split, int64_t batch_size, uint64_t shuffle_seed,
                       bool shuffle)
    : batch_size_(batch_size), seed_(shuffle_seed), shuffle_(shuffle) {
  if (batch_size < 1) throw ConfigError("DataLoader: batch_size must be >= 1");
  const auto records = manifest.split(split);
  for (const auto& r : records) {
    try {
      auto s = make_sample(r, manifest);
      check_sample(s);
      samples_.push_back(std::move(s));
      ++report_.loaded;
    } catch (const DataError& e) {
      ++report_.skipped;
      report_.messages.push_back(e.what());
      std::cerr << "warning: skipping record: " << e.what() << '\n';
    }
  }
  const auto total = report_.loaded + report_.skipped;
  if (total > 0 && report_.skipped * 20 > total)
    throw DataError("DataLoader: skipped " + std::to_string(report_.skipped) + " of " + std::to_string(total) +
                    " records (more than 5%)");
}

int64_t DataLoader::batches_per_epoch() const {
  return (num_samples() + batch_size_ - 1) / batch_size_;
}

std::vector<int64_t> DataLoader::epoch_order(int64_t epoch) const {
  std::vector<int64_t> order(samples_.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  if (!shuffle_) return order;
  std::seed_seq seq{static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(static_cast<uint64_t>(epoch) >> 32)};
  std::mt19937_64 rng(seq);
  for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(uniform_int(rng, 0, i))]);
  return order;
}

Batch DataLoader::batch(int64_t epoch, int64_t index) const {
  if (index < 0 || index >= batches_per_epoch()) throw ConfigError("DataLoader: batch index out of range");
  const auto order = epoch_order(epoch);
  std::vector<const TrainingSample*> picked;
  const int64_t begin = index * batch_size_;
  const int64_t end = std::min<int64_t>(begin + batch_size_, num_samples());
  for (int64_t i = begin; i < end; ++i) picked.push_back(&samples_[static_cast<size_t>(order[static_cast<size_t>(i)])]);
  return collate(picked);
}

Batch DataLoader::batch_for_step(int64_t step) const {
  const auto bpe = batches_per_epoch();
  if (bpe == 0) throw DataError("DataLoader: no samples");
  return batch(step / bpe, step % bpe);
}

// ---------------------------------------------------------------------------
// Synthetic text rendering

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  if (hi < lo) throw ConfigError("uniform_int: empty range");
  const auto range = static_cast<unsigned __int128>(static_cast<uint64_t>(hi - lo) + 1);
  return lo + static_cast<int64_t>((static_cast<unsigned __int128>(rng()) * range) >> 64);
}

void TextSpec::validate() const {
  require(min_strings >= 0 && max_strings >= min_strings, "TextSpec: invalid string count range");
  require(min_size >= 4 && max_size >= min_size, "TextSpec: invalid size range");
  require(max_rotation_deg >= 0 && max_rotation_deg <= 180, "TextSpec: max_rotation_deg must be in [0,180]");
  require(min_chars >= 1 && max_chars >= min_chars, "TextSpec: invalid character count range");
  require(!alphabet.empty(), "TextSpec: empty alphabet");
}

void TextSpec::set(const std::string& key, const std::string& value) {
  auto as_int = [&]() {
    try {
      size_t pos = 0;
      auto v = std::stoll(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return static_cast<int64_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("text spec key '" + key + "': expected an integer, got '" + value + "'");
    }
  };
  if (key == "min_strings") min_strings = as_int();
  else if (key == "max_strings") max_strings = as_int();
  else if (key == "min_size") min_size = as_int();
  else if (key == "max_size") max_size = as_int();
  else if (key == "min_chars") min_chars = as_int();
  else if (key == "max_chars") max_chars = as_int();
  else if (key == "max_rotation_deg") {
    try {
      max_rotation_deg = std::stod(value);
    } catch (const std::exception&) {
      throw ConfigError("text spec key '" + key + "': expected a number, got '" + value + "'");
    }
  } else if (key == "alphabet") alphabet = value;
  else if (key == "fonts") fonts = split_on(value, ',');
  else if (key == "font_search_paths") font_search_paths = split_on(value, ',');
  else throw ConfigError("unknown text spec key '" + key + "'");
}

std::vector<std::string> find_fonts(const TextSpec& spec) {
  std::vector<std::string> out;
  if (!spec.fonts.empty()) {
    for (const auto& f : spec.fonts) {
      if (!fs::exists(f)) throw ConfigError("font file not found: '" + f + "'");
      out.push_back(f);
    }
    return out;
  }
  for (const auto& dir : spec.font_search_paths) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) continue;
    for (auto it = fs::recursive_directory_iterator(dir, fs::directory_options::skip_permission_denied, ec);
         it != fs::recursive_directory_iterator(); it.increment(ec)) {
      if (ec) break;
      auto ext = it->path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (it->is_regular_file() && (ext == ".ttf" || ext == ".otf")) out.push_back(it->path().string());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) {
    std::string paths;
    for (const auto& p : spec.font_search_paths) paths += (paths.empty() ? "" : ", ") + p;
    throw ConfigError("no fonts found; searched: " + paths);
  }
  return out;
}

namespace {

cv::Ptr<cv::freetype::FreeType2> font_renderer(const std::string& path) {
  static std::mutex mu;
  static std::map<std::string, cv::Ptr<cv::freetype::FreeType2>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(path);
  if (it != cache.end()) return it->second;
  auto ft = cv::freetype::createFreeType2();
  try {
    ft->loadFontData(path, 0);
  } catch (const cv::Exception& e) {
    throw ConfigError("cannot load font '" + path + "': " + e.what());
  }
  cache.emplace(path, ft);
  return ft;
}

// Renders `text` as an 8-bit coverage map cropped to its ink.
cv::Mat render_glyphs(const std::string& font, const std::string& text, int height) {
  auto ft = font_renderer(font);
  int baseline = 0;
  auto size = ft->getTextSize(text, height, -1, &baseline);
  const int pad = height;
  cv::Mat canvas(size.height + baseline + 2 * pad, size.width + 2 * pad, CV_8UC3, cv::Scalar(0, 0, 0));
  ft->putText(canvas, text, {pad, pad + size.height}, height, cv::Scalar(255, 255, 255), -1, cv::LINE_AA, true);
  cv::Mat gray;
  cv::extractChannel(canvas, gray, 0);
  std::vector<cv::Point> ink;
  cv::findNonZero(gray, ink);
  if (ink.empty()) return {};
  return gray(cv::boundingRect(ink)).clone();
}

double luma(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

SynthResult synth_render(const torch::Tensor& background, const TextSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  if (background.dim() != 3 || background.size(0) != 3 || background.size(1) < kFullSize ||
      background.size(2) < kFullSize)
    throw ConfigError("synth_render: background must be [3,H,W] with H,W >= 512, got " + shape_str(background.sizes()));
  const auto fonts = spec.max_strings > 0 ? find_fonts(spec) : std::vector<std::string>{};

  const int64_t oy = uniform_int(rng, 0, background.size(1) - kFullSize);
  const int64_t ox = uniform_int(rng, 0, background.size(2) - kFullSize);
  auto crop = background.narrow(1, oy, kFullSize).narrow(2, ox, kFullSize).to(torch::kFloat32).contiguous().clone();

  SynthResult r;
  r.textfree = crop.clone();
  auto out = crop.clone();
  auto alpha_union = torch::zeros({1, kFullSize, kFullSize});
  auto mask = torch::zeros({1, kFullSize, kFullSize});
  const double bg_luma = (0.299 * crop[0] + 0.587 * crop[1] + 0.114 * crop[2]).mean().item<double>();
  constexpr int S = static_cast<int>(kFullSize);

  const int64_t count = uniform_int(rng, spec.min_strings, spec.max_strings);
  for (int64_t s = 0; s < count; ++s) {
    const auto& font = fonts[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(fonts.size()) - 1))];
    const int height = static_cast<int>(uniform_int(rng, spec.min_size, spec.max_size));
    const int64_t len = uniform_int(rng, spec.min_chars, spec.max_chars);
    std::string text;
    for (int64_t c = 0; c < len; ++c)
      text.push_back(spec.alphabet[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(spec.alphabet.size()) - 1))]);
    const double angle = (2.0 * uniform01(rng) - 1.0) * spec.max_rotation_deg;
    std::array<double, 3> color{uniform01(rng), uniform01(rng), uniform01(rng)};
    if (std::abs(luma(color) - bg_luma) < 0.35) {
      for (auto& c : color) c = 1.0 - c;
      if (std::abs(luma(color) - bg_luma) < 0.35) color.fill(bg_luma > 0.5 ? 0.0 : 1.0);
    }
    const double ux = uniform01(rng), uy = uniform01(rng);

    cv::Mat glyphs = render_glyphs(font, text, height);
    if (glyphs.empty()) continue;
    const double w = glyphs.cols, h = glyphs.rows;
    const double rad = angle * std::numbers::pi / 180.0;
    const double half_x = 0.5 * (std::abs(std::cos(rad)) * w + std::abs(std::sin(rad)) * h);
    const double half_y = 0.5 * (std::abs(std::sin(rad)) * w + std::abs(std::cos(rad)) * h);
    if (2 * half_x > S - 4 || 2 * half_y > S - 4) continue;
    const double cx = half_x + 2 + ux * (S - 4 - 2 * half_x);
    const double cy = half_y + 2 + uy * (S - 4 - 2 * half_y);

    cv::Mat m = cv::getRotationMatrix2D(cv::Point2f(static_cast<float>(w / 2), static_cast<float>(h / 2)), angle, 1.0);
    m.at<double>(0, 2) += cx - w / 2;
    m.at<double>(1, 2) += cy - h / 2;
    cv::Mat cover;
    glyphs.convertTo(cover, CV_32F, 1.0 / 255.0);
    cv::Mat placed;
    cv::warpAffine(cover, placed, m, {S, S}, cv::INTER_LINEAR, cv::BORDER_CONSTANT, 0);

    // Coverage is kept only within one pixel of the binarised glyphs.
    cv::Mat solid = placed > 0.5f;
    if (cv::countNonZero(solid) == 0) continue;
    cv::Mat support;
    cv::dilate(solid, support, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}));
    cv::Mat trimmed = cv::Mat::zeros(S, S, CV_32F);
    placed.copyTo(trimmed, support);

    auto a = torch::from_blob(trimmed.data, {1, S, S}, torch::kFloat32).clone();
    auto col = torch::tensor({color[0], color[1], color[2]}, torch::kFloat32).view({3, 1, 1});
    out = out * (1.0 - a) + col * a;
    alpha_union = torch::maximum(alpha_union, a);
    mask = torch::maximum(mask, (a > 0.5).to(torch::kFloat32));

    Box b{1e9, 1e9, -1e9, -1e9, 1.0};
    const std::array<std::pair<double, double>, 4> corners{{{0.0, 0.0}, {w, 0.0}, {0.0, h}, {w, h}}};
    for (auto [px, py] : corners) {
      const double tx = m.at<double>(0, 0) * px + m.at<double>(0, 1) * py + m.at<double>(0, 2);
      const double ty = m.at<double>(1, 0) * px + m.at<double>(1, 1) * py + m.at<double>(1, 2);
      b.x_min = std::min(b.x_min, tx);
      b.y_min = std::min(b.y_min, ty);
      b.x_max = std::max(b.x_max, tx);
      b.y_max = std::max(b.y_max, ty);
    }
    b.x_min = std::clamp(std::floor(b.x_min), 0.0, static_cast<double>(S));
    b.y_min = std::clamp(std::floor(b.y_min), 0.0, static_cast<double>(S));
    b.x_max = std::clamp(std::ceil(b.x_max), 0.0, static_cast<double>(S));
    b.y_max = std::clamp(std::ceil(b.y_max), 0.0, static_cast<double>(S));
    r.boxes.push_back(b);
  }
  r.input = out.clamp(0, 1);
  r.alpha = alpha_union;
  r.mask = mask;
  return r;
}

torch::Tensor procedural_background(int64_t size, std::mt19937_64& rng) {
  auto ys = torch::linspace(0.0, 1.0, size).view({1, size, 1}).expand({1, size, size});
  auto xs = torch::linspace(0.0, 1.0, size).view({1, 1, size}).expand({1, size, size});
  auto rand_color = [&]() {
    return torch::tensor({uniform01(rng), uniform01(rng), uniform01(rng)}, torch::kFloat32).view({3, 1, 1});
  };
  const double theta = uniform01(rng) * 2.0 * std::numbers::pi;
  auto t = (std::cos(theta) * (xs - 0.5) + std::sin(theta) * (ys - 0.5)) / std::sqrt(2.0) + 0.5;
  auto c0 = rand_color(), c1 = rand_color();
  auto img = c0 * (1.0 - t) + c1 * t;
  const int64_t blobs = uniform_int(rng, 2, 5);
  for (int64_t i = 0; i < blobs; ++i) {
    const double bx = uniform01(rng), by = uniform01(rng);
    const double sigma = 0.08 + 0.25 * uniform01(rng);
    const double strength = 0.2 + 0.4 * uniform01(rng);
    auto weight = strength * torch::exp(-((xs - bx).pow(2) + (ys - by).pow(2)) / (2.0 * sigma * sigma));
    img = img * (1.0 - weight) + rand_color() * weight;
  }
  return img.clamp(0, 1).contiguous();
}

}  // namespace tpf
