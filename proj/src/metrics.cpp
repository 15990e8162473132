#include "tpf/metrics.hpp"

#include "tpf/common.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tpf {

namespace nnf = torch::nn::functional;

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.sizes() != b.sizes())
    throw ConfigError(std::string(op) + ": extent mismatch " + (a.defined() ? shape_str(a.sizes()) : "[]") + " vs " +
                      (b.defined() ? shape_str(b.sizes()) : "[]"));
}

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor gaussian_1d(const torch::TensorOptions& opts) {
  auto idx = torch::arange(kSsimWindow, opts) - static_cast<double>(kSsimWindow / 2);
  auto g = torch::exp(-(idx * idx) / (2.0 * kSsimSigma * kSsimSigma));
  return g / g.sum();
}

// Separable Gaussian filtering with zero padding, per channel.
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
  const int64_t c = x.size(1);
  const int64_t pad = kSsimWindow / 2;
  auto kv = g.view({1, 1, kSsimWindow, 1}).expand({c, 1, kSsimWindow, 1}).contiguous();
  auto kh = g.view({1, 1, 1, kSsimWindow}).expand({c, 1, 1, kSsimWindow}).contiguous();
  auto y = nnf::conv2d(x, kv, nnf::Conv2dFuncOptions().padding({pad, 0}).groups(c));
  return nnf::conv2d(y, kh, nnf::Conv2dFuncOptions().padding({0, pad}).groups(c));
}

}  // namespace

torch::Tensor ssim_map(const torch::Tensor& a_in, const torch::Tensor& b_in) {
  check_pair(a_in, b_in, "ssim");
  auto a = as_batch(a_in);
  auto b = as_batch(b_in);
  if (a.dim() != 4) throw ConfigError("ssim: expected [B,C,H,W] or [C,H,W], got " + shape_str(a_in.sizes()));
  auto g = gaussian_1d(a.options().requires_grad(false));
  auto norm = blur(torch::ones({1, a.size(1), a.size(2), a.size(3)}, a.options().requires_grad(false)), g);
  auto mu_a = blur(a, g) / norm;
  auto mu_b = blur(b, g) / norm;
  auto var_a = blur(a * a, g) / norm - mu_a * mu_a;
  auto var_b = blur(b * b, g) / norm - mu_b * mu_b;
  auto cov = blur(a * b, g) / norm - mu_a * mu_b;
  auto num = (2.0 * mu_a * mu_b + kSsimC1) * (2.0 * cov + kSsimC2);
  auto den = (mu_a * mu_a + mu_b * mu_b + kSsimC1) * (var_a + var_b + kSsimC2);
  return num / den;
}

torch::Tensor ssim_tensor(const torch::Tensor& a, const torch::Tensor& b) { return ssim_map(a, b).mean(); }

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "mse");
  torch::NoGradGuard ng;
  auto d = a.detach().to(torch::kFloat64) - b.detach().to(torch::kFloat64);
  return (d * d).mean().item<double>();
}

double psnr_from_mse(double m) {
  if (m < 1e-10) return kPsnrCap;
  return 10.0 * std::log10(1.0 / m);
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) { return psnr_from_mse(mse(a, b)); }

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  torch::NoGradGuard ng;
  return ssim_tensor(a.detach().to(torch::kFloat64), b.detach().to(torch::kFloat64)).item<double>();
}

double Box::area() const { return std::max(0.0, x_max - x_min) * std::max(0.0, y_max - y_min); }

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

struct PixelBox {
  int x0, y0, x1, y1;  // inclusive-exclusive
  double edge_pixels;
};

bool near(const PixelBox& a, const PixelBox& b) {
  const int ha = a.y1 - a.y0, hb = b.y1 - b.y0;
  const int gap = std::max(2, static_cast<int>(0.5 * std::min(ha, hb)));
  return a.x0 - gap < b.x1 && b.x0 - gap < a.x1 && a.y0 - gap < b.y1 && b.y0 - gap < a.y1;
}

}  // namespace

std::vector<Box> builtin_detect(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ConfigError("builtin_detect: expected [3,H,W] image");
  auto img = image.detach().to(torch::kFloat32).clamp(0, 1).contiguous();
  const int h = static_cast<int>(img.size(1)), w = static_cast<int>(img.size(2));
  auto gray_t = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).mul(255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat gray(h, w, CV_8UC1, gray_t.data_ptr<uint8_t>());

  cv::Mat grad;
  cv::morphologyEx(gray, grad, cv::MORPH_GRADIENT, cv::getStructuringElement(cv::MORPH_ELLIPSE, {3, 3}));
  cv::Mat edges;
  cv::threshold(grad, edges, 48, 255, cv::THRESH_BINARY);

  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(edges, labels, stats, centroids, 8, CV_32S);
  std::vector<PixelBox> parts;
  for (int i = 1; i < n; ++i) {
    const int area = stats.at<int>(i, cv::CC_STAT_AREA);
    if (area < 12) continue;
    const int x = stats.at<int>(i, cv::CC_STAT_LEFT), y = stats.at<int>(i, cv::CC_STAT_TOP);
    parts.push_back({x, y, x + stats.at<int>(i, cv::CC_STAT_WIDTH), y + stats.at<int>(i, cv::CC_STAT_HEIGHT),
                     static_cast<double>(area)});
  }

  // Merge neighbouring glyph components into word-level groups.
  bool merged = true;
  while (merged) {
    merged = false;
    for (size_t i = 0; i < parts.size() && !merged; ++i) {
      for (size_t j = i + 1; j < parts.size(); ++j) {
        if (!near(parts[i], parts[j])) continue;
        auto& a = parts[i];
        const auto& b = parts[j];
        a = {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1),
             a.edge_pixels + b.edge_pixels};
        parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(j));
        merged = true;
        break;
      }
    }
  }

  std::vector<Box> out;
  for (const auto& p : parts) {
    const int bw = p.x1 - p.x0, bh = p.y1 - p.y0;
    if (bw < 6 || bh < 6) continue;
    const double density = p.edge_pixels / (static_cast<double>(bw) * bh);
    if (density < 0.05 || bw * bh < 100) continue;
    out.push_back({static_cast<double>(p.x0), static_cast<double>(p.y0), static_cast<double>(p.x1),
                   static_cast<double>(p.y1), std::min(1.0, density)});
  }
  std::sort(out.begin(), out.end(), [](const Box& a, const Box& b) {
    return std::tie(a.y_min, a.x_min, a.y_max, a.x_max) < std::tie(b.y_min, b.x_min, b.y_max, b.x_max);
  });
  return out;
}

DetectionScores match_detections(const std::vector<std::vector<Box>>& detections,
                                 const std::vector<std::vector<Box>>& gt_boxes) {
  if (detections.size() != gt_boxes.size()) throw ConfigError("detector_eval: image/annotation count mismatch");
  DetectionScores s;
  for (size_t img = 0; img < detections.size(); ++img) {
    const auto& det = detections[img];
    const auto& gt = gt_boxes[img];
    struct Pair {
      double iou;
      size_t d, g;
    };
    std::vector<Pair> pairs;
    for (size_t d = 0; d < det.size(); ++d)
      for (size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(det[d], gt[g]);
        if (v >= 0.5) pairs.push_back({v, d, g});
      }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.iou != b.iou) return a.iou > b.iou;
      return std::tie(a.d, a.g) < std::tie(b.d, b.g);
    });
    std::vector<bool> used_d(det.size()), used_g(gt.size());
    for (const auto& p : pairs) {
      if (used_d[p.d] || used_g[p.g]) continue;
      used_d[p.d] = used_g[p.g] = true;
      ++s.true_positives;
    }
    s.detections += static_cast<int64_t>(det.size());
    s.ground_truth += static_cast<int64_t>(gt.size());
    ++s.evaluated;
  }
  s.precision = s.detections ? 100.0 * s.true_positives / s.detections : 0.0;
  s.recall = s.ground_truth ? 100.0 * s.true_positives / s.ground_truth : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

DetectionScores detector_eval(const std::vector<torch::Tensor>& images, const std::vector<std::vector<Box>>& gt_boxes,
                              const Detector& detector) {
  if (images.size() != gt_boxes.size()) throw ConfigError("detector_eval: image/annotation count mismatch");
  std::vector<std::vector<Box>> det, gt;
  int64_t failures = 0;
  for (size_t i = 0; i < images.size(); ++i) {
    try {
      det.push_back(detector(images[i]));
      gt.push_back(gt_boxes[i]);
    } catch (const std::exception&) {
      ++failures;
    }
  }
  auto s = match_detections(det, gt);
  s.failures = failures;
  return s;
}

std::vector<Box> read_boxes(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read box list '" + path.string() + "'");
  std::vector<Box> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Box b;
    if (!(ls >> b.x_min >> b.y_min >> b.x_max >> b.y_max)) throw DataError("malformed box row in '" + path.string() + "': " + line);
    if (!(ls >> b.score)) b.score = 1.0;
    out.push_back(b);
  }
  return out;
}

void write_boxes(const std::filesystem::path& path, const std::vector<Box>& boxes) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write box list '" + path.string() + "'");
  f.precision(17);
  for (const auto& b : boxes) f << b.x_min << ' ' << b.y_min << ' ' << b.x_max << ' ' << b.y_max << ' ' << b.score << '\n';
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.precision(10);
  os << "images = " << images << '\n';
  os << "psnr_db = " << psnr << '\n';
  os << "ssim = " << ssim << '\n';
  os << "mse_unit_scale = " << mse << '\n';
  if (has_detection) {
    os << "detector_precision_pct = " << precision << '\n';
    os << "detector_recall_pct = " << recall << '\n';
    os << "detector_f1_pct = " << f1 << '\n';
    os << "detector_failures = " << detector_failures << '\n';
  }
  return os.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j{{"images", images}, {"psnr_db", psnr}, {"ssim", ssim}, {"mse_unit_scale", mse}};
  if (has_detection) {
    j["detector_precision_pct"] = precision;
    j["detector_recall_pct"] = recall;
    j["detector_f1_pct"] = f1;
    j["detector_failures"] = detector_failures;
  }
  return j;
}

}  // namespace tpf
