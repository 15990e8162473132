#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace tpf {

inline constexpr int64_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr double kPsnrCap = 100.0;

/// Local SSIM map for [B,C,H,W] (or [C,H,W]) images in [0,1], computed with an
/// 11x11 Gaussian window (sigma 1.5). Near the border the window is clipped to
/// the image and renormalised, so every pixel has a value. Differentiable.
torch::Tensor ssim_map(const torch::Tensor& a, const torch::Tensor& b);
/// Mean of ssim_map, as a differentiable scalar tensor.
torch::Tensor ssim_tensor(const torch::Tensor& a, const torch::Tensor& b);

double mse(const torch::Tensor& a, const torch::Tensor& b);
/// 10*log10(1/mse), capped at 100 dB when mse < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
double psnr_from_mse(double mse);
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Axis-aligned box in pixel coordinates, max-exclusive.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0, score = 1.0;

  double area() const;
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

/// Any callable mapping an image [3,H,W] in [0,1] to detections.
using Detector = std::function<std::vector<Box>(const torch::Tensor& image)>;

/// Heuristic edge/connected-component text detector. It is a stand-in that
/// finds high-contrast glyph clusters; its scores are not comparable with
/// learned scene-text detectors.
std::vector<Box> builtin_detect(const torch::Tensor& image);

struct DetectionScores {
  double precision = 0, recall = 0, f1 = 0;  // percent
  int64_t true_positives = 0, detections = 0, ground_truth = 0;
  int64_t evaluated = 0, failures = 0;
};

/// Greedy one-to-one matching at IoU >= 0.5, pooled over all images.
/// Images on which the detector throws are skipped and counted.
DetectionScores detector_eval(const std::vector<torch::Tensor>& images, const std::vector<std::vector<Box>>& gt_boxes,
                              const Detector& detector);

/// Scores from already-computed detections.
DetectionScores match_detections(const std::vector<std::vector<Box>>& detections,
                                 const std::vector<std::vector<Box>>& gt_boxes);

/// Rows of "x_min y_min x_max y_max score".
std::vector<Box> read_boxes(const std::filesystem::path& path);
void write_boxes(const std::filesystem::path& path, const std::vector<Box>& boxes);

/// Aggregate quality of a set of erased images. MSE is on the [0,1] pixel scale.
struct MetricsReport {
  double psnr = 0, ssim = 0, mse = 0;
  bool has_detection = false;
  double precision = 0, recall = 0, f1 = 0;
  int64_t images = 0;
  int64_t detector_failures = 0;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

}  // namespace tpf
