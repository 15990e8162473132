#pragma once

#include "tpf/metrics.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace tpf {

inline constexpr int64_t kFullSize = 512;
inline constexpr int64_t kHalfSize = 256;

// ---------------------------------------------------------------------------
// Images

/// Reads an 8-bit image as RGB float [3,H,W] in [0,1].
torch::Tensor read_image(const std::filesystem::path& path);
/// Reads a single-channel mask as float [1,H,W], 1 where the pixel is >= 128.
torch::Tensor read_mask(const std::filesystem::path& path);
/// Writes [3,H,W] or [1,H,W] in [0,1] as an 8-bit image (rounded).
void write_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Bilinear resize of [C,H,W] or [B,C,H,W].
torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width);
/// Area-average resize (exact mean over the covered source pixels).
torch::Tensor resize_area(const torch::Tensor& image, int64_t height, int64_t width);
/// Nearest-8-bit quantisation, as used when images are written to disk.
torch::Tensor quantize8(const torch::Tensor& image);

/// |Laplacian| of the ITU-R 601 luma with replicate padding, clipped to [0,1].
/// Accepts [3,H,W] or [B,3,H,W]; returns [1,H,W] or [B,1,H,W].
torch::Tensor laplacian_highpass(const torch::Tensor& image);

/// Fills the boxes of a [1,H,W] mask. Box coordinates are in `box_space`
/// pixels and are scaled to the mask extent; a pixel is inside when its
/// centre is.
torch::Tensor rasterize_boxes(const std::vector<Box>& boxes, int64_t height, int64_t width, int64_t box_space);

/// 512-space mask [1,512,512] -> 256-space mask by 2x2 max pooling.
torch::Tensor downsample_mask(const torch::Tensor& mask512);

// ---------------------------------------------------------------------------
// Samples and manifests

struct TrainingSample {
  torch::Tensor t512, t256;      // [3,512,512], [3,256,256]
  torch::Tensor tfg512, tfg256;  // text-free ground truth
  torch::Tensor sg256;           // [1,256,256] binary
  torch::Tensor hg256;           // [1,256,256] high-pass target
  std::vector<Box> boxes;        // 512-space
  std::string id;
};

/// Throws DataError naming the first violated invariant.
void check_sample(const TrainingSample& s);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestRecord {
  Split split = Split::Train;
  std::string input;     // relative to the manifest directory unless absolute
  std::string textfree;
  std::string mask;      // empty when absent
  std::vector<Box> boxes;
};

/// Line-oriented manifest. Lines starting with '#' are comments; "# seed N"
/// sets the seed. Records are tab-separated:
///
///     split <TAB> input <TAB> text-free <TAB> mask|- <TAB> boxes|-
///
/// where boxes are "x0,y0,x1,y1;x0,y0,x1,y1;..." in 512-space pixels.
struct DatasetManifest {
  std::vector<ManifestRecord> records;
  uint64_t seed = 0;
  std::filesystem::path base_dir;

  static DatasetManifest read(const std::filesystem::path& path);
  static DatasetManifest parse(const std::string& text, const std::filesystem::path& base_dir);
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;

  std::filesystem::path resolve(const std::string& rel) const;
  /// Records of one split, in manifest order.
  std::vector<ManifestRecord> split(Split s) const;
  /// Throws DataError if a referenced file is missing or an input appears in two splits.
  void validate() const;
};

/// Reassigns splits from published split lists (one file name per line,
/// matched against the input file name). Records not named in either list
/// are dropped.
DatasetManifest apply_split_lists(const DatasetManifest& manifest, const std::vector<std::string>& train_names,
                                  const std::vector<std::string>& test_names);
std::vector<std::string> read_name_list(const std::filesystem::path& path);

/// Loads a record and derives every sample field. Non-512 images are resized
/// bilinearly with a warning on stderr.
TrainingSample make_sample(const ManifestRecord& record, const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  torch::Tensor t512, t256, tfg512, tfg256, sg256, hg256;  // [B,...]
  std::vector<std::vector<Box>> boxes;
  std::vector<std::string> ids;
  int64_t size() const { return t256.defined() ? t256.size(0) : 0; }
};

Batch collate(const std::vector<const TrainingSample*>& samples);

struct LoadReport {
  int64_t loaded = 0;
  int64_t skipped = 0;
  std::vector<std::string> messages;
};

/// Deterministic shuffled batches. Every record is loaded once up front;
/// unreadable records are skipped with a warning, and more than 5% skipped
/// is a DataError. Batch composition depends only on (records, seed, epoch).
class DataLoader {
 public:
  DataLoader(const DatasetManifest& manifest, Split split, int64_t batch_size, uint64_t shuffle_seed,
             bool shuffle = true);

  int64_t batches_per_epoch() const;
  int64_t num_samples() const { return static_cast<int64_t>(samples_.size()); }
  /// Sample order for one epoch.
  std::vector<int64_t> epoch_order(int64_t epoch) const;
  Batch batch(int64_t epoch, int64_t index) const;
  /// Batch for a global step counter, cycling through epochs.
  Batch batch_for_step(int64_t step) const;
  const TrainingSample& sample(int64_t i) const { return samples_.at(static_cast<size_t>(i)); }
  const LoadReport& report() const { return report_; }

 private:
  std::vector<TrainingSample> samples_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  LoadReport report_;
};

// ---------------------------------------------------------------------------
// Synthetic text rendering

struct TextSpec {
  int64_t min_strings = 1;
  int64_t max_strings = 8;
  int64_t min_size = 12;  // glyph height in px, 512-space
  int64_t max_size = 72;
  double max_rotation_deg = 45.0;
  int64_t min_chars = 3;
  int64_t max_chars = 10;
  std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
  /// Font files; when empty, the search paths are scanned for .ttf/.otf files.
  std::vector<std::string> fonts;
  std::vector<std::string> font_search_paths{"/usr/share/fonts", "/usr/local/share/fonts"};

  void validate() const;
  /// Applies "key=value" overrides; unknown keys throw ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
};

struct SynthResult {
  torch::Tensor input;     // [3,512,512] composited
  torch::Tensor textfree;  // [3,512,512] background crop
  torch::Tensor mask;      // [1,512,512] binary
  torch::Tensor alpha;     // [1,512,512] max glyph coverage over all strings
  std::vector<Box> boxes;  // rotated-rectangle bounding boxes
};

/// Resolves the font list of `spec`. Throws ConfigError listing the search
/// paths when nothing is found.
std::vector<std::string> find_fonts(const TextSpec& spec);

/// Renders random strings over a random 512x512 crop of `background`.
/// Deterministic in (rng state, spec, background).
SynthResult synth_render(const torch::Tensor& background, const TextSpec& spec, std::mt19937_64& rng);

/// Smooth random background [3,size,size]: blended colour gradients and
/// low-frequency blobs.
torch::Tensor procedural_background(int64_t size, std::mt19937_64& rng);

/// Uniform helpers with a fixed algorithm, so streams match across standard libraries.
double uniform01(std::mt19937_64& rng);
int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi);  // inclusive

}  // namespace tpf
