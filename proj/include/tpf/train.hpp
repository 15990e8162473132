#pragma once

#include "tpf/archive.hpp"
#include "tpf/data.hpp"
#include "tpf/losses.hpp"
#include "tpf/metrics.hpp"
#include "tpf/model.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tpf {

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total_steps)) / 2.
/// Throws ConfigError when step is outside [0, total_steps].
double cosine_lr(int64_t step, int64_t total_steps, double lr0, double lr_min);

enum class OptimizerKind { AdamW, Adam, RMSprop };
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& s);

struct OptimizerSettings {
  OptimizerKind generators = OptimizerKind::AdamW;
  OptimizerKind d1 = OptimizerKind::RMSprop;
  OptimizerKind d2 = OptimizerKind::Adam;
  double adamw_beta1 = 0.9, adamw_beta2 = 0.999, adamw_weight_decay = 0.01;
  double rmsprop_alpha = 0.99;
  double adam_beta1 = 0.5, adam_beta2 = 0.999;
};

struct TrainConfig {
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  int64_t batch_size = 4;
  int64_t total_steps = 1000;
  uint64_t seed = 0;
  int64_t checkpoint_every = 500;  // 0: only the final checkpoint
  int64_t eval_every = 0;          // 0: no periodic validation
  LossWeights weights;
  ModelConfig model;
  OptimizerSettings optim;
  std::string manifest;
  std::string out_dir = "run";
  std::string pretrained_backbone;  // optional parameter file for the encoder

  /// Reads a "key = value" file ('#' starts a comment).
  static TrainConfig from_file(const std::filesystem::path& path);
  /// Applies one override; unknown keys throw ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  /// Applies "key=value".
  void set_override(const std::string& assignment);
  std::map<std::string, std::string> to_kv() const;
  void validate() const;
};

/// Mutable training state: models, discriminators, optimisers, step counter.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  /// One concurrent update of D1, D2 and the generators on `batch`.
  /// A non-finite loss rolls the state back and returns std::nullopt;
  /// three consecutive rollbacks throw TrainingError.
  std::optional<LossReport> train_step(const Batch& batch);

  int64_t step() const { return step_; }
  double current_lr() const;
  const TrainConfig& config() const { return cfg_; }
  int64_t aborted_steps() const { return aborted_total_; }

  Archive to_archive() const;
  /// Restores a state written by to_archive. The model layout must match.
  void load_archive(const Archive& archive);
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  /// Parameters updated by the generator optimiser.
  std::vector<torch::Tensor> generator_parameters() const;

  TextEraser model;
  Part1Discriminator d1{nullptr};
  Part2Discriminator d2{nullptr};  // null without part 2
  std::unique_ptr<torch::optim::Optimizer> opt_g, opt_d1, opt_d2;
  OptimizerKind kind_g, kind_d1, kind_d2;
  double best_val_psnr = -1.0;

 private:
  LossReport run_step(const Batch& batch, double lr);
  void set_lr(double lr);

  TrainConfig cfg_;
  int64_t step_ = 0;
  int64_t consecutive_aborts_ = 0;
  int64_t aborted_total_ = 0;
};

struct FitResult {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path log;
  std::optional<LossReport> last;
  int64_t steps_run = 0;
};

/// Runs the training loop described by `cfg`, writing checkpoints and an
/// append-only JSON-lines log into cfg.out_dir. When `resume` names a
/// checkpoint, training continues from its step.
FitResult fit(const TrainConfig& cfg, const std::filesystem::path& resume = {});

enum class DetectorChoice { None, Builtin, BoxFiles };

struct EvalOptions {
  Split split = Split::Test;
  DetectorChoice detector = DetectorChoice::None;
  /// Directory of "<image stem>.txt" box lists when detector == BoxFiles.
  std::filesystem::path box_dir;
  /// Scores the ground truth against itself (checks the harness, not a model).
  bool identity = false;
  /// When set, the checkpoint's model layout must equal this one.
  std::optional<ModelConfig> expected_model;
};

/// Inference over a manifest split with TFp512 from predicted conditioning.
MetricsReport evaluate(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                       const EvalOptions& options);
MetricsReport evaluate(TextEraser& model, const DatasetManifest& manifest, const EvalOptions& options);

}  // namespace tpf
