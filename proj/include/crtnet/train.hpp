#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crtnet/checkpoint.hpp"
#include "crtnet/model.hpp"
#include "crtnet/synth.hpp"

namespace crtnet {

enum class OptimizerKind { Sgd, Adam };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

enum class Ablation { None, SharedEncoder, TargetOnly, Unweighted, NoDetachment };
std::string to_string(Ablation ablation);
Ablation parse_ablation(const std::string& name);
const std::vector<Ablation>& all_ablations();

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.0;  // sgd only
  int batch_size = 16;
  int epochs = 15;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::None;
  int checkpoint_every = 1;  // epochs; 0 disables periodic checkpoints

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const TrainConfig&) const = default;
};

/// Model flags implied by an ablation. Only the affected fields change:
/// shared_encoder shares E_t/E_c, target_only and unweighted pick the fusion
/// mode, no_detachment lets G_t and U gradients reach the target encoder.
ModelConfig apply_detachment_policy(ModelConfig config, Ablation ablation);

/// Hash of everything that must match for a resume (model config plus the
/// optimisation settings; epochs and checkpoint_every may change).
std::uint64_t config_hash(const ModelConfig& model, const TrainConfig& train);

struct LossBundle {
  Tensor loss_p;   // on y_p
  Tensor loss_t;   // on y_t
  Tensor loss_tc;  // on y_tc
  Tensor total() const;
};

/// Throws NumericError when a loss is not finite.
LossBundle compute_losses(const Prediction& pred, int label);

/// Adam or SGD over a fixed parameter list. State tensors are kept by position.
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::vector<Tensor> params);

  /// Applies one update from the accumulated gradients and clears them.
  void step();
  void zero_grad();
  std::uint64_t steps() const { return steps_; }

  /// State records named "<prefix>.m.<i>" / "<prefix>.v.<i>" plus the step count.
  void save(CheckpointFile& file) const;
  void load(const CheckpointFile& file);

 private:
  TrainConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t steps_ = 0;
};

/// One labelled training/evaluation input.
struct Example {
  Tensor image;  // 3×H×W in [0, 1]
  BoundingBox box;
  int label = 0;
};

/// Split loaded from a manifest with 8-bit pixels kept in memory.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& split_dir, int threads = 1);
  static Dataset from_samples(const std::vector<Sample>& samples);

  std::size_t size() const { return rows_.size(); }
  const ManifestRow& row(std::size_t i) const { return rows_[i]; }
  const std::vector<ManifestRow>& rows() const { return rows_; }
  Example example(std::size_t i) const;
  /// Subset by predicate on rows.
  Dataset filter(const std::function<bool(const ManifestRow&)>& keep) const;

 private:
  std::vector<ManifestRow> rows_;
  std::vector<std::vector<std::uint8_t>> pixels_;  // planar 3×H×W
  std::vector<std::pair<int, int>> extents_;       // (width, height)
};

struct StepMetrics {
  double loss_p = 0, loss_t = 0, loss_tc = 0;  // sums over samples
  int correct_yp = 0, correct_yt = 0, correct_ytc = 0;
  double sum_p = 0;
  int n = 0;

  void add(const StepMetrics& other);
  double mean_loss() const { return n ? (loss_p + loss_t + loss_tc) / n : 0.0; }
};

/// Forward + backward on every example, gradients of the batch-mean objective,
/// then one optimizer update.
StepMetrics train_step(const std::vector<Example>& batch, const CrtnetParams& params, const ModelConfig& config,
                       Optimizer& optimizer, Rng& rng);

struct MetricsRecord {
  int epoch = 0;
  std::string split;
  double loss_p = 0, loss_t = 0, loss_tc = 0;
  double acc_yp = 0, acc_yt = 0, acc_ytc = 0;
  double mean_p = 0;
  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
  static MetricsRecord from(int epoch, const std::string& split, const StepMetrics& m);
};

/// Inference-mode metrics over a dataset (dropout off, no tape).
StepMetrics evaluate_losses(const Dataset& data, const CrtnetParams& params, const ModelConfig& config,
                            int threads = 1);

struct TrainLoopOptions {
  std::filesystem::path out_dir;
  ModelConfig model;  // before the ablation is applied
  TrainConfig train;
  std::optional<std::filesystem::path> resume;  // training checkpoint
  int threads = 1;
  bool verbose = false;
};

struct TrainResult {
  ModelConfig model;  // effective (ablation applied)
  CrtnetParams params;
  std::vector<MetricsRecord> metrics;
  std::filesystem::path model_path;
};

/// Trains on `train` (and records metrics on `val` when given). Writes
/// <out>/init.ckpt, <out>/epoch_NNN.ckpt per schedule, <out>/last.ckpt,
/// <out>/model.ckpt and <out>/metrics.jsonl.
TrainResult train_loop(const Dataset& train, const Dataset* val, const TrainLoopOptions& options);

CheckpointFile training_checkpoint(const ModelConfig& model, const TrainConfig& train, const CrtnetParams& params,
                                   const Optimizer& optimizer, int epoch);

}  // namespace crtnet
