#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crtnet/checkpoint.hpp"
#include "crtnet/model.hpp"
#include "crtnet/synth.hpp"
#include "crtnet/train.hpp"

namespace crtnet {

struct CellStats {
  int n = 0;
  int correct = 0;

  double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
  /// Binomial standard error sqrt(acc·(1−acc)/n).
  double sem() const;
  bool operator==(const CellStats&) const = default;
};

using CellKey = std::pair<ConditionTag, SizeBin>;

/// One evaluated sample.
struct SampleOutcome {
  int label = 0;
  int predicted = 0;
  double p = 0.0;
  ConditionTag condition = ConditionTag::Normal;
  SizeBin size_bin = SizeBin::Small;
};

struct EvalReport {
  std::map<CellKey, CellStats> cells;
  std::map<int, CellStats> per_class;
  std::map<ConditionTag, double> mean_confidence;

  CellStats overall() const;
  /// Pools cells matching a predicate.
  template <typename Pred>
  CellStats pooled(Pred keep) const {
    CellStats s;
    for (const auto& [key, c] : cells)
      if (keep(key)) {
        s.n += c.n;
        s.correct += c.correct;
      }
    return s;
  }

  static EvalReport from_outcomes(const std::vector<SampleOutcome>& outcomes);
  /// Reports compare by their cells; per-class and confidence breakdowns are
  /// derived views not carried by the CSV form.
  bool operator==(const EvalReport& other) const { return cells == other.cells; }
};

/// Which distribution is scored.
enum class Head { Fused, Target, Context };
std::string to_string(Head head);

/// Inference-mode pass (dropout off). `fusion_override` replaces the model's
/// fusion mode; `head` picks y_p, y_t or y_tc.
std::vector<SampleOutcome> predict(const Dataset& data, const CrtnetParams& params, const ModelConfig& config,
                                   Head head = Head::Fused, std::optional<FusionMode> fusion_override = std::nullopt,
                                   int threads = 1);

/// Throws ConfigError when the manifest uses class ids the model lacks.
EvalReport evaluate(const Dataset& data, const LoadedModel& model,
                    std::optional<FusionMode> fusion_override = std::nullopt, int threads = 1,
                    Head head = Head::Fused);

/// The 12 grouped cells (Normal, NoContext, Gravity, CoOccur, CoOccurGravity,
/// Size) × (small, large), in that order. NoContext pools grey and
/// salt-and-pepper; Size pools the ×2, ×3 and ×4 conditions.
struct PerformanceVector {
  std::vector<std::pair<std::string, double>> cells;

  static const std::vector<std::string>& canonical_labels();
  static PerformanceVector from_report(const EvalReport& report);
  std::vector<double> values() const;
};

/// Pearson product-moment coefficient. Throws ContractError on label or length
/// mismatch and UndefinedCorrelationError when either vector has zero variance.
double pearson(const PerformanceVector& a, const PerformanceVector& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// csv: condition,size_bin,n,correct,accuracy,sem (one row per cell).
std::string report_to_csv(const EvalReport& report);
EvalReport report_from_csv(const std::string& text);
/// Long format over the 12 grouped cells: group,size_bin,n,accuracy,sem.
std::string report_to_plotdata(const EvalReport& report);

/// label,accuracy rows; the layout written by `eval --vector`.
std::string vector_to_csv(const PerformanceVector& v);
/// Throws ParseError naming the offending line.
PerformanceVector vector_from_csv(const std::string& text);

/// Accuracy with exactly four decimals and a '.' separator.
std::string format_fixed4(double value);

struct AblationEntry {
  Ablation ablation = Ablation::None;
  ModelConfig model;
  EvalReport report;
  PerformanceVector vector;
  std::filesystem::path model_path;
  /// Accuracy of each head on the full test split.
  double acc_yp = 0, acc_yt = 0, acc_ytc = 0;
};

struct AblationSuite {
  std::vector<AblationEntry> entries;
  /// correlations[i][j] between entry vectors.
  std::vector<std::vector<double>> correlations;
  std::string table() const;
};

/// Trains every ablation under identical seeds and data, then evaluates each.
AblationSuite ablation_suite(const Dataset& train, const Dataset& test, const TrainLoopOptions& base,
                             const std::vector<Ablation>& ablations = all_ablations());

}  // namespace crtnet
