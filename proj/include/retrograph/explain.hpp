#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "retrograph/heads.hpp"
#include "retrograph/trainer.hpp"

namespace retrograph {

/// Loss probed by the perturbation analysis. Overall is the weighted total
/// under the checkpoint's last recorded task weights.
enum class ExplainTask { Rcp, Lgm, Lgc, Overall };
const char* explain_task_name(ExplainTask t);
/// Accepts "rcp", "lgm", "lgc", "overall"; throws ConfigError otherwise.
ExplainTask parse_explain_task(const std::string& name);

/// Losses at or below this are too small to take a change rate against.
inline constexpr double kDegenerateLoss = 1e-8;

struct ApexOptions {
  std::optional<int> reaction_type;  ///< Overrides the record's class (type-known models).
  bool contrastive = true;           ///< LGM loss includes the contrastive term.
};

/// Change rate of the task loss when each product atom is masked.
struct ContributionGraph {
  ExplainTask task = ExplainTask::Overall;
  double base_loss = 0.0;
  std::vector<double> masked_loss;  ///< Per product atom.
  std::vector<double> score;        ///< (masked_loss - base_loss) / base_loss.
};

/// Labelled example for a record under the model's vocabulary; throws
/// LabelError when the record cannot be labelled or its group is unknown.
TrainingExample explain_example(const Model& model, const ReactionRecord& record);

/// Task loss of one example with an optional masked atom (-1 for none).
double task_loss(const Model& model, const TrainingExample& ex, ExplainTask task, int mask_atom = -1,
                 const ApexOptions& opts = {});

/// Masks one atom at a time (embedding row and bias row/column zeroed) and
/// reports the change rate of the task loss. Throws DegenerateLoss when the
/// unmasked loss is <= kDegenerateLoss, and LabelError when the record does
/// not supervise the task.
ContributionGraph apex_contributions(const Model& model, const ReactionRecord& record, ExplainTask task,
                                     const ApexOptions& opts = {});
ContributionGraph apex_contributions(const Model& model, const TrainingExample& ex, ExplainTask task,
                                     const ApexOptions& opts = {});

struct TypeTraceResult {
  /// N x 10: score of each atom with the reaction type set to column + 1.
  Eigen::MatrixXd contributions;
  std::vector<int> hard_label;                 ///< Per atom, 1..10 (first maximum).
  std::vector<std::vector<double>> soft_label;  ///< Per atom, 10 weights summing to 1.
};

/// Runs the perturbation analysis once per reaction type. Throws ModeError
/// when the model has no type embeddings.
TypeTraceResult reaction_type_trace(const Model& model, const ReactionRecord& record, ExplainTask task,
                                    const ApexOptions& opts = {});

/// Negative parts clamped to zero, then normalized; uniform when nothing is positive.
std::vector<double> soft_label(const std::vector<double>& contribution);

/// RV coefficient of two equally sized matrices after centering their
/// columns; 0 when either centered matrix is all zeros.
double rv_coefficient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

enum class HeadClass { GlobalDominated, LocalDominated, Mixed };
const char* head_class_name(HeadClass c);
inline constexpr double kGlobalRv = 0.90;
inline constexpr double kLocalRv = 0.10;
HeadClass classify_rv(double rv);

struct HeadHeatmap {
  int head = 0;
  Eigen::MatrixXd bias;    ///< (N+1) x (N+1), super node last.
  Eigen::MatrixXd global;  ///< Global item of the same head (zeros when masked).
  double rv = 0.0;
  HeadClass cls = HeadClass::LocalDominated;
};

struct HeatmapReport {
  std::string encoder;
  std::vector<HeadHeatmap> heads;  ///< Sorted by RV, descending.
};

/// Attention bias of every head compared against its global item.
HeatmapReport attention_heatmaps(const MolGraph& molecule, const Model& model, const std::string& encoder = "");

/// Writes the bias and global matrices of every head as a checkpoint file
/// (tensors "head<h>.bias" and "head<h>.global").
void save_heatmaps(const HeatmapReport& report, const std::filesystem::path& path);

}  // namespace retrograph
