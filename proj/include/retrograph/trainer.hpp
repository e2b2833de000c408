#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "retrograph/heads.hpp"

namespace retrograph {

/// Lower clamp on recorded losses before ratios and reciprocals.
inline constexpr double kLossEpsilon = 1e-8;

struct Ablations {
  bool no_cl = false;  ///< Drop the contrastive leaving-group term.
  bool no_sa = false;  ///< Plain sum of task losses.
  bool no_jl = false;  ///< One encoder per task.
  bool mask_local = false;
  bool mask_global = false;
};

struct TrainConfig {
  int epochs = 1;
  int max_steps = 0;  ///< When positive, stops after this many steps.
  int batch_size = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double clip_norm = 5.0;  ///< Global gradient-norm clip; 0 disables.
  double tau_weights = 1.0;
  double tau_contrastive = 0.5;
  int k_r = 4;
  int k = kDefaultMaxHydrogenChange;
  bool reaction_type_known = false;
  bool fuse_rcp = true;  ///< Three tasks (RCP fused) instead of four.
  std::uint64_t seed = 1;
  Ablations ablations;

  int task_count() const noexcept { return fuse_rcp ? 3 : 4; }
  void validate() const;
};

/// Copies the switches of a training run into a model configuration.
ModelConfig model_config_for(ModelConfig base, const TrainConfig& train);

/// Recorded per-task losses: the first value and the two most recent.
class LossHistory {
 public:
  explicit LossHistory(int tasks = 3);

  int tasks() const noexcept { return static_cast<int>(initial_.size()); }
  /// Records the losses of the tasks marked present; others keep their history.
  void record(const std::vector<double>& losses, const std::vector<bool>& present);
  /// Sets L^(0) for tasks seen for the first time (before weighting a step).
  void seed_initial(const std::vector<double>& losses, const std::vector<bool>& present);

  double initial(int i) const { return initial_.at(static_cast<std::size_t>(i)); }
  /// L^(t-1) / L^(t-2), or 1 with fewer than two records.
  double rate(int i) const;
  int records(int i) const { return count_.at(static_cast<std::size_t>(i)); }

 private:
  std::vector<double> initial_, prev_, prev2_;
  std::vector<int> count_;
};

/// softmax(r / tau) over all tasks.
std::vector<double> adaptive_factors(const LossHistory& h, double tau);
/// softmax(r / tau)_i * alpha_i with alpha_i = 1 / L_i^(0).
std::vector<double> adaptive_weights(const LossHistory& h, double tau);

struct StepResult {
  int step = 0;
  LossBreakdown losses;
  std::vector<double> weights;  ///< Per task (K_t entries).
  double total = 0.0;
};

class Trainer {
 public:
  /// `params.config` must match model_config_for(params.config, config).
  Trainer(ModelParams params, const LeavingGroupVocab& vocab, TrainConfig config);

  /// One momentum-SGD step on the weighted loss of `batch`.
  StepResult step(const std::vector<const TrainingExample*>& batch);
  /// Shuffled mini-batch epochs (seeded); writes one metrics line per step.
  std::vector<StepResult> train(const std::vector<TrainingExample>& data, std::ostream* metrics = nullptr);

  const ModelParams& params() const noexcept { return params_; }
  const LeavingGroupFeatures& leaving_groups() const noexcept { return lgs_; }
  const LossHistory& history() const noexcept { return history_; }
  const TrainConfig& config() const noexcept { return config_; }
  int steps_done() const noexcept { return steps_; }

 private:
  ModelParams params_;
  LeavingGroupFeatures lgs_;
  TrainConfig config_;
  LossHistory history_;
  std::map<std::string, Eigen::MatrixXd> velocity_;
  int steps_ = 0;
};

struct FitResult {
  Model model;
  std::vector<StepResult> steps;
  std::size_t skipped = 0;  ///< Records that could not be labelled.
};

/// Builds the vocabulary from `corpus`, sizes the heads to it, and trains
/// fresh parameters with the dimensions of `base`.
FitResult fit(const std::vector<ReactionRecord>& corpus, ModelConfig base, const TrainConfig& config,
              std::ostream* metrics = nullptr);

/// Per-loss weights (L_B, L_H, L_lg, L_lgc) implied by per-task weights.
LossWeights expand_weights(const std::vector<double>& task_weights, bool fuse_rcp);

/// "step=<n>\tL_B=..\tL_H=..\tL_lg=..\tL_lgc=..\tw1=..\t...\ttotal=.."
std::string metrics_line(const StepResult& r);

}  // namespace retrograph
