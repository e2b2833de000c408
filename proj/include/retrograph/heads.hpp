#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retrograph/encoder.hpp"
#include "retrograph/reaction.hpp"

namespace retrograph {

enum class Task { Rcp, Lgm, Lgc };

/// Encoder prefix feeding a task ("enc" unless encoders are separate).
std::string encoder_prefix(const ModelConfig& config, Task task);

/// N x N symmetrized bond-change scores; sigmoid gives p_uv.
ad::Var rcp_bond_logits(ParamSet& ps, const EncodedGraph& product);
/// N x (2k+1) hydrogen-change logits, classes ordered -k..+k.
ad::Var rcp_hydrogen_logits(ParamSet& ps, const EncodedGraph& product);

enum class LgmMode { Product, Contrastive };
/// 1 x |V| logits. Contrastive mode expects an encoded leaving-group graph
/// and adds the contrastive token to its super-node row.
ad::Var lgm_logits(ParamSet& ps, const EncodedGraph& graph, LgmMode mode);

/// M x N connection scores between the M gates of a leaving group (wildcard
/// atoms of `lg`, in gate order) and the product atoms; sigmoid gives p_conn.
ad::Var lgc_logits(ParamSet& ps, const EncodedGraph& product, const EncodedGraph& lg,
                   const std::vector<int>& gate_atoms);

/// Encoder inputs for every vocabulary entry (index 0, the empty group, has n = 0).
struct LeavingGroupFeatures {
  std::vector<GraphFeatures> graphs;
  std::vector<std::vector<int>> gate_atoms;

  static LeavingGroupFeatures from_vocab(const LeavingGroupVocab& vocab, int k_r);
};

/// A labelled product prepared for the heads.
struct TrainingExample {
  std::string record_id;
  std::optional<int> reaction_type;
  MolGraph product;
  GraphFeatures features;
  RetroLabels labels;
  int lg_id = 0;
  Eigen::MatrixXd bond_target;  ///< N x N, 1 on reaction-center pairs.
  Eigen::MatrixXd bond_mask;    ///< N x N, 1 on bonded pairs u < v.
  std::vector<int> h_target;    ///< h_delta + k.
  Eigen::MatrixXd conn_target;  ///< M x N, 1 where gate g bonds to atom v.
};

/// Throws LabelError when labels do not line up with the product or vocabulary.
TrainingExample make_example(const std::string& record_id, std::optional<int> reaction_type, const MolGraph& product,
                             const RetroLabels& labels, const LeavingGroupVocab& vocab, const ModelConfig& config);

/// Labels every record; records that cannot be labelled or whose leaving
/// group is outside the vocabulary are skipped and counted.
std::vector<TrainingExample> make_examples(const std::vector<ReactionRecord>& records, const LeavingGroupVocab& vocab,
                                           const ModelConfig& config, std::size_t* skipped = nullptr);

struct LossOptions {
  bool contrastive = true;
  int mask_atom = -1;  ///< Product atom masked for perturbation analysis.
};

/// Per-task losses on the tape. A task without supervised entries in the
/// batch has an invalid Var and a zero count.
struct LossTerms {
  ad::Var bond, hydrogen, lg, lgc;
  int n_bond = 0, n_hydrogen = 0, n_lg = 0, n_lgc = 0;
};

struct LossBreakdown {
  double bond = 0.0, hydrogen = 0.0, lg = 0.0, lgc = 0.0;
  int n_bond = 0, n_hydrogen = 0, n_lg = 0, n_lgc = 0;
};

/// Losses of one example (means over its supervised entries).
LossTerms example_losses(ParamSet& ps, const TrainingExample& ex, const LeavingGroupFeatures& lgs,
                         const LossOptions& opts = {});
/// Per-task means over the examples that supervise each task.
LossTerms batch_losses(ParamSet& ps, const std::vector<const TrainingExample*>& batch, const LeavingGroupFeatures& lgs,
                       const LossOptions& opts = {});
LossBreakdown breakdown(const LossTerms& terms);

/// Fixed coefficients on (L_B, L_H, L_lg, L_lgc); tasks absent from the
/// batch are skipped.
struct LossWeights {
  double bond = 1.0, hydrogen = 1.0, lg = 1.0, lgc = 1.0;
};
ad::Var weighted_total(ad::Tape& tape, const LossTerms& terms, const LossWeights& w);

/// Relative-error finite-difference check of every parameter entry.
struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  /// Entries checked per tensor, chosen with a fixed stride; 0 checks all.
  int max_entries_per_tensor = 0;
  /// Applied to the analytic gradients before comparison (mutation tests).
  std::function<void(std::map<std::string, Eigen::MatrixXd>&)> corrupt;
};
struct GradCheckReport {
  double max_error = 0.0;
  std::string worst_tensor;
  std::size_t entries = 0;
};
/// Throws GradCheckFailure when max_error exceeds the tolerance.
GradCheckReport grad_check(const ModelParams& params, const std::vector<const TrainingExample*>& batch,
                           const LeavingGroupFeatures& lgs, const LossWeights& weights, const LossOptions& loss = {},
                           const GradCheckOptions& opts = {});

// Probability helpers over plain matrices.
Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& logits);
Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits);

}  // namespace retrograph
