#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retrograph/autodiff.hpp"
#include "retrograph/model.hpp"
#include "retrograph/molgraph.hpp"

namespace retrograph {

inline constexpr double kRbfStdFloor = 1e-2;
/// Additive bias used to emulate -inf when masking attention.
inline constexpr double kMaskedBias = -1e9;

/// Parameter-free inputs of the encoder, computed once per graph.
struct GraphFeatures {
  int n = 0;
  std::vector<int> element, charge, hcount, aromatic, ring, degree;
  /// Clipped walk counts indexed [sense][hop - 1].
  std::vector<std::vector<IntMatrix>> counts;
  Eigen::MatrixXd dist;

  /// Row indices for the feature tables (clipping applied here).
  static GraphFeatures from_graph(const MolGraph& g, int k_r, const DistanceProvider& distances = {});
};

/// Binds named parameter tensors to tape leaves, one leaf per name.
class ParamSet {
 public:
  ParamSet(ad::Tape& tape, const ModelParams& params, bool trainable = true);

  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return tape_; }
  const ModelConfig& config() const { return params_.config; }
  const ModelParams& params() const { return params_; }
  /// Gradients of every bound tensor after tape.backward(); unbound tensors
  /// get zero gradients.
  std::map<std::string, Eigen::MatrixXd> gradients() const;

 private:
  ad::Tape& tape_;
  const ModelParams& params_;
  bool trainable_;
  std::map<std::string, ad::Var> bound_;
};

struct EncodeOptions {
  std::optional<int> reaction_type;  ///< 1..10; used when the model is type-known.
  std::string prefix = "enc";
  int mask_atom = -1;  ///< Atom whose embedding row and bias row/column are zeroed.
  bool keep_attention = false;
  /// Optional (N+1) x (N+1) constant added to every head's scores.
  const Eigen::MatrixXd* extra_bias = nullptr;
};

struct EncodedGraph {
  ad::Var node_reps;  ///< N x d.
  ad::Var graph_rep;  ///< 1 x d (super-node row).
  ad::Var bias;       ///< Stacked per head: (n_head * (N+1)) x (N+1).
  int n = 0;
  /// Attention probabilities per layer and head when requested.
  std::vector<std::vector<Eigen::MatrixXd>> attention;
};

/// exp(-(x-mean)^2 / (2 std^2)) / (sqrt(2 pi) std), std clamped at kRbfStdFloor.
double rbf(double dist, double mean, double std);

/// (N+1) x d initial representations; the last row is the super node.
ad::Var embed_nodes(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts);

/// Separate bias items, each stacked per head like EncodedGraph::bias.
struct BiasItems {
  ad::Var local;   ///< Lookup sum plus virtual-edge entries (invalid when masked).
  ad::Var global;  ///< RBF of the distance (invalid when masked).
};
BiasItems attention_bias_items(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts);
/// Sum of the unmasked items; zeros when both are masked.
ad::Var attention_bias(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts);

/// Full forward pass. Throws NumericsError on non-finite values.
EncodedGraph encode(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts);

/// Throws NumericsError if `m` has a non-finite entry.
void require_finite(const Eigen::MatrixXd& m, const char* what);

}  // namespace retrograph
