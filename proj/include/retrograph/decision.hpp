#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "retrograph/edits.hpp"
#include "retrograph/heads.hpp"

namespace retrograph {

enum class Action { LgMatching = 0, Initializing, LgConnecting, BondChanging, HydrogenChanging };
inline constexpr int kNumActions = 5;
const char* action_name(Action a);

/// Per-action energies E_a = -ln p(chosen condition).
struct EnergyTrace {
  std::array<double, kNumActions> action{};

  /// Sum of the action energies in action order.
  double total() const;
  /// Running sums after each action.
  std::array<double, kNumActions> profile() const;
  /// 1..4: leaving group, connection, bond changes, hydrogen changes.
  double delta(int i) const;
};

struct BeamConfig {
  int n_lg = 10;
  int n_conn = 4;
  int n_bond = 4;
  int k_out = 10;
  bool greedy = false;  ///< One choice per action instead of a joint beam.

  void validate() const;
};

struct Candidate {
  std::vector<MolGraph> reactants;          ///< Product atoms keep their maps.
  std::vector<std::string> reactant_smiles;  ///< Canonical, unmapped, sorted.
  std::vector<std::string> mapped_smiles;    ///< Same order as reactant_smiles.
  int lg_id = 0;
  std::string leaving_group;
  std::vector<int> gate_targets;  ///< Product atom per gate.
  std::vector<BondChange> bond_changes;
  std::vector<int> h_delta;  ///< Per product atom.
  EnergyTrace trace;
  bool legal = true;

  /// Dot-joined reactant_smiles; the ranking tie-breaker.
  std::string key() const;
};

/// Head outputs for one product, as plain matrices.
struct ProductScores {
  int n = 0;
  std::vector<std::pair<int, int>> bonds;  ///< Product bonds (u < v), sorted.
  Eigen::MatrixXd bond_logits;  ///< N x N, symmetric.
  Eigen::MatrixXd hydro_logp;   ///< N x (2k+1).
  Eigen::MatrixXd lg_logp;      ///< 1 x |V|, tempered softmax.
  std::vector<Eigen::MatrixXd> conn_logits;  ///< Per vocabulary id, gates x N (empty for id 0).
};

/// A complete set of discrete choices on a product.
struct Choice {
  int lg_id = 0;
  std::vector<int> gate_targets;
  std::vector<std::pair<int, int>> changed_bonds;  ///< Product bonds (u < v) predicted to change.
  std::vector<int> h_class;                        ///< Per atom, h_delta + k.
};

// Ranked alternatives per action, lowest energy first. The beam combines
// these; evaluation uses them for per-subtask top-k.

/// Vocabulary ids usable on this product, by descending LGM probability.
std::vector<int> ranked_leaving_groups(const ProductScores& s, const LeavingGroupVocab& vocab);

struct GateAssignment {
  std::vector<int> targets;  ///< Distinct product atoms, one per gate.
  double energy = 0.0;
};
std::vector<GateAssignment> ranked_gate_assignments(const Eigen::MatrixXd& conn_logits, int cap);

struct BondSet {
  std::vector<std::pair<int, int>> pairs;
  double energy = 0.0;
};
/// Seed set {p >= 0.5} and its Hamming-1 neighbours.
std::vector<BondSet> ranked_bond_sets(const ProductScores& s, int cap);

struct HydrogenVariant {
  std::vector<int> cls;
  double energy = 0.0;
};
/// Argmax classes first, then single +-1 repairs on any atom and paired
/// repairs among `touched` atoms.
std::vector<HydrogenVariant> ranked_hydrogen_variants(const Eigen::MatrixXd& hydro_logp,
                                                      const std::vector<int>& touched, std::size_t cap);

/// Assigns fresh map numbers to unmapped atoms (existing maps are kept).
MolGraph ensure_mapped(const MolGraph& product);

/// Read-only view of a trained model; safe to share across threads.
class Predictor {
 public:
  explicit Predictor(const Model& model);

  const Model& model() const noexcept { return model_; }
  ProductScores score(const MolGraph& product, std::optional<int> reaction_type) const;
  EnergyTrace energy(const ProductScores& s, const Choice& c) const;

  /// Ranked legal candidates. Throws EmptyBeamError when none survive.
  std::vector<Candidate> predict(const MolGraph& product, std::optional<int> reaction_type,
                                 const BeamConfig& beam = {}) const;

  /// Scores a proposed reactant set. Atom-mapped proposals (maps matching
  /// the product's) are labelled directly; unmapped ones are looked up in a
  /// wide candidate search. Throws LabelError when the proposal cannot be
  /// expressed with the model's edits and vocabulary.
  EnergyTrace evaluate_query(const MolGraph& product, const std::vector<MolGraph>& proposal,
                             std::optional<int> reaction_type) const;

 private:
  const Model& model_;
  LeavingGroupFeatures lgs_;
  std::vector<Eigen::MatrixXd> lg_reps_;  ///< Node reps of each leaving group under the LGC encoder.
};

}  // namespace retrograph
